//! Experiment configs and the command-line front end.
//!
//! # Config format
//!
//! A config is plain text. Blank lines and lines starting with `#` are
//! ignored, `[section]` opens a section and every other line is
//! `key = value` inside the current section. Keys are looked up as
//! `section.key`; unknown sections, unknown keys and repeated keys are
//! errors carrying the line number. Lists are comma separated.
//!
//! ```text
//! [run]
//! command = chaos-sweep        # informational
//! seed = 1
//! threads = 0                  # 0: one worker per core
//!
//! [driver]
//! kind = gaussian_coupled      # rademacher | gaussian_coupled | jump | combined
//! horizon = 1.0
//! k = 8,16
//! skeleton = 1024              # optional, coins per path; default max k
//! coupling = gaussian_coupled  # or independent
//! share = 0.5                  # combined only
//! jump_prob = 0.5              # combined only
//! mark_scale = 1.0             # jump only
//!
//! [model]
//! beta_hat = 240.0
//! theta = identity             # identity | scaled:<s> | clipped:<c>
//! abar = 2.0                   # optional
//!
//! [generator]                  # f = a y + b z c + cu Γ + e mean(μ) + c0
//! a = 0.0
//! b = 0.0
//! cu = 0.0
//! e = 0.01
//! c0 = 0.0
//!
//! [terminal]
//! kind = linear                # zero | constant | linear | quadratic | sine | exp_square
//! params = 1.0,0.0
//! coupling_scale = 0.0
//! coupling_gamma = 1.0
//!
//! [solver]
//! backend = ensemble           # tree | ensemble
//! particles = 4096
//! max_nodes = 4194304
//! tol = 1e-14                  # optional; default depends on the command
//! q_max = 60
//!
//! [sweep]
//! n = 8,16,32
//! reps = 20
//! reference_k = 256            # optional; default is the largest k
//! timing = false
//!
//! [output]
//! csv = out/chaos.csv          # optional
//! json = out/chaos.json        # optional
//! ```
//!
//! [`ExperimentConfig::to_text`] writes every key that differs from
//! "absent", and parsing that text gives back the same config.

use crate::calculus::{
    contraction_constant, contraction_constant_minform, validate_standard_data, GeneratorSpec, LinearGenerator, StandardData,
    TerminalFn, TerminalSpec, ThetaSpec, ValidationReport, MINFORM_TOL,
};
use crate::drivers::{convolve_laws, make_combined_driver, make_donsker_driver, make_jump_driver, DonskerMode, DEFAULT_REFINE};
use crate::engine::{Backend, Instance, PicardSolver, SolveReport, DEFAULT_MAX_NODES, Q_MAX};
use crate::error::{Error, Result};
use crate::measures::{fg_bound, fg_moments, fg_sample_size, EmpiricalMeasure, FgMoments};
use crate::stability_lab::{
    aggregate, build_data_sequence, chaos_sweep, double_sweep, max_over_k, slope_rows, stability_sweep, to_csv, Coupling,
    ConvergenceRow, DataSequence, DataSequenceSpec, SequenceDigest, StabilityTarget, SweepConfig, SweepSummary,
};
use clap::{Args, Parser, Subcommand};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Driver family of a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Rademacher,
    GaussianCoupled,
    Jump,
    Combined,
}

impl DriverKind {
    fn name(self) -> &'static str {
        match self {
            Self::Rademacher => "rademacher",
            Self::GaussianCoupled => "gaussian_coupled",
            Self::Jump => "jump",
            Self::Combined => "combined",
        }
    }
}

/// Conditional-expectation backend of the solve commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Tree,
    Ensemble,
}

/// Everything a command needs, with documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub driver: DriverKind,
    pub horizon: f64,
    pub ks: Vec<usize>,
    pub skeleton: Option<usize>,
    pub coupling: Coupling,
    pub share: f64,
    pub jump_prob: f64,
    pub mark_scale: f64,
    pub beta_hat: f64,
    pub theta: ThetaSpec,
    pub abar: Option<f64>,
    pub generator: LinearGenerator,
    pub terminal: TerminalSpec,
    pub backend: BackendKind,
    pub particles: usize,
    pub max_nodes: usize,
    pub tol: Option<f64>,
    pub q_max: usize,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub reference_k: Option<usize>,
    pub timing: bool,
    pub csv: Option<String>,
    pub json: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 1,
            threads: 0,
            driver: DriverKind::GaussianCoupled,
            horizon: 1.0,
            ks: vec![8],
            skeleton: None,
            coupling: Coupling::GaussianCoupled,
            share: 0.5,
            jump_prob: 0.5,
            mark_scale: 1.0,
            beta_hat: 240.0,
            theta: ThetaSpec::Identity,
            abar: None,
            generator: LinearGenerator::default(),
            terminal: TerminalSpec::new(TerminalFn::Linear { cont: 1.0, jump: 0.0 }),
            backend: BackendKind::Tree,
            particles: 4096,
            max_nodes: DEFAULT_MAX_NODES,
            tol: None,
            q_max: Q_MAX,
            ns: vec![8, 16, 32],
            reps: 1,
            reference_k: None,
            timing: false,
            csv: None,
            json: None,
        }
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn theta_text(t: &ThetaSpec) -> String {
    match t {
        ThetaSpec::Identity => "identity".into(),
        ThetaSpec::Scaled(s) => format!("scaled:{s:?}"),
        ThetaSpec::Clipped(c) => format!("clipped:{c:?}"),
    }
}

fn terminal_parts(g: &TerminalFn) -> (&'static str, Vec<f64>) {
    match *g {
        TerminalFn::Zero => ("zero", vec![]),
        TerminalFn::Constant(c) => ("constant", vec![c]),
        TerminalFn::Linear { cont, jump } => ("linear", vec![cont, jump]),
        TerminalFn::Quadratic { a2, a1, a0 } => ("quadratic", vec![a2, a1, a0]),
        TerminalFn::Sine { amp, freq } => ("sine", vec![amp, freq]),
        TerminalFn::ExpSquare { lambda } => ("exp_square", vec![lambda]),
    }
}

fn terminal_from(kind: &str, p: &[f64]) -> std::result::Result<TerminalFn, String> {
    let want = |n: usize| if p.len() == n { Ok(()) } else { Err(format!("terminal kind {kind} takes {n} params, got {}", p.len())) };
    Ok(match kind {
        "zero" => want(0).map(|_| TerminalFn::Zero)?,
        "constant" => want(1).map(|_| TerminalFn::Constant(p[0]))?,
        "linear" => want(2).map(|_| TerminalFn::Linear { cont: p[0], jump: p[1] })?,
        "quadratic" => want(3).map(|_| TerminalFn::Quadratic { a2: p[0], a1: p[1], a0: p[2] })?,
        "sine" => want(2).map(|_| TerminalFn::Sine { amp: p[0], freq: p[1] })?,
        "exp_square" => want(1).map(|_| TerminalFn::ExpSquare { lambda: p[0] })?,
        other => return Err(format!("unknown terminal kind {other:?}")),
    })
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn theta_from(v: &str) -> std::result::Result<ThetaSpec, String> {
    match v.split_once(':') {
        None if v == "identity" => Ok(ThetaSpec::Identity),
        Some(("scaled", s)) => Ok(ThetaSpec::Scaled(num(s)?)),
        Some(("clipped", c)) => Ok(ThetaSpec::Clipped(num(c)?)),
        _ => Err(format!("unknown theta {v:?}")),
    }
}

impl ExperimentConfig {
    /// Parses config text; `Error::Config` carries the 1-based line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        // terminal kind and params only make sense together
        let mut term_kind: Option<(String, usize)> = None;
        let mut term_params: Option<(Vec<f64>, usize)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Config { line, message };
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(name) = l.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("malformed section header {l:?}")))?.trim();
                if !["run", "driver", "model", "generator", "terminal", "solver", "sweep", "output"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| err(format!("expected key = value, got {l:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section.as_deref().ok_or_else(|| err(format!("key {k} outside any section")))?;
            let key = format!("{sec}.{k}");
            if !seen.insert(key.clone()) {
                return Err(err(format!("duplicate key {key}")));
            }
            match key.as_str() {
                "terminal.kind" => term_kind = Some((v.to_string(), line)),
                "terminal.params" => term_params = Some((list(v).map_err(&err)?, line)),
                _ => cfg.set(&key, v).map_err(err)?,
            }
        }
        match (term_kind, term_params) {
            (Some((kind, line)), params) => {
                let p = params.map(|p| p.0).unwrap_or_default();
                cfg.terminal.g = terminal_from(&kind, &p).map_err(|message| Error::Config { line, message })?;
            }
            (None, Some((_, line))) => return Err(Error::Config { line, message: "terminal.params without terminal.kind".into() }),
            (None, None) => {}
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "run.command" => self.command = v.to_string(),
            "run.seed" => self.seed = num(v)?,
            "run.threads" => self.threads = num(v)?,
            "driver.kind" => {
                self.driver = match v {
                    "rademacher" => DriverKind::Rademacher,
                    "gaussian_coupled" => DriverKind::GaussianCoupled,
                    "jump" => DriverKind::Jump,
                    "combined" => DriverKind::Combined,
                    _ => return Err(format!("unknown driver kind {v:?}")),
                }
            }
            "driver.horizon" => self.horizon = num(v)?,
            "driver.k" => self.ks = list(v)?,
            "driver.skeleton" => self.skeleton = Some(num(v)?),
            "driver.coupling" => {
                self.coupling = match v {
                    "gaussian_coupled" => Coupling::GaussianCoupled,
                    "independent" => Coupling::Independent,
                    _ => return Err(format!("unknown coupling {v:?}")),
                }
            }
            "driver.share" => self.share = num(v)?,
            "driver.jump_prob" => self.jump_prob = num(v)?,
            "driver.mark_scale" => self.mark_scale = num(v)?,
            "model.beta_hat" => self.beta_hat = num(v)?,
            "model.theta" => self.theta = theta_from(v)?,
            "model.abar" => self.abar = Some(num(v)?),
            "generator.a" => self.generator.a = num(v)?,
            "generator.b" => self.generator.b = num(v)?,
            "generator.cu" => self.generator.cu = num(v)?,
            "generator.e" => self.generator.e = num(v)?,
            "generator.c0" => self.generator.c0 = num(v)?,
            "terminal.coupling_scale" => self.terminal.coupling_scale = num(v)?,
            "terminal.coupling_gamma" => self.terminal.coupling_gamma = num(v)?,
            "solver.backend" => {
                self.backend = match v {
                    "tree" => BackendKind::Tree,
                    "ensemble" => BackendKind::Ensemble,
                    _ => return Err(format!("unknown backend {v:?}")),
                }
            }
            "solver.particles" => self.particles = num(v)?,
            "solver.max_nodes" => self.max_nodes = num(v)?,
            "solver.tol" => self.tol = Some(num(v)?),
            "solver.q_max" => self.q_max = num(v)?,
            "sweep.n" => self.ns = list(v)?,
            "sweep.reps" => self.reps = num(v)?,
            "sweep.reference_k" => self.reference_k = Some(num(v)?),
            "sweep.timing" => self.timing = boolean(v)?,
            "output.csv" => self.csv = Some(v.to_string()),
            "output.json" => self.json = Some(v.to_string()),
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Canonical text form; floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        s.push_str("[run]\n");
        if !self.command.is_empty() {
            kv(&mut s, "command", self.command.clone());
        }
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "threads", self.threads.to_string());
        s.push_str("\n[driver]\n");
        kv(&mut s, "kind", self.driver.name().into());
        kv(&mut s, "horizon", format!("{:?}", self.horizon));
        kv(&mut s, "k", join(&self.ks));
        if let Some(sk) = self.skeleton {
            kv(&mut s, "skeleton", sk.to_string());
        }
        let coupling = match self.coupling {
            Coupling::GaussianCoupled => "gaussian_coupled",
            Coupling::Independent => "independent",
        };
        kv(&mut s, "coupling", coupling.into());
        kv(&mut s, "share", format!("{:?}", self.share));
        kv(&mut s, "jump_prob", format!("{:?}", self.jump_prob));
        kv(&mut s, "mark_scale", format!("{:?}", self.mark_scale));
        s.push_str("\n[model]\n");
        kv(&mut s, "beta_hat", format!("{:?}", self.beta_hat));
        kv(&mut s, "theta", theta_text(&self.theta));
        if let Some(a) = self.abar {
            kv(&mut s, "abar", format!("{a:?}"));
        }
        s.push_str("\n[generator]\n");
        let g = &self.generator;
        for (k, v) in [("a", g.a), ("b", g.b), ("cu", g.cu), ("e", g.e), ("c0", g.c0)] {
            kv(&mut s, k, format!("{v:?}"));
        }
        s.push_str("\n[terminal]\n");
        let (kind, params) = terminal_parts(&self.terminal.g);
        kv(&mut s, "kind", kind.into());
        kv(&mut s, "params", join(&params));
        kv(&mut s, "coupling_scale", format!("{:?}", self.terminal.coupling_scale));
        kv(&mut s, "coupling_gamma", format!("{:?}", self.terminal.coupling_gamma));
        s.push_str("\n[solver]\n");
        let backend = match self.backend {
            BackendKind::Tree => "tree",
            BackendKind::Ensemble => "ensemble",
        };
        kv(&mut s, "backend", backend.into());
        kv(&mut s, "particles", self.particles.to_string());
        kv(&mut s, "max_nodes", self.max_nodes.to_string());
        if let Some(t) = self.tol {
            kv(&mut s, "tol", format!("{t:?}"));
        }
        kv(&mut s, "q_max", self.q_max.to_string());
        s.push_str("\n[sweep]\n");
        kv(&mut s, "n", join(&self.ns));
        kv(&mut s, "reps", self.reps.to_string());
        if let Some(r) = self.reference_k {
            kv(&mut s, "reference_k", r.to_string());
        }
        kv(&mut s, "timing", self.timing.to_string());
        if self.csv.is_some() || self.json.is_some() {
            s.push_str("\n[output]\n");
            if let Some(c) = &self.csv {
                kv(&mut s, "csv", c.clone());
            }
            if let Some(j) = &self.json {
                kv(&mut s, "json", j.clone());
            }
        }
        s
    }

    /// Driver and data bundle at `k` steps, not validated.
    pub fn standard_data(&self, k: usize) -> Result<StandardData> {
        if self.driver == DriverKind::GaussianCoupled {
            return self.sequence_spec().materialize(k);
        }
        let driver = match self.driver {
            DriverKind::Rademacher => make_donsker_driver(k, self.horizon, DonskerMode::Rademacher)?,
            DriverKind::Jump => make_jump_driver(k, self.horizon, self.mark_scale)?,
            DriverKind::Combined => make_combined_driver(k, self.horizon, self.share, self.jump_prob)?,
            DriverKind::GaussianCoupled => unreachable!("handled above"),
        };
        let mut sd = StandardData::new(driver, self.terminal, self.theta, GeneratorSpec::Linear(self.generator), self.beta_hat)?;
        sd.abar = self.abar;
        Ok(sd)
    }

    /// The `k` list as a coupled data sequence. A single `k` with no
    /// skeleton gets `DEFAULT_REFINE` coins per step.
    pub fn sequence_spec(&self) -> DataSequenceSpec {
        let skeleton = self.skeleton.or_else(|| match self.ks.as_slice() {
            [k] => Some(k * DEFAULT_REFINE),
            _ => None,
        });
        DataSequenceSpec {
            ks: self.ks.clone(),
            horizon: self.horizon,
            coupling: self.coupling,
            skeleton,
            terminal: self.terminal,
            generator: self.generator,
            theta: self.theta,
            beta_hat: self.beta_hat,
            abar: self.abar,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let d = SweepConfig::default();
        SweepConfig { particles: self.particles, tol: self.tol.unwrap_or(d.tol), q_max: self.q_max, reps: self.reps, seed: self.seed, timing: self.timing }
    }

    pub fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Tree => Backend::Tree { max_nodes: self.max_nodes },
            BackendKind::Ensemble => Backend::Ensemble { particles: self.particles, seed: self.seed },
        }
    }
}

/// Reads and parses a config file. A missing file is a config error at
/// line 0.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", path.display()) })?;
    ExperimentConfig::parse(&text)
}

/// Process exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Io(_) => 2,
        Error::Validation { .. } | Error::InsufficientMoments(_) => 3,
        Error::Capacity { .. } => 4,
        Error::Diagnostic(_) => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfbsde", version, about = "Picard solvers and convergence sweeps for mean-field and McKean-Vlasov BSDEs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads, 0 for one per core
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// output file (CSV for sweeps, JSON otherwise); stdout when absent
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

/// Overrides of the model and sweep sections.
#[derive(Args, Debug, Clone, Default)]
struct Model {
    /// grid sizes
    #[arg(long = "k", value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// player counts
    #[arg(long = "n", value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    beta_hat: Option<f64>,
    /// mean-coupling coefficient of the linear generator
    #[arg(long)]
    e: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    /// tree or ensemble
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assumption report for every k of the config
    Validate {
        #[command(flatten)]
        model: Model,
    },
    /// Contraction constant table over a (β, Φ) grid
    Constants {
        #[arg(long, value_delimiter = ',', default_value = "240")]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        phi: Vec<f64>,
    },
    /// Solve the McKean-Vlasov equation at every k
    SolveMv {
        #[command(flatten)]
        model: Model,
    },
    /// Solve the N-player system at every (k, N)
    SolveMf {
        #[command(flatten)]
        model: Model,
    },
    /// N-player systems against McKean-Vlasov references on shared clouds
    ChaosSweep {
        #[command(flatten)]
        model: Model,
    },
    /// Every k against the reference grid
    StabilitySweep {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        reference_k: Option<usize>,
        /// compare N-player systems instead of McKean-Vlasov solutions
        #[arg(long)]
        mean_field: Option<usize>,
    },
    /// Full (k, N) matrix against the reference grid
    DoubleSweep {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        reference_k: Option<usize>,
    },
    /// Dyadic bound on E[W₂²(empirical, law)]
    FgBound {
        #[arg(long = "n", value_delimiter = ',', default_value = "10,100,1000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        cd: f64,
        #[arg(long, default_value_t = 16)]
        m_max: usize,
        #[arg(long, default_value_t = 30)]
        l_max: usize,
        /// atoms of a uniform 1-d law; default is the terminal law of the largest-k driver
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        points: Option<Vec<f64>>,
    },
    /// Sample size N(ε) of the explicit dyadic construction
    FgSampleSize {
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        cd: f64,
        #[arg(long, default_value_t = 1.0)]
        r0: f64,
        /// law supported in the unit cube
        #[arg(long)]
        compact: bool,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        points: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        m_max: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Validate { .. } => "validate",
            Self::Constants { .. } => "constants",
            Self::SolveMv { .. } => "solve-mv",
            Self::SolveMf { .. } => "solve-mf",
            Self::ChaosSweep { .. } => "chaos-sweep",
            Self::StabilitySweep { .. } => "stability-sweep",
            Self::DoubleSweep { .. } => "double-sweep",
            Self::FgBound { .. } => "fg-bound",
            Self::FgSampleSize { .. } => "fg-sample-size",
        }
    }

    fn model(&self) -> Option<&Model> {
        match self {
            Self::Validate { model } | Self::SolveMv { model } | Self::SolveMf { model } | Self::ChaosSweep { model } => Some(model),
            Self::StabilitySweep { model, .. } | Self::DoubleSweep { model, .. } => Some(model),
            _ => None,
        }
    }
}

fn resolve(cli: &Cli, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.command = cli.command.name().to_string();
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(m) = cli.command.model() {
        if let Some(ks) = &m.ks {
            cfg.ks = ks.clone();
        }
        if let Some(ns) = &m.ns {
            cfg.ns = ns.clone();
        }
        if let Some(b) = m.beta_hat {
            cfg.beta_hat = b;
        }
        if let Some(e) = m.e {
            cfg.generator.e = e;
        }
        if let Some(r) = m.reps {
            cfg.reps = r;
        }
        if let Some(p) = m.particles {
            cfg.particles = p;
        }
        if let Some(t) = m.tol {
            cfg.tol = Some(t);
        }
        if let Some(b) = &m.backend {
            cfg.set("solver.backend", b).map_err(|message| Error::Config { line: 0, message })?;
        }
    }
    if cfg.ks.is_empty() {
        return Err(Error::Config { line: 0, message: "k list is empty".into() });
    }
    Ok(cfg)
}

/// Text written by a command: the main artifact and an optional JSON
/// summary.
struct Output {
    main: String,
    summary: Option<String>,
}

fn validated(cfg: &ExperimentConfig, k: usize) -> Result<(StandardData, ValidationReport)> {
    let sd = cfg.standard_data(k)?;
    let rep = validate_standard_data(&sd);
    Ok((sd, rep))
}

fn require_pass(k: usize, rep: &ValidationReport) -> Result<()> {
    match rep.failures().first() {
        Some(f) => Err(Error::Validation { assumption: f.assumption.clone(), witness: format!("k = {k}: {}", f.witness) }),
        None => Ok(()),
    }
}

fn cmd_validate(cfg: &ExperimentConfig) -> Result<Output> {
    let mut text = String::new();
    let mut first_failure = None;
    for &k in &cfg.ks {
        let (sd, rep) = validated(cfg, k)?;
        let m = contraction_constant(sd.beta_hat, sd.weights.phi)?;
        writeln!(text, "k = {k}  Φ = {:.6e}  M̃ = {m:.6}  3M̃ = {:.6}", sd.weights.phi, 3.0 * m).expect("string write");
        for e in &rep.entries {
            let status = serde_json::to_value(e.status).expect("status serializes");
            writeln!(text, "  {:<10} {:<12} {}", e.assumption, status.as_str().unwrap_or(""), e.witness).expect("string write");
        }
        if first_failure.is_none() {
            first_failure = require_pass(k, &rep).err();
        }
    }
    match first_failure {
        Some(e) => {
            text.push_str(&format!("{e}\n"));
            Err(Error::Validation { assumption: "report".into(), witness: text })
        }
        None => Ok(Output { main: text, summary: None }),
    }
}

fn cmd_constants(betas: &[f64], phis: &[f64]) -> Result<Output> {
    let mut text = String::from("beta\tphi\tM_closed\tM_minform\trel_diff\tbelow_1/4\tbelow_1/3\n");
    let yes = |b: bool| if b { "yes" } else { "no" };
    for &b in betas {
        for &p in phis {
            let m = contraction_constant(b, p)?;
            let mf = contraction_constant_minform(b, p)?;
            let rel = (m - mf.value).abs() / m;
            let flag = if rel > MINFORM_TOL { "  (min-form disagrees)" } else { "" };
            writeln!(text, "{b}\t{p}\t{m:.10}\t{:.10}\t{rel:.2e}\t{}\t{}{flag}", mf.value, yes(m < 0.25), yes(m < 1.0 / 3.0)).expect("string write");
        }
    }
    Ok(Output { main: text, summary: None })
}

fn solve_reports(cfg: &ExperimentConfig, players: Option<&[usize]>) -> Result<Output> {
    let backend = cfg.backend();
    let tol = cfg.tol.unwrap_or_else(|| backend.default_tol());
    let mut reports = Vec::new();
    for &k in &cfg.ks {
        let (sd, rep) = validated(cfg, k)?;
        require_pass(k, &rep)?;
        let ns: Vec<Option<usize>> = match players {
            None => vec![None],
            Some(ns) => ns.iter().map(|&n| Some(n)).collect(),
        };
        for n in ns {
            let inst = match n {
                None => Instance::mckean_vlasov(&sd, &backend)?,
                Some(n) => Instance::mean_field(&sd, n, &backend)?,
            };
            let mut solver = PicardSolver::new(inst)?;
            solver.run(tol, cfg.q_max)?;
            let r = SolveReport::new(&solver.instance, backend, &solver.current, &solver.state)?;
            reports.push(serde_json::json!({ "k": k, "report": r }));
        }
    }
    Ok(Output { main: serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n", summary: None })
}

fn digests(seq: &DataSequence) -> Vec<SequenceDigest> {
    seq.entries.iter().map(SequenceDigest::from).collect()
}

fn sweep_output(experiment: &str, cfg: &ExperimentConfig, rows: &[ConvergenceRow], slopes: Vec<(String, f64, f64)>, sequence: Vec<SequenceDigest>, diagonal: Vec<crate::stability_lab::CellSummary>) -> Result<Output> {
    let summary = SweepSummary { experiment: experiment.into(), config: cfg.sweep_config(), cells: aggregate(rows, "err_star_sq")?, slopes, sequence, diagonal };
    Ok(Output { main: to_csv(rows), summary: Some(summary.to_json() + "\n") })
}

fn slope_or_skip(rows: &[ConvergenceRow], x: &str, y: &str, name: String, out: &mut Vec<(String, f64, f64)>) {
    // a slope needs three distinct positive abscissae; silently skip otherwise
    if let Ok((s, se)) = slope_rows(rows, x, y) {
        out.push((name, s, se));
    }
}

fn cmd_chaos(cfg: &ExperimentConfig) -> Result<Output> {
    let sc = cfg.sweep_config();
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut seq = Vec::new();
    for &k in &cfg.ks {
        let (sd, rep) = validated(cfg, k)?;
        require_pass(k, &rep)?;
        let r = chaos_sweep(&sd, &cfg.ns, &sc)?;
        slope_or_skip(&r, "N", "err_star_sq", format!("err_star_sq vs N at k = {k}"), &mut slopes);
        let m = contraction_constant(sd.beta_hat, sd.weights.phi)?;
        seq.push(SequenceDigest { k, phi: sd.weights.phi, b7_margin: 1.0 - 3.0 * m, passed: true });
        rows.extend(r);
    }
    let worst = max_over_k(&aggregate(&rows, "err_star_sq")?);
    sweep_output("chaos-sweep", cfg, &rows, slopes, seq, worst)
}

fn sequence(cfg: &ExperimentConfig) -> Result<DataSequence> {
    if cfg.driver != DriverKind::GaussianCoupled {
        return Err(Error::Config { line: 0, message: "sequence sweeps need driver.kind = gaussian_coupled".into() });
    }
    build_data_sequence(&cfg.sequence_spec())
}

fn cmd_stability(cfg: &ExperimentConfig, target: StabilityTarget) -> Result<Output> {
    let seq = sequence(cfg)?;
    let reference = cfg.reference_k.unwrap_or(*seq.ks().last().expect("nonempty"));
    let rows = stability_sweep(&seq, reference, target, &cfg.sweep_config())?;
    let below: Vec<ConvergenceRow> = rows.iter().filter(|r| r.k != reference).cloned().collect();
    let mut slopes = Vec::new();
    slope_or_skip(&below, "k", "err_y_sup_sq", "err_y_sup_sq vs k".into(), &mut slopes);
    sweep_output("stability-sweep", cfg, &rows, slopes, digests(&seq), Vec::new())
}

fn cmd_double(cfg: &ExperimentConfig) -> Result<Output> {
    let seq = sequence(cfg)?;
    let reference = cfg.reference_k.unwrap_or(*seq.ks().last().expect("nonempty"));
    let m = double_sweep(&seq, &cfg.ns, reference, &cfg.sweep_config())?;
    sweep_output("double-sweep", cfg, &m.rows, Vec::new(), digests(&seq), m.diagonal)
}

/// Law of `X°_T + X♮_T` under the largest-k driver of the config.
fn terminal_law(cfg: &ExperimentConfig) -> Result<EmpiricalMeasure> {
    let k = *cfg.ks.iter().max().expect("nonempty");
    let sd = cfg.standard_data(k)?;
    let laws: Vec<_> = sd.driver.cont_law.iter().chain(&sd.driver.jump_law).cloned().collect();
    let atoms = convolve_laws(&laws);
    EmpiricalMeasure::new(1, atoms.iter().map(|a| a.mark).collect(), atoms.iter().map(|a| a.prob).collect())
}

fn law_from(cfg: &ExperimentConfig, points: &Option<Vec<f64>>) -> Result<EmpiricalMeasure> {
    match points {
        Some(p) if !p.is_empty() => Ok(EmpiricalMeasure::uniform_1d(p)),
        Some(_) => Err(Error::InvalidArgument("--points needs at least one value".into())),
        None => terminal_law(cfg),
    }
}

fn cmd_fg_bound(cfg: &ExperimentConfig, ns: &[usize], cd: f64, m_max: usize, l_max: usize, points: &Option<Vec<f64>>) -> Result<Output> {
    let law = law_from(cfg, points)?;
    let mut text = String::from("N\tbound\tremainder\n");
    for &n in ns {
        let b = fg_bound(&law, n, cd, m_max, l_max)?;
        writeln!(text, "{n}\t{:.10e}\t{:.3e}", b.value, b.remainder).expect("string write");
    }
    Ok(Output { main: text, summary: None })
}

#[allow(clippy::too_many_arguments)]
fn cmd_fg_sample_size(cfg: &ExperimentConfig, eps: f64, cd: f64, r0: f64, compact: bool, points: &Option<Vec<f64>>, dim: usize, m_max: usize) -> Result<Output> {
    let moments = if compact {
        if points.is_some() {
            return Err(Error::InvalidArgument("--compact and --points are exclusive".into()));
        }
        FgMoments::compact(m_max)
    } else {
        if dim != 1 {
            return Err(Error::InvalidArgument("laws from points or the driver are one-dimensional".into()));
        }
        fg_moments(&law_from(cfg, points)?, m_max)
    };
    let r = fg_sample_size(eps, cd, r0, &moments, dim)?;
    let text = format!("ℓ1={}, ℓ2={}, N={}\nε1={:e} ε2={:e}\n", r.ell1, r.ell2, r.n_eps, r.eps1, r.eps2);
    Ok(Output { main: text, summary: Some(serde_json::to_string_pretty(&r).expect("report serializes") + "\n") })
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<Output> {
    match &cli.command {
        Command::Validate { .. } => cmd_validate(cfg),
        Command::Constants { beta, phi } => cmd_constants(beta, phi),
        Command::SolveMv { .. } => solve_reports(cfg, None),
        Command::SolveMf { .. } => solve_reports(cfg, Some(&cfg.ns)),
        Command::ChaosSweep { .. } => cmd_chaos(cfg),
        Command::StabilitySweep { mean_field, .. } => {
            cmd_stability(cfg, mean_field.map_or(StabilityTarget::McKeanVlasov, StabilityTarget::MeanField))
        }
        Command::DoubleSweep { .. } => cmd_double(cfg),
        Command::FgBound { n, cd, m_max, l_max, points } => cmd_fg_bound(cfg, n, *cd, *m_max, *l_max, points),
        Command::FgSampleSize { eps, cd, r0, compact, points, dim, m_max } => {
            cmd_fg_sample_size(cfg, *eps, *cd, *r0, *compact, points, *dim, *m_max)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn emit(cfg: &ExperimentConfig, common: &Common, o: Output, out: &mut dyn Write) -> Result<()> {
    let main_path = common.out.clone().or_else(|| cfg.csv.as_ref().map(PathBuf::from));
    match &main_path {
        Some(p) => write_file(p, &o.main)?,
        None => out.write_all(o.main.as_bytes()).map_err(|e| Error::Io(e.to_string()))?,
    }
    if let Some(s) = o.summary {
        let json_path = cfg.json.as_ref().map(PathBuf::from).or_else(|| main_path.as_ref().map(|p| p.with_extension("json")));
        if let Some(p) = json_path.filter(|p| Some(p) != main_path.as_ref()) {
            write_file(&p, &s)?;
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) with explicit output
/// streams and returns the exit code.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = out.write_all(text.as_bytes());
                0
            } else {
                let _ = err.write_all(text.as_bytes());
                2
            };
        }
    };
    let common = cli.common.clone();
    let result = resolve(&cli, &common).and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let o = pool.install(|| dispatch(&cli, &cfg))?;
        emit(&cfg, &common, o, out)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                // the report is the useful part of a failed validation
                Error::Validation { assumption, witness } if assumption == "report" => {
                    let _ = out.write_all(witness.as_bytes());
                }
                _ => {
                    let _ = writeln!(err, "error: {e}");
                }
            }
            exit_code(&e)
        }
    }
}

/// Runs against the process's stdout and stderr.
pub fn run(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse("[model]\nbeta_hat = 400\n").unwrap();
        assert_eq!(c, ExperimentConfig { beta_hat: 400.0, ..ExperimentConfig::default() });
    }

    #[test]
    fn duplicate_key_names_the_key() {
        let e = ExperimentConfig::parse("[sweep]\nreps = 2\n\nreps = 3\n").unwrap_err();
        assert_eq!(e, Error::Config { line: 4, message: "duplicate key sweep.reps".into() });
    }

    #[test]
    fn unknown_key_and_section_fail_closed() {
        assert!(matches!(ExperimentConfig::parse("[sweep]\nrepz = 2\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("# c\n[plots]\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("seed = 3\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn text_round_trips() {
        let c = ExperimentConfig {
            command: "double-sweep".into(),
            ks: vec![4, 8, 16],
            skeleton: Some(64),
            theta: ThetaSpec::Clipped(0.3),
            abar: Some(1.5),
            generator: LinearGenerator { a: 0.01, e: -0.1 / 3.0, ..Default::default() },
            terminal: TerminalSpec { g: TerminalFn::Sine { amp: 1.0, freq: std::f64::consts::PI }, coupling_scale: 0.5, coupling_gamma: 1.25 },
            tol: Some(1e-14),
            reference_k: Some(16),
            csv: Some("out/a.csv".into()),
            ..ExperimentConfig::default()
        };
        let text = c.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config { line: 1, message: String::new() }), 2);
        assert_eq!(exit_code(&Error::Validation { assumption: "B7".into(), witness: String::new() }), 3);
        assert_eq!(exit_code(&Error::Capacity { what: String::new(), required: String::new(), budget: String::new() }), 4);
    }
}
