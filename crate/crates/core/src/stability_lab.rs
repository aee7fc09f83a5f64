//! Data sequences over refining grids and the `(k, N)` experiments.
//!
//! All experiments run on particle clouds. Particle `p` of a cloud reads its
//! coins from a fixed ChaCha stream, so two clouds sampled from the same
//! seed and size are pathwise coupled particle by particle, also across `k`
//! when the drivers share one skeleton. The limit `k = ∞` is proxied by the
//! finest grid of a sweep.

use crate::calculus::{
    contraction_constant, stochastic_exponential, tnorm_sq, validate_standard_data, GeneratorSpec, LinearGenerator, StandardData,
    TerminalSpec, ThetaSpec, ValidationReport,
};
use crate::drivers::{make_donsker_driver, sample_ensemble, DonskerMode, ParticleEnsemble};
use crate::engine::{Instance, PicardSolver, SolutionProcesses, Q_MAX};
use crate::error::{invalid, Error, Result};
use crate::measures::{path_distance, w2_sq, EmpiricalMeasure, GridPath};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// CSV header of every sweep.
pub const CSV_HEADER: &str = "k,N,rep,seed,err_star_sq,err_y_sup_sq,err_mart_L2,norm_M_sq,w2_terminal_sq,var_diag,picard_q,runtime_ms";

/// How the drivers of a sequence relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    /// every step of the `k`-th driver sums `skeleton / k` coins of one
    /// shared walk, and sweeps reuse the cloud seed across `k`
    GaussianCoupled,
    /// same step laws, but every `k` gets its own cloud seed
    Independent,
}

/// Recipe for a family `{𝒟^k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSequenceSpec {
    pub ks: Vec<usize>,
    pub horizon: f64,
    pub coupling: Coupling,
    /// coins per path of the shared skeleton; `None` means the largest `k`
    pub skeleton: Option<usize>,
    pub terminal: TerminalSpec,
    pub generator: LinearGenerator,
    pub theta: ThetaSpec,
    pub beta_hat: f64,
    pub abar: Option<f64>,
}

impl DataSequenceSpec {
    /// Dyadic `k` from `k_min` to `k_max`, unit horizon, coupled drivers,
    /// identity Θ.
    pub fn dyadic(k_min: usize, k_max: usize, terminal: TerminalSpec, generator: LinearGenerator, beta_hat: f64) -> Self {
        let mut ks = Vec::new();
        let mut k = k_min.max(1);
        while k <= k_max {
            ks.push(k);
            k *= 2;
        }
        Self {
            ks,
            horizon: 1.0,
            coupling: Coupling::GaussianCoupled,
            skeleton: None,
            terminal,
            generator,
            theta: ThetaSpec::Identity,
            beta_hat,
            abar: None,
        }
    }

    fn skeleton_size(&self) -> usize {
        self.skeleton.unwrap_or_else(|| self.ks.iter().copied().max().unwrap_or(1))
    }

    fn check(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("k list must be nonempty and positive"));
        }
        if self.ks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("k list must be strictly increasing"));
        }
        let sk = self.skeleton_size();
        if let Some(&k) = self.ks.iter().find(|&&k| !sk.is_multiple_of(k)) {
            return Err(invalid(format!("skeleton of {sk} coins is not a multiple of k = {k}")));
        }
        Ok(())
    }

    /// The bundle for one `k`, without validation.
    pub fn materialize(&self, k: usize) -> Result<StandardData> {
        let sk = self.skeleton_size();
        if k == 0 || !sk.is_multiple_of(k) {
            return Err(invalid(format!("skeleton of {sk} coins is not a multiple of k = {k}")));
        }
        let driver = make_donsker_driver(k, self.horizon, DonskerMode::GaussianCoupled { refine: sk / k })?;
        let mut sd = StandardData::new(driver, self.terminal, self.theta, GeneratorSpec::Linear(self.generator), self.beta_hat)?;
        sd.abar = self.abar;
        Ok(sd)
    }
}

/// Assumption digest of one member of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub k: usize,
    pub phi: f64,
    /// `1 − 3 M̃^Φ(β̂)`, positive when B7 holds
    pub b7_margin: f64,
    pub a_inf: f64,
    pub passed: bool,
    pub report: ValidationReport,
}

/// Validated family `{𝒟^k}` and its digests.
#[derive(Debug, Clone)]
pub struct DataSequence {
    pub spec: DataSequenceSpec,
    pub data: Vec<StandardData>,
    pub entries: Vec<SequenceEntry>,
    /// `Φ^k` nonincreasing along the sequence
    pub phi_nonincreasing: bool,
}

impl DataSequence {
    pub fn ks(&self) -> &[usize] {
        &self.spec.ks
    }

    pub fn get(&self, k: usize) -> Option<&StandardData> {
        self.spec.ks.iter().position(|&x| x == k).map(|i| &self.data[i])
    }

    pub fn finest(&self) -> &StandardData {
        self.data.last().expect("sequence is nonempty")
    }
}

/// Per-`k` reports without failing on the first violation.
pub fn sequence_report(spec: &DataSequenceSpec) -> Result<Vec<SequenceEntry>> {
    spec.check()?;
    spec.ks
        .iter()
        .map(|&k| {
            let sd = spec.materialize(k)?;
            let report = validate_standard_data(&sd);
            let m = contraction_constant(sd.beta_hat, sd.weights.phi)?;
            Ok(SequenceEntry { k, phi: sd.weights.phi, b7_margin: 1.0 - 3.0 * m, a_inf: sd.weights.a_inf, passed: report.passed(), report })
        })
        .collect()
}

/// One validated bundle per `k`. The first failing check aborts with the
/// assumption and `k` in the error.
pub fn build_data_sequence(spec: &DataSequenceSpec) -> Result<DataSequence> {
    let entries = sequence_report(spec)?;
    if let Some(e) = entries.iter().find(|e| !e.passed) {
        let f = e.report.failures()[0];
        return Err(Error::Validation { assumption: f.assumption.clone(), witness: format!("k = {}: {}", e.k, f.witness) });
    }
    let data = spec.ks.iter().map(|&k| spec.materialize(k)).collect::<Result<Vec<_>>>()?;
    let phi_nonincreasing = entries.windows(2).all(|w| w[1].phi <= w[0].phi * (1.0 + 1e-12));
    Ok(DataSequence { spec: spec.clone(), data, entries, phi_nonincreasing })
}

/// Solver and sampling settings shared by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// cloud size; a cloud of `N`-player worlds holds `⌊particles / N⌋ · N`
    pub particles: usize,
    pub tol: f64,
    pub q_max: usize,
    pub reps: usize,
    pub seed: u64,
    /// record wall-clock times; off keeps the output byte-reproducible
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { particles: 4096, tol: 1e-14, q_max: Q_MAX, reps: 1, seed: 1, timing: false }
    }
}

/// One `(k, N, rep)` cell. The first twelve fields are the CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub err_star_sq: f64,
    pub err_y_sup_sq: f64,
    pub err_mart_l2: f64,
    /// `E[(M_T - M_T^ref)²]`, the orthogonal parts of the two solutions
    pub norm_m_sq: f64,
    pub w2_terminal_sq: f64,
    pub var_diag: f64,
    pub picard_q: usize,
    pub runtime_ms: u64,
    /// star-norm error of player 1 alone
    pub err_player1: Option<f64>,
    /// measured right-hand side of the chaos estimate
    pub bound: Option<f64>,
    /// `max_j E[W₂²(world law of the reference copies at t_j, reference law)]`
    pub w2_sup_sq: Option<f64>,
    /// mean-square sup distance of the quadratic-variation paths `[Y]`
    pub bracket_qv_sq: f64,
    /// mean-square sup distance of the predictable brackets of the martingale part
    pub bracket_pred_sq: f64,
    /// mean of `min(sup, 1)²`, a coupling bound on the path-space `W₂²`
    pub w2_path_sq: f64,
    pub particles: usize,
}

impl ConvergenceRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.n,
            self.rep,
            self.seed,
            self.err_star_sq,
            self.err_y_sup_sq,
            self.err_mart_l2,
            self.norm_m_sq,
            self.w2_terminal_sq,
            self.var_diag,
            self.picard_q,
            self.runtime_ms
        )
    }

    /// Numeric value of a CSV column by name.
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "k" => self.k as f64,
            "N" | "n" => self.n as f64,
            "rep" => self.rep as f64,
            "err_star_sq" => self.err_star_sq,
            "err_y_sup_sq" => self.err_y_sup_sq,
            "err_mart_L2" | "err_mart_l2" => self.err_mart_l2,
            "norm_M_sq" | "norm_m_sq" => self.norm_m_sq,
            "w2_terminal_sq" => self.w2_terminal_sq,
            "var_diag" => self.var_diag,
            "picard_q" => self.picard_q as f64,
            "runtime_ms" => self.runtime_ms as f64,
            "w2_sup_sq" => self.w2_sup_sq?,
            "w2_path_sq" => self.w2_path_sq,
            "bound" => self.bound?,
            "err_player1" => self.err_player1?,
            _ => return None,
        })
    }
}

pub fn to_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Mean and standard error of one column over the repetitions of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub k: usize,
    pub n: usize,
    pub reps: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Cells in first-seen `(k, N)` order.
pub fn aggregate(rows: &[ConvergenceRow], column: &str) -> Result<Vec<CellSummary>> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.k, r.n)) {
            keys.push((r.k, r.n));
        }
    }
    keys.into_iter()
        .map(|(k, n)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.k == k && r.n == n)
                .map(|r| r.column(column).ok_or_else(|| invalid(format!("no column {column}"))))
                .collect::<Result<_>>()?;
            let (mean, stderr) = mean_stderr(&v);
            Ok(CellSummary { k, n, reps: v.len(), mean, stderr })
        })
        .collect()
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `log y` against `log x` and its standard error.
pub fn slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(invalid("slope needs at least three (x, y) pairs"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid("slope needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("slope needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let ssr: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - my - b * (x - mx)).powi(2)).sum();
    Ok((b, (ssr / (n - 2.0) / sxx).sqrt()))
}

/// Slope of the per-`x` mean of `y_col` against `x_col`.
pub fn slope_rows(rows: &[ConvergenceRow], x_col: &str, y_col: &str) -> Result<(f64, f64)> {
    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        let x = r.column(x_col).ok_or_else(|| invalid(format!("no column {x_col}")))?;
        let y = r.column(y_col).ok_or_else(|| invalid(format!("no column {y_col}")))?;
        match xs.iter().position(|&v| v == x) {
            Some(i) => {
                sums[i].0 += y;
                sums[i].1 += 1;
            }
            None => {
                xs.push(x);
                sums.push((y, 1));
            }
        }
    }
    let ys: Vec<f64> = sums.iter().map(|(s, c)| s / *c as f64).collect();
    slope(&xs, &ys)
}

/// 64-bit seed for a tagged sub-experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r.next_u64()
}

fn cell_tag(k: usize, n: usize, rep: usize) -> u64 {
    ((k as u64) << 40) | ((n as u64) << 20) | rep as u64
}

/// `E[(Σ_s |f^a_s − f^b_s| ΔC_s)²]`: mean square of the per-path total
/// variation of the difference of the two generator integrals. Both
/// solutions must live on the same sample points.
pub fn variation_diagnostic(a: &SolutionProcesses, b: &SolutionProcesses, sd: &StandardData) -> Result<f64> {
    let d = a.diff(b)?;
    let k = d.steps();
    if k != sd.steps() {
        return Err(invalid("solution and data have different grids"));
    }
    let mut acc = vec![0.0; d.points_at(0)];
    for s in 0..k {
        let dc = sd.characteristics.delta_c[s];
        acc = (0..d.points_at(s + 1)).map(|n| acc[d.parent(s + 1, n)] + d.gen[s][n].abs() * dc).collect();
    }
    Ok(d.expect_at(k, |n| acc[n] * acc[n]))
}

/// `E[sup_s |Y_s|² 1{sup_s |Y_s| > r}]`.
pub fn tail_mass(sol: &SolutionProcesses, r: f64) -> f64 {
    sol.expect_sup(|_, y| if y.abs() > r { y * y } else { 0.0 })
}

/// Mean over worlds of `W₂²` between the uniform law of each world's `n`
/// values and the uniform law of all values. Every world block of the
/// sorted pool carries the same mass as one world point, which reduces the
/// quantile coupling to block sums.
pub fn world_w2_sq(values: &[f64], n: usize) -> Result<f64> {
    if n == 0 || values.is_empty() || !values.len().is_multiple_of(n) {
        return Err(invalid("values do not split into worlds"));
    }
    let worlds = values.len() / n;
    let mut pool = values.to_vec();
    pool.sort_unstable_by(f64::total_cmp);
    let blocks: Vec<(f64, f64)> = pool.chunks(worlds).map(|c| (c.iter().sum(), c.iter().map(|v| v * v).sum())).collect();
    let per: Vec<f64> = values
        .par_chunks(n)
        .map(|w| {
            let mut x = w.to_vec();
            x.sort_unstable_by(f64::total_cmp);
            x.iter().zip(&blocks).map(|(xi, (s1, s2))| worlds as f64 * xi * xi - 2.0 * xi * s1 + s2).sum::<f64>() / values.len() as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / worlds as f64)
}

struct Solved<'a> {
    inst: Instance<'a>,
    sol: SolutionProcesses,
    q: usize,
}

fn solve<'a>(inst: Instance<'a>, cfg: &SweepConfig) -> Result<Solved<'a>> {
    let mut s = PicardSolver::new(inst)?;
    s.run(cfg.tol, cfg.q_max)?;
    let q = s.state.q;
    Ok(Solved { sol: s.current.remove(0), inst: s.instance, q })
}

fn cloud(sd: &StandardData, particles: usize, seed: u64) -> Result<Arc<ParticleEnsemble>> {
    Ok(Arc::new(sample_ensemble(&sd.driver, particles, seed)?))
}

fn world_size(particles: usize, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(invalid("at least one player required"));
    }
    if n > particles {
        return Err(Error::Capacity { what: format!("{n}-player cloud"), required: format!("{n} particles"), budget: particles.to_string() });
    }
    Ok(particles / n * n)
}

fn path(times: &[f64], f: impl Fn(usize) -> f64) -> GridPath {
    GridPath { times: times.to_vec(), values: (0..times.len()).map(f).collect() }
}

/// Total variation of `a − b` over the union of both grids.
fn variation_of_difference(a: &GridPath, b: &GridPath) -> f64 {
    let mut ts: Vec<f64> = a.times.iter().chain(&b.times).copied().collect();
    ts.sort_unstable_by(f64::total_cmp);
    ts.dedup_by(|x, y| (*x - *y).abs() <= 1e-12);
    ts.windows(2).map(|w| ((a.at(w[1]) - b.at(w[1])) - (a.at(w[0]) - b.at(w[0]))).abs()).sum()
}

/// Pathwise comparison of two particle solutions whose particles are
/// coupled by index. The grids may differ.
struct Comparison {
    y_sup_sq: f64,
    mart_l2: f64,
    norm_m_sq: f64,
    w2_terminal_sq: f64,
    var_diag: f64,
    qv_sq: f64,
    pred_sq: f64,
    w2_path_sq: f64,
}

struct PathData {
    times: Vec<f64>,
    y: Vec<Vec<f64>>,
    gen_int: Vec<Vec<f64>>,
    qv: Vec<Vec<f64>>,
    pred: Vec<Vec<f64>>,
    mart: Vec<f64>,
    /// `M_T`
    m_end: Vec<f64>,
}

impl PathData {
    /// Per-particle running paths; index `[p][j]`.
    fn new(s: &Solved<'_>) -> Result<Self> {
        let sd = s.inst.sd;
        let ch = &sd.characteristics;
        let k = sd.steps();
        let np = s.sol.points_at(0);
        let pred_inc: Vec<Vec<f64>> = (0..k)
            .map(|st| {
                let c2 = ch.c[st] * ch.c[st];
                (0..np)
                    .map(|p| {
                        let u = tnorm_sq(s.sol.u_at(st, p), &ch.kernels[st])?;
                        Ok((s.sol.z[st][p].powi(2) * c2 + u) * ch.delta_c[st])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let (y, rest): (Vec<Vec<f64>>, Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>) = (0..np)
            .into_par_iter()
            .map(|p| {
                let y: Vec<f64> = (0..=k).map(|j| s.sol.y[j][p]).collect();
                let (mut g, mut q, mut r) = (vec![0.0], vec![0.0], vec![0.0]);
                for st in 0..k {
                    g.push(g[st] + s.sol.gen[st][p] * ch.delta_c[st]);
                    q.push(q[st] + (y[st + 1] - y[st]).powi(2));
                    r.push(r[st] + pred_inc[st][p]);
                }
                let m: f64 = (0..k).map(|st| s.sol.dm[st][p]).sum();
                (y, (g, q, r, m))
            })
            .unzip();
        let mut gen_int = Vec::with_capacity(np);
        let mut qv = Vec::with_capacity(np);
        let mut pred = Vec::with_capacity(np);
        let mut m_end = Vec::with_capacity(np);
        for (g, q, r, m) in rest {
            gen_int.push(g);
            qv.push(q);
            pred.push(r);
            m_end.push(m);
        }
        Ok(Self { times: sd.times().to_vec(), y, gen_int, qv, pred, mart: s.inst.martingale_terminal(&s.sol, 0), m_end })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn compare(a: &Solved<'_>, b: &Solved<'_>) -> Result<Comparison> {
    let pa = PathData::new(a)?;
    let pb = PathData::new(b)?;
    let np = pa.y.len();
    if pb.y.len() != np {
        return Err(invalid("compared clouds differ in size"));
    }
    let per: Vec<[f64; 5]> = (0..np)
        .into_par_iter()
        .map(|p| {
            let ya = path(&pa.times, |j| pa.y[p][j]);
            let yb = path(&pb.times, |j| pb.y[p][j]);
            let dy = path_distance(&ya, &yb)?;
            let sup_of = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Result<f64> {
                Ok(path_distance(&path(&pa.times, |j| x[p][j]), &path(&pb.times, |j| y[p][j]))?.sup.powi(2))
            };
            let tv = variation_of_difference(&path(&pa.times, |j| pa.gen_int[p][j]), &path(&pb.times, |j| pb.gen_int[p][j]));
            Ok([dy.sup.powi(2), dy.j1_upper.powi(2), tv * tv, sup_of(&pa.qv, &pb.qv)?, sup_of(&pa.pred, &pb.pred)?])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| mean(&per.iter().map(|r| r[i]).collect::<Vec<_>>());
    let ka = pa.times.len() - 1;
    let kb = pb.times.len() - 1;
    let ta: Vec<f64> = (0..np).map(|p| pa.y[p][ka]).collect();
    let tb: Vec<f64> = (0..np).map(|p| pb.y[p][kb]).collect();
    let mart: Vec<f64> = pa.mart.iter().zip(&pb.mart).map(|(x, y)| (x - y).powi(2)).collect();
    Ok(Comparison {
        y_sup_sq: col(0),
        w2_path_sq: col(1),
        var_diag: col(2),
        qv_sq: col(3),
        pred_sq: col(4),
        mart_l2: mean(&mart),
        norm_m_sq: mean(&pa.m_end.iter().zip(&pb.m_end).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>()),
        w2_terminal_sq: w2_sq(&EmpiricalMeasure::uniform_1d(&ta), &EmpiricalMeasure::uniform_1d(&tb))?,
    })
}

fn elapsed(t: Option<Instant>) -> u64 {
    t.map_or(0, |t| t.elapsed().as_millis() as u64)
}

/// The measured right-hand side of the uniform chaos estimate, or `None`
/// when B7 fails. `sys` and `mv` must live on the same cloud.
fn chaos_bound(sd: &StandardData, sys: &SolutionProcesses, mv: &SolutionProcesses, n: usize) -> Result<Option<f64>> {
    let m = contraction_constant(sd.beta_hat, sd.weights.phi)?;
    if 3.0 * m >= 1.0 {
        return Ok(None);
    }
    let b = sd.beta_hat;
    let phi = sd.weights.phi;
    let e = stochastic_exponential(&sd.weights.a, b)?;
    let k = sd.steps();
    let term: Vec<f64> = sys.y[k].iter().zip(&mv.y[k]).map(|(x, y)| (x - y).powi(2)).collect();
    let xi = e[k] * mean(&term);
    let mut w2 = 0.0;
    for j in 1..=k {
        w2 += world_w2_sq(&mv.y[j], n)? * (e[j] - e[j - 1]);
    }
    let c1 = (26.0 + 2.0 / b + (9.0 * b + 2.0) * phi) / (1.0 - 3.0 * m);
    let c2 = 2.0 * m / (1.0 - 3.0 * m) / b;
    Ok(Some(c1 * xi + c2 * w2))
}

fn chaos_cell(sd: &StandardData, n: usize, rep: usize, cfg: &SweepConfig) -> Result<ConvergenceRow> {
    let started = cfg.timing.then(Instant::now);
    let size = world_size(cfg.particles, n)?;
    let seed = derive_seed(cfg.seed, cell_tag(sd.steps(), n, rep));
    let ens = cloud(sd, size, seed)?;
    let sys = solve(Instance::system_on_cloud(sd, ens.clone(), n)?, cfg)?;
    let mv = solve(Instance::mv_on_partitioned_cloud(sd, ens, n)?, cfg)?;
    let err_star_sq = sys.inst.distance_sq(std::slice::from_ref(&sys.sol), std::slice::from_ref(&mv.sol))?;
    let first: Vec<usize> = (0..size / n).map(|w| w * n).collect();
    let d1 = sys.sol.select_particles(&first)?.diff(&mv.sol.select_particles(&first)?)?;
    let err_player1 = crate::calculus::star_norm_sq(&d1, &sd.weights, &sd.characteristics, sd.beta_hat)?.total;
    let c = compare(&sys, &mv)?;
    let w2_sup_sq = (0..=sd.steps()).map(|j| world_w2_sq(&mv.sol.y[j], n)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    let bound = chaos_bound(sd, &sys.sol, &mv.sol, n)?;
    Ok(ConvergenceRow {
        k: sd.steps(),
        n,
        rep,
        seed,
        err_star_sq,
        err_y_sup_sq: c.y_sup_sq,
        err_mart_l2: c.mart_l2,
        norm_m_sq: c.norm_m_sq,
        w2_terminal_sq: c.w2_terminal_sq,
        var_diag: c.var_diag,
        picard_q: sys.q,
        runtime_ms: elapsed(started),
        err_player1: Some(err_player1),
        bound,
        w2_sup_sq: Some(w2_sup_sq),
        bracket_qv_sq: c.qv_sq,
        bracket_pred_sq: c.pred_sq,
        w2_path_sq: c.w2_path_sq,
        particles: size,
    })
}

/// `N`-player system against McKean-Vlasov copies on the same cloud, for
/// every `N` in `ns` and `cfg.reps` repetitions. The error is the star-norm
/// distance averaged over players and worlds.
pub fn chaos_sweep(sd: &StandardData, ns: &[usize], cfg: &SweepConfig) -> Result<Vec<ConvergenceRow>> {
    let cells: Vec<(usize, usize)> = ns.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    for &n in ns {
        world_size(cfg.particles, n)?;
    }
    cells.into_par_iter().map(|(n, rep)| chaos_cell(sd, n, rep, cfg)).collect()
}

/// What a stability sweep compares across `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityTarget {
    McKeanVlasov,
    /// `N`-player systems under `𝒟^k` against the system under the reference
    MeanField(usize),
}

fn rep_seed(seq: &DataSequence, cfg: &SweepConfig, k: usize, rep: usize) -> u64 {
    match seq.spec.coupling {
        Coupling::GaussianCoupled => derive_seed(cfg.seed, rep as u64),
        Coupling::Independent => derive_seed(cfg.seed, cell_tag(k, 0, rep)),
    }
}

fn solve_target<'a>(sd: &'a StandardData, target: StabilityTarget, size: usize, seed: u64, cfg: &SweepConfig) -> Result<Solved<'a>> {
    let ens = cloud(sd, size, seed)?;
    match target {
        StabilityTarget::McKeanVlasov => solve(Instance::mv_on_cloud(sd, ens), cfg),
        StabilityTarget::MeanField(n) => solve(Instance::system_on_cloud(sd, ens, n)?, cfg),
    }
}

fn cross_row(k: usize, n: usize, rep: usize, seed: u64, s: &Solved<'_>, r: &Solved<'_>, started: Option<Instant>) -> Result<ConvergenceRow> {
    let c = compare(s, r)?;
    Ok(ConvergenceRow {
        k,
        n,
        rep,
        seed,
        // the grids differ, so the star norm is replaced by its pathwise parts
        err_star_sq: c.y_sup_sq + c.mart_l2 + c.norm_m_sq,
        err_y_sup_sq: c.y_sup_sq,
        err_mart_l2: c.mart_l2,
        norm_m_sq: c.norm_m_sq,
        w2_terminal_sq: c.w2_terminal_sq,
        var_diag: c.var_diag,
        picard_q: s.q,
        runtime_ms: elapsed(started),
        err_player1: None,
        bound: None,
        w2_sup_sq: None,
        bracket_qv_sq: c.qv_sq,
        bracket_pred_sq: c.pred_sq,
        w2_path_sq: c.w2_path_sq,
        particles: s.sol.points_at(0),
    })
}

/// Every `k` of the sequence against `reference_k`, on clouds coupled
/// across `k`.
pub fn stability_sweep(seq: &DataSequence, reference_k: usize, target: StabilityTarget, cfg: &SweepConfig) -> Result<Vec<ConvergenceRow>> {
    let rsd = seq.get(reference_k).ok_or_else(|| invalid(format!("reference k = {reference_k} is not in the sequence")))?;
    let n = match target {
        StabilityTarget::McKeanVlasov => 1,
        StabilityTarget::MeanField(n) => n,
    };
    let size = world_size(cfg.particles, n)?;
    let mut rows = Vec::new();
    for rep in 0..cfg.reps {
        let rseed = rep_seed(seq, cfg, reference_k, rep);
        let reference = solve_target(rsd, target, size, rseed, cfg)?;
        let part: Vec<ConvergenceRow> = seq
            .ks()
            .par_iter()
            .zip(&seq.data)
            .map(|(&k, sd)| {
                let started = cfg.timing.then(Instant::now);
                let seed = rep_seed(seq, cfg, k, rep);
                let s = solve_target(sd, target, size, seed, cfg)?;
                cross_row(k, n, rep, seed, &s, &reference, started)
            })
            .collect::<Result<_>>()?;
        rows.extend(part);
    }
    Ok(rows)
}

/// Output of [`double_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMatrix {
    pub rows: Vec<ConvergenceRow>,
    pub reference_k: usize,
    /// `err_star_sq` per `(k, N)` cell
    pub cells: Vec<CellSummary>,
    /// cells `(ks[i], ns[i])`
    pub diagonal: Vec<CellSummary>,
    /// `w2_path_sq` per cell
    pub path_w2: Vec<CellSummary>,
}

impl ConvergenceMatrix {
    pub fn cell(&self, k: usize, n: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.k == k && c.n == n)
    }
}

/// `N`-player systems under every `𝒟^k` against the McKean-Vlasov solution
/// at `reference_k`, player `i` of world `w` paired with reference particle
/// `w N + i`. The reference for each `N` is fitted with that `N`'s world
/// features.
pub fn double_sweep(seq: &DataSequence, ns: &[usize], reference_k: usize, cfg: &SweepConfig) -> Result<ConvergenceMatrix> {
    let rsd = seq.get(reference_k).ok_or_else(|| invalid(format!("reference k = {reference_k} is not in the sequence")))?;
    for &n in ns {
        if world_size(cfg.particles, n)? != cfg.particles {
            return Err(invalid(format!("{} particles do not split into worlds of {n}", cfg.particles)));
        }
    }
    let mut rows = Vec::new();
    for rep in 0..cfg.reps {
        let rseed = rep_seed(seq, cfg, reference_k, rep);
        // one reference per N, fitted on the system's world features so the
        // k = reference row isolates the chaos error
        let ens = cloud(rsd, cfg.particles, rseed)?;
        let references: Vec<Solved<'_>> =
            ns.iter().map(|&n| solve(Instance::mv_on_partitioned_cloud(rsd, ens.clone(), n)?, cfg)).collect::<Result<_>>()?;
        let cells: Vec<(usize, usize)> = seq.ks().iter().enumerate().flat_map(|(i, _)| (0..ns.len()).map(move |j| (i, j))).collect();
        let part: Vec<ConvergenceRow> = cells
            .into_par_iter()
            .map(|(i, j)| {
                let started = cfg.timing.then(Instant::now);
                let (k, n) = (seq.ks()[i], ns[j]);
                let seed = rep_seed(seq, cfg, k, rep);
                let s = solve_target(&seq.data[i], StabilityTarget::MeanField(n), cfg.particles, seed, cfg)?;
                cross_row(k, n, rep, seed, &s, &references[j], started)
            })
            .collect::<Result<_>>()?;
        rows.extend(part);
    }
    let cells = aggregate(&rows, "err_star_sq")?;
    let diagonal = seq
        .ks()
        .iter()
        .zip(ns)
        .filter_map(|(&k, &n)| cells.iter().find(|c| c.k == k && c.n == n).copied())
        .collect();
    let path_w2 = aggregate(&rows, "w2_path_sq")?;
    Ok(ConvergenceMatrix { rows, reference_k, cells, diagonal, path_w2 })
}

/// Largest cell mean over `k`, per `N`, with the standard error of that cell.
pub fn max_over_k(cells: &[CellSummary]) -> Vec<CellSummary> {
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| *cells.iter().filter(|c| c.n == n).max_by(|a, b| a.mean.total_cmp(&b.mean)).expect("nonempty"))
        .collect()
}

/// `true` when each mean exceeds its predecessor by at most two combined
/// standard errors.
pub fn nonincreasing_within_2se(cells: &[CellSummary]) -> bool {
    cells.windows(2).all(|w| w[1].mean <= w[0].mean + 2.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt())
}

/// JSON summary of a sweep: slopes, cells and sequence digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub experiment: String,
    pub config: SweepConfig,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<(String, f64, f64)>,
    pub sequence: Vec<SequenceDigest>,
    pub diagonal: Vec<CellSummary>,
}

/// Short form of a [`SequenceEntry`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDigest {
    pub k: usize,
    pub phi: f64,
    pub b7_margin: f64,
    pub passed: bool,
}

impl From<&SequenceEntry> for SequenceDigest {
    fn from(e: &SequenceEntry) -> Self {
        Self { k: e.k, phi: e.phi, b7_margin: e.b7_margin, passed: e.passed }
    }
}

impl SweepSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::TerminalFn;

    fn spec(ks: Vec<usize>, g: LinearGenerator) -> DataSequenceSpec {
        DataSequenceSpec { ks, ..DataSequenceSpec::dyadic(4, 4, TerminalSpec::new(TerminalFn::Linear { cont: 1.0, jump: 0.0 }), g, 240.0) }
    }

    #[test]
    fn zero_generator_sequence() {
        let seq = build_data_sequence(&spec(vec![4, 8], LinearGenerator::default())).unwrap();
        assert_eq!(seq.data.len(), 2);
        assert!(seq.entries.iter().all(|e| e.phi == 0.0 && e.passed));
        assert!(seq.phi_nonincreasing);
    }

    #[test]
    fn b7_margin_per_k() {
        let g = LinearGenerator { a: 0.01, b: 0.01, cu: 0.01, e: 0.01, c0: 0.0 };
        let s = spec(vec![4, 8, 16, 32], g);
        let rep = sequence_report(&s).unwrap();
        // α² = 2·0.01, Φ = α²/k
        for e in &rep {
            assert!((e.phi - 0.02 / e.k as f64).abs() < 1e-15);
            let m = contraction_constant(240.0, e.phi).unwrap();
            assert!((e.b7_margin - (1.0 - 3.0 * m)).abs() < 1e-15);
        }
        assert!(rep[0].b7_margin < 0.0 && rep[3].b7_margin > 0.0);
        match build_data_sequence(&s) {
            Err(Error::Validation { assumption, witness }) => {
                assert_eq!(assumption, "B7");
                assert!(witness.starts_with("k = 4"));
            }
            other => panic!("expected a B7 failure, got {other:?}"),
        }
    }

    #[test]
    fn phi_decreases_like_one_over_k() {
        let g = LinearGenerator { e: 0.01, ..LinearGenerator::default() };
        let seq = build_data_sequence(&spec(vec![8, 16, 32, 64], g)).unwrap();
        assert!(seq.phi_nonincreasing);
        for e in &seq.entries {
            assert!((e.phi - 0.01 / e.k as f64).abs() < 1e-16);
        }
    }

    #[test]
    fn skeleton_must_refine_every_k() {
        let mut s = spec(vec![4, 6], LinearGenerator::default());
        s.skeleton = Some(8);
        assert!(build_data_sequence(&s).is_err());
    }

    #[test]
    fn slope_examples() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let (b, se) = slope(&xs, &xs.map(|x| 1.0 / x)).unwrap();
        assert!((b + 1.0).abs() < 1e-14 && se < 1e-14);
        let (b, _) = slope(&xs, &[3.0; 4]).unwrap();
        assert!(b.abs() < 1e-14);
        assert!(slope(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(slope(&xs[..2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn world_w2_matches_quantile_coupling() {
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7919) % 23) as f64 * 0.37 - 2.0).collect();
        for n in [1, 2, 3, 4, 6, 8, 12, 24] {
            let pool = EmpiricalMeasure::uniform_1d(&vals);
            let direct: f64 = vals.chunks(n).map(|w| w2_sq(&EmpiricalMeasure::uniform_1d(w), &pool).unwrap()).sum::<f64>() / (24 / n) as f64;
            assert!((world_w2_sq(&vals, n).unwrap() - direct).abs() < 1e-12, "n = {n}");
        }
        assert_eq!(world_w2_sq(&vals, 24).unwrap(), 0.0);
    }

    #[test]
    fn union_grid_variation() {
        let a = GridPath::new(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 1.0]).unwrap();
        let b = GridPath::new(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![0.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
        // difference path 0, -0.5, 0, 0, 0
        assert!((variation_of_difference(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(variation_of_difference(&a, &a), 0.0);
    }

    #[test]
    fn csv_has_the_fixed_header() {
        assert_eq!(to_csv(&[]).trim_end(), CSV_HEADER);
        assert_eq!(CSV_HEADER.split(',').count(), 12);
    }
}
