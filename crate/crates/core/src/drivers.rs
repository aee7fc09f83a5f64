//! Discrete-time martingale drivers with independent, finite-support
//! increments, and their deterministic characteristics.
//!
//! A driver is a pair `(X°, X♮)`: a continuous-like part observed through its
//! increments and a purely discontinuous part whose increments are the jump
//! heights. A jump mark of exactly `0.0` means "no jump". Step `j` (for
//! `j = 1..=k`) is the increment over `(t_{j-1}, t_j]`; per-step arrays store
//! step `j` at index `j - 1`.

use crate::error::{invalid, Error, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const PROB_TOL: f64 = 1e-12;

/// Refinement used by [`DonskerMode::GaussianCoupled`] when no skeleton
/// resolution is imposed by the caller.
pub const DEFAULT_REFINE: usize = 16;

/// Equidistant time grid `t_j = j T / k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub steps: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
}

impl GridSpec {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        let times = (0..=steps)
            .map(|j| if j == steps { horizon } else { horizon * j as f64 / steps as f64 })
            .collect();
        Ok(Self { steps, horizon, times })
    }
}

/// One atom of an increment law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mark: f64,
    pub prob: f64,
}

/// Finite-support, mean-zero increment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementLaw {
    atoms: Vec<Atom>,
}

impl IncrementLaw {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(invalid("increment law needs at least one atom"));
        }
        for a in &atoms {
            if !(a.prob > 0.0 && a.prob <= 1.0) || !a.mark.is_finite() {
                return Err(invalid(format!("bad atom {a:?}")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        let mean: f64 = atoms.iter().map(|a| a.prob * a.mark).sum();
        if mean.abs() > PROB_TOL {
            return Err(invalid(format!("increment mean is {mean}, not zero")));
        }
        Ok(Self { atoms })
    }

    /// The zero increment.
    pub fn degenerate() -> Self {
        Self { atoms: vec![Atom { mark: 0.0, prob: 1.0 }] }
    }

    /// `±h` with probability one half each.
    pub fn symmetric(h: f64) -> Result<Self> {
        Self::new(vec![Atom { mark: -h, prob: 0.5 }, Atom { mark: h, prob: 0.5 }])
    }

    /// Sum of `m` independent `±h` coins. Atom `i` has `i` plus signs.
    ///
    /// Beyond about a thousand coins the extreme probabilities fall below
    /// the smallest positive double and the law is rejected.
    pub fn binomial(m: usize, h: f64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("binomial law needs m >= 1"));
        }
        let mut atoms = Vec::with_capacity(m + 1);
        let direct = m <= 1000;
        // C(m, i) itself overflows past m ≈ 1020, so large m goes through logs
        let (mut c, mut log_c) = (1.0f64, 0.0f64);
        let scale = 0.5f64.powi(m as i32);
        let log_scale = m as f64 * 0.5f64.ln();
        for i in 0..=m {
            if i > 0 {
                c = c * (m - i + 1) as f64 / i as f64;
                log_c += ((m - i + 1) as f64 / i as f64).ln();
            }
            let prob = if direct { c * scale } else { (log_c + log_scale).exp() };
            if prob == 0.0 {
                return Err(invalid(format!("{m} coins: extreme atoms underflow")));
            }
            atoms.push(Atom { mark: h * (2.0 * i as f64 - m as f64), prob });
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.prob * g(a.mark)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|x| x * x)
    }

    /// Probability of a nonzero mark.
    pub fn jump_mass(&self) -> f64 {
        self.atoms.iter().filter(|a| a.mark != 0.0).map(|a| a.prob).sum()
    }

    /// Inverse-CDF lookup for `u` in `[0, 1)`.
    pub fn index_for(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, a) in self.atoms.iter().enumerate() {
            acc += a.prob;
            if u < acc {
                return i;
            }
        }
        self.atoms.len() - 1
    }
}

/// Mode of [`make_donsker_driver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DonskerMode {
    /// `±sqrt(T/k)` coin flips.
    Rademacher,
    /// Each step is the sum of `refine` coins of a finer skeleton walk with
    /// `k * refine` steps, so the step law is a symmetric binomial
    /// quantization of the Gaussian increment with variance `T/k`.
    GaussianCoupled { refine: usize },
}

/// How ensemble sampling draws the continuous increments.
///
/// `SignSum` reads one random word per skeleton coin, which is what makes
/// drivers at different `k` but a common skeleton pathwise coupled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ContSampler {
    InverseCdf,
    SignSum { refine: usize },
}

/// A driver pair with independent increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    pub grid: GridSpec,
    pub cont_law: Vec<IncrementLaw>,
    pub jump_law: Vec<IncrementLaw>,
    pub cont_sampler: ContSampler,
    pub label: String,
}

impl DriverSpec {
    /// Driver from explicit per-step laws. The two families are independent.
    pub fn new(
        grid: GridSpec,
        cont_law: Vec<IncrementLaw>,
        jump_law: Vec<IncrementLaw>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if cont_law.len() != grid.steps || jump_law.len() != grid.steps {
            return Err(invalid("one continuous and one jump law per step required"));
        }
        Ok(Self { grid, cont_law, jump_law, cont_sampler: ContSampler::InverseCdf, label: label.into() })
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    /// Number of joint (continuous, jump) outcomes of one player at `step`.
    pub fn branching(&self, step: usize) -> usize {
        self.cont_law[step].len() * self.jump_law[step].len()
    }

    pub fn has_jumps(&self) -> bool {
        self.jump_law.iter().any(|l| l.jump_mass() > 0.0)
    }
}

/// Symmetric random walk driver, `X♮ = 0`.
pub fn make_donsker_driver(k: usize, horizon: f64, mode: DonskerMode) -> Result<DriverSpec> {
    let grid = GridSpec::new(k, horizon)?;
    let (law, sampler, label) = match mode {
        DonskerMode::Rademacher => (
            IncrementLaw::symmetric((horizon / k as f64).sqrt())?,
            ContSampler::SignSum { refine: 1 },
            format!("rademacher(k={k}, T={horizon})"),
        ),
        DonskerMode::GaussianCoupled { refine } => {
            if refine == 0 {
                return Err(invalid("refine must be at least 1"));
            }
            let h = (horizon / (k * refine) as f64).sqrt();
            (
                IncrementLaw::binomial(refine, h)?,
                ContSampler::SignSum { refine },
                format!("gaussian_coupled(k={k}, T={horizon}, refine={refine})"),
            )
        }
    };
    Ok(DriverSpec {
        grid,
        cont_law: vec![law; k],
        jump_law: vec![IncrementLaw::degenerate(); k],
        cont_sampler: sampler,
        label,
    })
}

/// Pure-jump driver with marks `±scale/sqrt(k)` at every step.
pub fn make_jump_driver(k: usize, horizon: f64, mark_scale: f64) -> Result<DriverSpec> {
    let grid = GridSpec::new(k, horizon)?;
    if !(mark_scale > 0.0 && mark_scale.is_finite()) {
        return Err(invalid(format!("mark scale must be positive, got {mark_scale}")));
    }
    let law = IncrementLaw::symmetric(mark_scale / (k as f64).sqrt())?;
    Ok(DriverSpec {
        grid,
        cont_law: vec![IncrementLaw::degenerate(); k],
        jump_law: vec![law; k],
        cont_sampler: ContSampler::InverseCdf,
        label: format!("jump(k={k}, T={horizon}, scale={mark_scale})"),
    })
}

/// Independent coin and jump parts with per-step variances `share * T/k`
/// and `(1 - share) * T/k`. The jump part jumps with probability
/// `jump_prob` at each step.
pub fn make_combined_driver(k: usize, horizon: f64, share: f64, jump_prob: f64) -> Result<DriverSpec> {
    let grid = GridSpec::new(k, horizon)?;
    if !(share > 0.0 && share < 1.0) {
        return Err(invalid("continuous share must lie in (0, 1)"));
    }
    if !(jump_prob > 0.0 && jump_prob <= 1.0) {
        return Err(invalid("jump probability must lie in (0, 1]"));
    }
    let dt = horizon / k as f64;
    let cont = IncrementLaw::symmetric((share * dt).sqrt())?;
    let h = ((1.0 - share) * dt / jump_prob).sqrt();
    let mut atoms = vec![Atom { mark: -h, prob: jump_prob / 2.0 }, Atom { mark: h, prob: jump_prob / 2.0 }];
    if jump_prob < 1.0 {
        atoms.insert(1, Atom { mark: 0.0, prob: 1.0 - jump_prob });
    }
    let jump = IncrementLaw::new(atoms)?;
    Ok(DriverSpec {
        grid,
        cont_law: vec![cont; k],
        jump_law: vec![jump; k],
        cont_sampler: ContSampler::SignSum { refine: 1 },
        label: format!("combined(k={k}, T={horizon}, share={share}, p={jump_prob})"),
    })
}

/// Law of the sum of independent increments, atoms merged when their marks
/// agree to 1e-12 (relative to the largest mark).
pub fn convolve_laws(laws: &[IncrementLaw]) -> Vec<Atom> {
    let mut acc = vec![Atom { mark: 0.0, prob: 1.0 }];
    for law in laws {
        let mut next: Vec<Atom> = Vec::with_capacity(acc.len() * law.len());
        for a in &acc {
            for b in law.atoms() {
                next.push(Atom { mark: a.mark + b.mark, prob: a.prob * b.prob });
            }
        }
        next.sort_by(|x, y| x.mark.total_cmp(&y.mark));
        let scale = next.iter().fold(1.0f64, |m, a| m.max(a.mark.abs()));
        let mut merged: Vec<Atom> = Vec::with_capacity(next.len());
        for a in next {
            match merged.last_mut() {
                Some(last) if (a.mark - last.mark).abs() <= 1e-12 * scale => last.prob += a.prob,
                _ => merged.push(a),
            }
        }
        acc = merged;
    }
    acc
}

/// Disintegration kernel of one step: atoms `(x, K({x}))` over the nonzero
/// jump marks, so that `nu({t_j}, dx) = K(dx) * delta_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepKernel {
    pub marks: Vec<f64>,
    pub weights: Vec<f64>,
    /// index of each kernel atom in the step's jump law
    pub law_index: Vec<usize>,
    pub delta_c: f64,
    pub zeta: f64,
}

impl StepKernel {
    /// Kernel of a jump law sitting on a step with bracket increment `delta_c`.
    /// `delta_c` must dominate the jump second moment.
    pub fn from_law(jump: &IncrementLaw, delta_c: f64) -> Self {
        let zeta = jump.jump_mass();
        if delta_c <= 0.0 {
            return Self { marks: vec![], weights: vec![], law_index: vec![], delta_c: 0.0, zeta };
        }
        let mut marks = Vec::new();
        let mut weights = Vec::new();
        let mut law_index = Vec::new();
        for (i, a) in jump.atoms().iter().enumerate() {
            if a.mark != 0.0 {
                marks.push(a.mark);
                weights.push(a.prob / delta_c);
                law_index.push(i);
            }
        }
        Self { marks, weights, law_index, delta_c, zeta }
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// `∫ g dK`.
    pub fn integrate(&self, g: impl Fn(usize, f64) -> f64) -> f64 {
        self.marks.iter().zip(&self.weights).enumerate().map(|(i, (&x, &w))| w * g(i, x)).sum()
    }

    /// `∫ g dν({t_j}, ·)`, i.e. the sum of `g(x) P(ΔX♮ = x)` over nonzero marks.
    pub fn integrate_nu(&self, g: impl Fn(usize, f64) -> f64) -> f64 {
        self.integrate(g) * self.delta_c
    }
}

/// Deterministic characteristics `(C, K, c, ζ)` of a driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristics {
    /// `C_{t_j}` for `j = 0..=k`
    pub c_cum: Vec<f64>,
    pub delta_c: Vec<f64>,
    pub kernels: Vec<StepKernel>,
    /// density root of the continuous bracket, `c² ΔC = E[(ΔX°)²]`
    pub c: Vec<f64>,
    pub zeta: Vec<f64>,
    /// `E[(ΔX°)²]` and `E[(ΔX♮)²]` per step
    pub cont_var: Vec<f64>,
    pub jump_var: Vec<f64>,
}

/// Closed-form characteristics of a driver.
pub fn characteristics(d: &DriverSpec) -> Characteristics {
    let k = d.steps();
    let mut c_cum = Vec::with_capacity(k + 1);
    c_cum.push(0.0);
    let mut delta_c = Vec::with_capacity(k);
    let mut kernels = Vec::with_capacity(k);
    let mut c = Vec::with_capacity(k);
    let mut zeta = Vec::with_capacity(k);
    let mut cont_var = Vec::with_capacity(k);
    let mut jump_var = Vec::with_capacity(k);
    for j in 0..k {
        let vc = d.cont_law[j].second_moment();
        let vj = d.jump_law[j].second_moment();
        let dc = vc + vj;
        delta_c.push(dc);
        c_cum.push(c_cum[j] + dc);
        c.push(if dc > 0.0 { (vc / dc).sqrt() } else { 0.0 });
        let kern = StepKernel::from_law(&d.jump_law[j], dc);
        zeta.push(kern.zeta);
        kernels.push(kern);
        cont_var.push(vc);
        jump_var.push(vj);
    }
    Characteristics { c_cum, delta_c, kernels, c, zeta, cont_var, jump_var }
}

/// One joint outcome of all players at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub prob: f64,
    pub cont: Vec<f64>,
    pub jump: Vec<f64>,
    pub cont_idx: Vec<usize>,
    pub jump_idx: Vec<usize>,
}

/// Exact joint probability tree over the independent drivers of all players.
///
/// Node `n` at depth `j` has children `n * B_j + b` at depth `j + 1`, where
/// `b` enumerates the joint branches of step `j + 1`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub players: usize,
    pub steps: usize,
    /// joint branches per step
    pub branches: Vec<Vec<Branch>>,
    /// node probabilities per depth
    pub probs: Vec<Vec<f64>>,
    /// running `X°` per depth, laid out as `node * players + player`
    pub state_cont: Vec<Vec<f64>>,
    pub state_jump: Vec<Vec<f64>>,
    cont_len: Vec<usize>,
    jump_len: Vec<usize>,
}

impl ScenarioTree {
    pub fn nodes_at(&self, depth: usize) -> usize {
        self.probs[depth].len()
    }

    pub fn branching(&self, step: usize) -> usize {
        self.branches[step].len()
    }

    /// Node reached by following per-step joint branch indices from the root.
    pub fn node_of(&self, path: &[usize]) -> usize {
        path.iter().enumerate().fold(0, |n, (j, &b)| n * self.branching(j) + b)
    }

    /// Joint branch index of player atom indices at `step`, players in order.
    pub fn branch_of(&self, step: usize, atoms: &[(usize, usize)]) -> usize {
        let nj = self.jump_len[step];
        let local = self.cont_len[step] * nj;
        atoms.iter().fold(0, |b, &(c, j)| b * local + c * nj + j)
    }
}

fn joint_branches(d: &DriverSpec, step: usize, players: usize) -> Vec<Branch> {
    let cl = d.cont_law[step].atoms();
    let jl = d.jump_law[step].atoms();
    let local = cl.len() * jl.len();
    let total = local.pow(players as u32);
    let mut out = Vec::with_capacity(total);
    let mut factors = vec![0.0; players];
    for b in 0..total {
        let mut rem = b;
        let mut digits = vec![0usize; players];
        for i in (0..players).rev() {
            digits[i] = rem % local;
            rem /= local;
        }
        let cont_idx: Vec<usize> = digits.iter().map(|&g| g / jl.len()).collect();
        let jump_idx: Vec<usize> = digits.iter().map(|&g| g % jl.len()).collect();
        for i in 0..players {
            factors[i] = cl[cont_idx[i]].prob * jl[jump_idx[i]].prob;
        }
        // product in sorted order so that relabelling players leaves it unchanged
        let mut f = factors.clone();
        f.sort_unstable_by(f64::total_cmp);
        let prob = f.iter().product();
        out.push(Branch {
            prob,
            cont: cont_idx.iter().map(|&c| cl[c].mark).collect(),
            jump: jump_idx.iter().map(|&c| jl[c].mark).collect(),
            cont_idx,
            jump_idx,
        });
    }
    out
}

/// Exact tree for `players` independent copies of `d`.
pub fn build_tree(d: &DriverSpec, players: usize, max_nodes: usize) -> Result<ScenarioTree> {
    if players == 0 {
        return Err(invalid("at least one player required"));
    }
    let mut leaves: f64 = 1.0;
    let mut exact: Option<u128> = Some(1);
    for j in 0..d.steps() {
        let b = (d.branching(j) as f64).powi(players as i32);
        leaves *= b;
        exact = exact.and_then(|e| {
            (d.branching(j) as u128).checked_pow(players as u32).and_then(|bb| e.checked_mul(bb))
        });
    }
    let fits = match exact {
        Some(e) => e <= max_nodes as u128,
        None => false,
    };
    if !fits {
        let required = exact.map_or_else(|| format!("{leaves:e}"), |e| e.to_string());
        return Err(Error::Capacity {
            what: format!("scenario tree ({} players, {} steps)", players, d.steps()),
            required: format!("{required} leaves"),
            budget: max_nodes.to_string(),
        });
    }
    let k = d.steps();
    let mut branches = Vec::with_capacity(k);
    let mut probs = vec![vec![1.0]];
    let mut state_cont = vec![vec![0.0; players]];
    let mut state_jump = vec![vec![0.0; players]];
    for j in 0..k {
        let br = joint_branches(d, j, players);
        let parents = probs[j].len();
        let nb = br.len();
        let mut p = Vec::with_capacity(parents * nb);
        let mut sc = Vec::with_capacity(parents * nb * players);
        let mut sj = Vec::with_capacity(parents * nb * players);
        for n in 0..parents {
            for b in &br {
                p.push(probs[j][n] * b.prob);
                for i in 0..players {
                    sc.push(state_cont[j][n * players + i] + b.cont[i]);
                    sj.push(state_jump[j][n * players + i] + b.jump[i]);
                }
            }
        }
        probs.push(p);
        state_cont.push(sc);
        state_jump.push(sj);
        branches.push(br);
    }
    Ok(ScenarioTree {
        players,
        steps: k,
        branches,
        probs,
        state_cont,
        state_jump,
        cont_len: d.cont_law.iter().map(|l| l.len()).collect(),
        jump_len: d.jump_law.iter().map(|l| l.len()).collect(),
    })
}

/// Monte Carlo paths of a driver.
///
/// Particle `p` reads its continuous increments from ChaCha stream `2p` and
/// its jump increments from stream `2p + 1`, one word per skeleton coin or
/// per inverse-CDF draw, in step order. Output depends only on
/// `(driver, n, seed)`.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    /// increments laid out as `p * steps + (j - 1)`
    pub cont_inc: Vec<f64>,
    pub jump_inc: Vec<f64>,
    pub cont_idx: Vec<u32>,
    pub jump_idx: Vec<u32>,
    /// running values laid out as `p * (steps + 1) + j`
    pub cont_state: Vec<f64>,
    pub jump_state: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn state(&self, p: usize, j: usize) -> f64 {
        let i = p * (self.steps + 1) + j;
        self.cont_state[i] + self.jump_state[i]
    }

    pub fn cont_at(&self, p: usize, j: usize) -> f64 {
        self.cont_state[p * (self.steps + 1) + j]
    }

    pub fn jump_at(&self, p: usize, j: usize) -> f64 {
        self.jump_state[p * (self.steps + 1) + j]
    }

    /// Increments of step `j` (1-based) for particle `p`.
    pub fn increment(&self, p: usize, j: usize) -> (f64, f64) {
        let i = p * self.steps + j - 1;
        (self.cont_inc[i], self.jump_inc[i])
    }

    pub fn atom_indices(&self, p: usize, j: usize) -> (usize, usize) {
        let i = p * self.steps + j - 1;
        (self.cont_idx[i] as usize, self.jump_idx[i] as usize)
    }
}

fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `n` i.i.d. driver paths, reproducible from `seed` and independent of the
/// rayon thread count.
pub fn sample_ensemble(d: &DriverSpec, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(invalid("ensemble needs at least one particle"));
    }
    let k = d.steps();
    let per: Vec<(Vec<f64>, Vec<f64>, Vec<u32>, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rc = ChaCha8Rng::seed_from_u64(seed);
            rc.set_stream(2 * p as u64);
            let mut rj = ChaCha8Rng::seed_from_u64(seed);
            rj.set_stream(2 * p as u64 + 1);
            let mut ci = Vec::with_capacity(k);
            let mut ji = Vec::with_capacity(k);
            let mut cv = Vec::with_capacity(k);
            let mut jv = Vec::with_capacity(k);
            for j in 0..k {
                let cl = &d.cont_law[j];
                let idx = match d.cont_sampler {
                    ContSampler::SignSum { refine } => {
                        (0..refine).filter(|_| rc.next_u64() >> 63 == 1).count()
                    }
                    ContSampler::InverseCdf => cl.index_for(unit_interval(rc.next_u64())),
                };
                let jl = &d.jump_law[j];
                let jdx = jl.index_for(unit_interval(rj.next_u64()));
                ci.push(idx as u32);
                ji.push(jdx as u32);
                cv.push(cl.atoms()[idx].mark);
                jv.push(jl.atoms()[jdx].mark);
            }
            (cv, jv, ci, ji)
        })
        .collect();
    let mut e = ParticleEnsemble {
        n,
        steps: k,
        seed,
        cont_inc: Vec::with_capacity(n * k),
        jump_inc: Vec::with_capacity(n * k),
        cont_idx: Vec::with_capacity(n * k),
        jump_idx: Vec::with_capacity(n * k),
        cont_state: Vec::with_capacity(n * (k + 1)),
        jump_state: Vec::with_capacity(n * (k + 1)),
    };
    for (cv, jv, ci, ji) in per {
        let (mut xc, mut xj) = (0.0, 0.0);
        e.cont_state.push(0.0);
        e.jump_state.push(0.0);
        for j in 0..k {
            xc += cv[j];
            xj += jv[j];
            e.cont_state.push(xc);
            e.jump_state.push(xj);
        }
        e.cont_inc.extend(cv);
        e.jump_inc.extend(jv);
        e.cont_idx.extend(ci);
        e.jump_idx.extend(ji);
    }
    Ok(e)
}
