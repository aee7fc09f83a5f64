//! Backward solvers: the stepwise orthogonal decomposition of martingale
//! increments, one Picard pass on a scenario tree or a particle cloud, and
//! the Picard loop with its contraction diagnostics.

mod ensemble;
mod tree;

use crate::calculus::{contraction_constant, star_norm_sq, LawSummary, StandardData, StarNorm};
use crate::drivers::{build_tree, sample_ensemble, IncrementLaw, ParticleEnsemble, ScenarioTree, StepKernel};
use crate::error::{invalid, Error, Result};
use crate::numeric::{canonical_sum, par_mean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use ensemble::CloudView;

/// Default leaf budget of the tree backend.
pub const DEFAULT_MAX_NODES: usize = 1 << 22;
/// Default Picard tolerances and iteration cap.
pub const TREE_TOL: f64 = 1e-10;
pub const ENSEMBLE_TOL: f64 = 1e-4;
pub const Q_MAX: usize = 60;

/// Where conditional expectations are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Backend {
    /// Exact backward induction on the joint scenario tree.
    Tree { max_nodes: usize },
    /// Least-squares regression on `particles` simulated paths.
    Ensemble { particles: usize, seed: u64 },
}

impl Backend {
    pub fn tree() -> Self {
        Self::Tree { max_nodes: DEFAULT_MAX_NODES }
    }

    pub fn default_tol(&self) -> f64 {
        match self {
            Self::Tree { .. } => TREE_TOL,
            Self::Ensemble { .. } => ENSEMBLE_TOL,
        }
    }
}

/// Index set and probabilities of a solution's sample points.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// node probabilities per depth; children of node `n` at depth `j` are
    /// `n * branching[j] + b`
    Tree { probs: Arc<Vec<Vec<f64>>>, branching: Arc<Vec<usize>> },
    /// equally weighted paths
    Particles { n: usize },
}

/// Discrete solution `(Y, Z, U, M)` of one equation.
///
/// `y[j]` holds `Y_{t_j}` at the points of depth `j`. Step `s` (0-based,
/// the increment over `(t_s, t_{s+1}]`) stores `z[s]` and `u[s]` at depth
/// `s` (predictable), `dm[s]` and `gen[s]` at depth `s + 1`. `u[s]` is flat
/// with `u_stride[s]` kernel atoms per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionProcesses {
    pub layout: Layout,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub u_stride: Vec<usize>,
    pub dm: Vec<Vec<f64>>,
    /// generator value used on each step
    pub gen: Vec<Vec<f64>>,
    pub law: Vec<LawSummary>,
    /// steps where `ΔX°` has no variance and `Z` was set to zero
    pub degenerate: Vec<bool>,
}

impl SolutionProcesses {
    /// The zero iterate, terminal value included.
    pub fn zero(layout: Layout, strides: &[usize]) -> Self {
        let k = strides.len();
        let pts = |d: usize| match &layout {
            Layout::Tree { probs, .. } => probs[d].len(),
            Layout::Particles { n } => *n,
        };
        Self {
            y: (0..=k).map(|d| vec![0.0; pts(d)]).collect(),
            z: (0..k).map(|s| vec![0.0; pts(s)]).collect(),
            u: (0..k).map(|s| vec![0.0; pts(s) * strides[s]]).collect(),
            u_stride: strides.to_vec(),
            dm: (0..k).map(|s| vec![0.0; pts(s + 1)]).collect(),
            gen: (0..k).map(|s| vec![0.0; pts(s + 1)]).collect(),
            law: vec![LawSummary::default(); k + 1],
            degenerate: vec![false; k],
            layout,
        }
    }

    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn points_at(&self, depth: usize) -> usize {
        self.y[depth].len()
    }

    /// Ancestor at depth `depth - 1` of point `n` at `depth`.
    pub fn parent(&self, depth: usize, n: usize) -> usize {
        match &self.layout {
            Layout::Tree { branching, .. } => n / branching[depth - 1],
            Layout::Particles { .. } => n,
        }
    }

    /// Jump integrand of step `s` at point `n`.
    pub fn u_at(&self, s: usize, n: usize) -> &[f64] {
        let w = self.u_stride[s];
        &self.u[s][n * w..(n + 1) * w]
    }

    /// `E[g(n)]` over the points of `depth`.
    pub fn expect_at<F>(&self, depth: usize, g: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        let m = self.points_at(depth);
        match &self.layout {
            Layout::Tree { probs, .. } => {
                let p = &probs[depth];
                let mut terms: Vec<f64> = (0..m).into_par_iter().map(|n| p[n] * g(n)).collect();
                canonical_sum(&mut terms)
            }
            Layout::Particles { .. } => par_mean(m, g),
        }
    }

    /// `E[max_j g(j, Y_{t_j})]` along paths.
    pub fn expect_sup<F>(&self, g: F) -> f64
    where
        F: Fn(usize, f64) -> f64 + Sync + Send,
    {
        let k = self.steps();
        match &self.layout {
            Layout::Tree { .. } => {
                let mut run = vec![g(0, self.y[0][0])];
                for j in 1..=k {
                    run = (0..self.points_at(j))
                        .into_par_iter()
                        .map(|n| run[self.parent(j, n)].max(g(j, self.y[j][n])))
                        .collect();
                }
                self.expect_at(k, |n| run[n])
            }
            Layout::Particles { n } => par_mean(*n, |p| (0..=k).map(|j| g(j, self.y[j][p])).fold(f64::NEG_INFINITY, f64::max)),
        }
    }

    fn same_shape(&self, o: &Self) -> bool {
        self.layout == o.layout
            && self.u_stride == o.u_stride
            && self.y.iter().zip(&o.y).all(|(a, b)| a.len() == b.len())
            && self.y.len() == o.y.len()
    }

    /// Componentwise `self − other`.
    pub fn diff(&self, o: &Self) -> Result<Self> {
        if !self.same_shape(o) {
            return Err(invalid("solutions live on different layouts"));
        }
        let sub = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
        };
        let mut d = Self {
            layout: self.layout.clone(),
            y: sub(&self.y, &o.y),
            z: sub(&self.z, &o.z),
            u: sub(&self.u, &o.u),
            u_stride: self.u_stride.clone(),
            dm: sub(&self.dm, &o.dm),
            gen: sub(&self.gen, &o.gen),
            law: Vec::new(),
            degenerate: self.degenerate.iter().zip(&o.degenerate).map(|(a, b)| *a || *b).collect(),
        };
        d.refresh_law();
        Ok(d)
    }

    /// Recompute the per-time law summaries from `y`.
    pub fn refresh_law(&mut self) {
        self.law = (0..self.y.len())
            .map(|j| match &self.layout {
                Layout::Tree { probs, .. } => LawSummary::weighted(&self.y[j], &probs[j]),
                Layout::Particles { .. } => LawSummary::uniform_in_order(&self.y[j]),
            })
            .collect();
    }

    pub fn is_finite(&self) -> bool {
        [&self.y, &self.z, &self.u, &self.dm, &self.gen].iter().all(|v| v.iter().all(|r| r.iter().all(|x| x.is_finite())))
    }

    /// Particles `idx` of a particle solution, in that order.
    pub fn select_particles(&self, idx: &[usize]) -> Result<Self> {
        if !matches!(self.layout, Layout::Particles { .. }) {
            return Err(invalid("selection needs a particle layout"));
        }
        let pick = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { v.iter().map(|r| idx.iter().map(|&p| r[p]).collect()).collect() };
        let pick_u: Vec<Vec<f64>> = self
            .u
            .iter()
            .zip(&self.u_stride)
            .map(|(r, &w)| idx.iter().flat_map(|&p| r[p * w..(p + 1) * w].iter().copied()).collect())
            .collect();
        let mut s = Self {
            layout: Layout::Particles { n: idx.len() },
            y: pick(&self.y),
            z: pick(&self.z),
            u: pick_u,
            u_stride: self.u_stride.clone(),
            dm: pick(&self.dm),
            gen: pick(&self.gen),
            law: Vec::new(),
            degenerate: self.degenerate.clone(),
        };
        s.refresh_law();
        Ok(s)
    }
}

/// Result of [`martingale_decompose`] at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// conditional mean removed before projecting
    pub mean: f64,
    pub z: f64,
    /// one value per kernel atom
    pub u: Vec<f64>,
    /// orthogonal remainder per outcome
    pub residual: Vec<f64>,
    pub degenerate: bool,
}

/// Position in the kernel of every atom of a jump law, `None` for the mark 0.
pub(crate) fn kernel_positions(law: &IncrementLaw, kernel: &StepKernel) -> Vec<Option<usize>> {
    let mut pos = vec![None; law.len()];
    for (i, &a) in kernel.law_index.iter().enumerate() {
        pos[a] = Some(i);
    }
    pos
}

/// `U` from the centered conditional means `g(x) = E[v | mark = x]`.
pub(crate) fn integrand_from_marks(g: &[f64], law: &IncrementLaw, kernel: &StepKernel) -> Vec<f64> {
    let base = law.atoms().iter().position(|a| a.mark == 0.0).map_or(0.0, |i| g[i]);
    kernel.law_index.iter().map(|&a| g[a] - base).collect()
}

/// Projection of a payoff over the outcomes of one step onto `ΔX°` and the
/// compensated jump integrals of one player.
///
/// `probs` are the conditional outcome probabilities, `dx` the player's
/// continuous increments and `marks` the index of the player's jump atom in
/// `jump_law`.
pub fn martingale_decompose(
    payoff: &[f64],
    probs: &[f64],
    dx: &[f64],
    marks: &[usize],
    jump_law: &IncrementLaw,
    kernel: &StepKernel,
) -> Result<Decomposition> {
    let m = payoff.len();
    if probs.len() != m || dx.len() != m || marks.len() != m {
        return Err(invalid("payoff, probabilities, increments and marks must have equal length"));
    }
    if marks.iter().any(|&a| a >= jump_law.len()) {
        return Err(invalid("mark index outside the jump law"));
    }
    let esum = |f: &dyn Fn(usize) -> f64| {
        let mut t: Vec<f64> = (0..m).map(|b| probs[b] * f(b)).collect();
        canonical_sum(&mut t)
    };
    let mean = esum(&|b| payoff[b]);
    let v: Vec<f64> = payoff.iter().map(|x| x - mean).collect();
    let exx = esum(&|b| dx[b] * dx[b]);
    let degenerate = !(exx > 0.0);
    let z = if degenerate { 0.0 } else { esum(&|b| v[b] * dx[b]) / exx };
    let g: Vec<f64> = (0..jump_law.len())
        .map(|a| {
            let pa = esum(&|b| if marks[b] == a { 1.0 } else { 0.0 });
            if pa > 0.0 {
                esum(&|b| if marks[b] == a { v[b] } else { 0.0 }) / pa
            } else {
                0.0
            }
        })
        .collect();
    let u = integrand_from_marks(&g, jump_law, kernel);
    let pos = kernel_positions(jump_law, kernel);
    let uh = crate::calculus::hat(&u, kernel);
    let residual = (0..m)
        .map(|b| {
            let jump = pos[marks[b]].map_or(0.0, |i| u[i]) - uh;
            v[b] - z * dx[b] - jump
        })
        .collect();
    Ok(Decomposition { mean, z, u, residual, degenerate })
}

/// Iteration record of a Picard run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardState {
    /// number of passes performed
    pub q: usize,
    /// `δ_q = ‖S^{(q)} − S^{(q−1)}‖²_⋆`, entry `q − 1`
    pub deltas: Vec<f64>,
    /// `2 M̃^Φ(β̂)`
    pub rate_bound: f64,
    /// `‖S^{(1)}‖²_⋆`
    pub first_norm: f64,
    pub converged: bool,
    consecutive_growth: usize,
}

impl PicardState {
    fn new(rate_bound: f64) -> Self {
        Self { q: 0, deltas: Vec::new(), rate_bound, first_norm: 0.0, converged: false, consecutive_growth: 0 }
    }

    /// `δ_{q+1} / δ_q` for consecutive recorded passes.
    pub fn ratios(&self) -> Vec<f64> {
        self.deltas.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[derive(Debug, Clone)]
enum Space {
    Tree(Arc<ScenarioTree>),
    Cloud { ens: Arc<ParticleEnsemble>, view: CloudView },
}

/// One equation or system bound to a sample space.
///
/// A McKean-Vlasov problem has one slot. A system on a tree has one slot per
/// player on the joint tree; a system on a particle cloud has one slot in
/// which particle `w * N + i` is player `i` of world `w`.
#[derive(Debug, Clone)]
pub struct Instance<'a> {
    pub sd: &'a StandardData,
    space: Space,
    players: usize,
    /// law argument is the law of the slot itself rather than an empirical measure
    pooled: bool,
}

impl<'a> Instance<'a> {
    pub fn mckean_vlasov(sd: &'a StandardData, backend: &Backend) -> Result<Self> {
        match *backend {
            Backend::Tree { max_nodes } => Ok(Self { sd, space: Space::Tree(Arc::new(build_tree(&sd.driver, 1, max_nodes)?)), players: 1, pooled: true }),
            Backend::Ensemble { particles, seed } => Ok(Self::mv_on_cloud(sd, Arc::new(sample_ensemble(&sd.driver, particles, seed)?))),
        }
    }

    pub fn mean_field(sd: &'a StandardData, n: usize, backend: &Backend) -> Result<Self> {
        if n == 0 {
            return Err(invalid("at least one player required"));
        }
        match *backend {
            Backend::Tree { max_nodes } => Ok(Self { sd, space: Space::Tree(Arc::new(build_tree(&sd.driver, n, max_nodes)?)), players: n, pooled: false }),
            Backend::Ensemble { particles, seed } => {
                if n > particles {
                    return Err(Error::Capacity {
                        what: format!("{n}-player ensemble"),
                        required: format!("{n} particles"),
                        budget: particles.to_string(),
                    });
                }
                let worlds = particles / n;
                Self::system_on_cloud(sd, Arc::new(sample_ensemble(&sd.driver, worlds * n, seed)?), n)
            }
        }
    }

    /// McKean-Vlasov equation on a given cloud, law pooled over all particles.
    pub fn mv_on_cloud(sd: &'a StandardData, ens: Arc<ParticleEnsemble>) -> Self {
        let view = CloudView { law_group: ens.n, feature_group: 1, system: false };
        Self { sd, space: Space::Cloud { ens, view }, players: 1, pooled: true }
    }

    /// McKean-Vlasov equation on a cloud read as worlds of `n` particles:
    /// the law stays pooled, but the regression basis carries the same world
    /// features as the `n`-player system on that cloud.
    pub fn mv_on_partitioned_cloud(sd: &'a StandardData, ens: Arc<ParticleEnsemble>, n: usize) -> Result<Self> {
        if n == 0 || !ens.n.is_multiple_of(n) {
            return Err(invalid(format!("{} particles do not split into worlds of {n}", ens.n)));
        }
        let view = CloudView { law_group: ens.n, feature_group: n, system: false };
        Ok(Self { sd, space: Space::Cloud { ens, view }, players: 1, pooled: true })
    }

    /// `n`-player system on a given cloud whose size is a multiple of `n`.
    pub fn system_on_cloud(sd: &'a StandardData, ens: Arc<ParticleEnsemble>, n: usize) -> Result<Self> {
        if n == 0 || !ens.n.is_multiple_of(n) {
            return Err(invalid(format!("{} particles do not split into worlds of {n}", ens.n)));
        }
        Ok(Self { sd, space: Space::Cloud { ens, view: CloudView { law_group: n, feature_group: n, system: true } }, players: n, pooled: false })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn is_tree(&self) -> bool {
        matches!(self.space, Space::Tree(_))
    }

    pub fn tree(&self) -> Option<&ScenarioTree> {
        match &self.space {
            Space::Tree(t) => Some(t),
            Space::Cloud { .. } => None,
        }
    }

    /// How conditional expectations are computed on this space.
    pub fn basis(&self) -> String {
        match &self.space {
            Space::Tree(_) => "exact conditional expectations on the scenario tree".to_string(),
            Space::Cloud { view, .. } => ensemble::basis_description(self.sd, view),
        }
    }

    pub fn ensemble(&self) -> Option<&ParticleEnsemble> {
        match &self.space {
            Space::Cloud { ens, .. } => Some(ens),
            Space::Tree(_) => None,
        }
    }

    fn layout(&self) -> Layout {
        match &self.space {
            Space::Tree(t) => Layout::Tree {
                probs: Arc::new(t.probs.clone()),
                branching: Arc::new((0..t.steps).map(|s| t.branching(s)).collect()),
            },
            Space::Cloud { ens, .. } => Layout::Particles { n: ens.n },
        }
    }

    /// Zero iterate, one entry per slot.
    pub fn zero(&self) -> Vec<SolutionProcesses> {
        let strides: Vec<usize> = self.sd.characteristics.kernels.iter().map(|k| k.len()).collect();
        let z = SolutionProcesses::zero(self.layout(), &strides);
        let slots = if self.is_tree() { self.players } else { 1 };
        vec![z; slots]
    }

    /// One explicit backward Picard pass.
    pub fn picard_pass(&self, prev: &[SolutionProcesses]) -> Result<Vec<SolutionProcesses>> {
        let out = match &self.space {
            Space::Tree(t) => tree::pass(t, self.sd, prev, self.pooled)?,
            Space::Cloud { ens, view } => vec![ensemble::pass(ens, self.sd, &prev[0], view)?],
        };
        if out.iter().any(|s| !s.is_finite()) {
            return Err(Error::Diagnostic("non-finite values in the Picard iterate".into()));
        }
        Ok(out)
    }

    /// Per-step BSDE defect with the generator evaluated at the solution.
    pub fn residual(&self, sols: &[SolutionProcesses]) -> Result<f64> {
        match &self.space {
            Space::Tree(t) => tree::residual(t, self.sd, sols, self.pooled),
            Space::Cloud { ens, view } => ensemble::residual(ens, self.sd, &sols[0], view),
        }
    }

    /// Weighted star-norm of each slot.
    pub fn star_norms(&self, sols: &[SolutionProcesses]) -> Result<Vec<StarNorm>> {
        sols.iter().map(|s| star_norm_sq(s, &self.sd.weights, &self.sd.characteristics, self.sd.beta_hat)).collect()
    }

    /// Player-averaged star-norm of `a − b`.
    pub fn distance_sq(&self, a: &[SolutionProcesses], b: &[SolutionProcesses]) -> Result<f64> {
        if a.len() != b.len() || a.is_empty() {
            return Err(invalid("slot counts differ"));
        }
        let mut total = 0.0;
        for (x, y) in a.iter().zip(b) {
            total += star_norm_sq(&x.diff(y)?, &self.sd.weights, &self.sd.characteristics, self.sd.beta_hat)?.total;
        }
        Ok(total / a.len() as f64)
    }

    /// Per point of the last depth, the terminal value of the martingale
    /// part `Σ (Z ΔX° + ΔJ)` of one slot, `ΔJ` the compensated jump term.
    pub fn martingale_terminal(&self, sol: &SolutionProcesses, player: usize) -> Vec<f64> {
        let k = sol.steps();
        let mut acc = vec![0.0; sol.points_at(0)];
        for s in 0..k {
            let inc = self.martingale_increment(sol, player, s);
            acc = (0..inc.len()).map(|n| acc[sol.parent(s + 1, n)] + inc[n]).collect();
        }
        acc
    }

    /// `Z ΔX° + ΔJ` of step `s` at the points of depth `s + 1`.
    pub fn martingale_increment(&self, sol: &SolutionProcesses, player: usize, s: usize) -> Vec<f64> {
        let law = &self.sd.driver.jump_law[s];
        let kern = &self.sd.characteristics.kernels[s];
        let pos = kernel_positions(law, kern);
        let m = sol.points_at(s + 1);
        (0..m)
            .map(|n| {
                let par = sol.parent(s + 1, n);
                let (dx, mark) = self.outcome(player, s, n);
                let u = sol.u_at(s, par);
                let uh = crate::calculus::hat(u, kern);
                sol.z[s][par] * dx + pos[mark].map_or(0.0, |i| u[i]) - uh
            })
            .collect()
    }

    /// Continuous increment and jump atom index of `player` on step `s` at
    /// point `n` of depth `s + 1`.
    fn outcome(&self, player: usize, s: usize, n: usize) -> (f64, usize) {
        match &self.space {
            Space::Tree(t) => {
                let b = &t.branches[s][n % t.branching(s)];
                (b.cont[player], b.jump_idx[player])
            }
            Space::Cloud { ens, .. } => {
                let (dc, _) = ens.increment(n, s + 1);
                (dc, ens.atom_indices(n, s + 1).1)
            }
        }
    }

    /// `E[|Σ(Z ΔX° + ΔJ)|²]` and `E[Σ (Z² c² + ⦀U⦀²) ΔC]` for one slot.
    pub fn bracket_identity(&self, sol: &SolutionProcesses, player: usize) -> Result<(f64, f64)> {
        let k = sol.steps();
        let ch = &self.sd.characteristics;
        let term = self.martingale_terminal(sol, player);
        let lhs = sol.expect_at(k, |n| term[n] * term[n]);
        let mut rhs = 0.0;
        for s in 0..k {
            let c2 = ch.c[s] * ch.c[s];
            let dc = ch.delta_c[s];
            let kern = &ch.kernels[s];
            rhs += sol.expect_at(s, |n| {
                let t = crate::calculus::tnorm_sq(sol.u_at(s, n), kern).unwrap_or(f64::NAN);
                (sol.z[s][n] * sol.z[s][n] * c2 + t) * dc
            });
        }
        Ok((lhs, rhs))
    }

    /// Split a cloud system slot into per-player solutions over worlds.
    pub fn split_players(&self, sols: &[SolutionProcesses]) -> Result<Vec<SolutionProcesses>> {
        match &self.space {
            Space::Tree(_) => Ok(sols.to_vec()),
            Space::Cloud { ens, view } => {
                let group = &view.law_group;
                let worlds = ens.n / group;
                (0..*group)
                    .map(|i| sols[0].select_particles(&(0..worlds).map(|w| w * group + i).collect::<Vec<_>>()))
                    .collect()
            }
        }
    }
}

/// Picard loop over an [`Instance`], resumable one pass at a time.
#[derive(Debug, Clone)]
pub struct PicardSolver<'a> {
    pub instance: Instance<'a>,
    pub current: Vec<SolutionProcesses>,
    pub state: PicardState,
    b7: bool,
}

impl<'a> PicardSolver<'a> {
    pub fn new(instance: Instance<'a>) -> Result<Self> {
        let m = contraction_constant(instance.sd.beta_hat, instance.sd.weights.phi)?;
        let current = instance.zero();
        Ok(Self { instance, current, state: PicardState::new(2.0 * m), b7: 3.0 * m < 1.0 })
    }

    /// One pass; returns `δ_q`.
    pub fn step(&mut self) -> Result<f64> {
        let next = self.instance.picard_pass(&self.current)?;
        let delta = self.instance.distance_sq(&next, &self.current)?;
        if !delta.is_finite() {
            return Err(Error::Diagnostic(format!("δ is not finite at q = {}", self.state.q + 1)));
        }
        self.current = next;
        let floor = self.noise_floor();
        let st = &mut self.state;
        st.q += 1;
        if st.q == 1 {
            st.first_norm = delta;
        }
        if let Some(&last) = st.deltas.last() {
            if delta > last && last > floor {
                st.consecutive_growth += 1;
            } else {
                st.consecutive_growth = 0;
            }
        }
        st.deltas.push(delta);
        if self.b7 && self.state.consecutive_growth >= 3 {
            return Err(Error::Diagnostic(format!(
                "Picard iteration does not contract: δ grew three times in a row up to q = {} although B7 holds",
                self.state.q
            )));
        }
        Ok(delta)
    }

    fn noise_floor(&self) -> f64 {
        1e-28 * (1.0 + self.state.first_norm)
    }

    /// Iterate until `δ_q < tol` or `q_max`.
    pub fn run(&mut self, tol: f64, q_max: usize) -> Result<()> {
        if !(tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        while self.state.q < q_max {
            if self.step()? < tol {
                self.state.converged = true;
                break;
            }
        }
        Ok(())
    }
}

/// One Picard pass of the McKean-Vlasov equation from `prev`.
pub fn picard_iterate_mv(sd: &StandardData, prev: &SolutionProcesses, backend: &Backend) -> Result<SolutionProcesses> {
    let inst = Instance::mckean_vlasov(sd, backend)?;
    Ok(inst.picard_pass(std::slice::from_ref(prev))?.remove(0))
}

pub fn solve_mckean_vlasov(sd: &StandardData, tol: f64, q_max: usize, backend: &Backend) -> Result<(SolutionProcesses, PicardState)> {
    let mut s = PicardSolver::new(Instance::mckean_vlasov(sd, backend)?)?;
    s.run(tol, q_max)?;
    Ok((s.current.remove(0), s.state))
}

/// Solutions of the `n`-player system, one per player.
pub fn solve_mean_field(sd: &StandardData, n: usize, tol: f64, q_max: usize, backend: &Backend) -> Result<(Vec<SolutionProcesses>, PicardState)> {
    let mut s = PicardSolver::new(Instance::mean_field(sd, n, backend)?)?;
    s.run(tol, q_max)?;
    let players = s.instance.split_players(&s.current)?;
    Ok((players, s.state))
}

/// Largest per-step defect of a McKean-Vlasov solution (one slot) or of a
/// system (one slot per player).
pub fn residual_check(sols: &[SolutionProcesses], sd: &StandardData, backend: &Backend) -> Result<f64> {
    let inst = if sols.len() == 1 { Instance::mckean_vlasov(sd, backend)? } else { Instance::mean_field(sd, sols.len(), backend)? };
    inst.residual(sols)
}

/// JSON-ready digest of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub backend: Backend,
    pub players: usize,
    pub y0: Vec<f64>,
    pub law: Vec<LawSummary>,
    pub deltas: Vec<f64>,
    pub rate_bound: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub degenerate_steps: Vec<usize>,
    pub basis: String,
}

impl SolveReport {
    pub fn new(inst: &Instance<'_>, backend: Backend, sols: &[SolutionProcesses], st: &PicardState) -> Result<Self> {
        let residual = inst.residual(sols)?;
        let y0 = sols.iter().map(|s| s.expect_at(0, |n| s.y[0][n])).collect();
        let basis = inst.basis();
        Ok(Self {
            backend,
            players: inst.players,
            y0,
            law: sols[0].law.clone(),
            deltas: st.deltas.clone(),
            rate_bound: st.rate_bound,
            iterations: st.q,
            converged: st.converged,
            residual,
            degenerate_steps: sols[0].degenerate.iter().enumerate().filter(|(_, d)| **d).map(|(s, _)| s + 1).collect(),
            basis,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
