//! Regression Monte Carlo backward pass on a particle cloud.
//!
//! Conditional expectations given the time-`t_s` state are least-squares
//! fits on the basis `1, x°, (x°)²` plus `x♮, (x♮)², x° x♮` when the driver
//! jumps. When the cloud is partitioned into worlds and the data couple the
//! players (through the law argument or the terminal condition), the world
//! means of `X̄_s` and `X̄_s²` are added as features. A McKean-Vlasov
//! reference can be fitted on the same partitioned basis so that it shares
//! the system's design matrix.

use super::{integrand_from_marks, kernel_positions, SolutionProcesses};
use crate::calculus::{gamma, GenArgs, LawSummary, StandardData};
use crate::drivers::ParticleEnsemble;
use crate::error::{invalid, Result};
use crate::numeric::{canonical_sum, LeastSquares};
use rayon::prelude::*;

/// How a cloud is read: particles `w * law_group .. (w + 1) * law_group`
/// share one law argument, and world features are taken over blocks of
/// `feature_group` particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct CloudView {
    pub law_group: usize,
    pub feature_group: usize,
    pub system: bool,
}

struct Basis {
    jumps: bool,
    world: bool,
}

impl Basis {
    fn new(sd: &StandardData, view: &CloudView) -> Self {
        let coupled = sd.generator.uses_law() || (view.system && sd.terminal.is_coupled());
        Self { jumps: sd.driver.has_jumps(), world: view.feature_group > 1 && coupled }
    }

    fn width(&self) -> usize {
        2 + if self.jumps { 3 } else { 0 } + if self.world { 2 } else { 0 }
    }

    fn row(&self, ens: &ParticleEnsemble, p: usize, depth: usize, world: (f64, f64), out: &mut Vec<f64>) {
        let xc = ens.cont_at(p, depth);
        out.push(xc);
        out.push(xc * xc);
        if self.jumps {
            let xj = ens.jump_at(p, depth);
            out.extend_from_slice(&[xj, xj * xj, xc * xj]);
        }
        if self.world {
            out.extend_from_slice(&[world.0, world.1]);
        }
    }
}

/// Human-readable regression basis.
pub(super) fn basis_description(sd: &StandardData, view: &CloudView) -> String {
    let b = Basis::new(sd, view);
    let mut s = String::from("least squares on 1, x°, (x°)²");
    if b.jumps {
        s.push_str(", x♮, (x♮)², x°x♮");
    }
    if b.world {
        s.push_str(&format!(", world means of X̄ and X̄² over blocks of {}", view.feature_group));
    }
    s
}

fn group_means(v: &[f64], group: usize) -> Vec<f64> {
    v.chunks(group).map(|c| canonical_sum(&mut c.to_vec()) / group as f64).collect()
}

fn terminal(ens: &ParticleEnsemble, sd: &StandardData, view: &CloudView) -> Vec<f64> {
    let (group, system) = (view.law_group, view.system);
    let k = ens.steps;
    if !system || group == 1 {
        return (0..ens.n).map(|p| sd.terminal.mv(ens.cont_at(p, k), ens.jump_at(p, k))).collect();
    }
    let totals: Vec<f64> = (0..ens.n).map(|p| ens.state(p, k)).collect();
    let mut out = Vec::with_capacity(ens.n);
    for (w, world) in totals.chunks(group).enumerate() {
        let mut sorted = world.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        for (i, x) in world.iter().enumerate() {
            // dropping one copy of the own value from the sorted world gives
            // the sorted list of the others
            let skip = sorted.partition_point(|v| v.total_cmp(x).is_lt());
            let m = sorted.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, v)| v).sum::<f64>() / (group - 1) as f64;
            let p = w * group + i;
            out.push(sd.terminal.mean_field(ens.cont_at(p, k), ens.jump_at(p, k), m, group));
        }
    }
    out
}

fn generator_step(ens: &ParticleEnsemble, sd: &StandardData, sol: &SolutionProcesses, group: usize, s: usize) -> Result<Vec<f64>> {
    let ch = &sd.characteristics;
    let t = sd.times()[s + 1];
    let kern = &ch.kernels[s];
    // players of one world are exchangeable, so their law must not depend on
    // the order; a pooled law is over particles whose order is fixed
    let summary = if group == ens.n { LawSummary::uniform_in_order } else { LawSummary::uniform };
    let laws: Vec<LawSummary> = sol.y[s + 1].chunks(group).map(summary).collect();
    (0..ens.n)
        .into_par_iter()
        .map(|p| {
            let gm = gamma(sol.u_at(s, p), &sd.theta, kern, t)?;
            Ok(sd.generator.eval(&GenArgs { t, y: sol.y[s + 1][p], zc: sol.z[s][p] * ch.c[s], gamma: gm, law: laws[p / group] }))
        })
        .collect()
}

pub(super) fn pass(ens: &ParticleEnsemble, sd: &StandardData, prev: &SolutionProcesses, view: &CloudView) -> Result<SolutionProcesses> {
    let n = ens.n;
    let (group, fg) = (view.law_group, view.feature_group);
    if group == 0 || fg == 0 || !n.is_multiple_of(group) || !n.is_multiple_of(fg) || prev.points_at(0) != n {
        return Err(invalid("iterate does not match the particle cloud"));
    }
    let k = ens.steps;
    let ch = &sd.characteristics;
    let basis = Basis::new(sd, view);
    let width = basis.width();
    let mut out = SolutionProcesses::zero(prev.layout.clone(), &prev.u_stride);
    out.y[k] = terminal(ens, sd, view);
    for s in (0..k).rev() {
        let gen = generator_step(ens, sd, prev, group, s)?;
        let dc = ch.delta_c[s];
        let target: Vec<f64> = (0..n).map(|p| out.y[s + 1][p] + gen[p] * dc).collect();
        let law = &sd.driver.jump_law[s];
        let kern = &ch.kernels[s];
        let cont_var = ch.cont_var[s];
        let dx: Vec<f64> = (0..n).map(|p| ens.increment(p, s + 1).0).collect();
        let marks: Vec<usize> = (0..n).map(|p| ens.atom_indices(p, s + 1).1).collect();

        let (wx, wx2) = if basis.world {
            let st: Vec<f64> = (0..n).map(|p| ens.state(p, s)).collect();
            let sq: Vec<f64> = st.iter().map(|x| x * x).collect();
            (group_means(&st, fg), group_means(&sq, fg))
        } else {
            (Vec::new(), Vec::new())
        };
        let mut feats = Vec::with_capacity(n * width);
        for p in 0..n {
            let w = p / fg;
            let world = (wx.get(w).copied().unwrap_or(0.0), wx2.get(w).copied().unwrap_or(0.0));
            basis.row(ens, p, s, world, &mut feats);
        }

        // the mean first, then the integrands from the centered target: the
        // products r·ΔX° and r·1{mark = a} have far less spread than T·ΔX°
        let mean_fit = LeastSquares::fit(&feats, width, &[&target]);
        let m: Vec<f64> = (0..n).map(|p| mean_fit.predict(0, &feats[p * width..(p + 1) * width])).collect();
        let r: Vec<f64> = (0..n).map(|p| target[p] - m[p]).collect();
        let with_z = cont_var > 0.0;
        let with_marks = law.len() > 1;
        let mut cols: Vec<Vec<f64>> = Vec::new();
        if with_z {
            cols.push((0..n).map(|p| r[p] * dx[p]).collect());
        }
        if with_marks {
            for a in 0..law.len() {
                cols.push((0..n).map(|p| if marks[p] == a { r[p] } else { 0.0 }).collect());
            }
        }
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let fit = (!refs.is_empty()).then(|| LeastSquares::fit(&feats, width, &refs));
        let pos = kernel_positions(law, kern);
        let mark_base = if with_z { 1 } else { 0 };

        let rows: Vec<(f64, Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let x = &feats[p * width..(p + 1) * width];
                let z = match &fit {
                    Some(f) if with_z => f.predict(0, x) / cont_var,
                    _ => 0.0,
                };
                let u = match &fit {
                    Some(f) if with_marks => {
                        let g: Vec<f64> = (0..law.len()).map(|a| f.predict(mark_base + a, x) / law.atoms()[a].prob).collect();
                        integrand_from_marks(&g, law, kern)
                    }
                    _ => vec![0.0; kern.len()],
                };
                let uh = crate::calculus::hat(&u, kern);
                let jump = pos[marks[p]].map_or(0.0, |i| u[i]) - uh;
                (z, u, r[p] - z * dx[p] - jump)
            })
            .collect();
        let w = out.u_stride[s];
        for (p, (z, u, dm)) in rows.into_iter().enumerate() {
            out.y[s][p] = m[p];
            out.z[s][p] = z;
            out.u[s][p * w..(p + 1) * w].copy_from_slice(&u);
            out.dm[s][p] = dm;
        }
        out.degenerate[s] = !with_z;
        out.gen[s] = gen;
    }
    out.refresh_law();
    Ok(out)
}

pub(super) fn residual(ens: &ParticleEnsemble, sd: &StandardData, sol: &SolutionProcesses, view: &CloudView) -> Result<f64> {
    let group = view.law_group;
    let ch = &sd.characteristics;
    let mut worst = 0.0f64;
    for s in 0..ens.steps {
        let gen = generator_step(ens, sd, sol, group, s)?;
        let kern = &ch.kernels[s];
        let pos = kernel_positions(&sd.driver.jump_law[s], kern);
        let w = (0..ens.n)
            .into_par_iter()
            .map(|p| {
                let (dx, _) = ens.increment(p, s + 1);
                let mark = ens.atom_indices(p, s + 1).1;
                let u = sol.u_at(s, p);
                let jump = pos[mark].map_or(0.0, |i| u[i]) - crate::calculus::hat(u, kern);
                (sol.y[s][p] - sol.y[s + 1][p] - gen[p] * ch.delta_c[s] + sol.z[s][p] * dx + jump + sol.dm[s][p]).abs()
            })
            .reduce(|| 0.0, f64::max);
        worst = worst.max(w);
    }
    Ok(worst)
}
