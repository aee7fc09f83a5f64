//! Exact backward pass on the joint scenario tree.

use super::{martingale_decompose, SolutionProcesses};
use crate::calculus::{gamma, GenArgs, LawSummary, StandardData};
use crate::drivers::ScenarioTree;
use crate::error::{invalid, Result};
use crate::numeric::canonical_sum;
use rayon::prelude::*;

fn terminal(tree: &ScenarioTree, sd: &StandardData, player: usize) -> Vec<f64> {
    let np = tree.players;
    let k = tree.steps;
    let (sc, sj) = (&tree.state_cont[k], &tree.state_jump[k]);
    (0..tree.nodes_at(k))
        .map(|n| {
            let xc = sc[n * np + player];
            let xj = sj[n * np + player];
            if np == 1 {
                sd.terminal.mv(xc, xj)
            } else {
                let mut others: Vec<f64> = (0..np).filter(|&i| i != player).map(|i| sc[n * np + i] + sj[n * np + i]).collect();
                let m = canonical_sum(&mut others) / (np - 1) as f64;
                sd.terminal.mean_field(xc, xj, m, np)
            }
        })
        .collect()
}

/// Generator values of step `s` at the nodes of depth `s + 1`, evaluated
/// along `sols`, one vector per player.
fn generator_step(tree: &ScenarioTree, sd: &StandardData, sols: &[SolutionProcesses], pooled: bool, s: usize) -> Result<Vec<Vec<f64>>> {
    let ch = &sd.characteristics;
    let t = sd.times()[s + 1];
    let kern = &ch.kernels[s];
    let bsz = tree.branching(s);
    let np = sols.len();
    let parents = tree.nodes_at(s);
    let mut gam = Vec::with_capacity(np);
    for sol in sols {
        let g: Result<Vec<f64>> = (0..parents).into_par_iter().map(|n| gamma(sol.u_at(s, n), &sd.theta, kern, t)).collect();
        gam.push(g?);
    }
    let nodes = tree.nodes_at(s + 1);
    let out = (0..np)
        .map(|i| {
            (0..nodes)
                .into_par_iter()
                .map(|n| {
                    let par = n / bsz;
                    let law = if pooled {
                        sols[0].law[s + 1]
                    } else {
                        let ys: Vec<f64> = sols.iter().map(|p| p.y[s + 1][n]).collect();
                        LawSummary::uniform(&ys)
                    };
                    sd.generator.eval(&GenArgs { t, y: sols[i].y[s + 1][n], zc: sols[i].z[s][par] * ch.c[s], gamma: gam[i][par], law })
                })
                .collect()
        })
        .collect();
    Ok(out)
}

pub(super) fn pass(tree: &ScenarioTree, sd: &StandardData, prev: &[SolutionProcesses], pooled: bool) -> Result<Vec<SolutionProcesses>> {
    let np = tree.players;
    if prev.len() != np || (pooled && np != 1) {
        return Err(invalid("one iterate per player required"));
    }
    let k = tree.steps;
    let ch = &sd.characteristics;
    let mut out: Vec<SolutionProcesses> = prev.iter().map(|p| SolutionProcesses::zero(p.layout.clone(), &p.u_stride)).collect();
    for (i, o) in out.iter_mut().enumerate() {
        o.y[k] = terminal(tree, sd, i);
    }
    for s in (0..k).rev() {
        let gen = generator_step(tree, sd, prev, pooled, s)?;
        let br = &tree.branches[s];
        let bsz = br.len();
        let probs: Vec<f64> = br.iter().map(|b| b.prob).collect();
        let dc = ch.delta_c[s];
        for i in 0..np {
            let dx: Vec<f64> = br.iter().map(|b| b.cont[i]).collect();
            let marks: Vec<usize> = br.iter().map(|b| b.jump_idx[i]).collect();
            let law = &sd.driver.jump_law[s];
            let kern = &ch.kernels[s];
            let ynext = &out[i].y[s + 1];
            let g = &gen[i];
            let dec: Result<Vec<_>> = (0..tree.nodes_at(s))
                .into_par_iter()
                .map(|n| {
                    let target: Vec<f64> = (0..bsz).map(|b| ynext[n * bsz + b] + g[n * bsz + b] * dc).collect();
                    martingale_decompose(&target, &probs, &dx, &marks, law, kern)
                })
                .collect();
            let o = &mut out[i];
            let w = o.u_stride[s];
            for (n, d) in dec?.into_iter().enumerate() {
                o.y[s][n] = d.mean;
                o.z[s][n] = d.z;
                o.u[s][n * w..(n + 1) * w].copy_from_slice(&d.u);
                o.dm[s][n * bsz..(n + 1) * bsz].copy_from_slice(&d.residual);
                o.degenerate[s] |= d.degenerate;
            }
            o.gen[s] = gen[i].clone();
        }
    }
    for o in &mut out {
        o.refresh_law();
    }
    Ok(out)
}

pub(super) fn residual(tree: &ScenarioTree, sd: &StandardData, sols: &[SolutionProcesses], pooled: bool) -> Result<f64> {
    let ch = &sd.characteristics;
    let k = tree.steps;
    let mut worst = 0.0f64;
    for s in 0..k {
        let gen = generator_step(tree, sd, sols, pooled, s)?;
        let br = &tree.branches[s];
        let bsz = br.len();
        let kern = &ch.kernels[s];
        let pos = super::kernel_positions(&sd.driver.jump_law[s], kern);
        for (i, sol) in sols.iter().enumerate() {
            let w = (0..tree.nodes_at(s + 1))
                .into_par_iter()
                .map(|n| {
                    let par = n / bsz;
                    let b = &br[n % bsz];
                    let u = sol.u_at(s, par);
                    let uh = crate::calculus::hat(u, kern);
                    let jump = pos[b.jump_idx[i]].map_or(0.0, |a| u[a]) - uh;
                    (sol.y[s][par] - sol.y[s + 1][n] - gen[i][n] * ch.delta_c[s] + sol.z[s][par] * b.cont[i] + jump + sol.dm[s][n]).abs()
                })
                .reduce(|| 0.0, f64::max);
            worst = worst.max(w);
        }
    }
    Ok(worst)
}
