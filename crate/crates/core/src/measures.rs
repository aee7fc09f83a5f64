//! Wasserstein-2 distances of finite-atom laws, the empirical coupling
//! bound, the dyadic-annulus sample-size construction and path distances.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Largest sample size accepted by the assignment solver.
pub const MAX_ASSIGNMENT: usize = 512;

/// Weighted atoms in `ℝ^d`, points stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() || weights.is_empty() {
            return Err(invalid("points and weights do not match the dimension"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(invalid("weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("weights sum to {total}")));
        }
        Ok(Self { dim, points, weights })
    }

    /// Equal weights on `points.len() / dim` samples.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        Self::new(dim, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn uniform_1d(points: &[f64]) -> Self {
        Self::uniform(1, points.to_vec()).expect("nonempty 1-d sample")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() <= 1e-12)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared `W₂` between two laws on the line via the quantile coupling.
fn w2_sq_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let mut xa: Vec<(f64, f64)> = a.points.iter().copied().zip(a.weights.iter().copied()).collect();
    let mut xb: Vec<(f64, f64)> = b.points.iter().copied().zip(b.weights.iter().copied()).collect();
    xa.sort_by(|p, q| p.0.total_cmp(&q.0));
    xb.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xa[0].1, xb[0].1);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        cost += m * (xa[i].0 - xb[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i == xa.len() {
                break;
            }
            ra += xa[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == xb.len() {
                break;
            }
            rb += xb[j].1;
        }
    }
    cost
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assignment[row] = column`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Squared `W₂` through the assignment problem; equal-size uniform samples.
fn w2_sq_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(a.point(i), b.point(j));
        }
    }
    let asg = assignment(&cost, n);
    asg.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
}

/// Squared `W₂`. In one dimension any atoms; otherwise equal-size uniform
/// samples of at most [`MAX_ASSIGNMENT`] points.
pub fn w2_sq(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim != b.dim {
        return Err(invalid(format!("dimension mismatch {} vs {}", a.dim, b.dim)));
    }
    if a.is_empty() || b.is_empty() {
        return Err(invalid("empty measure"));
    }
    if a.dim == 1 {
        return Ok(w2_sq_1d(a, b));
    }
    if a.len() != b.len() || !a.is_uniform() || !b.is_uniform() {
        return Err(invalid("in d > 1 both laws must be uniform samples of equal size"));
    }
    if a.len() > MAX_ASSIGNMENT {
        return Err(invalid(format!("assignment limited to {MAX_ASSIGNMENT} points, got {}", a.len())));
    }
    Ok(w2_sq_assignment(a, b))
}

/// `W₂` distance.
pub fn w2_exact(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    w2_sq(a, b).map(|v| v.max(0.0).sqrt())
}

/// Same as [`w2_sq`] on equal-size uniform samples but always through the
/// assignment solver, whatever the dimension.
pub fn w2_sq_by_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim != b.dim || a.len() != b.len() || !a.is_uniform() || !b.is_uniform() {
        return Err(invalid("assignment needs equal-size uniform samples"));
    }
    Ok(w2_sq_assignment(a, b))
}

/// `(1/N) Σ |x_i − y_i|²` for paired samples stored row-major.
pub fn coupling_bound(xs: &[f64], ys: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || xs.len() != ys.len() || !xs.len().is_multiple_of(dim) || xs.is_empty() {
        return Err(invalid("paired samples must have equal length"));
    }
    let n = xs.len() / dim;
    Ok((0..n).map(|i| sq_dist(&xs[i * dim..(i + 1) * dim], &ys[i * dim..(i + 1) * dim])).sum::<f64>() / n as f64)
}

/// Second moments and masses of a law on the dyadic annuli
/// `B_0 = (−1, 1]^d`, `B_m = (−2^m, 2^m]^d ∖ (−2^{m−1}, 2^{m−1}]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgMoments {
    pub m2: Vec<f64>,
    pub mass: Vec<f64>,
    /// contributions of points beyond `(−2^{m_max}, 2^{m_max}]^d`
    pub tail_m2: f64,
    pub tail_mass: f64,
}

impl FgMoments {
    /// Moments of a law supported in `B_0`.
    pub fn compact(m_max: usize) -> Self {
        let mut mass = vec![0.0; m_max + 1];
        mass[0] = 1.0;
        Self { m2: vec![0.0; m_max + 1], mass, tail_m2: 0.0, tail_mass: 0.0 }
    }

    /// `Σ_{m > l} M₂(m)` including the tail.
    pub fn tail_beyond(&self, l: usize) -> f64 {
        self.m2.iter().skip(l + 1).sum::<f64>() + self.tail_m2
    }
}

/// Index of the annulus containing `x`, if within `m_max`.
fn annulus(x: &[f64], m_max: usize) -> Option<usize> {
    let r = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let on_left = |m: usize| x.iter().any(|&v| v == -(2f64.powi(m as i32)));
    (0..=m_max).find(|&m| {
        let s = 2f64.powi(m as i32);
        r < s || (r == s && !on_left(m))
    })
}

pub fn fg_moments(law: &EmpiricalMeasure, m_max: usize) -> FgMoments {
    let mut m2 = vec![0.0; m_max + 1];
    let mut mass = vec![0.0; m_max + 1];
    let (mut tail_m2, mut tail_mass) = (0.0, 0.0);
    for i in 0..law.len() {
        let x = law.point(i);
        let w = law.weights[i];
        let n2: f64 = x.iter().map(|v| v * v).sum();
        match annulus(x, m_max) {
            Some(m) => {
                m2[m] += w * n2;
                mass[m] += w;
            }
            None => {
                tail_m2 += w * n2;
                tail_mass += w;
            }
        }
    }
    FgMoments { m2, mass, tail_m2, tail_mass }
}

/// Quantities of the explicit sample-size construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgReport {
    pub eps: f64,
    pub c_d: f64,
    pub r0: f64,
    pub dim: usize,
    pub eps1: f64,
    pub ell1: u32,
    pub eps2: f64,
    pub ell2: u32,
    pub n_eps: u64,
    pub moments: Vec<f64>,
}

/// `⌊x⌋` that treats values within 1e-9 relative of an integer as that
/// integer, so decimal inputs such as `ε = 0.1` land on the exact count.
fn robust_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

pub fn fg_sample_size(eps: f64, c_d: f64, r0: f64, moments: &FgMoments, dim: usize) -> Result<FgReport> {
    if !(eps > 0.0 && c_d > 0.0 && r0 > 0.0) || dim == 0 {
        return Err(invalid("eps, C_d, R0 must be positive and d >= 1"));
    }
    let eps1 = eps / (33.0 * c_d);
    let depth = moments.m2.len().saturating_sub(1).max(1);
    let ell1 = (1..=depth)
        .find(|&l| moments.tail_beyond(l) < eps1)
        .ok_or_else(|| Error::InsufficientMoments(format!("annulus tail never below ε1 = {eps1:e} up to depth {depth}")))?;
    let eps2 = eps / ((6.0 + 24.0 * ell1 as f64 * r0) * c_d);
    let mut ell2 = 1u32;
    while 4f64.powi(-(ell2 as i32)) / 3.0 >= eps2 {
        ell2 += 1;
    }
    let l1 = ell1 as f64;
    let inner = 2f64.powi(ell1 as i32 + 1) * l1 * r0.sqrt() + 1.0;
    let x = 9.0 * c_d * c_d * 2f64.powi(dim as i32 * ell2 as i32 + 2) * inner * inner / (eps * eps);
    let n_eps = robust_floor(x) as u64 + 1;
    Ok(FgReport { eps, c_d, r0, dim, eps1, ell1: ell1 as u32, eps2, ell2, n_eps, moments: moments.m2.clone() })
}

/// Truncated dyadic bound and an upper bound for what the truncation drops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgBound {
    /// truncated series, "up to C_d"
    pub value: f64,
    pub remainder: f64,
}

pub fn fg_bound(law: &EmpiricalMeasure, n: usize, c_d: f64, m_max: usize, l_max: usize) -> Result<FgBound> {
    if n == 0 {
        return Err(invalid("sample size must be positive"));
    }
    let mo = fg_moments(law, m_max);
    let d = law.dim as f64;
    let nn = n as f64;
    let mut value = 0.0;
    let mut remainder = 0.0;
    for m in 0..=m_max {
        let p = mo.mass[m];
        let mut s = 0.0;
        for l in 0..=l_max {
            let lf = l as f64;
            s += 4f64.powf(-lf) * (2.0 * p).min(2f64.powf(d * lf / 2.0) * (p / nn).sqrt());
        }
        value += 4f64.powi(m as i32) * s;
        remainder += 4f64.powi(m as i32) * 2.0 * p * 4f64.powi(-(l_max as i32)) / 3.0;
    }
    // law(B_m) ≤ 2^{−2(m−1)} M₂(m) beyond the truncation depth
    remainder += 32.0 / 3.0 * mo.tail_m2;
    Ok(FgBound { value: c_d * value, remainder: c_d * remainder })
}

/// Right-continuous step path on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("path needs increasing times and one value per time"));
        }
        Ok(Self { times, values })
    }

    /// Value at `t`, holding the last grid value to the right.
    pub fn at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t + 1e-12 * self.horizon().abs().max(1.0));
        self.values[i.saturating_sub(1)]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathDistance {
    pub sup: f64,
    /// `min(sup, 1)`, an upper bound for the Skorokhod J1 distance
    pub j1_upper: f64,
}

/// Sup distance over the common refinement of both grids.
pub fn path_distance(a: &GridPath, b: &GridPath) -> Result<PathDistance> {
    let ha = a.horizon();
    let hb = b.horizon();
    if (ha - hb).abs() > 1e-12 * ha.abs().max(1.0) {
        return Err(invalid(format!("horizons differ: {ha} vs {hb}")));
    }
    let mut sup = 0.0f64;
    for &t in a.times.iter().chain(&b.times) {
        sup = sup.max((a.at(t) - b.at(t)).abs());
    }
    Ok(PathDistance { sup, j1_upper: sup.min(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two(a: f64, b: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform_1d(&[a, b])
    }

    #[test]
    fn w2_examples() {
        assert_eq!(w2_exact(&two(0.0, 2.0), &two(0.0, 2.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_exact(&two(0.0, 2.0), &two(1.0, 3.0)).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(w2_exact(&two(0.0, 1.0), &two(1.0, 0.0)).unwrap(), 0.0);
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::uniform_1d(&[0.0, 1.0]);
        assert!(w2_exact(&a, &b).is_err());
    }

    #[test]
    fn w2_weighted_1d() {
        // δ_0 against ½(δ_{-1} + δ_1): cost 1
        let a = EmpiricalMeasure::uniform_1d(&[0.0]);
        assert_abs_diff_eq!(w2_sq(&a, &two(-1.0, 1.0)).unwrap(), 1.0, epsilon = 1e-15);
        let w = EmpiricalMeasure::new(1, vec![0.0, 3.0], vec![0.25, 0.75]).unwrap();
        // quantile coupling: 0 ↔ 0 mass 1/4, 3 ↔ 0 mass 1/4, 3 ↔ 3 mass 1/2
        let v = EmpiricalMeasure::new(1, vec![0.0, 3.0], vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(w2_sq(&w, &v).unwrap(), 0.25 * 9.0, epsilon = 1e-14);
    }

    #[test]
    fn coupling_examples() {
        assert_eq!(coupling_bound(&[0.0, 1.0], &[1.0, 0.0], 1).unwrap(), 1.0);
        assert_eq!(w2_sq(&two(0.0, 1.0), &two(1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(coupling_bound(&[0.0, 2.0], &[1.0, 3.0], 1).unwrap(), 1.0);
        assert_abs_diff_eq!(w2_sq(&two(0.0, 2.0), &two(1.0, 3.0)).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(coupling_bound(&[0.3, 0.7], &[0.3, 0.7], 1).unwrap(), 0.0);
        assert!(coupling_bound(&[0.0], &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn annulus_moments() {
        let m = fg_moments(&two(0.5, -0.999), 5);
        assert!(m.m2.iter().skip(1).all(|&v| v == 0.0));
        let m = fg_moments(&two(1.5, -1.5), 5);
        assert_abs_diff_eq!(m.m2[1], 2.25, epsilon = 1e-15);
        assert!(m.m2.iter().enumerate().all(|(i, &v)| i == 1 || v == 0.0));
        let m = fg_moments(&EmpiricalMeasure::uniform_1d(&[0.0]), 3);
        assert_eq!(m.m2[0], 0.0);
        assert_eq!(m.mass[0], 1.0);
        // boundaries: 1 ∈ B_0, −1 ∈ B_1, 2 ∈ B_1, −2 ∈ B_2
        let m = fg_moments(&EmpiricalMeasure::uniform(1, vec![1.0, -1.0, 2.0, -2.0]).unwrap(), 3);
        assert_eq!(m.mass, vec![0.25, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn sample_size_examples() {
        let mo = FgMoments::compact(8);
        let r = fg_sample_size(0.1, 1.0, 1.0, &mo, 1).unwrap();
        assert_eq!((r.ell1, r.ell2, r.n_eps), (1, 4, 1_440_001));
        assert_abs_diff_eq!(r.eps2, 1.0 / 300.0, epsilon = 1e-15);
        // ε = 1: ℓ2 = 2 is already the smallest natural with 4^{−ℓ2}/3 < 1/30
        let r = fg_sample_size(1.0, 1.0, 1.0, &mo, 1).unwrap();
        assert_eq!((r.ell1, r.ell2, r.n_eps), (1, 2, 3601));
        let mut prev = u64::MAX;
        for eps in [0.05, 0.1, 0.5, 1.0, 2.0, 8.0] {
            let n = fg_sample_size(eps, 1.0, 1.0, &mo, 1).unwrap().n_eps;
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn sample_size_needs_moments() {
        let mo = FgMoments { m2: vec![0.0, 0.0], mass: vec![0.5, 0.0], tail_m2: 10.0, tail_mass: 0.5 };
        assert!(matches!(fg_sample_size(0.1, 1.0, 1.0, &mo, 1), Err(Error::InsufficientMoments(_))));
    }

    #[test]
    fn dirac_bound_is_the_origin_series() {
        let law = EmpiricalMeasure::uniform_1d(&[0.0]);
        let mut prev = f64::INFINITY;
        for n in [1usize, 10, 100, 10_000, 1_000_000] {
            let b = fg_bound(&law, n, 1.0, 6, 60).unwrap();
            let series: f64 = (0..=60).map(|l| 4f64.powi(-l) * 2f64.min(2f64.powf(l as f64 / 2.0) / (n as f64).sqrt())).sum();
            assert_abs_diff_eq!(b.value, series, epsilon = 1e-12);
            assert!(b.value <= prev);
            prev = b.value;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn path_examples() {
        let g: Vec<f64> = (0..=4).map(|j| j as f64 / 4.0).collect();
        let a = GridPath::new(g.clone(), vec![0.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
        let d = path_distance(&a, &a).unwrap();
        assert_eq!((d.sup, d.j1_upper), (0.0, 0.0));
        let z = GridPath::new(g.clone(), vec![0.0; 5]).unwrap();
        let t = GridPath::new(g.clone(), vec![3.0; 5]).unwrap();
        let d = path_distance(&z, &t).unwrap();
        assert_eq!((d.sup, d.j1_upper), (3.0, 1.0));
        let b = GridPath::new(g.clone(), vec![0.0, 1.5, 2.0, 1.0, 0.0]).unwrap();
        let d = path_distance(&a, &b).unwrap();
        assert_eq!((d.sup, d.j1_upper), (0.5, 0.5));
        let other = GridPath::new(vec![0.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!(path_distance(&a, &other).is_err());
    }

    #[test]
    fn refinement_sees_both_grids() {
        let coarse = GridPath::new(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 1.0]).unwrap();
        let fine = GridPath::new(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![0.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(path_distance(&coarse, &fine).unwrap().sup, 0.5, epsilon = 1e-15);
    }
}
