//! Empirical measures on the second component, their raw moments, and the
//! one-dimensional Wasserstein-2 distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted particle cloud over `R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Row-major `n x dim`.
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("measure dimension must be positive"));
        }
        if weights.is_empty() || points.len() != weights.len() * dim {
            return Err(Error::input(format!(
                "measure needs at least one particle and {} coordinates per particle",
                dim
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("particle coordinates must be finite"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::input("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::input(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, points, weights })
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        let mut w = vec![1.0 / n.max(1) as f64; n];
        // n copies of 1/n can miss 1 by a few ulps for large n.
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            w.iter_mut().for_each(|x| *x /= s);
        }
        Self::new(dim, points, w)
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec(), vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Coordinatewise raw moments `M_j = sum_i w_i y_i^j`, `j = 1..=order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    order: usize,
    dim: usize,
    /// `values[(j - 1) * dim + c]`
    values: Vec<f64>,
}

impl MomentVector {
    pub fn from_flat(order: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != order * dim {
            return Err(Error::input("moment table has the wrong length"));
        }
        Ok(Self { order, dim, values })
    }

    /// Moments of the Dirac measure at `y`: `M_j = y^j`.
    pub fn dirac(y: &[f64], order: usize) -> Self {
        let mut values = Vec::with_capacity(order * y.len());
        for j in 1..=order {
            values.extend(y.iter().map(|v| v.powi(j as i32)));
        }
        Self {
            order,
            dim: y.len(),
            values,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `M_j` for coordinate `c` (both one-based `j`, zero-based `c`).
    pub fn get(&self, j: usize, c: usize) -> f64 {
        self.values[(j - 1) * self.dim + c]
    }

    /// Flat table in the layout expected by drift evaluation.
    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

pub fn moments(mu: &EmpiricalMeasure, order: usize) -> MomentVector {
    let dim = mu.dim;
    let mut values = vec![0.0; order * dim];
    for (i, w) in mu.weights.iter().enumerate() {
        for (c, y) in mu.point(i).iter().enumerate() {
            let mut pw = 1.0;
            for j in 0..order {
                pw *= y;
                values[j * dim + c] += w * pw;
            }
        }
    }
    MomentVector { order, dim, values }
}

/// Equal-weight moments of columns `offset..offset + dim` of row-major states, written
/// into `out` (layout as [`MomentVector::as_flat`]). Summation order is the
/// particle order, so results do not depend on how particles were advanced.
pub fn uniform_moments_into(states: &[f64], stride: usize, offset: usize, dim: usize, order: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if order == 0 {
        return;
    }
    let n = states.len() / stride;
    for p in 0..n {
        let row = &states[p * stride + offset..p * stride + offset + dim];
        for (c, y) in row.iter().enumerate() {
            let mut pw = 1.0;
            for j in 0..order {
                pw *= y;
                out[j * dim + c] += pw;
            }
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Exact `W_2` between two measures on the real line via monotone
/// (quantile) coupling.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != 1 || nu.dim != 1 {
        return Err(Error::Unsupported(format!(
            "Wasserstein-2 is only implemented in dimension 1 (got {} and {})",
            mu.dim, nu.dim
        )));
    }
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m.points.iter().copied().zip(m.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    // Walk both quantile functions, transporting the overlap of each pair of atoms.
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        let diff = a[i].0 - b[j].0;
        cost += mass * diff * diff;
        ra -= mass;
        rb -= mass;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    Ok(cost.max(0.0).sqrt())
}

/// The law of a deterministic path at time `t`: a Dirac mass at `phi2(t)`,
/// linearly interpolated between grid points.
pub fn dirac_path_measure(times: &[f64], phi2: &[Vec<f64>], t: f64) -> Result<EmpiricalMeasure> {
    if times.is_empty() || times.len() != phi2.len() {
        return Err(Error::input("path samples and time grid differ in length"));
    }
    EmpiricalMeasure::dirac(&interpolate(times, phi2, t))
}

pub(crate) fn interpolate(times: &[f64], values: &[Vec<f64>], t: f64) -> Vec<f64> {
    let n = times.len();
    if t <= times[0] {
        return values[0].clone();
    }
    if t >= times[n - 1] {
        return values[n - 1].clone();
    }
    let k = times.partition_point(|&s| s <= t) - 1;
    if times[k] == t {
        return values[k].clone();
    }
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    values[k]
        .iter()
        .zip(&values[k + 1])
        .map(|(a, b)| a + w * (b - a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirac_moments() {
        let m = moments(&EmpiricalMeasure::dirac(&[2.0]).unwrap(), 2);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(2, 0), 4.0);
    }

    #[test]
    fn symmetric_pair_mean() {
        let mu = EmpiricalMeasure::new(1, vec![0.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(moments(&mu, 1).get(1, 0), 1.0);
    }

    #[test]
    fn weighted_moments() {
        let mu = EmpiricalMeasure::new(1, vec![1.0, 2.0, 3.0], vec![0.2, 0.3, 0.5]).unwrap();
        let m = moments(&mu, 2);
        // Brute force: sum_i w_i y_i^j.
        let (ys, ws) = ([1.0f64, 2.0, 3.0], [0.2, 0.3, 0.5]);
        let m1: f64 = ys.iter().zip(ws).map(|(y, w)| w * y).sum();
        let m2: f64 = ys.iter().zip(ws).map(|(y, w)| w * y * y).sum();
        assert!((m.get(1, 0) - 2.3).abs() < 1e-14 && (m.get(1, 0) - m1).abs() < 1e-14);
        assert!((m.get(2, 0) - 5.9).abs() < 1e-14 && (m.get(2, 0) - m2).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0], vec![-1.0]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn two_diracs() {
        let a = EmpiricalMeasure::dirac(&[1.5]).unwrap();
        let b = EmpiricalMeasure::dirac(&[-2.0]).unwrap();
        assert_eq!(wasserstein2_1d(&a, &b).unwrap(), 3.5);
        assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn shifted_pairs() {
        let a = EmpiricalMeasure::uniform(1, vec![0.0, 2.0]).unwrap();
        let b = EmpiricalMeasure::uniform(1, vec![3.0, 1.0]).unwrap();
        // Couplings {0-1, 2-3} cost 1; {0-3, 2-1} cost 5. Minimum is 1.
        assert!((wasserstein2_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_weights_split_mass() {
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::new(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((wasserstein2_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn multi_dimensional_is_unsupported() {
        let a = EmpiricalMeasure::dirac(&[0.0, 1.0]).unwrap();
        assert!(matches!(wasserstein2_1d(&a, &a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dirac_path_interpolates() {
        let times: Vec<f64> = (0..=4).map(|k| k as f64 * 0.25).collect();
        let phi2: Vec<Vec<f64>> = times.iter().map(|t| vec![*t]).collect();
        let m = dirac_path_measure(&times, &phi2, 0.5).unwrap();
        assert_eq!(m.point(0), &[0.5]);
        let off = dirac_path_measure(&times, &phi2, 0.6).unwrap();
        assert!((off.point(0)[0] - 0.6).abs() < 1e-15);
        assert_eq!(moments(&m, 1).get(1, 0), 0.5);
        let psi: Vec<Vec<f64>> = times.iter().map(|t| vec![2.0 * t]).collect();
        let n = dirac_path_measure(&times, &psi, 0.5).unwrap();
        assert_eq!(wasserstein2_1d(&m, &n).unwrap(), 0.5);
    }
}
