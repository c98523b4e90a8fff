//! Onsager-Machlup action of reference paths.
//!
//! For `dX1 = p dt`, `dX2 = q dt + dW` the action of a constrained path is
//!
//! ```text
//! L = -1/2 int |dphi2/dt - q(phi, delta_phi2)|^2 dt - 1/2 int div_x2 q(phi, delta_phi2) dt
//! ```
//!
//! where the law enters through the Dirac moments `Mk = phi2^k` and the
//! divergence is taken in the state argument only.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{pinv_partitioned, PartitionedMatrix};
use crate::path::{HamiltonianPath, ReferencePath};
use crate::system::DegenerateSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionValue {
    /// `-1/2 int |dphi2/dt - q|^2`
    pub kinetic: f64,
    /// `-1/2 int div q`
    pub divergence: f64,
    pub total: f64,
    /// Richardson estimate from the half-resolution trapezoid rule.
    pub quad_error: f64,
}

/// How `div_x2 q` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceMode {
    #[default]
    Symbolic,
    /// Central differences, step `1e-5 (1 + |x|)`.
    FiniteDifference,
}

/// Reduced (second-component) form with symbolic divergence.
pub fn om_action(sys: &DegenerateSystem, phi: &ReferencePath) -> Result<ActionValue> {
    om_action_with(sys, phi, DivergenceMode::Symbolic)
}

pub fn om_action_with(sys: &DegenerateSystem, phi: &ReferencePath, mode: DivergenceMode) -> Result<ActionValue> {
    check_path(sys, phi)?;
    let m = sys.m();
    let mut q = vec![0.0; m];
    let mut kin = Vec::with_capacity(phi.steps() + 1);
    let mut div = Vec::with_capacity(phi.steps() + 1);
    for k in 0..=phi.steps() {
        let t = phi.time(k);
        let x = &phi.phi()[k];
        let mo = sys.dirac_moments(phi.phi2(k));
        sys.eval_q(t, x, mo.as_flat(), &mut q).map_err(|e| locate(e, t))?;
        kin.push(sq_dist(phi.phi2dot(k), &q));
        let dv = match mode {
            DivergenceMode::Symbolic => sys.div_x2_q(t, x, mo.as_flat()),
            DivergenceMode::FiniteDifference => sys.div_x2_q_fd(t, x, mo.as_flat()),
        };
        div.push(dv.map_err(|e| locate(e, t))?);
    }
    Ok(assemble(&kin, &div, phi.dt()))
}

/// Global form `-1/2 int |Xi+ (dphi/dt - b)|^2 - 1/2 int div_x (Xi+ b)` with the
/// pseudoinverse of the noise selector built blockwise.
pub fn om_action_global(sys: &DegenerateSystem, phi: &ReferencePath) -> Result<ActionValue> {
    check_path(sys, phi)?;
    let n = sys.dim();
    let xi_plus = pinv_partitioned(&PartitionedMatrix::noise_selector(sys.d(), sys.m()))?;
    let mut kin = Vec::with_capacity(phi.steps() + 1);
    let mut div = Vec::with_capacity(phi.steps() + 1);
    for k in 0..=phi.steps() {
        let t = phi.time(k);
        let x = &phi.phi()[k];
        let mo = sys.dirac_moments(phi.phi2(k));
        let b = sys.drift(t, x, mo.as_flat()).map_err(|e| locate(e, t))?;
        let v: Vec<f64> = phi.phidot()[k].iter().zip(&b).map(|(a, c)| a - c).collect();
        let u = xi_plus.matvec(&v);
        kin.push(u.iter().map(|s| s * s).sum());
        // div (Xi+ b) = sum_ij Xi+_ij d b_j / d x_i
        let jac = sys.jacobian_b(t, x, mo.as_flat()).map_err(|e| locate(e, t))?;
        let mut dv = 0.0;
        for i in 0..n {
            for (j, row) in jac.iter().enumerate() {
                dv += xi_plus[(i, j)] * row[i];
            }
        }
        div.push(dv);
    }
    Ok(assemble(&kin, &div, phi.dt()))
}

/// Second-order form for `p = x2`: the path is `phi1` with its first two
/// derivatives and `f = q(phi1, dphi1, delta_{dphi1})`.
pub fn om_action_hamiltonian(sys: &DegenerateSystem, path: &HamiltonianPath) -> Result<ActionValue> {
    if !sys.is_hamiltonian() {
        return Err(Error::Unsupported("the second-order form requires p = x2".into()));
    }
    if path.dim() != sys.d() {
        return Err(Error::input("path dimension differs from the system"));
    }
    let d = sys.d();
    let mut f = vec![0.0; d];
    let mut x = vec![0.0; 2 * d];
    let mut kin = Vec::with_capacity(path.steps() + 1);
    let mut div = Vec::with_capacity(path.steps() + 1);
    for k in 0..=path.steps() {
        let t = k as f64 * path.dt();
        x[..d].copy_from_slice(&path.pos()[k]);
        x[d..].copy_from_slice(&path.vel()[k]);
        let mo = sys.dirac_moments(&path.vel()[k]);
        sys.eval_q(t, &x, mo.as_flat(), &mut f).map_err(|e| locate(e, t))?;
        kin.push(sq_dist(&path.acc()[k], &f));
        div.push(sys.div_x2_q(t, &x, mo.as_flat()).map_err(|e| locate(e, t))?);
    }
    Ok(assemble(&kin, &div, path.dt()))
}

/// Action of the reduced equation `dY = q((x1(t), Y), law(Y)) dt + dW` when
/// `p` depends on `x1` only, so that `x1(t)` is a known function of time.
/// `x1(t)` is integrated independently of the path's own first component
/// (classical Runge-Kutta, 8 substeps per interval).
pub fn om_action_nondegenerate_reduction(sys: &DegenerateSystem, phi: &ReferencePath) -> Result<ActionValue> {
    if !sys.p_depends_only_on_first() {
        return Err(Error::Unsupported(
            "the reduction needs p to depend on the first component only".into(),
        ));
    }
    if phi.d() != sys.d() || phi.m() != sys.m() {
        return Err(Error::input("path dimensions differ from the system"));
    }
    let (d, m) = (sys.d(), sys.m());
    let dt = phi.dt();
    const SUB: usize = 8;
    let h = dt / SUB as f64;
    let mut x = vec![0.0; d + m];
    x[..d].copy_from_slice(&sys.x0()[..d]);
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d + m];
    let mut q = vec![0.0; m];
    let mut kin = Vec::with_capacity(phi.steps() + 1);
    let mut div = Vec::with_capacity(phi.steps() + 1);
    for k in 0..=phi.steps() {
        let t = phi.time(k);
        x[d..].copy_from_slice(phi.phi2(k));
        let mo = sys.dirac_moments(phi.phi2(k));
        sys.eval_q(t, &x, mo.as_flat(), &mut q).map_err(|e| locate(e, t))?;
        kin.push(sq_dist(phi.phi2dot(k), &q));
        div.push(sys.div_x2_q(t, &x, mo.as_flat()).map_err(|e| locate(e, t))?);
        if k == phi.steps() {
            break;
        }
        for s in 0..SUB {
            let t0 = t + s as f64 * h;
            tmp.copy_from_slice(&x);
            sys.eval_p(t0, &tmp, &mut k1)?;
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            sys.eval_p(t0 + 0.5 * h, &tmp, &mut k2)?;
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            sys.eval_p(t0 + 0.5 * h, &tmp, &mut k3)?;
            for i in 0..d {
                tmp[i] = x[i] + h * k3[i];
            }
            sys.eval_p(t0 + h, &tmp, &mut k4)?;
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    Ok(assemble(&kin, &div, dt))
}

fn check_path(sys: &DegenerateSystem, phi: &ReferencePath) -> Result<()> {
    if phi.d() != sys.d() || phi.m() != sys.m() {
        return Err(Error::input("path dimensions differ from the system"));
    }
    phi.check_structure()
}

fn locate(e: Error, t: f64) -> Error {
    match e {
        Error::Eval { expr, reason } => Error::Eval {
            expr,
            reason: format!("{reason} at t = {t}"),
        },
        other => other,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn assemble(kin: &[f64], div: &[f64], dt: f64) -> ActionValue {
    let kinetic = -0.5 * trapezoid(kin, dt);
    let divergence = -0.5 * trapezoid(div, dt);
    let total_integrand: Vec<f64> = kin.iter().zip(div).map(|(a, b)| a + b).collect();
    ActionValue {
        kinetic,
        divergence,
        total: kinetic + divergence,
        quad_error: 0.5 * richardson_error(&total_integrand, dt),
    }
}

/// Composite trapezoid rule with pairwise summation.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (pairwise_sum(&values[1..n - 1]) + 0.5 * (values[0] + values[n - 1])),
    }
}

/// `|I_h - I_2h| / 3` on the largest even number of intervals; the full
/// integral magnitude when fewer than two intervals are available.
pub fn richardson_error(values: &[f64], dt: f64) -> f64 {
    let intervals = values.len().saturating_sub(1);
    if intervals < 2 {
        return trapezoid(values, dt).abs();
    }
    let even = intervals - intervals % 2;
    let fine = trapezoid(&values[..=even], dt);
    let coarse: Vec<f64> = values[..=even].iter().step_by(2).copied().collect();
    (fine - trapezoid(&coarse, 2.0 * dt)).abs() / 3.0
}

pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> DegenerateSystem {
        DegenerateSystem::new(1, 1, &["x2"], &["-x2"], 1, &[0.0, 0.0]).unwrap()
    }

    #[test]
    fn hand_integrated_fixture() {
        // phi2 = t: kinetic -1/2 int (1+t)^2 = -7/6, divergence +1/2.
        let phi = ReferencePath::lift(&ou(), 1.0, 1000, 1, |t| (vec![t], vec![1.0])).unwrap();
        let a = om_action(&ou(), &phi).unwrap();
        assert!((a.kinetic + 7.0 / 6.0).abs() < 1e-6);
        assert!((a.divergence - 0.5).abs() < 1e-14);
        assert!((a.total + 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(a.total, a.kinetic + a.divergence);
        let g = om_action_global(&ou(), &phi).unwrap();
        assert!((g.total - a.total).abs() < 1e-12);
    }

    #[test]
    fn zero_action_on_noise_free_solution() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["0"], 1, &[0.0, 1.0]).unwrap();
        let phi = ReferencePath::lift(&sys, 1.0, 10, 1, |_| (vec![1.0], vec![0.0])).unwrap();
        let a = om_action(&sys, &phi).unwrap();
        assert_eq!(a.total, 0.0);
    }

    #[test]
    fn constraint_violation_is_rejected() {
        let s = ou();
        let bad = ReferencePath::from_fn(&s, 1.0, 10, |t| (vec![0.0, t], vec![0.0, 1.0])).unwrap();
        assert!(matches!(om_action(&s, &bad), Err(Error::Input(_))));
        assert!(matches!(om_action_global(&s, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn evaluation_error_carries_time() {
        let s = DegenerateSystem::new(1, 1, &["x2"], &["1/(x2 - 0.5)"], 1, &[0.0, 0.0]).unwrap();
        let phi = ReferencePath::lift(&s, 1.0, 10, 1, |t| (vec![t], vec![1.0])).unwrap();
        let err = om_action(&s, &phi).unwrap_err();
        assert!(err.to_string().contains("t = 0.5"), "{err}");
    }

    #[test]
    fn richardson_of_quadratic_is_exact_scale() {
        // Trapezoid error for t^2 on [0,1] is h^2/6; estimate recovers it.
        let k = 8;
        let dt = 1.0 / k as f64;
        let v: Vec<f64> = (0..=k).map(|i| (i as f64 * dt).powi(2)).collect();
        let err = (trapezoid(&v, dt) - 1.0 / 3.0).abs();
        assert!((richardson_error(&v, dt) - err).abs() < 1e-14);
    }

    #[test]
    fn hamiltonian_requires_p_equal_x2() {
        let s = DegenerateSystem::new(1, 1, &["x1"], &["0"], 1, &[0.0, 0.0]).unwrap();
        let path = HamiltonianPath::from_fn(1.0, 4, |t| (vec![t], vec![1.0], vec![0.0])).unwrap();
        assert!(matches!(om_action_hamiltonian(&s, &path), Err(Error::Unsupported(_))));
    }

    #[test]
    fn reduction_requires_first_component_p() {
        let s = ou();
        let phi = ReferencePath::lift(&s, 1.0, 10, 1, |t| (vec![t], vec![1.0])).unwrap();
        assert!(matches!(om_action_nondegenerate_reduction(&s, &phi), Err(Error::Unsupported(_))));
    }
}
