//! Sampled reference paths on a uniform grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::DegenerateSystem;

/// How the derivative samples were obtained. Sets the default tolerance for
/// the structural constraint `dphi1/dt = p(phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

/// What to do with sampled paths whose discrete energy looks divergent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoughPathPolicy {
    #[default]
    Warn,
    Reject,
    Ignore,
}

/// `phi = (phi1, phi2)` sampled at `t_k = k T / K` with derivatives.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    t_end: f64,
    d: usize,
    m: usize,
    phi: Vec<Vec<f64>>,
    phidot: Vec<Vec<f64>>,
    source: DerivativeSource,
    structural_residual: f64,
    tolerance: f64,
    warnings: Vec<String>,
}

impl ReferencePath {
    /// Samples `f(t) -> (phi, phidot)` on `steps + 1` grid points.
    pub fn from_fn(
        system: &DegenerateSystem,
        t_end: f64,
        steps: usize,
        f: impl Fn(f64) -> (Vec<f64>, Vec<f64>),
    ) -> Result<Self> {
        check_grid(t_end, steps)?;
        let dt = t_end / steps as f64;
        let (phi, phidot) = (0..=steps).map(|k| f(k as f64 * dt)).unzip();
        Self::build(system, t_end, phi, phidot, DerivativeSource::Analytic)
    }

    /// Samples only; derivatives by central differences inside and
    /// second-order one-sided differences at the ends.
    pub fn from_samples(system: &DegenerateSystem, t_end: f64, phi: Vec<Vec<f64>>) -> Result<Self> {
        if phi.len() < 3 {
            return Err(Error::input("a sampled path needs at least 3 grid points"));
        }
        check_grid(t_end, phi.len() - 1)?;
        let dt = t_end / (phi.len() - 1) as f64;
        let phidot = fd_derivative(&phi, dt);
        Self::build(system, t_end, phi, phidot, DerivativeSource::FiniteDifference)
    }

    pub fn from_samples_with_derivatives(
        system: &DegenerateSystem,
        t_end: f64,
        phi: Vec<Vec<f64>>,
        phidot: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::input("a path needs at least 2 grid points"));
        }
        check_grid(t_end, phi.len() - 1)?;
        Self::build(system, t_end, phi, phidot, DerivativeSource::Analytic)
    }

    /// Builds a constrained path from a prescribed second component
    /// `phi2(t) -> (value, derivative)` by integrating `dphi1/dt = p(phi)` with
    /// classical Runge-Kutta (`substeps` per grid interval).
    pub fn lift(
        system: &DegenerateSystem,
        t_end: f64,
        steps: usize,
        substeps: usize,
        phi2: impl Fn(f64) -> (Vec<f64>, Vec<f64>),
    ) -> Result<Self> {
        check_grid(t_end, steps)?;
        let (d, m) = (system.d(), system.m());
        let dt = t_end / steps as f64;
        let h = dt / substeps.max(1) as f64;
        let state = |t: f64, x1: &[f64]| -> Vec<f64> {
            let (y, _) = phi2(t);
            let mut x = x1.to_vec();
            x.extend(y);
            x
        };
        let rhs = |t: f64, x1: &[f64]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; d];
            system.eval_p(t, &state(t, x1), &mut out)?;
            Ok(out)
        };
        let mut x1 = system.x0()[..d].to_vec();
        let mut phi = Vec::with_capacity(steps + 1);
        let mut phidot = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let t = k as f64 * dt;
            let (y, ydot) = phi2(t);
            if y.len() != m || ydot.len() != m {
                return Err(Error::input("second-component samples have the wrong dimension"));
            }
            let mut row = x1.clone();
            row.extend_from_slice(&y);
            let mut drow = rhs(t, &x1)?;
            drow.extend_from_slice(&ydot);
            phi.push(row);
            phidot.push(drow);
            if k == steps {
                break;
            }
            for s in 0..substeps.max(1) {
                let t0 = t + s as f64 * h;
                let k1 = rhs(t0, &x1)?;
                let k2 = rhs(t0 + h / 2.0, &axpy(&x1, h / 2.0, &k1))?;
                let k3 = rhs(t0 + h / 2.0, &axpy(&x1, h / 2.0, &k2))?;
                let k4 = rhs(t0 + h, &axpy(&x1, h, &k3))?;
                for i in 0..d {
                    x1[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        Self::build(system, t_end, phi, phidot, DerivativeSource::Analytic)
    }

    fn build(
        system: &DegenerateSystem,
        t_end: f64,
        phi: Vec<Vec<f64>>,
        phidot: Vec<Vec<f64>>,
        source: DerivativeSource,
    ) -> Result<Self> {
        let (d, m) = (system.d(), system.m());
        let n = d + m;
        if phi.len() != phidot.len() {
            return Err(Error::input("path and derivative samples differ in length"));
        }
        for (k, (a, b)) in phi.iter().zip(&phidot).enumerate() {
            if a.len() != n || b.len() != n {
                return Err(Error::input(format!("grid point {k}: expected {n} coordinates")));
            }
            if a.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("grid point {k}: non-finite sample")));
            }
        }
        let scale = 1.0 + system.x0().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let start_gap = phi[0].iter().zip(system.x0()).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        if start_gap > 1e-9 * scale {
            return Err(Error::input(format!(
                "path must start at the initial point (max deviation {start_gap:.3e})"
            )));
        }
        let dt = t_end / (phi.len() - 1) as f64;
        let mut residual = 0.0f64;
        let mut p = vec![0.0; d];
        for (k, (x, xd)) in phi.iter().zip(&phidot).enumerate() {
            system.eval_p(k as f64 * dt, x, &mut p)?;
            for i in 0..d {
                residual = residual.max((xd[i] - p[i]).abs());
            }
        }
        let tolerance = match source {
            DerivativeSource::Analytic => 1e-8,
            DerivativeSource::FiniteDifference => 10.0 * dt,
        };
        Ok(Self {
            t_end,
            d,
            m,
            phi,
            phidot,
            source,
            structural_residual: residual,
            tolerance,
            warnings: Vec::new(),
        })
    }

    /// Overrides the structural tolerance.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    /// Applies the rough-path policy to the discrete-energy check.
    pub fn with_roughness_policy(mut self, policy: RoughPathPolicy) -> Result<Self> {
        if policy == RoughPathPolicy::Ignore {
            return Ok(self);
        }
        if let Some(ratio) = self.energy_growth() {
            if ratio > 1.5 {
                let msg = format!(
                    "discrete energy grows by {ratio:.2}x under grid halving; path may be outside the Cameron-Martin space"
                );
                match policy {
                    RoughPathPolicy::Reject => return Err(Error::input(msg)),
                    _ => self.warnings.push(msg),
                }
            }
        }
        Ok(self)
    }

    /// Errors unless the structural constraint holds to tolerance.
    pub fn check_structure(&self) -> Result<()> {
        if self.structural_residual > self.tolerance {
            return Err(Error::input(format!(
                "structural constraint dphi1/dt = p(phi) violated: max residual {:.3e} exceeds {:.3e}",
                self.structural_residual, self.tolerance
            )));
        }
        Ok(())
    }

    /// `sum |dphi|^2 / dt`.
    pub fn discrete_energy(&self) -> f64 {
        energy(&self.phi, 1, self.dt())
    }

    /// Energy on the full grid over energy on every second point. Stays near
    /// 1 for smooth paths and near 2 for Brownian-like ones.
    pub fn energy_growth(&self) -> Option<f64> {
        if self.steps() < 4 {
            return None;
        }
        let fine = energy(&self.phi, 1, self.dt());
        let coarse = energy(&self.phi, 2, self.dt());
        if coarse <= 1e-300 {
            return None;
        }
        Some(fine / coarse)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.phi.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| self.time(k)).collect()
    }

    pub fn phi(&self) -> &[Vec<f64>] {
        &self.phi
    }

    pub fn phidot(&self) -> &[Vec<f64>] {
        &self.phidot
    }

    pub fn phi1(&self, k: usize) -> &[f64] {
        &self.phi[k][..self.d]
    }

    pub fn phi2(&self, k: usize) -> &[f64] {
        &self.phi[k][self.d..]
    }

    pub fn phi2dot(&self, k: usize) -> &[f64] {
        &self.phidot[k][self.d..]
    }

    pub fn source(&self) -> DerivativeSource {
        self.source
    }

    pub fn structural_residual(&self) -> f64 {
        self.structural_residual
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// A path in `R^d` with first and second derivatives, for systems with `p = x2`.
#[derive(Debug, Clone)]
pub struct HamiltonianPath {
    t_end: f64,
    pos: Vec<Vec<f64>>,
    vel: Vec<Vec<f64>>,
    acc: Vec<Vec<f64>>,
}

impl HamiltonianPath {
    /// Samples `f(t) -> (phi1, dphi1, ddphi1)`.
    pub fn from_fn(t_end: f64, steps: usize, f: impl Fn(f64) -> (Vec<f64>, Vec<f64>, Vec<f64>)) -> Result<Self> {
        check_grid(t_end, steps)?;
        let dt = t_end / steps as f64;
        let mut pos = Vec::with_capacity(steps + 1);
        let mut vel = Vec::with_capacity(steps + 1);
        let mut acc = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let (a, b, c) = f(k as f64 * dt);
            pos.push(a);
            vel.push(b);
            acc.push(c);
        }
        Self::new(t_end, pos, vel, acc)
    }

    pub fn new(t_end: f64, pos: Vec<Vec<f64>>, vel: Vec<Vec<f64>>, acc: Vec<Vec<f64>>) -> Result<Self> {
        if pos.len() < 2 || pos.len() != vel.len() || pos.len() != acc.len() {
            return Err(Error::input("position, velocity and acceleration samples must align"));
        }
        check_grid(t_end, pos.len() - 1)?;
        let d = pos[0].len();
        if pos.iter().chain(&vel).chain(&acc).any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("Hamiltonian path samples must be finite with consistent dimension"));
        }
        Ok(Self { t_end, pos, vel, acc })
    }

    /// Positions only; velocity and acceleration by finite differences.
    pub fn from_samples(t_end: f64, pos: Vec<Vec<f64>>) -> Result<Self> {
        if pos.len() < 4 {
            return Err(Error::input("a sampled path needs at least 4 grid points"));
        }
        let dt = t_end / (pos.len() - 1) as f64;
        let vel = fd_derivative(&pos, dt);
        let acc = fd_second_derivative(&pos, dt);
        Self::new(t_end, pos, vel, acc)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.pos.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps() as f64
    }

    pub fn dim(&self) -> usize {
        self.pos[0].len()
    }

    pub fn pos(&self) -> &[Vec<f64>] {
        &self.pos
    }

    pub fn vel(&self) -> &[Vec<f64>] {
        &self.vel
    }

    pub fn acc(&self) -> &[Vec<f64>] {
        &self.acc
    }

    /// The constrained path `(phi1, dphi1/dt)` with derivative `(dphi1, ddphi1)`.
    pub fn lift(&self, system: &DegenerateSystem) -> Result<ReferencePath> {
        if !system.is_hamiltonian() {
            return Err(Error::Unsupported("lifting requires p = x2".into()));
        }
        if self.dim() != system.d() {
            return Err(Error::input("path dimension differs from the system"));
        }
        let phi = self.pos.iter().zip(&self.vel).map(|(a, b)| [a.as_slice(), b].concat()).collect();
        let phidot = self.vel.iter().zip(&self.acc).map(|(a, b)| [a.as_slice(), b].concat()).collect();
        ReferencePath::from_samples_with_derivatives(system, self.t_end, phi, phidot)
    }
}

fn check_grid(t_end: f64, steps: usize) -> Result<()> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::input("horizon T must be positive and finite"));
    }
    if steps == 0 {
        return Err(Error::input("grid needs at least one interval"));
    }
    Ok(())
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(u, v)| u + a * v).collect()
}

fn energy(phi: &[Vec<f64>], stride: usize, dt: f64) -> f64 {
    let h = dt * stride as f64;
    let mut e = 0.0;
    let mut k = 0;
    while k + stride < phi.len() {
        e += phi[k + stride]
            .iter()
            .zip(&phi[k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / h;
        k += stride;
    }
    e
}

/// Central differences inside, second-order one-sided at the ends.
pub fn fd_derivative(x: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let dim = x[0].len();
    (0..n)
        .map(|k| {
            (0..dim)
                .map(|i| {
                    if n == 2 {
                        (x[1][i] - x[0][i]) / dt
                    } else if k == 0 {
                        (-3.0 * x[0][i] + 4.0 * x[1][i] - x[2][i]) / (2.0 * dt)
                    } else if k == n - 1 {
                        (3.0 * x[n - 1][i] - 4.0 * x[n - 2][i] + x[n - 3][i]) / (2.0 * dt)
                    } else {
                        (x[k + 1][i] - x[k - 1][i]) / (2.0 * dt)
                    }
                })
                .collect()
        })
        .collect()
}

/// Second differences inside, second-order one-sided at the ends.
pub fn fd_second_derivative(x: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let dim = x[0].len();
    let h2 = dt * dt;
    (0..n)
        .map(|k| {
            (0..dim)
                .map(|i| {
                    if k == 0 {
                        (2.0 * x[0][i] - 5.0 * x[1][i] + 4.0 * x[2][i] - x[3][i]) / h2
                    } else if k == n - 1 {
                        (2.0 * x[n - 1][i] - 5.0 * x[n - 2][i] + 4.0 * x[n - 3][i] - x[n - 4][i]) / h2
                    } else {
                        ((x[k + 1][i] - x[k][i]) - (x[k][i] - x[k - 1][i])) / h2
                    }
                })
                .collect()
        })
        .collect()
}
