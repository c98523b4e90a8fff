//! Damped Gauss-Newton (Levenberg-Marquardt) minimization of objectives of
//! the form `1/2 sum w r^2 + sum s` with a Gauss-Newton Hessian supplied by
//! the caller.

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, BandSpd, Matrix};

pub enum Hessian {
    Band(BandSpd),
    Dense(Matrix),
}

impl Hessian {
    fn solve_damped(&self, lambda: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        match self {
            Hessian::Band(b) => {
                let mut a = b.clone();
                for i in 0..n {
                    a.add(i, i, lambda * b.diagonal(i).max(1e-300));
                }
                a.solve(rhs)
            }
            Hessian::Dense(m) => {
                let mut a = m.clone();
                for i in 0..n {
                    a[(i, i)] += lambda * m[(i, i)].max(1e-300);
                }
                let x = solve_spd(&a, &Matrix::from_vec(n, 1, rhs.to_vec())?)?;
                Ok(x.as_slice().to_vec())
            }
        }
    }
}

pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> Result<f64>;
    /// Gradient and a positive semidefinite Hessian approximation.
    fn linearize(&self, z: &[f64]) -> Result<(Vec<f64>, Hessian)>;
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    /// Converged when `|grad|_inf <= grad_tol * (1 + |J|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Extra iterations after convergence, kept while they lower the gradient.
    pub polish: usize,
    /// Accepted steps never exceed this value, so a restarted run continues
    /// the descent of an earlier one.
    pub ceiling: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 10_000,
            polish: 3,
            ceiling: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub z: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn minimize(obj: &dyn Objective, z0: Vec<f64>, opts: &LmOptions) -> Result<LmOutcome> {
    let mut z = z0;
    let mut value = obj.value(&z)?;
    if !value.is_finite() {
        return Err(Error::Optimization { iteration: 0, iterate: z });
    }
    let mut history = vec![value];
    let mut bar = value.min(opts.ceiling);
    let mut lambda = 1e-8;
    let mut iterations = 0;
    let mut converged = false;
    let mut polished = 0;
    let (mut grad, mut hess) = obj.linearize(&z)?;
    let mut gnorm = inf_norm(&grad);
    loop {
        let tol = opts.grad_tol * (1.0 + value.abs());
        if !converged && gnorm <= tol {
            converged = true;
        }
        if gnorm == 0.0 || (converged && polished >= opts.polish) || (!converged && iterations >= opts.max_iter) {
            break;
        }
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        // Below this predicted change, objective comparisons are rounding noise
        // and a step is judged by the gradient instead.
        let noise = 1e-13 * (1.0 + value.abs());
        let mut accepted = None;
        while lambda < 1e12 && accepted.is_none() {
            let step = match hess.solve_damped(lambda, &rhs) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
            let mut alpha = 1.0;
            for _ in 0..20 {
                let trial: Vec<f64> = z.iter().zip(&step).map(|(a, s)| a + alpha * s).collect();
                if let Ok(v) = obj.value(&trial) {
                    if v.is_finite() {
                        if v <= value + 1e-4 * alpha * slope && v <= bar {
                            accepted = Some((trial, v, None));
                            break;
                        }
                        if -alpha * slope <= noise && v <= bar {
                            let lin = obj.linearize(&trial)?;
                            if inf_norm(&lin.0) < gnorm {
                                accepted = Some((trial, v, Some(lin)));
                            }
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_none() {
                lambda *= 10.0;
            }
        }
        let Some((trial, v, lin)) = accepted else { break };
        let (g, h) = match lin {
            Some(l) => l,
            None => obj.linearize(&trial)?,
        };
        let gn = inf_norm(&g);
        if converged {
            if gn >= gnorm {
                break;
            }
            polished += 1;
        } else {
            iterations += 1;
        }
        z = trial;
        value = v;
        bar = v;
        grad = g;
        hess = h;
        gnorm = gn;
        history.push(value);
        lambda = (lambda / 10.0).max(1e-20);
    }
    Ok(LmOutcome {
        z,
        value,
        grad_norm: gnorm,
        iterations,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as a least-squares problem: r = (10 (y - x^2), 1 - x).
    struct Rosen;

    impl Rosen {
        fn res(z: &[f64]) -> [f64; 2] {
            [10.0 * (z[1] - z[0] * z[0]), 1.0 - z[0]]
        }
    }

    impl Objective for Rosen {
        fn dim(&self) -> usize {
            2
        }

        fn value(&self, z: &[f64]) -> Result<f64> {
            let r = Self::res(z);
            Ok(0.5 * (r[0] * r[0] + r[1] * r[1]))
        }

        fn linearize(&self, z: &[f64]) -> Result<(Vec<f64>, Hessian)> {
            let r = Self::res(z);
            let j = [[-20.0 * z[0], 10.0], [-1.0, 0.0]];
            let g = vec![j[0][0] * r[0] + j[1][0] * r[1], j[0][1] * r[0] + j[1][1] * r[1]];
            let h = Matrix::from_fn(2, 2, |a, b| j[0][a] * j[0][b] + j[1][a] * j[1][b]);
            Ok((g, Hessian::Dense(h)))
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(&Rosen, vec![-1.2, 1.0], &LmOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.z[0] - 1.0).abs() < 1e-8 && (out.z[1] - 1.0).abs() < 1e-8);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stationary_start_takes_no_iterations() {
        let out = minimize(&Rosen, vec![1.0, 1.0], &LmOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let opts = LmOptions {
            max_iter: 1,
            ..LmOptions::default()
        };
        let out = minimize(&Rosen, vec![-1.2, 1.0], &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }
}
