//! Degenerate McKean-Vlasov systems
//!
//! ```text
//! dX1 = p(X) dt
//! dX2 = q(X, Law(X2)) dt + dW
//! ```
//!
//! with `X1` in `R^d`, `X2` in `R^m` and the law entering `q` through raw
//! moments of `X2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsl::{Compiled, DriftExpr, Expr, ParseError, Wrt, MAX_MOMENT_ORDER};
use crate::error::{Error, Result};
use crate::measure::MomentVector;

#[derive(Debug, Clone)]
pub struct DegenerateSystem {
    d: usize,
    m: usize,
    moment_order: usize,
    p: Vec<DriftExpr>,
    q: Vec<DriftExpr>,
    x0: Vec<f64>,
    p_fast: Vec<Compiled>,
    q_fast: Vec<Compiled>,
    /// `sum_i dq_i/dx2_i` with the measure argument frozen.
    div_q: Compiled,
    /// `jac_b[j][i] = d b_j / d x_i`.
    jac_b: Vec<Vec<Compiled>>,
}

/// Largest observed sizes of `q` and its state derivatives over a sampled box.
/// Evidence only: sampling cannot prove a bound.
#[derive(Debug, Clone, Serialize)]
pub struct DriftBounds {
    pub samples: usize,
    pub radius: f64,
    pub max_q: f64,
    /// Largest Frobenius norm of `dq/dx`.
    pub max_gradient: f64,
    /// Largest absolute second partial `d2 q_j / dx_i dx_k`.
    pub max_hessian: f64,
}

/// Plain-data description of a system, suitable for hashing and manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemSpec {
    pub d: usize,
    pub m: usize,
    pub p: Vec<String>,
    pub q: Vec<String>,
    pub moment_order: usize,
    pub x0: Vec<f64>,
}

impl DegenerateSystem {
    /// Parses and validates a system. `moment_order` bounds the moment
    /// symbols `q` may reference.
    pub fn new(d: usize, m: usize, p: &[&str], q: &[&str], moment_order: usize, x0: &[f64]) -> Result<Self> {
        let dims = (d, m);
        let parse = |s: &&str| DriftExpr::parse(s, dims);
        let p = p.iter().map(parse).collect::<std::result::Result<Vec<_>, ParseError>>()?;
        let q = q.iter().map(parse).collect::<std::result::Result<Vec<_>, ParseError>>()?;
        Self::from_exprs(p, q, moment_order, x0.to_vec())
    }

    pub fn from_exprs(p: Vec<DriftExpr>, q: Vec<DriftExpr>, moment_order: usize, x0: Vec<f64>) -> Result<Self> {
        let (d, m) = match (p.first(), q.first()) {
            (_, Some(e)) => e.dims(),
            (Some(e), None) => e.dims(),
            (None, None) => return Err(Error::input("system has no drift components")),
        };
        if m == 0 {
            return Err(Error::input("the noisy component must have dimension m >= 1"));
        }
        if p.len() != d || q.len() != m {
            return Err(Error::input(format!(
                "expected {d} p-components and {m} q-components, got {} and {}",
                p.len(),
                q.len()
            )));
        }
        if p.iter().chain(&q).any(|e| e.dims() != (d, m)) {
            return Err(Error::input("drift components disagree on dimensions"));
        }
        if x0.len() != d + m || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("initial point must have {} finite entries", d + m)));
        }
        if moment_order > MAX_MOMENT_ORDER as usize {
            return Err(Error::input(format!("moment order is at most {MAX_MOMENT_ORDER}")));
        }
        for (i, e) in p.iter().enumerate() {
            if e.uses_moments() {
                return Err(Error::input(format!("p[{}] must not reference moment symbols", i + 1)));
            }
        }
        for (j, e) in q.iter().enumerate() {
            if e.max_moment_order() as usize > moment_order {
                return Err(Error::input(format!(
                    "q[{}] references M{} but moment order is {moment_order}",
                    j + 1,
                    e.max_moment_order()
                )));
            }
        }
        let q: Vec<DriftExpr> = q.into_iter().enumerate().map(|(j, e)| e.with_own_coord(j)).collect();

        let mut div = Expr::Num(0.0);
        for (j, e) in q.iter().enumerate() {
            div = Expr::Add(Box::new(div), Box::new(e.partial_state(d + j).expr().clone()));
        }
        let div_q = DriftExpr::from_expr(crate::dsl::simplify(&div), (d, m)).compile();
        let jac_b = p
            .iter()
            .chain(&q)
            .map(|e| (0..d + m).map(|i| e.partial_state(i).compile()).collect())
            .collect();

        Ok(Self {
            d,
            m,
            moment_order,
            p_fast: p.iter().map(DriftExpr::compile).collect(),
            q_fast: q.iter().map(DriftExpr::compile).collect(),
            p,
            q,
            x0,
            div_q,
            jac_b,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d + self.m
    }

    pub fn moment_order(&self) -> usize {
        self.moment_order
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn p(&self) -> &[DriftExpr] {
        &self.p
    }

    pub fn q(&self) -> &[DriftExpr] {
        &self.q
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            d: self.d,
            m: self.m,
            p: self.p.iter().map(ToString::to_string).collect(),
            q: self.q.iter().map(ToString::to_string).collect(),
            moment_order: self.moment_order,
            x0: self.x0.clone(),
        }
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Self> {
        Self::from_exprs(self.p.clone(), self.q.clone(), self.moment_order, x0)
    }

    /// Whether `q` depends on the law at all.
    pub fn uses_moments(&self) -> bool {
        self.q.iter().any(DriftExpr::uses_moments)
    }

    /// `p = x2` componentwise (second-order / Hamiltonian form).
    pub fn is_hamiltonian(&self) -> bool {
        self.d == self.m
            && self
                .p
                .iter()
                .enumerate()
                .all(|(i, e)| matches!(e.expr(), Expr::Var(v) if *v == self.d + i))
    }

    /// Whether `p` depends on the first component only.
    pub fn p_depends_only_on_first(&self) -> bool {
        self.p.iter().all(|e| (self.d..self.d + self.m).all(|j| !e.uses_var(j)))
    }

    /// Moments of the Dirac mass at `x2`, flat layout.
    pub fn dirac_moments(&self, x2: &[f64]) -> MomentVector {
        MomentVector::dirac(x2, self.moment_order)
    }

    pub fn eval_p(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.p_fast) {
            *o = e.eval(t, x, &[])?;
        }
        Ok(())
    }

    pub fn eval_q(&self, t: f64, x: &[f64], moments: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.q_fast) {
            *o = e.eval(t, x, moments)?;
        }
        Ok(())
    }

    /// Full drift `b = (p, q)`.
    pub fn drift(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let (a, b) = out.split_at_mut(self.d);
        self.eval_p(t, x, a)?;
        self.eval_q(t, x, moments, b)?;
        Ok(out)
    }

    /// `div_{x2} q` from symbolic partials.
    pub fn div_x2_q(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<f64> {
        self.div_q.eval(t, x, moments)
    }

    /// `div_{x2} q` by central differences with step `1e-5 (1 + |x_i|)`.
    pub fn div_x2_q_fd(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<f64> {
        let mut xs = x.to_vec();
        let mut div = 0.0;
        for j in 0..self.m {
            let i = self.d + j;
            let h = 1e-5 * (1.0 + x[i].abs());
            xs[i] = x[i] + h;
            let up = self.q_fast[j].eval(t, &xs, moments)?;
            xs[i] = x[i] - h;
            let dn = self.q_fast[j].eval(t, &xs, moments)?;
            xs[i] = x[i];
            div += (up - dn) / (2.0 * h);
        }
        Ok(div)
    }

    /// Jacobian `J[j][i] = d b_j / d x_i` with the measure argument frozen.
    pub fn jacobian_b(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.jac_b
            .iter()
            .map(|row| row.iter().map(|e| e.eval(t, x, moments)).collect())
            .collect()
    }

    /// Samples states uniformly in `[-radius, radius]^(d+m)` and times in
    /// `[0, t_end]`, with the law frozen at the Dirac mass of the sampled
    /// `x2`, and records the largest `|q|`, `|dq/dx|` and `|d2q/dx2|`.
    pub fn sample_drift_bounds(&self, radius: f64, t_end: f64, samples: usize, seed: u64) -> Result<DriftBounds> {
        if !(radius > 0.0 && radius.is_finite()) || !(t_end >= 0.0) || samples == 0 {
            return Err(Error::input("need a positive radius, t_end >= 0 and at least one sample"));
        }
        let n = self.dim();
        let grad: Vec<Vec<DriftExpr>> = self.q.iter().map(|e| (0..n).map(|i| e.partial_state(i)).collect()).collect();
        let hess: Vec<Compiled> = grad
            .iter()
            .flat_map(|row| row.iter().flat_map(|g| (0..n).map(move |k| g.partial_state(k).compile())))
            .collect();
        let grad: Vec<Vec<Compiled>> = grad.iter().map(|row| row.iter().map(DriftExpr::compile).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DriftBounds {
            samples,
            radius,
            max_q: 0.0,
            max_gradient: 0.0,
            max_hessian: 0.0,
        };
        let mut x = vec![0.0; n];
        for _ in 0..samples {
            x.iter_mut().for_each(|v| *v = rng.random_range(-radius..=radius));
            let t = rng.random_range(0.0..=t_end);
            let mom = self.dirac_moments(&x[self.d..]);
            let mom = mom.as_flat();
            for (j, q) in self.q_fast.iter().enumerate() {
                out.max_q = out.max_q.max(q.eval(t, &x, mom)?.abs());
                let g2: f64 = grad[j].iter().map(|g| g.eval(t, &x, mom).map(|v| v * v)).sum::<Result<f64>>()?;
                out.max_gradient = out.max_gradient.max(g2.sqrt());
            }
            for h in &hess {
                out.max_hessian = out.max_hessian.max(h.eval(t, &x, mom)?.abs());
            }
        }
        Ok(out)
    }

    /// Symbolic partial of `q_j` with respect to a moment symbol.
    pub fn q_moment_partial(&self, j: usize, order: u32, coord: usize) -> DriftExpr {
        self.q[j].partial(Wrt::Moment { order, coord })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_bounds_of_polynomial_drift() {
        let lin = DegenerateSystem::new(1, 1, &["x2"], &["-x2"], 0, &[0.0, 0.0]).unwrap();
        let b = lin.sample_drift_bounds(2.0, 1.0, 500, 1).unwrap();
        assert!(b.max_q <= 2.0 && b.max_q > 1.9);
        assert_eq!(b.max_gradient, 1.0);
        assert_eq!(b.max_hessian, 0.0);

        let cubic = DegenerateSystem::new(1, 1, &["x2"], &["x1 - x2^3"], 0, &[0.0, 0.0]).unwrap();
        let b = cubic.sample_drift_bounds(1.0, 1.0, 2000, 2).unwrap();
        assert!(b.max_hessian <= 6.0 && b.max_hessian > 5.8);
        assert!(b.max_gradient <= 10f64.sqrt());
    }

    #[test]
    fn rejects_moment_symbols_in_p() {
        let err = DegenerateSystem::new(1, 1, &["M1"], &["0"], 1, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn rejects_moment_order_overflow() {
        assert!(DegenerateSystem::new(1, 1, &["x2"], &["M3"], 2, &[0.0, 0.0]).is_err());
        assert!(DegenerateSystem::new(1, 1, &["x2"], &["M2"], 2, &[0.0, 0.0]).is_ok());
    }

    #[test]
    fn hamiltonian_detection() {
        let s = DegenerateSystem::new(1, 1, &["x2"], &["M1*(x1^2 - 1)"], 1, &[1.0, -1.0]).unwrap();
        assert!(s.is_hamiltonian());
        assert!(!s.p_depends_only_on_first());
        let g = DegenerateSystem::new(1, 1, &["x1"], &["-x2"], 1, &[1.0, 0.0]).unwrap();
        assert!(!g.is_hamiltonian());
        assert!(g.p_depends_only_on_first());
    }

    #[test]
    fn symbolic_and_fd_divergence_agree() {
        let s = DegenerateSystem::new(1, 2, &["x2 - x3"], &["tanh(x2)*M2", "sin(x3*x1) + M1"], 2, &[0.0; 3]).unwrap();
        let x = [0.3, -0.7, 1.1];
        let mo = s.dirac_moments(&x[1..]);
        let a = s.div_x2_q(0.0, &x, mo.as_flat()).unwrap();
        let b = s.div_x2_q_fd(0.0, &x, mo.as_flat()).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
