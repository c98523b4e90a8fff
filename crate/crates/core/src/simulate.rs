//! Euler-Maruyama particle simulation of the degenerate system, the
//! auxiliary process used by the change of measure, and a Monte Carlo check
//! of the distribution-dependent Ito formula.
//!
//! Every particle owns a ChaCha8 stream keyed by `(seed, particle)`, so
//! results do not depend on the number of worker threads. Empirical
//! moments are reduced sequentially in particle order at each step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dsl::{Compiled, DriftExpr, Wrt};
use crate::error::{Error, Result};
use crate::measure::uniform_moments_into;
use crate::path::ReferencePath;
use crate::system::{DegenerateSystem, SystemSpec};

/// Test hook for switching the Brownian forcing off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum NoiseMode {
    #[default]
    Brownian,
    Off,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub noise: NoiseMode,
}

impl SimConfig {
    pub fn new(particles: usize, dt: f64, horizon: f64, seed: u64) -> Self {
        Self {
            particles,
            dt,
            horizon,
            seed,
            workers: 0,
            noise: NoiseMode::Brownian,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    /// Number of steps `T / dt`, which must be an integer to within 1e-9.
    pub fn steps(&self) -> Result<usize> {
        if self.particles == 0 {
            return Err(Error::input("particle count must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::input("time step must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::input("horizon must be positive"));
        }
        let ratio = self.horizon / self.dt;
        let k = ratio.round();
        if (ratio - k).abs() > 1e-9 * ratio.max(1.0) || k < 1.0 {
            return Err(Error::input(format!("T/dt = {ratio} is not an integer")));
        }
        Ok(k as usize)
    }
}

/// Random stream of one particle or path.
pub fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

/// Runs `f` inside a pool with `workers` threads (0 = global pool).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::input(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trajectories and Brownian increments on a uniform grid.
#[derive(Debug, Clone)]
pub struct PathBundle {
    d: usize,
    m: usize,
    dt: f64,
    steps: usize,
    particles: usize,
    /// `[(i * (steps + 1) + k) * (d + m) + c]`
    states: Vec<f64>,
    /// `[(i * steps + k) * m + c]`, increment over `[t_k, t_{k+1}]`.
    increments: Option<Vec<f64>>,
    meta: BundleMetadata,
}

#[derive(Debug, Clone, Serialize)]
pub struct BundleMetadata {
    pub seed: u64,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub system: SystemSpec,
}

impl PathBundle {
    fn empty(sys: &DegenerateSystem, cfg: &SimConfig, steps: usize) -> Self {
        let n = sys.dim();
        Self {
            d: sys.d(),
            m: sys.m(),
            dt: cfg.dt,
            steps,
            particles: cfg.particles,
            states: vec![0.0; cfg.particles * (steps + 1) * n],
            increments: Some(vec![0.0; cfg.particles * steps * sys.m()]),
            meta: BundleMetadata {
                seed: cfg.seed,
                particles: cfg.particles,
                dt: cfg.dt,
                horizon: cfg.horizon,
                system: sys.spec(),
            },
        }
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.d + self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 * self.dt).collect()
    }

    pub fn state(&self, particle: usize, k: usize) -> &[f64] {
        let n = self.dim();
        let o = (particle * (self.steps + 1) + k) * n;
        &self.states[o..o + n]
    }

    /// The whole trajectory of one particle, `(steps + 1) * (d + m)` values.
    pub fn trajectory(&self, particle: usize) -> &[f64] {
        let len = (self.steps + 1) * self.dim();
        &self.states[particle * len..(particle + 1) * len]
    }

    pub fn increment(&self, particle: usize, k: usize) -> Option<&[f64]> {
        let m = self.m;
        let o = (particle * self.steps + k) * m;
        self.increments.as_ref().map(|v| &v[o..o + m])
    }

    pub fn has_increments(&self) -> bool {
        self.increments.is_some()
    }

    pub fn drop_increments(mut self) -> Self {
        self.increments = None;
        self
    }

    pub fn metadata(&self) -> &BundleMetadata {
        &self.meta
    }
}

/// One Euler-Maruyama step of a single particle.
#[allow(clippy::too_many_arguments)]
#[inline]
fn euler_step(
    sys: &DegenerateSystem,
    t: f64,
    dt: f64,
    sqdt: f64,
    x: &mut [f64],
    dw: &mut [f64],
    rng: &mut ChaCha8Rng,
    moments: &[f64],
    noise: NoiseMode,
    buf: &mut [f64],
) -> Result<()> {
    let d = sys.d();
    let (bp, bq) = buf.split_at_mut(d);
    sys.eval_p(t, x, bp)?;
    sys.eval_q(t, x, moments, bq)?;
    for w in dw.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *w = match noise {
            NoiseMode::Brownian => sqdt * z,
            NoiseMode::Off => 0.0,
        };
    }
    for i in 0..d {
        x[i] += dt * bp[i];
    }
    for (j, w) in dw.iter().enumerate() {
        x[d + j] += dt * bq[j] + w;
    }
    Ok(())
}

/// Step-by-step interacting particle system. Observers see the full cloud
/// at every grid time, so large runs need not store trajectories.
pub struct ParticleSystem<'a> {
    sys: &'a DegenerateSystem,
    cfg: SimConfig,
    steps: usize,
    step: usize,
    order: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
    moments: Vec<f64>,
}

impl<'a> ParticleSystem<'a> {
    pub fn new(sys: &'a DegenerateSystem, cfg: &SimConfig) -> Result<Self> {
        Self::with_moment_order(sys, cfg, sys.moment_order())
    }

    /// As [`ParticleSystem::new`] but maintaining moments up to `order`.
    pub fn with_moment_order(sys: &'a DegenerateSystem, cfg: &SimConfig, order: usize) -> Result<Self> {
        let steps = cfg.steps()?;
        let n = sys.dim();
        let mut states = Vec::with_capacity(cfg.particles * n);
        for _ in 0..cfg.particles {
            states.extend_from_slice(sys.x0());
        }
        let mut ps = Self {
            sys,
            cfg: cfg.clone(),
            steps,
            step: 0,
            order: order.max(sys.moment_order()),
            states,
            increments: vec![0.0; cfg.particles * sys.m()],
            rngs: (0..cfg.particles).map(|i| particle_rng(cfg.seed, i)).collect(),
            moments: Vec::new(),
        };
        ps.moments = vec![0.0; ps.order * sys.m()];
        ps.refresh_moments();
        Ok(ps)
    }

    fn refresh_moments(&mut self) {
        let (n, d, m) = (self.sys.dim(), self.sys.d(), self.sys.m());
        uniform_moments_into(&self.states, n, d, m, self.order, &mut self.moments);
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.steps
    }

    /// Row-major `N x (d + m)` current states.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Increments of the last completed step, `N x m`.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Empirical moments of the second component at the current time.
    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    /// Advances every particle by one step; moments are refreshed afterwards.
    pub fn advance(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::input("simulation already reached the horizon"));
        }
        let (n, m) = (self.sys.dim(), self.sys.m());
        let t = self.time();
        let dt = self.cfg.dt;
        let sqdt = dt.sqrt();
        let noise = self.cfg.noise;
        let sys = self.sys;
        // The drift sees the law at the start of the step, shared by all particles.
        let uses = sys.uses_moments();
        let mo: &[f64] = if uses { &self.moments } else { &[] };
        let failure = self
            .states
            .par_chunks_mut(n)
            .zip(self.increments.par_chunks_mut(m))
            .zip(self.rngs.par_iter_mut())
            .enumerate()
            .map_init(
                || vec![0.0; n],
                |buf, (i, ((x, dw), rng))| {
                    euler_step(sys, t, dt, sqdt, x, dw, rng, mo, noise, buf).err().map(|e| (i, e))
                },
            )
            .flatten()
            .min_by_key(|(i, _)| *i);
        if let Some((particle, e)) = failure {
            return Err(Error::Simulation {
                step: self.step,
                particle,
                source: Box::new(e),
            });
        }
        self.step += 1;
        self.refresh_moments();
        Ok(())
    }
}

/// Runs the interacting system, calling `observe(k, t, system)` at every grid
/// time including `t = 0`.
pub fn simulate_observed(
    sys: &DegenerateSystem,
    cfg: &SimConfig,
    mut observe: impl FnMut(usize, f64, &ParticleSystem<'_>) -> Result<()> + Send,
) -> Result<()> {
    with_workers(cfg.workers, || {
        let mut ps = ParticleSystem::new(sys, cfg)?;
        observe(0, 0.0, &ps)?;
        while !ps.is_done() {
            ps.advance()?;
            observe(ps.step_index(), ps.time(), &ps)?;
        }
        Ok(())
    })?
}

/// Interacting-particle Euler-Maruyama run storing every trajectory.
pub fn simulate_mv(sys: &DegenerateSystem, cfg: &SimConfig) -> Result<PathBundle> {
    let steps = cfg.steps()?;
    let mut bundle = PathBundle::empty(sys, cfg, steps);
    let n = sys.dim();
    let m = sys.m();
    let stride = (steps + 1) * n;
    simulate_observed(sys, cfg, |k, _, ps| {
        for (i, x) in ps.states().chunks_exact(n).enumerate() {
            let o = i * stride + k * n;
            bundle.states[o..o + n].copy_from_slice(x);
        }
        if k > 0 {
            let incs = bundle.increments.as_mut().expect("increments are recorded");
            for (i, w) in ps.increments().chunks_exact(m).enumerate() {
                let o = (i * steps + k - 1) * m;
                incs[o..o + m].copy_from_slice(w);
            }
        }
        Ok(())
    })?;
    Ok(bundle)
}

/// Single-path run with the random stream of `particle`. Only defined for
/// drifts without moment symbols, where it reproduces the corresponding
/// particle of [`simulate_mv`] exactly.
pub fn simulate_single(sys: &DegenerateSystem, cfg: &SimConfig, particle: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(cfg.steps()? + 1);
    simulate_single_with(sys, cfg, particle, |_, x, _| out.push(x.to_vec()))?;
    Ok(out)
}

/// As [`simulate_single`] but streaming: `visit(k, x_k, dw)` sees each grid
/// state and the increment that produced it (zero at `k = 0`).
pub fn simulate_single_with(
    sys: &DegenerateSystem,
    cfg: &SimConfig,
    particle: usize,
    mut visit: impl FnMut(usize, &[f64], &[f64]),
) -> Result<()> {
    if sys.uses_moments() {
        return Err(Error::Unsupported(
            "a single path cannot be simulated when the drift depends on the law".into(),
        ));
    }
    let steps = cfg.steps()?;
    let mut rng = particle_rng(cfg.seed, particle);
    let mut x = sys.x0().to_vec();
    let mut dw = vec![0.0; sys.m()];
    let mut buf = vec![0.0; sys.dim()];
    let sqdt = cfg.dt.sqrt();
    visit(0, &x, &dw);
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        euler_step(sys, t, cfg.dt, sqdt, &mut x, &mut dw, &mut rng, &[], cfg.noise, &mut buf).map_err(|e| {
            Error::Simulation {
                step: k,
                particle,
                source: Box::new(e),
            }
        })?;
        visit(k + 1, &x, &dw);
    }
    Ok(())
}

fn check_path_grid(phi: &ReferencePath, cfg: &SimConfig, steps: usize) -> Result<()> {
    if phi.steps() != steps || (phi.t_end() - cfg.horizon).abs() > 1e-12 * cfg.horizon.max(1.0) {
        return Err(Error::input(format!(
            "reference path grid ({} steps on [0, {}]) differs from the simulation grid ({} steps on [0, {}])",
            phi.steps(),
            phi.t_end(),
            steps,
            cfg.horizon
        )));
    }
    Ok(())
}

/// Auxiliary process: `X2 = phi2 + W` and `dX1 = p(X) dt` (explicit Euler).
pub fn simulate_auxiliary(sys: &DegenerateSystem, phi: &ReferencePath, cfg: &SimConfig) -> Result<PathBundle> {
    phi.check_structure()?;
    let steps = cfg.steps()?;
    check_path_grid(phi, cfg, steps)?;
    let (d, m, n) = (sys.d(), sys.m(), sys.dim());
    let mut bundle = PathBundle::empty(sys, cfg, steps);
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let stride = (steps + 1) * n;
    let mut incs = bundle.increments.take().expect("fresh bundle");
    let result = with_workers(cfg.workers, || {
        bundle
            .states
            .par_chunks_mut(stride)
            .zip(incs.par_chunks_mut(steps * m))
            .enumerate()
            .map(|(i, (traj, inc))| -> Option<(usize, Error)> {
                let mut rng = particle_rng(cfg.seed, i);
                let mut w = vec![0.0; m];
                let mut p = vec![0.0; d];
                traj[..n].copy_from_slice(phi.phi()[0].as_slice());
                for k in 0..steps {
                    let (cur, next) = traj[k * n..(k + 2) * n].split_at_mut(n);
                    if let Err(e) = sys.eval_p(k as f64 * dt, cur, &mut p) {
                        return Some((
                            i,
                            Error::Simulation {
                                step: k,
                                particle: i,
                                source: Box::new(e),
                            },
                        ));
                    }
                    for c in 0..m {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let dw = match cfg.noise {
                            NoiseMode::Brownian => sqdt * z,
                            NoiseMode::Off => 0.0,
                        };
                        inc[k * m + c] = dw;
                        w[c] += dw;
                    }
                    for j in 0..d {
                        next[j] = cur[j] + dt * p[j];
                    }
                    let target = phi.phi2(k + 1);
                    for c in 0..m {
                        next[d + c] = target[c] + w[c];
                    }
                }
                None
            })
            .flatten()
            .min_by_key(|(i, _)| *i)
    })?;
    if let Some((_, e)) = result {
        return Err(e);
    }
    bundle.increments = Some(incs);
    Ok(bundle)
}

/// Per-path `log R = sum <zeta, dW> - 1/2 sum |zeta|^2 dt` with
/// `zeta = q(X, law of X2) - dphi2/dt`, the law being the empirical law of
/// the bundle's second component at each step (left-point sums).
pub fn girsanov_log_density(sys: &DegenerateSystem, phi: &ReferencePath, bundle: &PathBundle) -> Result<Vec<f64>> {
    if !bundle.has_increments() {
        return Err(Error::input("bundle has no Brownian increments"));
    }
    if bundle.dim() != sys.dim() || phi.steps() != bundle.steps() {
        return Err(Error::input("bundle, path and system disagree on dimensions or grid"));
    }
    let (d, m, n) = (sys.d(), sys.m(), sys.dim());
    let order = sys.moment_order();
    let steps = bundle.steps();
    let dt = bundle.dt();
    // Moments per step, computed once.
    let mut moments = vec![0.0; (steps + 1) * order * m];
    if sys.uses_moments() {
        let mut cloud = vec![0.0; bundle.particles() * n];
        for k in 0..=steps {
            for i in 0..bundle.particles() {
                cloud[i * n..(i + 1) * n].copy_from_slice(bundle.state(i, k));
            }
            uniform_moments_into(&cloud, n, d, m, order, &mut moments[k * order * m..(k + 1) * order * m]);
        }
    }
    (0..bundle.particles())
        .into_par_iter()
        .map(|i| {
            let mut q = vec![0.0; m];
            let mut stoch = 0.0;
            let mut energy = 0.0;
            for k in 0..steps {
                let mo = &moments[k * order * m..(k + 1) * order * m];
                sys.eval_q(k as f64 * dt, bundle.state(i, k), mo, &mut q)?;
                let dw = bundle.increment(i, k).expect("checked above");
                let target = phi.phi2dot(k);
                for c in 0..m {
                    let z = q[c] - target[c];
                    stoch += z * dw[c];
                    energy += z * z;
                }
            }
            Ok(stoch - 0.5 * energy * dt)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorWindow {
    pub t0: f64,
    pub t1: f64,
    /// Difference quotient of `E[h]` over the window.
    pub lhs: f64,
    /// Window average of `E[(d/dt + L) h]`.
    pub rhs: f64,
    pub discrepancy: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorReport {
    pub windows: Vec<GeneratorWindow>,
    pub max_abs_discrepancy: f64,
    /// Largest `|discrepancy| / std_error` over windows.
    pub max_z: f64,
    pub times: Vec<f64>,
    /// `E[h(t_k, Z, law)]` over the grid.
    pub mean_h: Vec<f64>,
}

struct TestFunctional {
    h: Compiled,
    h_t: Compiled,
    h_x: Vec<Compiled>,
    /// Diagonal and off-diagonal second derivatives in the noisy block.
    h_yy: Vec<Vec<Compiled>>,
    /// `(order, coord, dh/dM)` for every moment symbol present.
    h_m: Vec<(usize, usize, Compiled)>,
}

impl TestFunctional {
    fn new(sys: &DegenerateSystem, h: &DriftExpr) -> Result<Self> {
        if h.dims() != (sys.d(), sys.m()) {
            return Err(Error::input(format!(
                "test functional is defined for dims {:?}, system has ({}, {})",
                h.dims(),
                sys.d(),
                sys.m()
            )));
        }
        let d = sys.d();
        let mut h_m = Vec::new();
        for k in 1..=h.max_moment_order() {
            for c in 0..sys.m() {
                let p = h.partial(Wrt::Moment { order: k, coord: c });
                if !p.is_zero() {
                    h_m.push((k as usize, c, p.compile()));
                }
            }
        }
        Ok(Self {
            h: h.compile(),
            h_t: h.partial(Wrt::Time).compile(),
            h_x: (0..sys.dim()).map(|i| h.partial_state(i).compile()).collect(),
            h_yy: (0..sys.m())
                .map(|a| {
                    let ha = h.partial_state(d + a);
                    (0..sys.m()).map(|b| ha.partial_state(d + b).compile()).collect()
                })
                .collect(),
            h_m,
        })
    }
}

/// Compares `d/dt E[h(t, Z_t, law)]` with `E[(d/dt + L) h]` on `windows`
/// equal windows of the grid, for the interacting particle approximation.
/// `h` may use time, state and moment symbols of the second component;
/// derivatives in the measure argument follow from the moment chain rule.
pub fn generator_check(sys: &DegenerateSystem, h: &DriftExpr, cfg: &SimConfig, windows: usize) -> Result<GeneratorReport> {
    let f = TestFunctional::new(sys, h)?;
    let steps = cfg.steps()?;
    if windows == 0 || windows > steps {
        return Err(Error::input("window count must be between 1 and the number of steps"));
    }
    let (d, m, n) = (sys.d(), sys.m(), sys.dim());
    let order = sys.moment_order().max(h.max_moment_order() as usize);
    let dt = cfg.dt;
    let big_n = cfg.particles as f64;

    let mut mean_h = vec![0.0; steps + 1];
    let mut mean_lh = vec![0.0; steps];
    let mut var_inc = vec![0.0; steps];

    let run = || -> Result<()> {
        let mut ps = ParticleSystem::with_moment_order(sys, cfg, order)?;
        let mut q = vec![0.0; m];
        let mut b = vec![0.0; n];
        loop {
            let k = ps.step_index();
            let t = ps.time();
            let mo = ps.moments().to_vec();
            let states = ps.states();
            // Law-level averages: A for the generator, B for the martingale part.
            let mut a_coef = vec![0.0; f.h_m.len()];
            let mut b_coef = vec![0.0; f.h_m.len()];
            for x in states.chunks_exact(n) {
                sys.eval_q(t, x, &mo, &mut q)?;
                for (slot, (ord, c, dh)) in f.h_m.iter().enumerate() {
                    let (ord, c) = (*ord, *c);
                    let y = x[d + c];
                    let kf = ord as f64;
                    let second = if ord >= 2 { 0.5 * kf * (kf - 1.0) * y.powi(ord as i32 - 2) } else { 0.0 };
                    a_coef[slot] += second + q[c] * kf * y.powi(ord as i32 - 1);
                    b_coef[slot] += dh.eval(t, x, &mo)?;
                }
            }
            a_coef.iter_mut().chain(b_coef.iter_mut()).for_each(|v| *v /= big_n);

            let mut sum_h = 0.0;
            let mut sum_lh = 0.0;
            let mut sum_g2 = 0.0;
            let mut sum_hess = 0.0;
            for x in states.chunks_exact(n) {
                sum_h += f.h.eval(t, x, &mo)?;
                if k == steps {
                    continue;
                }
                let (bp, bq) = b.split_at_mut(d);
                sys.eval_p(t, x, bp)?;
                sys.eval_q(t, x, &mo, bq)?;
                let mut lh = f.h_t.eval(t, x, &mo)?;
                for (i, hx) in f.h_x.iter().enumerate() {
                    lh += b[i] * hx.eval(t, x, &mo)?;
                }
                for a in 0..m {
                    lh += 0.5 * f.h_yy[a][a].eval(t, x, &mo)?;
                    for bb in 0..m {
                        let v = f.h_yy[a][bb].eval(t, x, &mo)?;
                        sum_hess += v * v;
                    }
                }
                for (slot, (_, _, dh)) in f.h_m.iter().enumerate() {
                    lh += dh.eval(t, x, &mo)? * a_coef[slot];
                }
                sum_lh += lh;
                for c in 0..m {
                    let mut g = f.h_x[d + c].eval(t, x, &mo)?;
                    for (slot, (ord, cc, _)) in f.h_m.iter().enumerate() {
                        if *cc == c {
                            g += b_coef[slot] * *ord as f64 * x[d + c].powi(*ord as i32 - 1);
                        }
                    }
                    sum_g2 += g * g;
                }
            }
            mean_h[k] = sum_h / big_n;
            if k == steps {
                break;
            }
            mean_lh[k] = sum_lh / big_n;
            var_inc[k] = (sum_g2 * dt + 0.5 * sum_hess * dt * dt) / (big_n * big_n);
            ps.advance()?;
        }
        Ok(())
    };
    with_workers(cfg.workers, run)??;

    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let k0 = w * steps / windows;
        let k1 = (w + 1) * steps / windows;
        let span = (k1 - k0) as f64 * dt;
        let lhs = (mean_h[k1] - mean_h[k0]) / span;
        let rhs = mean_lh[k0..k1].iter().sum::<f64>() * dt / span;
        let se = var_inc[k0..k1].iter().sum::<f64>().sqrt() / span;
        out.push(GeneratorWindow {
            t0: k0 as f64 * dt,
            t1: k1 as f64 * dt,
            lhs,
            rhs,
            discrepancy: lhs - rhs,
            std_error: se,
        });
    }
    let max_abs_discrepancy = out.iter().fold(0.0f64, |a, w| a.max(w.discrepancy.abs()));
    let max_z = out.iter().fold(0.0f64, |a, w| {
        let z = if w.std_error > 0.0 {
            w.discrepancy.abs() / w.std_error
        } else if w.discrepancy.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        a.max(z)
    });
    Ok(GeneratorReport {
        windows: out,
        max_abs_discrepancy,
        max_z,
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        mean_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_integral_horizon() {
        assert!(SimConfig::new(1, 0.3, 1.0, 0).steps().is_err());
        assert_eq!(SimConfig::new(1, 0.1, 1.0, 0).steps().unwrap(), 10);
        assert!(SimConfig::new(0, 0.1, 1.0, 0).steps().is_err());
    }

    #[test]
    fn noiseless_constant_velocity() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["0"], 1, &[0.0, 1.0]).unwrap();
        let cfg = SimConfig::new(3, 0.01, 1.0, 1).with_noise(NoiseMode::Off);
        let b = simulate_mv(&sys, &cfg).unwrap();
        for i in 0..3 {
            for k in 0..=100 {
                let s = b.state(i, k);
                assert!((s[0] - k as f64 * 0.01).abs() < 1e-12);
                assert_eq!(s[1], 1.0);
            }
        }
    }

    #[test]
    fn driftless_at_metastable_start() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["M1*(x1^2 - 1)"], 1, &[1.0, 0.5]).unwrap();
        let cfg = SimConfig::new(4, 0.01, 0.01, 3).with_noise(NoiseMode::Off);
        let b = simulate_mv(&sys, &cfg).unwrap();
        assert_eq!(b.state(0, 1)[1], 0.5);
    }

    #[test]
    fn overflow_reports_step_and_particle() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["exp(x2^4)"], 1, &[0.0, 2.0]).unwrap();
        let cfg = SimConfig::new(2, 0.1, 1.0, 0);
        match simulate_mv(&sys, &cfg) {
            Err(Error::Simulation { particle, .. }) => assert_eq!(particle, 0),
            other => panic!("expected a simulation error, got {other:?}"),
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["-M1 + sin(x1)"], 1, &[0.2, -0.3]).unwrap();
        let a = simulate_mv(&sys, &SimConfig::new(50, 0.01, 0.5, 9).with_workers(1)).unwrap();
        let b = simulate_mv(&sys, &SimConfig::new(50, 0.01, 0.5, 9).with_workers(4)).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.increments, b.increments);
    }

    #[test]
    fn auxiliary_tracks_reference_without_noise() {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["-x2"], 1, &[0.0, 0.0]).unwrap();
        let phi = ReferencePath::lift(&sys, 1.0, 100, 1, |t| (vec![t], vec![1.0])).unwrap();
        let cfg = SimConfig::new(2, 0.01, 1.0, 5).with_noise(NoiseMode::Off);
        let b = simulate_auxiliary(&sys, &phi, &cfg).unwrap();
        for k in 0..=100 {
            assert_eq!(b.state(1, k)[1], phi.phi2(k)[0]);
            // Euler on phi1' = t: error dt/2 * t.
            assert!((b.state(1, k)[0] - phi.phi1(k)[0]).abs() <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn zero_zeta_gives_unit_density() {
        // q = 0 and phi2 constant: zeta vanishes identically.
        let sys = DegenerateSystem::new(1, 1, &["0"], &["0"], 1, &[0.0, 1.0]).unwrap();
        let phi = ReferencePath::lift(&sys, 1.0, 50, 1, |_| (vec![1.0], vec![0.0])).unwrap();
        let b = simulate_auxiliary(&sys, &phi, &SimConfig::new(10, 0.02, 1.0, 2)).unwrap();
        let r = girsanov_log_density(&sys, &phi, &b).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
        assert!(girsanov_log_density(&sys, &phi, &b.drop_increments()).is_err());
    }
}
