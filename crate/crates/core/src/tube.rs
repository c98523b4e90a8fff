//! Path norms, Monte Carlo tube probabilities and empirical checks of the
//! small-ball assumptions.
//!
//! All estimators draw sample `i` from the random stream `(seed, i)`, so two
//! tube centres evaluated on the same configuration see the same Brownian
//! paths (common random numbers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::om::om_action;
use crate::path::ReferencePath;
use crate::simulate::{simulate_mv, simulate_single_with, with_workers, ParticleSystem, SimConfig};
use crate::system::DegenerateSystem;

const Z95: f64 = 1.959963984540054;

// Norms ----------------------------------------------------------------------

/// Norms on grid paths `f_0..f_K` with Euclidean point values `|f_k|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathNorm {
    /// `max_k |f_k|`.
    Sup,
    /// `(dt sum_k |f_k|^p)^(1/p)`, `p >= 2`.
    Lp { p: f64 },
    /// Sup norm plus `max_{j<k} |f_k - f_j| / (t_k - t_j)^alpha`, `0 < alpha < 1/2`.
    Holder { alpha: f64 },
}

impl PathNorm {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PathNorm::Sup => Ok(()),
            PathNorm::Lp { p } if p.is_finite() && p >= 2.0 => Ok(()),
            PathNorm::Lp { p } => Err(Error::input(format!("L^p norm needs p >= 2, got {p}"))),
            PathNorm::Holder { alpha } if alpha > 0.0 && alpha < 0.5 => Ok(()),
            PathNorm::Holder { alpha } => Err(Error::input(format!("Holder exponent must lie in (0, 1/2), got {alpha}"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PathNorm::Sup => "sup".into(),
            PathNorm::Lp { p } => format!("L{p}"),
            PathNorm::Holder { alpha } => format!("holder{alpha}"),
        }
    }

    /// Constant `c` with `|f| >= c |f|_2` on a grid of `K + 1` nodes spanning
    /// `[0, t_end]`, where `|f|_2 = (dt sum_k |f_k|^2)^(1/2)`. With
    /// `S = t_end + dt` the total weight: sup and Holder give `S^(-1/2)`,
    /// `L^p` gives `S^(1/p - 1/2)` (Holder's inequality).
    pub fn l2_constant(&self, t_end: f64, dt: f64) -> f64 {
        let s = t_end + dt;
        match *self {
            PathNorm::Sup | PathNorm::Holder { .. } => s.powf(-0.5),
            PathNorm::Lp { p } => s.powf(1.0 / p - 0.5),
        }
    }
}

/// `(dt sum_k |f_k|^2)^(1/2)`.
pub fn discrete_l2(f: &[Vec<f64>], dt: f64) -> f64 {
    (dt * f.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()).sqrt()
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn path_norm(norm: &PathNorm, f: &[Vec<f64>], dt: f64) -> Result<f64> {
    norm.validate()?;
    if f.is_empty() {
        return Err(Error::input("empty path"));
    }
    if !(dt > 0.0) {
        return Err(Error::input("grid step must be positive"));
    }
    let sup = f.iter().map(|r| euclid(r)).fold(0.0, f64::max);
    Ok(match *norm {
        PathNorm::Sup => sup,
        PathNorm::Lp { p } => (dt * f.iter().map(|r| euclid(r).powf(p)).sum::<f64>()).powf(1.0 / p),
        PathNorm::Holder { alpha } => {
            if f.len() < 3 {
                return Err(Error::input("the Holder norm needs at least two grid intervals"));
            }
            sup + holder_seminorm(f, dt, alpha)
        }
    })
}

fn holder_seminorm(f: &[Vec<f64>], dt: f64, alpha: f64) -> f64 {
    let n = f.len();
    let weights: Vec<f64> = (0..n).map(|l| if l == 0 { 0.0 } else { (l as f64 * dt).powf(-alpha) }).collect();
    let mut best = 0.0f64;
    for j in 0..n {
        for k in j + 1..n {
            let diff: f64 = f[k].iter().zip(&f[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.max(diff * weights[k - j]);
        }
    }
    best
}

// Intervals ------------------------------------------------------------------

/// Wilson score interval at 95 % for `successes` out of `n`.
pub fn wilson_interval(successes: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = (successes / nf).clamp(0.0, 1.0);
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // Rounding near the ends must not push the estimate outside.
    ((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0))
}

// Sampling engine --------------------------------------------------------------

/// Which coordinates of the state enter the tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TubeTarget {
    /// `|X - phi|` over all coordinates.
    #[default]
    Full,
    /// `|X2 - phi2|`, the equivalent form for controllable systems.
    Second,
}

#[derive(Debug, Clone, Serialize)]
pub struct TubeConfig {
    pub samples: usize,
    pub dt: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    /// Weight sup-norm hits by the probability that a Brownian bridge between
    /// grid points stays inside the tube.
    pub bridge: bool,
    pub target: TubeTarget,
}

impl TubeConfig {
    pub fn new(samples: usize, dt: f64, seed: u64) -> Self {
        Self {
            samples,
            dt,
            seed,
            workers: 0,
            bridge: false,
            target: TubeTarget::Full,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Part {
    Full,
    Second,
}

/// A norm of one deviation path per sample: `X - centre` restricted to
/// `part`, or the driving Brownian path itself when `centre` is `None`.
#[derive(Debug, Clone, Copy)]
struct Channel {
    centre: Option<usize>,
    part: Part,
    norm: PathNorm,
}

struct Accum {
    norm: PathNorm,
    sup: f64,
    sum: f64,
    rows: Vec<Vec<f64>>,
    prev: Vec<f64>,
    log_survival: Vec<f64>,
}

impl Accum {
    fn new(norm: PathNorm, bridges: usize) -> Self {
        Self {
            norm,
            sup: 0.0,
            sum: 0.0,
            rows: Vec::new(),
            prev: Vec::new(),
            log_survival: vec![0.0; bridges],
        }
    }

    fn push(&mut self, dev: &[f64], dt: f64, bridge: &[f64]) {
        let r = euclid(dev);
        self.sup = self.sup.max(r);
        match self.norm {
            PathNorm::Sup => {}
            PathNorm::Lp { p } => self.sum += r.powf(p),
            PathNorm::Holder { .. } => self.rows.push(dev.to_vec()),
        }
        if !bridge.is_empty() && !self.prev.is_empty() {
            for (ls, &eps) in self.log_survival.iter_mut().zip(bridge) {
                *ls += bridge_log_survival(&self.prev, dev, eps, dt);
            }
        }
        if !bridge.is_empty() {
            self.prev.clear();
            self.prev.extend_from_slice(dev);
        }
    }

    fn finish(&self, dt: f64) -> f64 {
        match self.norm {
            PathNorm::Sup => self.sup,
            PathNorm::Lp { p } => (dt * self.sum).powf(1.0 / p),
            PathNorm::Holder { alpha } => self.sup + holder_seminorm(&self.rows, dt, alpha),
        }
    }
}

/// Log-probability that a Brownian bridge with variance `dt` per coordinate
/// from `a` to `b` stays within distance `eps` of the origin. One coordinate
/// uses both barriers; several use the radial distance to the sphere.
fn bridge_log_survival(a: &[f64], b: &[f64], eps: f64, dt: f64) -> f64 {
    let cross = |u: f64, v: f64| {
        if u <= 0.0 || v <= 0.0 {
            1.0
        } else {
            (-2.0 * u * v / dt).exp()
        }
    };
    let p = if a.len() == 1 {
        cross(eps - a[0], eps - b[0]) + cross(eps + a[0], eps + b[0])
    } else {
        cross(eps - euclid(a), eps - euclid(b))
    };
    if p >= 1.0 {
        f64::NEG_INFINITY
    } else {
        (1.0 - p).ln()
    }
}

/// Per-sample channel norms and bridge log-survivals.
struct Draws {
    channels: usize,
    bridges: usize,
    norms: Vec<f64>,
    log_survival: Vec<f64>,
}

impl Draws {
    fn norm(&self, i: usize, c: usize) -> f64 {
        self.norms[i * self.channels + c]
    }

    fn survival(&self, i: usize, c: usize, b: usize) -> f64 {
        self.log_survival[(i * self.channels + c) * self.bridges + b].exp()
    }

    fn samples(&self) -> usize {
        self.norms.len() / self.channels.max(1)
    }
}

struct Sampler<'a> {
    sys: &'a DegenerateSystem,
    centres: Vec<&'a ReferencePath>,
    channels: Vec<Channel>,
    bridge: Vec<f64>,
}

impl Sampler<'_> {
    fn deviation(&self, ch: &Channel, k: usize, x: &[f64], w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let d = self.sys.d();
        let Some(c) = ch.centre else {
            out.extend_from_slice(w);
            return;
        };
        let phi = &self.centres[c].phi()[k];
        let range = match ch.part {
            Part::Full => 0..x.len(),
            Part::Second => d..x.len(),
        };
        out.extend(range.map(|j| x[j] - phi[j]));
    }

    fn new_accums(&self) -> Vec<Accum> {
        self.channels
            .iter()
            .map(|ch| {
                let b = if matches!(ch.norm, PathNorm::Sup) { self.bridge.len() } else { 0 };
                let mut a = Accum::new(ch.norm, b);
                a.log_survival.resize(self.bridge.len(), 0.0);
                a
            })
            .collect()
    }

    fn bridge_for(&self, ch: &Channel) -> &[f64] {
        if matches!(ch.norm, PathNorm::Sup) {
            &self.bridge
        } else {
            &[]
        }
    }

    fn observe(&self, acc: &mut [Accum], k: usize, x: &[f64], w: &[f64], dt: f64, buf: &mut Vec<f64>) {
        for (a, ch) in acc.iter_mut().zip(&self.channels) {
            self.deviation(ch, k, x, w, buf);
            a.push(buf, dt, self.bridge_for(ch));
        }
    }

    fn collect(&self, acc: &[Accum], dt: f64, norms: &mut Vec<f64>, surv: &mut Vec<f64>) {
        for a in acc {
            norms.push(a.finish(dt));
            surv.extend_from_slice(&a.log_survival);
        }
    }

    fn run(&self, samples: usize, dt: f64, horizon: f64, seed: u64, workers: usize) -> Result<Draws> {
        let cfg = SimConfig::new(samples, dt, horizon, seed).with_workers(workers);
        let steps = cfg.steps()?;
        for c in &self.centres {
            if c.steps() != steps || (c.t_end() - horizon).abs() > 1e-12 * horizon.max(1.0) {
                return Err(Error::input("tube centre grid differs from the sampling grid"));
            }
        }
        let m = self.sys.m();
        let (norms, log_survival) = if self.sys.uses_moments() {
            self.run_interacting(&cfg)?
        } else {
            let per: Vec<(Vec<f64>, Vec<f64>)> = with_workers(workers, || {
                (0..samples)
                    .into_par_iter()
                    .map_init(
                        || (Vec::new(), vec![0.0; m]),
                        |(buf, w), i| -> Result<_> {
                            let mut acc = self.new_accums();
                            w.iter_mut().for_each(|v| *v = 0.0);
                            simulate_single_with(self.sys, &cfg, i, |k, x, dw| {
                                for (wj, dj) in w.iter_mut().zip(dw) {
                                    *wj += dj;
                                }
                                self.observe(&mut acc, k, x, w, dt, buf);
                            })?;
                            let (mut n, mut s) = (Vec::new(), Vec::new());
                            self.collect(&acc, dt, &mut n, &mut s);
                            Ok((n, s))
                        },
                    )
                    .collect::<Result<Vec<_>>>()
            })??;
            let mut norms = Vec::with_capacity(samples * self.channels.len());
            let mut surv = Vec::new();
            for (n, s) in per {
                norms.extend(n);
                surv.extend(s);
            }
            (norms, surv)
        };
        Ok(Draws {
            channels: self.channels.len(),
            bridges: self.bridge.len(),
            norms,
            log_survival,
        })
    }

    /// Law-dependent drift: the samples are the particles of one system.
    fn run_interacting(&self, cfg: &SimConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (self.sys.dim(), self.sys.m());
        let dt = cfg.dt;
        with_workers(cfg.workers, || -> Result<_> {
            let mut ps = ParticleSystem::new(self.sys, cfg)?;
            let mut acc: Vec<Vec<Accum>> = (0..cfg.particles).map(|_| self.new_accums()).collect();
            let mut w = vec![0.0; cfg.particles * m];
            let visit = |acc: &mut Vec<Vec<Accum>>, w: &mut Vec<f64>, ps: &ParticleSystem<'_>, k: usize| {
                acc.par_iter_mut()
                    .zip(ps.states().par_chunks(n))
                    .zip(w.par_chunks_mut(m))
                    .zip(ps.increments().par_chunks(m))
                    .for_each_init(Vec::new, |buf, (((a, x), wi), dw)| {
                        if k > 0 {
                            for (wj, dj) in wi.iter_mut().zip(dw) {
                                *wj += dj;
                            }
                        }
                        self.observe(a, k, x, wi, dt, buf);
                    });
            };
            visit(&mut acc, &mut w, &ps, 0);
            while !ps.is_done() {
                ps.advance()?;
                visit(&mut acc, &mut w, &ps, ps.step_index());
            }
            let (mut norms, mut surv) = (Vec::new(), Vec::new());
            for a in &acc {
                self.collect(a, dt, &mut norms, &mut surv);
            }
            Ok((norms, surv))
        })?
    }
}

fn target_part(t: TubeTarget) -> Part {
    match t {
        TubeTarget::Full => Part::Full,
        TubeTarget::Second => Part::Second,
    }
}

fn check_eps(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::input("empty epsilon schedule"));
    }
    if let Some(e) = eps.iter().find(|e| e.is_nan() || **e < 0.0) {
        return Err(Error::input(format!("tube radius must be non-negative, got {e}")));
    }
    Ok(())
}

// Tube probabilities ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TubeEstimate {
    pub eps: f64,
    pub norm: PathNorm,
    pub hits: usize,
    pub trials: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// No hits: the estimate is 0 and only the upper bound carries information.
    pub low_information: bool,
    pub bridge_corrected: bool,
}

/// `P(|X - phi| <= eps)` by Monte Carlo.
pub fn tube_probability(
    sys: &DegenerateSystem,
    phi: &ReferencePath,
    norm: PathNorm,
    eps: f64,
    cfg: &TubeConfig,
) -> Result<TubeEstimate> {
    Ok(tube_probabilities(sys, phi, norm, &[eps], cfg)?.remove(0))
}

/// As [`tube_probability`] for several radii on the same samples.
pub fn tube_probabilities(
    sys: &DegenerateSystem,
    phi: &ReferencePath,
    norm: PathNorm,
    eps: &[f64],
    cfg: &TubeConfig,
) -> Result<Vec<TubeEstimate>> {
    norm.validate()?;
    check_eps(eps)?;
    phi.check_structure()?;
    if cfg.bridge && norm != PathNorm::Sup {
        return Err(Error::Unsupported("the bridge correction is defined for the sup norm only".into()));
    }
    let sampler = Sampler {
        sys,
        centres: vec![phi],
        channels: vec![Channel {
            centre: Some(0),
            part: target_part(cfg.target),
            norm,
        }],
        bridge: if cfg.bridge { eps.to_vec() } else { Vec::new() },
    };
    let draws = sampler.run(cfg.samples, cfg.dt, phi.t_end(), cfg.seed, cfg.workers)?;
    Ok(estimates(&draws, 0, norm, eps, cfg.bridge))
}

fn estimates(draws: &Draws, channel: usize, norm: PathNorm, eps: &[f64], bridge: bool) -> Vec<TubeEstimate> {
    let n = draws.samples();
    eps.iter()
        .enumerate()
        .map(|(b, &e)| {
            let mut hits = 0;
            let mut weight = 0.0;
            for i in 0..n {
                if draws.norm(i, channel) <= e {
                    hits += 1;
                    weight += if bridge { draws.survival(i, channel, b) } else { 1.0 };
                }
            }
            let (lo, hi) = wilson_interval(weight, n);
            TubeEstimate {
                eps: e,
                norm,
                hits,
                trials: n,
                p_hat: weight / n as f64,
                ci_lo: lo,
                ci_hi: hi,
                low_information: hits == 0,
                bridge_corrected: bridge,
            }
        })
        .collect()
}

// Ratio experiment -------------------------------------------------------------

/// Per-sample distances from one set of common random numbers: to `phi`,
/// to `psi`, and the norm of the driving Brownian path.
#[derive(Debug, Clone)]
pub struct CrnDistances {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub brownian: Vec<f64>,
}

impl CrnDistances {
    pub fn swapped(&self) -> Self {
        Self {
            phi: self.psi.clone(),
            psi: self.phi.clone(),
            brownian: self.brownian.clone(),
        }
    }
}

pub fn crn_distances(
    sys: &DegenerateSystem,
    phi: &ReferencePath,
    psi: &ReferencePath,
    norm: PathNorm,
    cfg: &TubeConfig,
) -> Result<CrnDistances> {
    norm.validate()?;
    phi.check_structure()?;
    psi.check_structure()?;
    if cfg.bridge {
        return Err(Error::Unsupported(
            "ratio experiments count raw hits; disable the bridge correction".into(),
        ));
    }
    if phi.phi()[0].iter().zip(&psi.phi()[0]).any(|(a, b)| a != b) {
        return Err(Error::input("the two tube centres must start at the same point"));
    }
    let part = target_part(cfg.target);
    let sampler = Sampler {
        sys,
        centres: vec![phi, psi],
        channels: vec![
            Channel { centre: Some(0), part, norm },
            Channel { centre: Some(1), part, norm },
            Channel { centre: None, part, norm },
        ],
        bridge: Vec::new(),
    };
    let draws = sampler.run(cfg.samples, cfg.dt, phi.t_end(), cfg.seed, cfg.workers)?;
    let n = draws.samples();
    Ok(CrnDistances {
        phi: (0..n).map(|i| draws.norm(i, 0)).collect(),
        psi: (0..n).map(|i| draws.norm(i, 1)).collect(),
        brownian: (0..n).map(|i| draws.norm(i, 2)).collect(),
    })
}

/// Ratio of two hit frequencies from paired samples, with a delta-method
/// interval in log space that accounts for the pairing.
#[derive(Debug, Clone, Serialize)]
pub struct PairedRatio {
    pub ratio: f64,
    pub log_se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub prediction: f64,
    /// `|log ratio - log prediction|`.
    pub log_error: f64,
    /// Within two 95 % half-widths of the prediction in log space.
    pub agrees: bool,
}

fn paired_ratio(a: usize, b: usize, both: usize, n: usize, log_prediction: f64) -> Option<PairedRatio> {
    if a == 0 || b == 0 {
        return None;
    }
    let nf = n as f64;
    let (pa, pb, pab) = (a as f64 / nf, b as f64 / nf, both as f64 / nf);
    let var = ((1.0 - pa) / pa + (1.0 - pb) / pb - 2.0 * (pab - pa * pb) / (pa * pb)) / nf;
    let log_se = var.max(0.0).sqrt();
    let log_r = (a as f64).ln() - (b as f64).ln();
    let half = Z95 * log_se;
    let log_error = (log_r - log_prediction).abs();
    Some(PairedRatio {
        ratio: a as f64 / b as f64,
        log_se,
        ci_lo: (log_r - half).exp(),
        ci_hi: (log_r + half).exp(),
        prediction: log_prediction.exp(),
        log_error,
        agrees: log_error <= 2.0 * half,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub eps: f64,
    pub hits_phi: usize,
    pub hits_psi: usize,
    pub hits_brownian: usize,
    /// `P(tube phi) / P(tube psi)` against `exp(L(phi) - L(psi))`.
    pub two_path: Option<PairedRatio>,
    /// `P(tube phi) / P(|W| <= eps)` against `exp(L(phi))`.
    pub brownian_phi: Option<PairedRatio>,
    /// `P(tube psi) / P(|W| <= eps)` against `exp(L(psi))`.
    pub brownian_psi: Option<PairedRatio>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub norm: PathNorm,
    pub samples: usize,
    pub action_phi: f64,
    pub action_psi: f64,
    pub delta_action: f64,
    pub prediction: f64,
    pub rows: Vec<RatioRow>,
    pub dropped: Vec<f64>,
    pub notices: Vec<String>,
    /// Two-path log errors ordered by decreasing `eps`.
    pub trend: Vec<(f64, f64)>,
    /// The log error does not grow as `eps` shrinks.
    pub trend_non_increasing: bool,
    pub all_agree: bool,
}

pub fn om_ratio_experiment(
    sys: &DegenerateSystem,
    phi: &ReferencePath,
    psi: &ReferencePath,
    norm: PathNorm,
    eps: &[f64],
    cfg: &TubeConfig,
) -> Result<RatioReport> {
    check_eps(eps)?;
    let dist = crn_distances(sys, phi, psi, norm, cfg)?;
    let la = om_action(sys, phi)?.total;
    let lb = om_action(sys, psi)?.total;
    Ok(ratio_report(&dist, norm, eps, la, lb))
}

/// Assembles a [`RatioReport`] from stored distances and actions.
pub fn ratio_report(dist: &CrnDistances, norm: PathNorm, eps: &[f64], action_phi: f64, action_psi: f64) -> RatioReport {
    let n = dist.phi.len();
    let delta = action_phi - action_psi;
    let mut order: Vec<f64> = eps.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    let mut notices = Vec::new();
    for &e in &order {
        let (mut a, mut b, mut w, mut ab, mut aw, mut bw) = (0, 0, 0, 0, 0, 0);
        for i in 0..n {
            let (ha, hb, hw) = (dist.phi[i] <= e, dist.psi[i] <= e, dist.brownian[i] <= e);
            a += ha as usize;
            b += hb as usize;
            w += hw as usize;
            ab += (ha && hb) as usize;
            aw += (ha && hw) as usize;
            bw += (hb && hw) as usize;
        }
        if a == 0 && b == 0 {
            dropped.push(e);
            notices.push(format!("eps = {e}: no sample hit either tube; dropped"));
            continue;
        }
        if a == 0 || b == 0 {
            notices.push(format!("eps = {e}: one tube has no hits; ratio not estimable"));
        }
        rows.push(RatioRow {
            eps: e,
            hits_phi: a,
            hits_psi: b,
            hits_brownian: w,
            two_path: paired_ratio(a, b, ab, n, delta),
            brownian_phi: paired_ratio(a, w, aw, n, action_phi),
            brownian_psi: paired_ratio(b, w, bw, n, action_psi),
        });
    }
    let trend: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.two_path.as_ref().map(|t| (r.eps, t.log_error)))
        .collect();
    let trend_non_increasing = trend.windows(2).all(|w| w[1].1 <= w[0].1);
    let all_agree = dropped.is_empty() && rows.iter().all(|r| r.two_path.as_ref().is_some_and(|t| t.agrees));
    RatioReport {
        norm,
        samples: n,
        action_phi,
        action_psi,
        delta_action: delta,
        prediction: delta.exp(),
        rows,
        dropped,
        notices,
        trend,
        trend_non_increasing,
        all_agree,
    }
}

// Assumption audits -------------------------------------------------------------

/// Constant `C` with `|X1 - phi1| <= C |X2 - phi2|` from Gronwall's
/// inequality, given a Lipschitz bound `lip` of `p` and horizon `t_end`.
///
/// * sup: `K e^K` with `K = lip T`;
/// * `L^p`: `tau2^(1/p)` with `tau1 = T^(p-1) lip^p 2^(p-1)` and
///   `tau2 = tau1 e^(tau1 T) T`;
/// * Holder: `K e^K + lip T^(1-alpha) (1 + K e^K)`, the sup part plus the
///   increment bound `|D1(t) - D1(s)| <= lip |t - s| (sup|D1| + sup|D2|)`.
pub fn gronwall_constant(norm: &PathNorm, lip: f64, t_end: f64) -> f64 {
    let k = lip * t_end;
    let ke = k * k.exp();
    match *norm {
        PathNorm::Sup => ke,
        PathNorm::Lp { p } => {
            let tau1 = t_end.powf(p - 1.0) * lip.powf(p) * 2f64.powf(p - 1.0);
            let tau2 = tau1 * (tau1 * t_end).exp() * t_end;
            tau2.powf(1.0 / p)
        }
        PathNorm::Holder { alpha } => ke + lip * t_end.powf(1.0 - alpha) * (1.0 + ke),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct H4Report {
    pub norm: PathNorm,
    pub samples: usize,
    /// Largest sampled Frobenius norm of `dp/dx`.
    pub lipschitz: f64,
    pub constant: f64,
    pub median_ratio: f64,
    pub p90_ratio: f64,
    pub max_ratio: f64,
    pub bounded: bool,
}

/// Distribution of `|X1 - phi1| / |X2 - phi2|` over simulated paths against
/// the Gronwall constant.
pub fn h4_audit(sys: &DegenerateSystem, phi: &ReferencePath, norm: PathNorm, cfg: &TubeConfig) -> Result<H4Report> {
    norm.validate()?;
    phi.check_structure()?;
    let sim = SimConfig::new(cfg.samples, cfg.dt, phi.t_end(), cfg.seed).with_workers(cfg.workers);
    let bundle = simulate_mv(sys, &sim)?;
    if bundle.steps() != phi.steps() {
        return Err(Error::input("reference path grid differs from the sampling grid"));
    }
    let (d, n) = (sys.d(), sys.dim());
    let dt = cfg.dt;
    let per: Vec<(f64, f64)> = with_workers(cfg.workers, || {
        (0..bundle.particles())
            .into_par_iter()
            .map(|i| -> Result<(f64, f64)> {
                let mut first = Vec::with_capacity(phi.steps() + 1);
                let mut second = Vec::with_capacity(phi.steps() + 1);
                let mut lip = 0.0f64;
                for k in 0..=phi.steps() {
                    let x = bundle.state(i, k);
                    let c = &phi.phi()[k];
                    first.push((0..d).map(|j| x[j] - c[j]).collect::<Vec<_>>());
                    second.push((d..n).map(|j| x[j] - c[j]).collect::<Vec<_>>());
                    let mid: Vec<f64> = x.iter().zip(c).map(|(a, b)| 0.5 * (a + b)).collect();
                    for y in [x, c.as_slice(), &mid] {
                        lip = lip.max(p_jacobian_norm(sys, k as f64 * dt, y)?);
                    }
                }
                let n1 = path_norm(&norm, &first, dt)?;
                let n2 = path_norm(&norm, &second, dt)?;
                let ratio = if n1 == 0.0 { 0.0 } else { n1 / n2 };
                Ok((ratio, lip))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let lipschitz = per.iter().map(|r| r.1).fold(0.0, f64::max);
    let mut ratios: Vec<f64> = per.iter().map(|r| r.0).collect();
    ratios.sort_by(f64::total_cmp);
    let q = |f: f64| ratios[((ratios.len() - 1) as f64 * f).round() as usize];
    let constant = gronwall_constant(&norm, lipschitz, phi.t_end());
    let max_ratio = *ratios.last().unwrap_or(&0.0);
    Ok(H4Report {
        norm,
        samples: ratios.len(),
        lipschitz,
        constant,
        median_ratio: q(0.5),
        p90_ratio: q(0.9),
        max_ratio,
        bounded: max_ratio <= constant,
    })
}

fn p_jacobian_norm(sys: &DegenerateSystem, t: f64, x: &[f64]) -> Result<f64> {
    let mo = sys.dirac_moments(&x[sys.d()..]);
    let jac = sys.jacobian_b(t, x, mo.as_flat())?;
    Ok(jac[..sys.d()].iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct H3Config {
    pub samples: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Dimension of the Brownian motion.
    pub m: usize,
    pub seed: u64,
    pub workers: usize,
    pub bridge: bool,
    /// Radii with fewer conditioned samples are dropped.
    pub min_hits: usize,
}

impl H3Config {
    pub fn new(samples: usize, dt: f64, horizon: f64, m: usize, seed: u64) -> Self {
        Self {
            samples,
            dt,
            horizon,
            m,
            seed,
            workers: 0,
            bridge: false,
            min_hits: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct H3Row {
    pub eps: f64,
    pub hits: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Largest `int |W|^4 dt` among samples inside the ball.
    pub max_quartic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct H3Report {
    pub norm: PathNorm,
    pub rows: Vec<H3Row>,
    pub dropped: Vec<f64>,
    pub notices: Vec<String>,
    /// `log P(|W| <= eps) ~ a - c3 eps^(-q)`.
    pub fit_a: f64,
    pub fit_c3: f64,
    pub fit_q: f64,
    /// `max int |W|^4 ~ c2 eps^p` on the conditioned samples.
    pub fit_c2: f64,
    pub fit_p: f64,
    pub q_below_p_and_4: bool,
    /// Estimated probabilities are non-decreasing in `eps`.
    pub monotone: bool,
}

/// Small-ball behaviour of Brownian motion in the given norm.
pub fn h3_probe(norm: PathNorm, eps: &[f64], cfg: &H3Config) -> Result<H3Report> {
    norm.validate()?;
    check_eps(eps)?;
    if cfg.bridge && norm != PathNorm::Sup {
        return Err(Error::Unsupported("the bridge correction is defined for the sup norm only".into()));
    }
    let zeros = vec!["0"; cfg.m];
    let sys = DegenerateSystem::new(0, cfg.m, &[], &zeros, 0, &vec![0.0; cfg.m])?;
    let sampler = Sampler {
        sys: &sys,
        centres: Vec::new(),
        channels: vec![
            Channel { centre: None, part: Part::Full, norm },
            Channel {
                centre: None,
                part: Part::Full,
                norm: PathNorm::Lp { p: 4.0 },
            },
        ],
        bridge: if cfg.bridge { eps.to_vec() } else { Vec::new() },
    };
    let draws = sampler.run(cfg.samples, cfg.dt, cfg.horizon, cfg.seed, cfg.workers)?;
    let est = estimates(&draws, 0, norm, eps, cfg.bridge);
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    let mut notices = Vec::new();
    for (b, e) in est.iter().enumerate() {
        if e.hits < cfg.min_hits {
            dropped.push(e.eps);
            notices.push(format!("eps = {}: {} conditioned samples (< {}); dropped", e.eps, e.hits, cfg.min_hits));
            continue;
        }
        let max_quartic = (0..draws.samples())
            .filter(|&i| draws.norm(i, 0) <= eps[b])
            .map(|i| draws.norm(i, 1).powi(4))
            .fold(0.0, f64::max);
        rows.push(H3Row {
            eps: e.eps,
            hits: e.hits,
            p_hat: e.p_hat,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
            max_quartic,
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    let monotone = sorted.windows(2).all(|w| w[0].p_hat <= w[1].p_hat);
    let xs: Vec<f64> = sorted.iter().map(|r| r.eps).collect();
    let ys: Vec<f64> = sorted.iter().map(|r| r.p_hat.ln()).collect();
    let (fit_a, fit_c3, fit_q) = fit_small_ball(&xs, &ys).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let lq: Vec<f64> = sorted.iter().map(|r| r.max_quartic.ln()).collect();
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let (fit_c2, fit_p) = match linear_fit(&lx, &lq) {
        Some((a, b)) => (a.exp(), b),
        None => (f64::NAN, f64::NAN),
    };
    if sorted.len() < 3 {
        notices.push("fewer than three radii retained; exponents not fitted".into());
    }
    Ok(H3Report {
        norm,
        rows,
        dropped,
        notices,
        fit_a,
        fit_c3,
        fit_q,
        fit_c2,
        fit_p,
        q_below_p_and_4: fit_q < fit_p.min(4.0),
        monotone,
    })
}

/// Least squares `y = a + b x`.
fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Fits `y = a - c eps^(-q)` by scanning `q` and solving for `(a, c)`.
fn fit_small_ball(eps: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    if eps.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for step in 1..=1600 {
        let q = step as f64 * 0.005;
        let x: Vec<f64> = eps.iter().map(|e| -e.powf(-q)).collect();
        let Some((a, c)) = linear_fit(&x, y) else { continue };
        let sse: f64 = x.iter().zip(y).map(|(u, v)| (a + c * u - v).powi(2)).sum();
        if best.is_none_or(|b| sse < b.3) {
            best = Some((a, c, q, sse));
        }
    }
    best.map(|(a, c, q, _)| (a, c, q))
}

/// `P(sup_{[0,1]} |W| <= a)` for scalar Brownian motion by the alternating
/// series `4/pi sum_k (-1)^k / (2k+1) exp(-(2k+1)^2 pi^2 / (8 a^2))`.
pub fn brownian_sup_probability(a: f64, t_end: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    let a = a / t_end.sqrt();
    let pi = std::f64::consts::PI;
    let mut sum = 0.0;
    for k in 0..200 {
        let j = (2 * k + 1) as f64;
        let term = (-j * j * pi * pi / (8.0 * a * a)).exp() / j;
        sum += if k % 2 == 0 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (4.0 / pi * sum).clamp(0.0, 1.0)
}
