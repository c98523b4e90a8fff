use std::path::{Path, PathBuf};
use std::time::Instant;

use omkit::dsl::DriftExpr;
use omkit::linalg::penrose_audit;
use omkit::mpp::{
    el_residual_example, minimize_action_multistart, BoundaryConditions, InitGuess, MppOptions, MppSolution,
};
use omkit::om::{om_action, om_action_global, om_action_hamiltonian, om_action_nondegenerate_reduction, ActionValue};
use omkit::path::{HamiltonianPath, ReferencePath};
use omkit::simulate::{generator_check, simulate_mv, simulate_observed, with_workers, SimConfig};
use omkit::system::DegenerateSystem;
use omkit::tube::{
    h3_probe, h4_audit, om_ratio_experiment, path_norm, tube_probabilities, H3Config, PathNorm, TubeConfig, TubeTarget,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_config, preset_config, ProblemConfig};
use crate::error::{CliError, CliResult, Context};
use crate::manifest::{config_hash, file_entry, RunManifest};
use crate::pathio::{read_path, write_path, write_table};
use crate::{ActionForm, Audit, Cli, Command, Problem, Target};

pub struct RunOutput {
    /// Pretty-printed JSON result.
    pub stdout: String,
    pub manifest: Option<RunManifest>,
    /// Set when a check ran to completion but failed; the result is still
    /// printed.
    pub failure: Option<CliError>,
}

/// Collects the files a subcommand writes.
struct Outputs {
    dir: Option<PathBuf>,
    names: Vec<String>,
}

impl Outputs {
    fn file(&mut self, name: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        self.names.push(name.to_string());
        Some(dir.join(name))
    }
}

struct Done {
    result: Value,
    config: Option<ProblemConfig>,
    parameters: Value,
    failure: Option<CliError>,
}

impl Done {
    fn new(result: impl Serialize, config: Option<ProblemConfig>, parameters: Value) -> CliResult<Self> {
        Ok(Self {
            result: to_json(result)?,
            config,
            parameters,
            failure: None,
        })
    }
}

fn to_json(v: impl Serialize) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Usage(format!("cannot serialize result: {e}")))
}

pub fn run(cli: &Cli) -> CliResult<RunOutput> {
    let start = Instant::now();
    if let Some(dir) = &cli.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut out = Outputs {
        dir: cli.out_dir.clone(),
        names: Vec::new(),
    };
    let done = with_workers(cli.workers, || dispatch(cli, &mut out)).context("worker pool")??;
    let stdout = serde_json::to_string_pretty(&done.result).expect("json value prints");

    let manifest = match &cli.out_dir {
        None => None,
        Some(dir) => {
            let result_path = dir.join("result.json");
            std::fs::write(&result_path, format!("{stdout}\n")).map_err(|e| CliError::io(&result_path, e))?;
            out.names.push("result.json".into());
            let outputs = out.names.iter().map(|n| file_entry(dir, n)).collect::<CliResult<_>>()?;
            let m = RunManifest {
                subcommand: cli.command.name().to_string(),
                config_hash: done.config.as_ref().map(config_hash),
                config: done.config.clone(),
                parameters: done.parameters.clone(),
                seed: cli.seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                outputs,
                duration_secs: start.elapsed().as_secs_f64(),
            };
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
            std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
            Some(m)
        }
    };
    Ok(RunOutput {
        stdout,
        manifest,
        failure: done.failure,
    })
}

fn problem(p: &Problem) -> CliResult<(ProblemConfig, DegenerateSystem)> {
    let cfg = match (&p.config, &p.preset) {
        (Some(path), None) => load_config(path)?,
        (None, Some(name)) => preset_config(name)?,
        _ => return Err(CliError::Usage("give exactly one of --config or --preset".into())),
    };
    let sys = cfg.system()?;
    Ok((cfg, sys))
}

pub fn parse_norm(s: &str) -> CliResult<PathNorm> {
    let bad = || CliError::Usage(format!("unknown norm `{s}` (use sup, lp:P or holder:ALPHA)"));
    let norm = match s.split_once(':') {
        None if s == "sup" => PathNorm::Sup,
        Some(("lp", v)) => PathNorm::Lp {
            p: v.parse().map_err(|_| bad())?,
        },
        Some(("holder", v)) => PathNorm::Holder {
            alpha: v.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    norm.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(norm)
}

fn target(t: Target) -> TubeTarget {
    match t {
        Target::Full => TubeTarget::Full,
        Target::Second => TubeTarget::Second,
    }
}

fn dispatch(cli: &Cli, out: &mut Outputs) -> CliResult<Done> {
    let seed = cli.seed;
    match &cli.command {
        Command::Action { problem: p, path, form } => {
            let (cfg, sys) = problem(p)?;
            let phi = read_path(path, &sys)?;
            let value = match form {
                ActionForm::Reduced => om_action(&sys, &phi),
                ActionForm::Global => om_action_global(&sys, &phi),
                ActionForm::Hamiltonian => {
                    let pos: Vec<Vec<f64>> = (0..=phi.steps()).map(|k| phi.phi1(k).to_vec()).collect();
                    HamiltonianPath::from_samples(phi.t_end(), pos).and_then(|h| om_action_hamiltonian(&sys, &h))
                }
                ActionForm::Nondegenerate => om_action_nondegenerate_reduction(&sys, &phi),
            }
            .context("action")?;
            #[derive(Serialize)]
            struct ActionOut<'a> {
                form: String,
                #[serde(flatten)]
                value: ActionValue,
                steps: usize,
                structural_residual: f64,
                warnings: &'a [String],
            }
            let res = ActionOut {
                form: format!("{form:?}").to_lowercase(),
                value,
                steps: phi.steps(),
                structural_residual: phi.structural_residual(),
                warnings: phi.warnings(),
            };
            Done::new(res, Some(cfg), json!({ "path": path, "form": format!("{form:?}").to_lowercase() }))
        }
        Command::Mpp {
            problem: p,
            end,
            steps,
            init,
            grad_tol,
            max_iter,
            residual_spacing,
            example_residual,
        } => {
            let (cfg, sys) = problem(p)?;
            let t = cfg.t_end;
            let (d, m) = cfg.dims;
            let bc = if sys.is_hamiltonian() && end.len() == d + m {
                BoundaryConditions::Hamiltonian {
                    t_end: t,
                    start: (cfg.x0[..d].to_vec(), cfg.x0[d..].to_vec()),
                    end: (end[..d].to_vec(), end[d..].to_vec()),
                }
            } else if end.len() == m {
                BoundaryConditions::General {
                    t_end: t,
                    start: cfg.x0.clone(),
                    end2: end.clone(),
                }
            } else {
                return Err(CliError::Usage(format!(
                    "--end needs {} values ({})",
                    if sys.is_hamiltonian() { d + m } else { m },
                    if sys.is_hamiltonian() { "phi1 and its velocity" } else { "phi2" }
                )));
            };
            let k = steps.unwrap_or_else(|| (t / 1e-3).round().max(1.0) as usize);
            let mut opts = MppOptions::new(k);
            opts.lm.grad_tol = *grad_tol;
            opts.lm.max_iter = *max_iter;
            opts.residual_spacing = *residual_spacing;
            let inits = init.iter().map(|s| parse_init(s, &sys)).collect::<CliResult<Vec<_>>>()?;
            let sols = minimize_action_multistart(&sys, &bc, &opts, &inits).context("mpp")?;
            let best = &sols[0];
            let example = if *example_residual {
                let h = best
                    .hamiltonian
                    .as_ref()
                    .filter(|h| h.dim() == 1)
                    .ok_or_else(|| CliError::Usage("--example-residual needs a scalar p = x2 system".into()))?;
                let phi1: Vec<f64> = h.pos().iter().map(|v| v[0]).collect();
                Some(el_residual_example(&phi1, h.dt()).context("example residual")?)
            } else {
                None
            };
            if let Some(f) = out.file("mpp_path.csv") {
                write_path(&f, &best.path)?;
            }
            if let Some(f) = out.file("mpp_residual.csv") {
                let n = best.el_residual.values.first().map_or(0, Vec::len);
                let mut header = vec!["t".to_string()];
                header.extend((1..=n).map(|i| format!("r_{i}")));
                let rows = best.el_residual.times.iter().zip(&best.el_residual.values).map(|(t, v)| {
                    std::iter::once(*t).chain(v.iter().copied()).map(|x| x.to_string()).collect()
                });
                write_table(&f, &header, rows)?;
            }
            if let Some(f) = out.file("mpp_history.csv") {
                let rows = best.objective_history.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]);
                write_table(&f, &["step".into(), "objective".into()], rows)?;
            }
            let res = json!({
                "transcription": if best.hamiltonian.is_some() { "second-order" } else { "general" },
                "steps": k,
                "dt": t / k as f64,
                "best": mpp_summary(best),
                "starts": sols.iter().map(mpp_summary).collect::<Vec<_>>(),
                "example_residual_l2": example.as_ref().map(|e| e.l2),
                "example_residual_max": example.as_ref().map(|e| e.max_abs()),
            });
            let params = json!({
                "end": end, "steps": k, "init": init, "grad_tol": grad_tol,
                "max_iter": max_iter, "residual_spacing": residual_spacing,
            });
            Done::new(res, Some(cfg), params)
        }
        Command::Tube {
            problem: p,
            path,
            eps,
            norm,
            samples,
            bridge,
            target: tgt,
        } => {
            let (cfg, sys) = problem(p)?;
            let phi = read_path(path, &sys)?;
            let norm = parse_norm(norm)?;
            let mut tc = TubeConfig::new(*samples, phi.dt(), seed);
            tc.workers = cli.workers;
            tc.bridge = *bridge;
            tc.target = target(*tgt);
            let est = tube_probabilities(&sys, &phi, norm, eps, &tc).context("tube")?;
            if let Some(f) = out.file("tube.csv") {
                let header: Vec<String> =
                    ["eps", "hits", "trials", "p_hat", "ci_lo", "ci_hi"].iter().map(|s| s.to_string()).collect();
                let rows = est.iter().map(|e| {
                    vec![
                        e.eps.to_string(),
                        e.hits.to_string(),
                        e.trials.to_string(),
                        e.p_hat.to_string(),
                        e.ci_lo.to_string(),
                        e.ci_hi.to_string(),
                    ]
                });
                write_table(&f, &header, rows)?;
            }
            Done::new(json!({ "estimates": est }), Some(cfg), to_json(&tc)?)
        }
        Command::Ratio {
            problem: p,
            phi,
            psi,
            eps,
            norm,
            samples,
            target: tgt,
        } => {
            let (cfg, sys) = problem(p)?;
            let a = read_path(phi, &sys)?;
            let b = read_path(psi, &sys)?;
            let norm = parse_norm(norm)?;
            let mut tc = TubeConfig::new(*samples, a.dt(), seed);
            tc.workers = cli.workers;
            tc.target = target(*tgt);
            let rep = om_ratio_experiment(&sys, &a, &b, norm, eps, &tc).context("ratio")?;
            if let Some(f) = out.file("ratio.csv") {
                let header: Vec<String> = ["eps", "hits_phi", "hits_psi", "hits_brownian", "ratio", "ci_lo", "ci_hi", "prediction"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                let rows = rep.rows.iter().map(|r| {
                    let (ratio, lo, hi, pred) = r
                        .two_path
                        .as_ref()
                        .map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |x| (x.ratio, x.ci_lo, x.ci_hi, x.prediction));
                    [r.eps, r.hits_phi as f64, r.hits_psi as f64, r.hits_brownian as f64, ratio, lo, hi, pred]
                        .iter()
                        .map(|v| v.to_string())
                        .collect()
                });
                write_table(&f, &header, rows)?;
            }
            Done::new(rep, Some(cfg), json!({ "phi": phi, "psi": psi, "eps": eps, "tube": to_json(&tc)? }))
        }
        Command::Simulate {
            problem: p,
            particles,
            dt,
            horizon,
            stride,
            save,
        } => {
            let (cfg, sys) = problem(p)?;
            let sc = SimConfig::new(*particles, *dt, horizon.unwrap_or(cfg.t_end), seed).with_workers(cli.workers);
            let stride = (*stride).max(1);
            let n = sys.dim();
            let keep = (*save).min(*particles);
            let mut stats: Vec<Vec<String>> = Vec::new();
            let mut traj: Vec<Vec<String>> = Vec::new();
            let mut last = (0.0, vec![0.0; n], vec![0.0; n]);
            let steps = sc.steps().context("simulate")?;
            simulate_observed(&sys, &sc, |k, t, ps| {
                if k % stride != 0 && k != steps {
                    return Ok(());
                }
                let xs = ps.states();
                let mut mean = vec![0.0; n];
                for x in xs.chunks_exact(n) {
                    mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= *particles as f64);
                let mut var = vec![0.0; n];
                for x in xs.chunks_exact(n) {
                    var.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
                }
                var.iter_mut().for_each(|s| *s /= *particles as f64);
                stats.push(std::iter::once(t).chain(mean.iter().copied()).chain(var.iter().copied()).map(|v| v.to_string()).collect());
                for (i, x) in xs.chunks_exact(n).take(keep).enumerate() {
                    traj.push(
                        [i.to_string(), t.to_string()]
                            .into_iter()
                            .chain(x.iter().map(|v| v.to_string()))
                            .collect(),
                    );
                }
                last = (t, mean, var);
                Ok(())
            })
            .context("simulate")?;
            let coords: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
            if let Some(f) = out.file("moments.csv") {
                let mut header = vec!["t".to_string()];
                header.extend(coords.iter().map(|c| format!("mean_{c}")));
                header.extend(coords.iter().map(|c| format!("var_{c}")));
                write_table(&f, &header, stats)?;
            }
            if let Some(f) = out.file("trajectories.csv") {
                let mut header = vec!["particle".to_string(), "t".to_string()];
                header.extend(coords.iter().cloned());
                write_table(&f, &header, traj)?;
            }
            // Sampled around the start, at the scale of the simulated spread.
            let spread = last.2.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));
            let radius = 1.0 + sys.x0().iter().fold(0.0f64, |a, v| a.max(v.abs())) + 3.0 * spread;
            let bounds = sys.sample_drift_bounds(radius, sc.horizon, 1000, seed).context("simulate")?;
            let res = json!({
                "particles": particles,
                "steps": steps,
                "t": last.0,
                "mean": last.1,
                "variance": last.2,
                "drift_bounds": bounds,
            });
            Done::new(res, Some(cfg), to_json(&sc)?)
        }
        Command::PinvCheck {
            trials,
            max_dim,
            tol,
            partitioned_tol,
        } => {
            let rep = penrose_audit(*trials, *max_dim, seed).context("pinv-check")?;
            let identities = rep.identities_hold(*tol);
            let partitioned = rep.partitioned <= *partitioned_tol;
            let examples = rep.row_example <= 1e-12 && rep.selector_example <= 1e-12;
            let mut done = Done::new(
                json!({
                    "report": rep,
                    "identities_pass": identities,
                    "partitioned_pass": partitioned,
                    "examples_pass": examples,
                }),
                None,
                json!({ "trials": trials, "max_dim": max_dim, "tol": tol, "partitioned_tol": partitioned_tol }),
            )?;
            if !(identities && partitioned && examples) {
                done.failure = Some(CliError::Check("pseudoinverse checks failed".into()));
            }
            Ok(done)
        }
        Command::Audit { kind } => audit(kind, seed, cli.workers),
    }
}

fn audit(kind: &Audit, seed: u64, workers: usize) -> CliResult<Done> {
    match kind {
        Audit::H1 { problem: p, paths, dt, norms } => {
            let (cfg, sys) = problem(p)?;
            let norms = norms.iter().map(|s| parse_norm(s)).collect::<CliResult<Vec<_>>>()?;
            let sc = SimConfig::new(*paths, *dt, cfg.t_end, seed).with_workers(workers);
            let bundle = simulate_mv(&sys, &sc).context("h1")?.drop_increments();
            let n = bundle.dim();
            let mut rows = Vec::new();
            for norm in &norms {
                let mut max_diff = 0.0f64;
                for i in 0..bundle.particles() {
                    let f: Vec<Vec<f64>> = bundle.trajectory(i).chunks_exact(n).map(<[f64]>::to_vec).collect();
                    let g: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
                    let a = path_norm(norm, &f, *dt).context("h1")?;
                    let b = path_norm(norm, &g, *dt).context("h1")?;
                    max_diff = max_diff.max((a - b).abs());
                }
                rows.push(json!({ "norm": norm, "paths": bundle.particles(), "max_abs_difference": max_diff, "exact": max_diff == 0.0 }));
            }
            let all = rows.iter().all(|r| r["exact"] == json!(true));
            let mut done = Done::new(json!({ "norms": rows, "all_exact": all }), Some(cfg), to_json(&sc)?)?;
            if !all {
                done.failure = Some(CliError::Check("sign-flip invariance failed".into()));
            }
            Ok(done)
        }
        Audit::H3 {
            norm,
            eps,
            samples,
            dt,
            horizon,
            m,
            bridge,
        } => {
            let norm = parse_norm(norm)?;
            let mut hc = H3Config::new(*samples, *dt, *horizon, *m, seed);
            hc.workers = workers;
            hc.bridge = *bridge;
            let rep = h3_probe(norm, eps, &hc).context("h3")?;
            Done::new(rep, None, to_json(&hc)?)
        }
        Audit::H4 {
            problem: p,
            path,
            norms,
            samples,
        } => {
            let (cfg, sys) = problem(p)?;
            let phi = read_path(path, &sys)?;
            let mut tc = TubeConfig::new(*samples, phi.dt(), seed);
            tc.workers = workers;
            let reps = norms
                .iter()
                .map(|s| h4_audit(&sys, &phi, parse_norm(s)?, &tc).context("h4"))
                .collect::<CliResult<Vec<_>>>()?;
            let all = reps.iter().all(|r| r.bounded);
            Done::new(json!({ "norms": reps, "all_bounded": all }), Some(cfg), json!({ "path": path, "tube": to_json(&tc)? }))
        }
        Audit::Generator {
            problem: p,
            h,
            particles,
            dt,
            horizon,
            windows,
        } => {
            let (cfg, sys) = problem(p)?;
            let expr = DriftExpr::parse(h, cfg.dims).map_err(|e| CliError::Core {
                context: "--h".into(),
                source: e.into(),
            })?;
            let sc = SimConfig::new(*particles, *dt, horizon.unwrap_or(cfg.t_end), seed).with_workers(workers);
            let rep = generator_check(&sys, &expr, &sc, *windows).context("generator")?;
            Done::new(rep, Some(cfg), json!({ "h": h, "windows": windows, "sim": to_json(&sc)? }))
        }
    }
}

fn parse_init(s: &str, sys: &DegenerateSystem) -> CliResult<InitGuess> {
    if s == "linear" {
        return Ok(InitGuess::Linear);
    }
    if let Some(w) = s.strip_prefix("tanh:") {
        let width: f64 = w.parse().map_err(|_| CliError::Usage(format!("bad tanh width `{w}`")))?;
        return Ok(InitGuess::Tanh { width });
    }
    if let Some(f) = s.strip_prefix("path:") {
        let p: ReferencePath = read_path(Path::new(f), sys)?;
        // The unknown component is phi1 for second-order systems, phi2 otherwise.
        let (lo, hi) = if sys.is_hamiltonian() { (0, sys.d()) } else { (sys.d(), sys.dim()) };
        return Ok(InitGuess::Samples(p.phi().iter().map(|r| r[lo..hi].to_vec()).collect()));
    }
    Err(CliError::Usage(format!("unknown initial guess `{s}` (use linear, tanh:W or path:FILE)")))
}

fn mpp_summary(s: &MppSolution) -> Value {
    json!({
        "action": s.action,
        "grad_norm": s.grad_norm,
        "iterations": s.iterations,
        "converged": s.converged,
        "el_residual_l2": s.el_residual.l2,
        "el_residual_max": s.el_residual.max_abs(),
    })
}
