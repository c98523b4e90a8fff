use omkit::path::ReferencePath;
use omkit::simulate::{girsanov_log_density, simulate_auxiliary, simulate_mv, simulate_single, SimConfig};
use omkit::system::DegenerateSystem;
use proptest::prelude::*;

fn moment_free() -> Vec<DegenerateSystem> {
    vec![
        DegenerateSystem::new(1, 1, &["x2"], &["-x2"], 0, &[0.0, 0.0]).unwrap(),
        DegenerateSystem::new(1, 1, &["0"], &["-x2 + sin(t)"], 0, &[0.3, 0.1]).unwrap(),
        DegenerateSystem::new(2, 1, &["x3", "x1 - x2"], &["-x1 - x3^3"], 0, &[0.5, -0.5, 0.0]).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn same_seed_same_bundle(seed in any::<u64>(), which in 0usize..3) {
        let sys = &moment_free()[which];
        let cfg = SimConfig::new(20, 0.01, 0.5, seed);
        let a = simulate_mv(sys, &cfg).unwrap();
        let b = simulate_mv(sys, &cfg).unwrap();
        for i in 0..20 {
            prop_assert_eq!(a.trajectory(i), b.trajectory(i));
            for k in 0..a.steps() {
                prop_assert_eq!(a.increment(i, k), b.increment(i, k));
            }
        }
    }

    #[test]
    fn mean_field_decoupling_is_exact(seed in any::<u64>(), which in 0usize..3) {
        let sys = &moment_free()[which];
        let cfg = SimConfig::new(16, 0.01, 0.5, seed);
        let bundle = simulate_mv(sys, &cfg).unwrap();
        let n = sys.dim();
        for i in 0..16 {
            let single: Vec<f64> = simulate_single(sys, &cfg, i).unwrap().concat();
            prop_assert_eq!(bundle.trajectory(i), &single[..]);
            prop_assert_eq!(single.len(), (bundle.steps() + 1) * n);
        }
    }

    #[test]
    fn first_component_moves_at_bounded_speed(seed in any::<u64>()) {
        let sys = DegenerateSystem::new(1, 1, &["x2"], &["-M1 + sin(x1)"], 1, &[0.2, -0.3]).unwrap();
        let cfg = SimConfig::new(30, 0.01, 1.0, seed);
        let b = simulate_mv(&sys, &cfg).unwrap();
        for i in 0..30 {
            let mut sup_p = 0.0f64;
            for k in 0..=b.steps() {
                let mut p = [0.0];
                sys.eval_p(k as f64 * cfg.dt, b.state(i, k), &mut p).unwrap();
                sup_p = sup_p.max(p[0].abs());
            }
            for k in 0..b.steps() {
                let jump = (b.state(i, k + 1)[0] - b.state(i, k)[0]).abs();
                prop_assert!(jump <= cfg.dt * sup_p * (1.0 + 1e-12));
            }
        }
    }
}

fn girsanov_mean(sys: &DegenerateSystem, phi: &ReferencePath, particles: usize, seed: u64) -> (f64, f64) {
    let cfg = SimConfig::new(particles, phi.dt(), phi.t_end(), seed);
    let b = simulate_auxiliary(sys, phi, &cfg).unwrap();
    let r: Vec<f64> = girsanov_log_density(sys, phi, &b).unwrap().iter().map(|v| v.exp()).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn density_has_unit_mean() {
    let ou = DegenerateSystem::new(1, 1, &["x2"], &["-x2"], 0, &[0.0, 0.0]).unwrap();
    let phi = ReferencePath::lift(&ou, 1.0, 100, 4, |t| (vec![t], vec![1.0])).unwrap();
    let mf = DegenerateSystem::new(1, 1, &["x2"], &["-M1 + sin(x1)"], 1, &[0.0, 0.0]).unwrap();
    let psi = ReferencePath::lift(&mf, 1.0, 100, 4, |t| (vec![0.5 * t * t], vec![t])).unwrap();
    let pure = DegenerateSystem::new(1, 1, &["0"], &["-x2"], 0, &[0.0, 0.0]).unwrap();
    let chi = ReferencePath::lift(&pure, 1.0, 100, 4, |t| (vec![(3.0 * t).sin()], vec![3.0 * (3.0 * t).cos()])).unwrap();
    for (sys, path) in [(&ou, &phi), (&mf, &psi), (&pure, &chi)] {
        let (mean, se) = girsanov_mean(sys, path, 20_000, 17);
        assert!((mean - 1.0).abs() <= 4.0 * se, "E[R] = {mean} +- {se}");
    }
}
