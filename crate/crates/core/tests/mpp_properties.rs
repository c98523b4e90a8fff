use omkit::mpp::{discrete_objective, minimize_action, BoundaryConditions, MppOptions};
use omkit::system::DegenerateSystem;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn second_order() -> DegenerateSystem {
    DegenerateSystem::new(1, 1, &["x2"], &["-x2 + sin(x1) - 0.5*M1"], 1, &[0.0, 0.5]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn converged_solutions_are_stationary(a1 in -1.0f64..1.0, v1 in -1.0f64..1.0, seed in any::<u64>()) {
        let sys = second_order();
        let bc = BoundaryConditions::Hamiltonian { t_end: 2.0, start: (vec![0.0], vec![0.5]), end: (vec![a1], vec![v1]) };
        let opts = MppOptions::new(200);
        let sol = minimize_action(&sys, &bc, &opts).unwrap();
        prop_assert!(sol.converged);
        let tol = opts.lm.grad_tol * (1.0 + sol.action.total.abs());

        // Boundary data hold exactly.
        let h = sol.hamiltonian.as_ref().unwrap();
        prop_assert_eq!(h.pos()[0][0], 0.0);
        prop_assert_eq!(h.pos()[200][0], a1);
        prop_assert!((h.vel()[0][0] - 0.5).abs() <= 1e-12 && (h.vel()[200][0] - v1).abs() <= 1e-12);

        // Descent.
        prop_assert!(sol.objective_history.windows(2).all(|w| w[1] <= w[0]));

        // Directional derivatives along unit-l1 interior directions.
        let phi1: Vec<Vec<f64>> = h.pos().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 1e-3;
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..=200).map(|_| rng.random_range(-1.0..1.0)).collect();
            v[0] = 0.0;
            v[200] = 0.0;
            let l1: f64 = v.iter().map(|x| x.abs()).sum();
            let shift = |s: f64| -> Vec<Vec<f64>> { phi1.iter().zip(&v).map(|(p, d)| vec![p[0] + s * d / l1]).collect() };
            let jp = discrete_objective(&sys, &bc, &shift(step)).unwrap();
            let jm = discrete_objective(&sys, &bc, &shift(-step)).unwrap();
            let dd = (jp - jm) / (2.0 * step);
            prop_assert!(dd.abs() <= 10.0 * tol, "directional derivative {dd}, tol {tol}");
        }
    }

    #[test]
    fn general_transcription_keeps_boundary_values(y1 in -1.0f64..1.0) {
        let sys = DegenerateSystem::new(1, 1, &["x1*x2"], &["-x2 + cos(x1)"], 0, &[0.3, 0.1]).unwrap();
        let bc = BoundaryConditions::General { t_end: 1.0, start: vec![0.3, 0.1], end2: vec![y1] };
        let sol = minimize_action(&sys, &bc, &MppOptions::new(100)).unwrap();
        prop_assert!(sol.converged);
        prop_assert_eq!(&sol.path.phi()[0], &vec![0.3, 0.1]);
        prop_assert_eq!(sol.path.phi()[100][1], y1);
        prop_assert!(sol.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn objective_matches_negative_action_at_the_minimizer() {
    let sys = second_order();
    let bc = BoundaryConditions::Hamiltonian { t_end: 2.0, start: (vec![0.0], vec![0.5]), end: (vec![0.4], vec![0.0]) };
    let sol = minimize_action(&sys, &bc, &MppOptions::new(200)).unwrap();
    let j = discrete_objective(&sys, &bc, sol.hamiltonian.as_ref().unwrap().pos()).unwrap();
    assert!((j - sol.objective_history.last().unwrap()).abs() <= 1e-12 * j.abs().max(1.0));
}
