use omkit::measure::{moments, wasserstein2_1d, EmpiricalMeasure};
use proptest::prelude::*;

fn uniform(points: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(1, points.to_vec()).unwrap()
}

fn weighted() -> impl Strategy<Value = EmpiricalMeasure> {
    (1usize..12).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(0.05f64..1.0, n)).prop_map(|(x, w)| {
            let s: f64 = w.iter().sum();
            EmpiricalMeasure::new(1, x, w.iter().map(|v| v / s).collect()).unwrap()
        })
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #[test]
    fn metric_axioms(a in weighted(), b in weighted(), c in weighted()) {
        let ab = wasserstein2_1d(&a, &b).unwrap();
        let ba = wasserstein2_1d(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(wasserstein2_1d(&a, &a).unwrap() <= 1e-12);
        let ac = wasserstein2_1d(&a, &c).unwrap();
        let bc = wasserstein2_1d(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn sorted_matching_is_the_optimal_coupling(
        pts in (1usize..=7).prop_flat_map(|n| (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-3.0f64..3.0, n)))
    ) {
        let (x, y) = pts;
        let n = x.len();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| (x[i] - y[j]).powi(2)).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        let w = wasserstein2_1d(&uniform(&x), &uniform(&y)).unwrap();
        prop_assert!((w - best).abs() <= 1e-12 * best.max(1.0), "{w} vs {best}");
    }

    #[test]
    fn moments_are_linear_in_weights(
        x in prop::collection::vec(-3.0f64..3.0, 6),
        w1 in prop::collection::vec(0.1f64..1.0, 6),
        w2 in prop::collection::vec(0.1f64..1.0, 6),
        lam in 0.0f64..1.0,
    ) {
        let norm = |w: &[f64]| { let s: f64 = w.iter().sum(); w.iter().map(|v| v / s).collect::<Vec<_>>() };
        let (w1, w2) = (norm(&w1), norm(&w2));
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let m = |w: Vec<f64>| moments(&EmpiricalMeasure::new(1, x.clone(), w).unwrap(), 4);
        let (ma, mb, mm) = (m(w1), m(w2), m(mix));
        for k in 1..=4 {
            let lin = lam * ma.get(k, 0) + (1.0 - lam) * mb.get(k, 0);
            prop_assert!((mm.get(k, 0) - lin).abs() <= 1e-12 * lin.abs().max(1.0));
        }
    }

    #[test]
    fn second_moment_dominates_squared_mean(mu in weighted()) {
        let m = moments(&mu, 2);
        prop_assert!(m.get(2, 0) >= m.get(1, 0).powi(2) - 1e-12);
    }
}

#[test]
fn translation_moves_distance_by_the_shift() {
    let x = [0.0, 1.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| v + 2.5).collect();
    let w = wasserstein2_1d(&uniform(&x), &uniform(&y)).unwrap();
    assert!((w - 2.5).abs() <= 1e-12);
}
