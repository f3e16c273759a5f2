use ice_mlp::ice;
use ice_mlp::network::LabeledSample;
use ice_mlp::optimizer::{minimize, LineSearchConfig, OptimizerConfig, Termination};
use ice_mlp::{Network, NetworkTopology, ObjectiveValue};
use proptest::prelude::*;

/// `A = Mᵀ M + I` for a pseudo-random `M`, and a pseudo-random minimizer.
fn spd_quadratic(d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let m: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| next()).collect()).collect();
    let a = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| m[k][i] * m[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let b = (0..d).map(|_| next()).collect();
    (a, b)
}

/// `½ (x − x*)ᵀ A (x − x*)`, written around the minimizer so the loss keeps
/// full relative precision near it.
fn quadratic_objective<'a>(a: &'a [Vec<f64>], x_star: &'a [f64]) -> impl Fn(&[f64]) -> ObjectiveValue + 'a {
    move |x: &[f64]| {
        let r: Vec<f64> = x.iter().zip(x_star).map(|(v, s)| v - s).collect();
        let ar: Vec<f64> = a.iter().map(|row| row.iter().zip(&r).map(|(p, q)| p * q).sum()).collect();
        ObjectiveValue {
            loss: 0.5 * ar.iter().zip(&r).map(|(p, q)| p * q).sum::<f64>(),
            gradient: ar,
        }
    }
}

/// Finite termination needs every step to minimize along its line, which a
/// tight curvature constant enforces. With `c2 = 0.9` unit steps are accepted
/// as soon as they descend enough and the count can exceed `d + 2`.
#[test]
fn convex_quadratic_within_memory_converges_in_d_plus_two_iterations() {
    for d in 1..=10 {
        for seed in 0..5 {
            let (a, b) = spd_quadratic(d, seed);
            let f = quadratic_objective(&a, &b);
            let config = OptimizerConfig {
                gradient_tolerance: 1e-10,
                relative_loss_tolerance: f64::MIN_POSITIVE,
                line_search: LineSearchConfig {
                    c1: 1e-4,
                    c2: 1e-3,
                    ..LineSearchConfig::default()
                },
                ..OptimizerConfig::default()
            };
            let r = minimize(&f, &vec![0.0; d], &config).unwrap();
            let g = r.gradient.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(g <= 1e-10 * r.theta.iter().fold(1.0f64, |m, x| m.max(x.abs())), "d = {d}: {r:?}");
            assert!(r.iterations <= d + 2, "d = {d}, seed {seed}: {} iterations", r.iterations);
            assert!(r.is_monotone());
        }
    }
}

#[test]
fn mle_on_separable_points_reaches_first_order_conditions() {
    let topo = NetworkTopology::new(vec![2, 2]).unwrap();
    let data = vec![
        LabeledSample::new(vec![1.0, 1.0], 0),
        LabeledSample::new(vec![2.0, 0.5], 0),
        LabeledSample::new(vec![-1.0, -1.0], 1),
        LabeledSample::new(vec![-0.5, -2.0], 1),
    ];
    let objective = |theta: &[f64]| {
        let net = Network::from_parameters(topo.clone(), theta.to_vec()).unwrap();
        ice::mle_objective(&net, &data).unwrap()
    };
    let config = OptimizerConfig {
        max_iterations: 2000,
        gradient_tolerance: 1e-9,
        relative_loss_tolerance: f64::MIN_POSITIVE,
        ..OptimizerConfig::default()
    };
    let r = minimize(objective, &vec![0.0; topo.parameter_count()], &config).unwrap();
    let norm = r.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm <= 1e-6, "{:?} after {} iterations, |g| = {norm:e}", r.termination, r.iterations);
    assert!(r.is_monotone());
}

#[test]
fn exact_gradients_never_need_the_fallback() {
    let (a, b) = spd_quadratic(6, 42);
    let config = OptimizerConfig {
        gradient_tolerance: 1e-9,
        relative_loss_tolerance: f64::MIN_POSITIVE,
        ..OptimizerConfig::default()
    };
    let r = minimize(quadratic_objective(&a, &b), &[3.0; 6], &config).unwrap();
    assert_eq!(r.sufficient_decrease_steps, 0);
    assert_eq!(r.termination, Termination::GradientConverged);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accepted_steps_never_raise_the_loss(d in 1usize..12, seed in 0u64..1000, start in -10.0f64..10.0) {
        let (a, b) = spd_quadratic(d, seed);
        let config = OptimizerConfig { memory: 3, ..OptimizerConfig::default() };
        let r = minimize(quadratic_objective(&a, &b), &vec![start; d], &config).unwrap();
        prop_assert!(r.is_monotone());
        prop_assert!(r.loss <= r.loss_history[0]);
        prop_assert_eq!(r.loss_history.len(), r.iterations + 1);
    }
}
