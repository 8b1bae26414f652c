use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moegradlab::estimators::{EstimatorConfig, EstimatorKind};
use moegradlab::moe::{expert_forward, moe_forward, Mode, MoeLayer};
use moegradlab::oracle::{exact_loss, Downstream, SmallInstance};

fn plain_layer(n: usize, d: usize, seed: u64) -> MoeLayer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    MoeLayer::init(n, d, 5, EstimatorConfig::simplified(EstimatorKind::Neglect), &mut r).unwrap()
}

#[test]
fn sampled_forward_averages_to_the_oracle_loss() {
    let layer = plain_layer(4, 3, 11);
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.5..1.5)).collect();
    let g = Downstream::random_readout(4, 3, &mut r);
    let inst = SmallInstance::from_layer(&layer, &x, g.clone()).unwrap();

    let samples = 50_000;
    let values: Vec<f64> = (0..samples)
        .map(|_| g.value(&moe_forward(&layer, &x, Mode::Train, &mut r).unwrap().0))
        .collect();
    let mean = values.iter().sum::<f64>() / samples as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples as f64 - 1.0);
    let se = (var / samples as f64).sqrt();
    assert!((mean - exact_loss(&inst)).abs() <= 3.0 * se, "{mean} vs {}", exact_loss(&inst));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A training forward is always `π_D f_D` for the recorded expert, and
    /// inference always picks the top gate.
    #[test]
    fn forward_is_one_gated_expert(seed in any::<u64>(), n in 2usize..7, d in 1usize..5) {
        let layer = plain_layer(n, d, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let inst = SmallInstance::from_layer(&layer, &x, Downstream::Quadratic).unwrap();
        let pi = inst.pi();
        for mode in [Mode::Train, Mode::Infer] {
            let (y, record) = moe_forward(&layer, &x, mode, &mut r).unwrap();
            prop_assert_eq!(record.expert_calls, 1);
            let chosen = record.decisions[0].expert;
            if mode == Mode::Infer {
                prop_assert_eq!(chosen, moegradlab::routing::argmax(&pi));
            }
            let f = expert_forward(&layer.experts[chosen], &x).unwrap();
            for (a, b) in y.iter().zip(&f) {
                prop_assert!((a - pi[chosen] * b).abs() <= 1e-12);
            }
        }
    }
}
