//! Top-1 router: logits, Switch-style jitter sampling, the jitter mask, the
//! masked gate vector, and train/inference expert selection.
//!
//! Ties are broken toward the lowest index everywhere.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{softmax_values, Var};
use crate::error::{Error, Result};

/// Jitter half-width used by the Switch router.
pub const DEFAULT_JITTER: f64 = 0.1;

/// Router scores `θ = W_r·x` for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::InvalidLogits(format!(
                "need at least 2 experts, got {}",
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!(
                "entry {i} is {}",
                theta[i]
            )));
        }
        Ok(Self(theta))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Routing probabilities `π` together with the mask `Δ` they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pi: Vec<f64>,
    mask: Vec<bool>,
}

impl GateVector {
    /// Probabilities with nothing masked.
    pub fn unmasked(pi: Vec<f64>) -> Self {
        let mask = vec![true; pi.len()];
        Self { pi, mask }
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.pi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    Sampled,
    Argmax,
}

/// The chosen expert for one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingDecision {
    pub expert: usize,
    /// `π_D`.
    pub gate: f64,
    /// `δ_D`: the chosen expert is the argmax of `π`.
    pub is_argmax: bool,
    pub mode: SelectionMode,
}

/// `θ = W_r·x` on the tape, differentiable in both operands.
pub fn router_logits<'t>(w_r: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    w_r.matmul(x)
}

/// Switch sampling: `argmax_i θ_i·u_i` with `u_i ~ Uniform(1 − r, 1 + r)`.
pub fn jitter_argmax<R: Rng + ?Sized>(theta: &Logits, r: f64, rng: &mut R) -> usize {
    debug_assert!((0.0..1.0).contains(&r));
    let noise = Uniform::new_inclusive(1.0 - r, 1.0 + r);
    let jittered: Vec<f64> = theta
        .as_slice()
        .iter()
        .map(|t| t * noise.sample(rng))
        .collect();
    argmax(&jittered)
}

/// `Δ_i = (θ* − θ_i ≤ r·(|θ*| + |θ_i|))`: experts the jitter sampler can reach.
pub fn routing_mask(theta: &Logits, r: f64) -> Vec<bool> {
    let theta = theta.as_slice();
    let top = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    theta
        .iter()
        .map(|&t| top - t <= r * (top.abs() + t.abs()))
        .collect()
}

fn check_mask(len: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != len {
        return Err(Error::ShapeMismatch {
            op: "masked_gates",
            shapes: vec![vec![len], vec![mask.len()]],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    Ok(())
}

/// `π_i = exp(θ_i)Δ_i / Σ_j exp(θ_j)Δ_j`.
pub fn masked_gates(theta: &Logits, mask: &[bool]) -> Result<GateVector> {
    check_mask(theta.len(), mask)?;
    Ok(GateVector {
        pi: softmax_values(theta.as_slice(), Some(mask)),
        mask: mask.to_vec(),
    })
}

/// [`masked_gates`] on the tape. The mask is a constant, so no gradient
/// reaches masked coordinates.
pub fn masked_gates_var<'t>(theta: Var<'t>, mask: &[bool]) -> Result<(Var<'t>, GateVector)> {
    let len = theta.value_ref().numel();
    check_mask(len, mask)?;
    let pi = theta.masked_softmax(mask)?;
    let gates = GateVector {
        pi: pi.value().into_data(),
        mask: mask.to_vec(),
    };
    Ok((pi, gates))
}

/// Draws `D ~ Categorical(π)`. Masked experts carry no mass and are never drawn.
pub fn sample_expert<R: Rng + ?Sized>(gates: &GateVector, rng: &mut R) -> RoutingDecision {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut chosen = None;
    for (i, (&p, &live)) in gates.pi.iter().zip(&gates.mask).enumerate() {
        if !live || p <= 0.0 {
            continue;
        }
        cumulative += p;
        chosen = Some(i);
        if u < cumulative {
            break;
        }
    }
    // `chosen` is the last positive unmasked entry if rounding left u above the total.
    let expert = chosen.expect("gate vector has positive mass");
    RoutingDecision {
        expert,
        gate: gates.pi[expert],
        is_argmax: expert == gates.argmax(),
        mode: SelectionMode::Sampled,
    }
}

/// Inference routing: `D = argmax π`.
pub fn argmax_expert(gates: &GateVector) -> RoutingDecision {
    let expert = gates.argmax();
    RoutingDecision {
        expert,
        gate: gates.pi[expert],
        is_argmax: true,
        mode: SelectionMode::Argmax,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn logits_validation() {
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::NAN]).is_err());
        assert!(Logits::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn router_logits_examples() {
        let tape = Tape::new();
        let w = tape.param(Tensor::identity(2));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(router_logits(w, x).unwrap().value().data(), &[1.0, 2.0]);

        let w = tape.param(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let theta = router_logits(w, x).unwrap();
        assert_eq!(theta.value().data(), &[2.0, 1.0]);

        // dθ_1/dW_r: row 1 equals xᵀ, row 0 is zero.
        let x_vals = [0.5, -3.0];
        let x = tape.constant(Tensor::vector(x_vals.to_vec()));
        let theta = router_logits(w, x).unwrap();
        let g = tape.backward(theta.select(1).unwrap()).unwrap().wrt(w);
        assert_eq!(g.data(), &[0.0, 0.0, 0.5, -3.0]);
    }

    #[test]
    fn jitter_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert_eq!(jitter_argmax(&logits(&[1.0, 0.5]), 0.1, &mut rng), 0);
            assert_eq!(jitter_argmax(&logits(&[-1.0, -2.0]), 0.1, &mut rng), 0);
        }
        assert_eq!(jitter_argmax(&logits(&[0.3, 0.9, 0.1]), 0.0, &mut rng), 1);
        assert_eq!(jitter_argmax(&logits(&[0.9, 0.9]), 0.0, &mut rng), 0);
    }

    #[test]
    fn mask_examples() {
        assert_eq!(routing_mask(&logits(&[1.0, 0.0]), 0.1), vec![true, false]);
        assert_eq!(routing_mask(&logits(&[1.0, 0.95]), 0.1), vec![true, true]);
        assert_eq!(routing_mask(&logits(&[0.0, 0.0]), 0.1), vec![true, true]);
        assert_eq!(routing_mask(&logits(&[0.0, 0.0]), 0.0), vec![true, true]);
    }

    #[test]
    fn gate_examples() {
        let g = masked_gates(&logits(&[0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(g.pi(), &[0.5, 0.5]);
        let g = masked_gates(&logits(&[1.0, 0.0]), &[true, false]).unwrap();
        assert_eq!(g.pi(), &[1.0, 0.0]);
        let g = masked_gates(&logits(&[1.0, 0.95]), &[true, true]).unwrap();
        let e = 0.05f64.exp();
        assert_abs_diff_eq!(g.pi()[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(g.pi()[0], 0.51250, epsilon = 5e-6);
        assert_abs_diff_eq!(g.pi()[1], 0.48750, epsilon = 5e-6);
        assert!(matches!(
            masked_gates(&logits(&[1.0, 0.0]), &[false, false]),
            Err(Error::AllMasked)
        ));
        assert!(masked_gates(&logits(&[1.0, 0.0]), &[true]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = masked_gates(&logits(&[1.0, 0.0]), &[true, false]).unwrap();
        for _ in 0..1000 {
            let d = sample_expert(&g, &mut rng);
            assert_eq!(d.expert, 0);
            assert!(d.is_argmax);
            assert_eq!(d.mode, SelectionMode::Sampled);
        }
        let g = masked_gates(&logits(&[0.0, 0.0]), &[true, true]).unwrap();
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample_expert(&g, &mut rng).expert == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.01, "frequency {freq}");
    }

    #[test]
    fn argmax_examples() {
        let g = |pi: &[f64]| GateVector {
            pi: pi.to_vec(),
            mask: vec![true; pi.len()],
        };
        let d = argmax_expert(&g(&[0.7, 0.3]));
        assert_eq!((d.expert, d.is_argmax, d.mode), (0, true, SelectionMode::Argmax));
        assert_eq!(argmax_expert(&g(&[0.5, 0.5])).expert, 0);
        assert_eq!(argmax_expert(&g(&[0.0, 1.0])).expert, 1);
    }

    #[test]
    fn masked_gate_gradient_matches_sub_softmax_jacobian() {
        let theta_vals = [0.4, 0.35, -1.0, 0.39];
        let mask = routing_mask(&logits(&theta_vals), 0.1);
        assert_eq!(mask, vec![true, true, false, true]);
        let weights = [1.0, -2.0, 3.0, 0.5];
        let tape = Tape::new();
        let theta = tape.param(Tensor::vector(theta_vals.to_vec()));
        let (pi, gates) = masked_gates_var(theta, &mask).unwrap();
        let w = tape.constant(Tensor::vector(weights.to_vec()));
        let g = tape.backward(pi.dot(w).unwrap()).unwrap().wrt(theta);
        assert_eq!(g.data()[2], 0.0);

        let objective = |t: &[f64]| -> f64 {
            let pi = softmax_values(t, Some(&mask));
            pi.iter().zip(weights).map(|(p, w)| p * w).sum()
        };
        let h = 1e-6;
        for i in [0, 1, 3] {
            let mut up = theta_vals;
            let mut down = theta_vals;
            up[i] += h;
            down[i] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert_abs_diff_eq!(g.data()[i], fd, epsilon = 1e-9);
        }
        assert_eq!(gates.pi()[2], 0.0);
    }

    proptest! {
        #[test]
        fn unmasked_gates_equal_softmax(theta in prop::collection::vec(-5.0f64..5.0, 2..9)) {
            let mask = vec![true; theta.len()];
            let g = masked_gates(&Logits::new(theta.clone()).unwrap(), &mask).unwrap();
            let plain = softmax_values(&theta, None);
            for (a, b) in g.pi().iter().zip(&plain) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn mask_keeps_argmax_and_normalises(
            theta in prop::collection::vec(-5.0f64..5.0, 2..9),
            r in 0.0f64..0.99,
        ) {
            let logits = Logits::new(theta).unwrap();
            let mask = routing_mask(&logits, r);
            prop_assert!(mask[logits.argmax()]);
            let g = masked_gates(&logits, &mask).unwrap();
            prop_assert!((g.pi().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, m) in g.pi().iter().zip(&mask) {
                prop_assert!(*p >= 0.0);
                if !m { prop_assert_eq!(*p, 0.0); }
            }
            prop_assert_eq!(g.argmax(), logits.argmax());
        }

        #[test]
        fn jitter_samples_stay_unmasked(
            theta in prop::collection::vec(-3.0f64..3.0, 2..7),
            seed in any::<u64>(),
        ) {
            let logits = Logits::new(theta).unwrap();
            let mask = routing_mask(&logits, DEFAULT_JITTER);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..500 {
                prop_assert!(mask[jitter_argmax(&logits, DEFAULT_JITTER, &mut rng)]);
            }
        }

        #[test]
        fn sampled_decision_flags_argmax(theta in prop::collection::vec(-3.0f64..3.0, 2..7), seed in any::<u64>()) {
            let logits = Logits::new(theta).unwrap();
            let mask = routing_mask(&logits, DEFAULT_JITTER);
            let gates = masked_gates(&logits, &mask).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let d = sample_expert(&gates, &mut rng);
                prop_assert!(mask[d.expert]);
                prop_assert!(d.gate > 0.0);
                prop_assert_eq!(d.is_argmax, d.expert == gates.argmax());
            }
        }
    }
}
