//! Brute-force ground truth on small instances.
//!
//! An instance fixes the router (raw logits or `W_r·x`), the expert outputs
//! `f_i` and a smooth downstream map `g`. The expected loss
//! `L = Σ_i π_i g(π_i f_i)` and its two gradient terms are computed in closed
//! form by enumerating the `N` outcomes; nothing here goes through the tape.
//! Estimator expectations, in contrast, are taken over the estimators' own
//! tape routes so the two sides stay independent.
//!
//! All gradients are flattened over the router parameters: `θ` itself, or
//! `W_r` in row-major order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax_values, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{
    draw_gumbel, gumbel_argmax, relaxed_weights, reinforce_surrogate, route_output,
    softmax_jacobian, EstimatorConfig, EstimatorKind, ExpertOutputs, GateRoute, Nabla1Path,
};
use crate::moe::{expert_forward, MoeLayer};
use crate::routing::{argmax, masked_gates_var, RoutingDecision, SelectionMode};

/// Largest `N` the oracle will enumerate.
pub const MAX_EXPERTS: usize = 16;
/// Minimum Gumbel draws for the STGS Monte Carlo expectation.
pub const MIN_STGS_SAMPLES: usize = 10_000;
/// Biases at or below this are treated as exactly zero by the order study.
pub const ZERO_BIAS: f64 = 1e-13;

/// Downstream scalar map `g: R^m → R` with hand-written derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum Downstream {
    /// `Σ_k y_k²`
    Quadratic,
    /// `Σ_k y_k³`
    Cubic,
    /// `c`, independent of `y`.
    Constant(f64),
    /// `Σ_j w_j tanh(⟨a_j, y⟩ + b_j)`; `a` is `K×m` row-major.
    Readout { a: Vec<f64>, b: Vec<f64>, w: Vec<f64> },
}

impl Downstream {
    /// A readout with `k` hidden units and standard-normal weights.
    pub fn random_readout<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        Downstream::Readout {
            a: draw(k * m),
            b: draw(k),
            w: draw(k),
        }
    }

    fn pre_activations<'a>(a: &'a [f64], b: &'a [f64], y: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let m = y.len();
        b.iter()
            .enumerate()
            .map(move |(j, bj)| a[j * m..(j + 1) * m].iter().zip(y).map(|(p, q)| p * q).sum::<f64>() + bj)
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            Downstream::Quadratic => y.iter().map(|v| v * v).sum(),
            Downstream::Cubic => y.iter().map(|v| v * v * v).sum(),
            Downstream::Constant(c) => *c,
            Downstream::Readout { a, b, w } => Self::pre_activations(a, b, y)
                .zip(w)
                .map(|(z, wj)| wj * z.tanh())
                .sum(),
        }
    }

    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Downstream::Quadratic => y.iter().map(|v| 2.0 * v).collect(),
            Downstream::Cubic => y.iter().map(|v| 3.0 * v * v).collect(),
            Downstream::Constant(_) => vec![0.0; y.len()],
            Downstream::Readout { a, b, w } => {
                let m = y.len();
                let mut out = vec![0.0; m];
                for (j, (z, wj)) in Self::pre_activations(a, b, y).zip(w).enumerate() {
                    let t = z.tanh();
                    let s = wj * (1.0 - t * t);
                    for (o, aj) in out.iter_mut().zip(&a[j * m..(j + 1) * m]) {
                        *o += s * aj;
                    }
                }
                out
            }
        }
    }

    /// `g(y)` on the tape.
    pub fn on_tape<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        let tape = y.tape();
        match self {
            Downstream::Quadratic => y.square()?.sum(),
            Downstream::Cubic => y.square()?.mul(y)?.sum(),
            Downstream::Constant(c) => tape.scalar(*c).add(y.scale(0.0)?.sum()?),
            Downstream::Readout { a, b, w } => {
                let m = y.value_ref().numel();
                let a = tape.constant(Tensor::matrix(b.len(), m, a.clone())?);
                let b = tape.constant(Tensor::vector(b.clone()));
                let w = tape.constant(Tensor::vector(w.clone()));
                a.matmul(y)?.add(b)?.tanh()?.dot(w)
            }
        }
    }
}

/// How the router logits arise from the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Router {
    /// The parameters are `θ` itself.
    Logits(Vec<f64>),
    /// `θ = W_r·x` with `W_r: N×d`.
    Linear { w_r: Tensor, x: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallInstance {
    pub router: Router,
    /// `f_i(x)`, all of the same length.
    pub experts: Vec<Vec<f64>>,
    pub g: Downstream,
}

impl SmallInstance {
    pub fn new(router: Router, experts: Vec<Vec<f64>>, g: Downstream) -> Result<Self> {
        let inst = Self { router, experts, g };
        inst.validate()?;
        Ok(inst)
    }

    /// N = 2, θ = [0, 0], scalar experts f = (1, 2), g(y) = y².
    pub fn reference() -> Self {
        Self {
            router: Router::Logits(vec![0.0, 0.0]),
            experts: vec![vec![1.0], vec![2.0]],
            g: Downstream::Quadratic,
        }
    }

    /// Linear router with standard-normal weights and input, normal expert
    /// outputs of width `m`, and a random tanh readout.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, m: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let w_r = (0..n * d).map(|_| normal.sample(rng)).collect();
        let x = (0..d).map(|_| normal.sample(rng)).collect();
        let experts = (0..n)
            .map(|_| (0..m).map(|_| normal.sample(rng)).collect())
            .collect();
        let g = Downstream::random_readout(4, m, rng);
        Self {
            router: Router::Linear {
                w_r: Tensor::matrix(n, d, w_r).expect("shape"),
                x,
            },
            experts,
            g,
        }
    }

    /// The simplified model behind an MoE layer at input `x`: linear router,
    /// expert outputs evaluated once (ω is not part of it).
    pub fn from_layer(layer: &MoeLayer, x: &[f64], g: Downstream) -> Result<Self> {
        let experts = layer
            .experts
            .iter()
            .map(|e| expert_forward(e, x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            Router::Linear {
                w_r: layer.w_r.clone(),
                x: x.to_vec(),
            },
            experts,
            g,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n > MAX_EXPERTS {
            return Err(Error::Intractable(format!(
                "{n} experts; enumeration is limited to N ≤ {MAX_EXPERTS}"
            )));
        }
        if n < 2 || self.experts.len() != n {
            return Err(Error::InvalidLogits(format!(
                "router has {n} outputs but {} experts were given",
                self.experts.len()
            )));
        }
        let m = self.experts[0].len();
        if m == 0 || self.experts.iter().any(|f| f.len() != m) {
            return Err(Error::ShapeMismatch {
                op: "oracle experts",
                shapes: self.experts.iter().map(|f| vec![f.len()]).collect(),
            });
        }
        if let Router::Linear { w_r, x } = &self.router {
            if w_r.shape().len() != 2 || w_r.cols() != x.len() {
                return Err(Error::ShapeMismatch {
                    op: "oracle router",
                    shapes: vec![w_r.shape().to_vec(), vec![x.len()]],
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        match &self.router {
            Router::Logits(t) => t.len(),
            Router::Linear { w_r, .. } => w_r.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        match &self.router {
            Router::Logits(t) => t.clone(),
            Router::Linear { w_r, x } => (0..w_r.rows())
                .map(|i| w_r.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    pub fn pi(&self) -> Vec<f64> {
        softmax_values(&self.theta(), None)
    }

    /// Router parameters, flattened.
    pub fn params(&self) -> Vec<f64> {
        match &self.router {
            Router::Logits(t) => t.clone(),
            Router::Linear { w_r, .. } => w_r.data().to_vec(),
        }
    }

    /// Same instance with the router parameters replaced.
    pub fn with_params(&self, params: &[f64]) -> Self {
        let router = match &self.router {
            Router::Logits(_) => Router::Logits(params.to_vec()),
            Router::Linear { w_r, x } => Router::Linear {
                w_r: Tensor::matrix(w_r.rows(), w_r.cols(), params.to_vec()).expect("shape"),
                x: x.clone(),
            },
        };
        Self {
            router,
            ..self.clone()
        }
    }

    /// Expert outputs scaled by `eps`; `g` and the router are unchanged.
    pub fn scaled(&self, eps: f64) -> Self {
        Self {
            experts: self
                .experts
                .iter()
                .map(|f| f.iter().map(|v| eps * v).collect())
                .collect(),
            ..self.clone()
        }
    }

    /// Pulls a `θ`-gradient back to the router parameters.
    fn to_params(&self, grad_theta: &[f64]) -> Vec<f64> {
        match &self.router {
            Router::Logits(_) => grad_theta.to_vec(),
            Router::Linear { x, .. } => grad_theta
                .iter()
                .flat_map(|gi| x.iter().map(move |xk| gi * xk))
                .collect(),
        }
    }

    fn gated(&self, i: usize, scale: f64, pi: &[f64]) -> Vec<f64> {
        self.experts[i].iter().map(|v| scale * pi[i] * v).collect()
    }

    /// `Σ_i c_i ∂π_i/∂params`.
    fn combine(&self, coef: &[f64], pi: &[f64]) -> Vec<f64> {
        let jac = softmax_jacobian(pi, 1.0);
        let n = pi.len();
        let grad_theta: Vec<f64> = (0..n)
            .map(|k| coef.iter().zip(&jac).map(|(c, row)| c * row[k]).sum())
            .collect();
        self.to_params(&grad_theta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `L = Σ_i π_i g(π_i f_i)`.
pub fn exact_loss(inst: &SmallInstance) -> f64 {
    let pi = inst.pi();
    (0..inst.n())
        .map(|i| pi[i] * inst.g.value(&inst.gated(i, 1.0, &pi)))
        .sum()
}

/// `(∇0, ∇1)` with `∇0 = Σ_i g(π_i f_i) ∂π_i/∂W` and
/// `∇1 = Σ_i π_i ⟨g'(π_i f_i), f_i⟩ ∂π_i/∂W`.
pub fn exact_grad_decomposed(inst: &SmallInstance) -> (Vec<f64>, Vec<f64>) {
    let pi = inst.pi();
    let n = inst.n();
    let values: Vec<f64> = (0..n).map(|i| inst.g.value(&inst.gated(i, 1.0, &pi))).collect();
    let path: Vec<f64> = (0..n)
        .map(|i| pi[i] * dot(&inst.g.grad(&inst.gated(i, 1.0, &pi)), &inst.experts[i]))
        .collect();
    (inst.combine(&values, &pi), inst.combine(&path, &pi))
}

/// `E[∂g(π_D f_D)/∂W]` through the gate, i.e. `Σ_i g'(π_i f_i)·π_i f_i ∂π_i/∂W`.
pub fn forward_euler_form(inst: &SmallInstance) -> Vec<f64> {
    rule_form(inst, 1.0)
}

/// `Σ_i g'(π_i f_i / 2)·π_i f_i ∂π_i/∂W`.
pub fn midpoint_form(inst: &SmallInstance) -> Vec<f64> {
    rule_form(inst, 0.5)
}

fn rule_form(inst: &SmallInstance, at: f64) -> Vec<f64> {
    let pi = inst.pi();
    let coef: Vec<f64> = (0..inst.n())
        .map(|i| dot(&inst.g.grad(&inst.gated(i, at, &pi)), &inst.gated(i, 1.0, &pi)))
        .collect();
    inst.combine(&coef, &pi)
}

/// `E[∇̂_ST] = Σ_i ⟨E_D[g'(π_D f_D)], π_i f_i⟩ ∂π_i/∂W`.
pub fn straight_through_form(inst: &SmallInstance) -> Vec<f64> {
    let pi = inst.pi();
    let n = inst.n();
    let m = inst.experts[0].len();
    let mut mean_grad = vec![0.0; m];
    for d in 0..n {
        for (a, b) in mean_grad.iter_mut().zip(inst.g.grad(&inst.gated(d, 1.0, &pi))) {
            *a += pi[d] * b;
        }
    }
    let coef: Vec<f64> = (0..n).map(|i| dot(&mean_grad, &inst.gated(i, 1.0, &pi))).collect();
    inst.combine(&coef, &pi)
}

/// Deviation of the two baseline rewrites of `∇0` from `∇0` itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineResiduals {
    /// `Σ_i (g(π_i f_i) − E[g]) ∂π_i/∂W`.
    pub mean_baseline: f64,
    /// `Σ_i (g(π_i f_i) − g(0)) ∂π_i/∂W`.
    pub zero_baseline: f64,
}

impl BaselineResiduals {
    pub fn max(&self) -> f64 {
        self.mean_baseline.max(self.zero_baseline)
    }
}

pub fn baseline_identity_check(inst: &SmallInstance) -> BaselineResiduals {
    let pi = inst.pi();
    let n = inst.n();
    let values: Vec<f64> = (0..n).map(|i| inst.g.value(&inst.gated(i, 1.0, &pi))).collect();
    let mean: f64 = values.iter().zip(&pi).map(|(v, p)| v * p).sum();
    let at_zero = inst.g.value(&vec![0.0; inst.experts[0].len()]);
    let (nabla0, _) = exact_grad_decomposed(inst);
    let residual = |baseline: f64| {
        let coef: Vec<f64> = values.iter().map(|v| v - baseline).collect();
        let form = inst.combine(&coef, &pi);
        sub(&form, &nabla0).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    };
    BaselineResiduals {
        mean_baseline: residual(mean),
        zero_baseline: residual(at_zero),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub nabla0: Vec<f64>,
    pub nabla1: Vec<f64>,
    pub estimator_expectation: Vec<f64>,
    /// `‖E[∇̂] − target‖₂`; the target is `∇0` under [`Nabla1Path::None`]
    /// and `∇0 + ∇1` otherwise.
    pub bias_l2: f64,
    /// `bias_l2 / ‖target‖₂` (zero when the target vanishes).
    pub rel_bias: f64,
    /// `E‖∇̂ − E[∇̂]‖²`.
    pub variance_trace: f64,
    /// Monte Carlo draws; 0 for exact enumeration.
    pub n_samples: usize,
}

/// One realisation of the estimator's router gradient for outcome `expert`
/// (and, for STGS, the Gumbel draw that produced it).
pub fn estimator_sample(
    inst: &SmallInstance,
    cfg: &EstimatorConfig,
    expert: usize,
    gumbel: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let (param, theta) = match &inst.router {
        Router::Logits(t) => {
            let p = tape.param(Tensor::vector(t.clone()));
            (p, p)
        }
        Router::Linear { w_r, x } => {
            let p = tape.param(w_r.clone());
            let x = tape.constant(Tensor::vector(x.clone()));
            (p, p.matmul(x)?)
        }
    };
    let n = inst.n();
    let (pi, gates) = masked_gates_var(theta, &vec![true; n])?;
    let decision = RoutingDecision {
        expert,
        gate: gates.pi()[expert],
        is_argmax: expert == argmax(gates.pi()),
        mode: SelectionMode::Sampled,
    };
    let route = GateRoute {
        theta,
        pi,
        gates,
        decision,
    };
    let outputs: Vec<Var> = inst
        .experts
        .iter()
        .map(|f| tape.constant(Tensor::vector(f.clone())))
        .collect();
    let experts = match cfg.kind {
        EstimatorKind::St => ExpertOutputs::Dense {
            outputs,
            relaxed: pi,
        },
        EstimatorKind::Stgs => {
            let g = gumbel.ok_or(Error::MissingDenseContext("stgs"))?;
            ExpertOutputs::Dense {
                outputs,
                relaxed: relaxed_weights(theta, g, cfg.tau)?,
            }
        }
        _ => ExpertOutputs::Sparse(outputs[expert]),
    };
    let y = route_output(cfg, &route, experts)?;
    let loss = inst.g.on_tape(y)?;
    let objective = if cfg.kind == EstimatorKind::Reinforce {
        loss.add(reinforce_surrogate(&route, loss)?)?
    } else {
        loss
    };
    Ok(tape.backward(objective)?.wrt(param).into_data())
}

/// Expectation, bias and variance of an estimator. Routing is the plain
/// softmax of the instance (`use_mask` and `use_omega` do not apply). Exact
/// enumeration over `D ~ π` for every kind but STGS, which averages
/// `mc_samples` Gumbel draws from a generator seeded with `seed`.
pub fn estimator_expectation(
    inst: &SmallInstance,
    cfg: &EstimatorConfig,
    mc_samples: usize,
    seed: u64,
) -> Result<GradReport> {
    inst.validate()?;
    cfg.validate()?;
    if !cfg.scale_gate {
        return Err(Error::InvalidEstimator(
            "the oracle's loss assumes gate-scaled outputs".into(),
        ));
    }
    let cfg = EstimatorConfig {
        use_mask: false,
        use_omega: false,
        ..cfg.clone()
    };
    let (nabla0, nabla1) = exact_grad_decomposed(inst);
    let target = match cfg.nabla1_path {
        Nabla1Path::None => nabla0.clone(),
        Nabla1Path::Standard => nabla0.iter().zip(&nabla1).map(|(a, b)| a + b).collect(),
    };
    let p = target.len();

    let (expectation, variance_trace, n_samples) = if cfg.kind == EstimatorKind::Stgs {
        if mc_samples < MIN_STGS_SAMPLES {
            return Err(Error::TooFewSamples {
                got: mc_samples,
                min: MIN_STGS_SAMPLES,
            });
        }
        let theta = inst.theta();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = vec![0.0; p];
        let mut sum_sq = 0.0;
        let mut samples = Vec::with_capacity(mc_samples);
        for _ in 0..mc_samples {
            let g = draw_gumbel(inst.n(), &mut rng);
            let d = gumbel_argmax(&theta, &g);
            let s = estimator_sample(inst, &cfg, d, Some(&g))?;
            for (a, b) in sum.iter_mut().zip(&s) {
                *a += b;
            }
            samples.push(s);
        }
        let k = mc_samples as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / k).collect();
        for s in &samples {
            sum_sq += sub(s, &mean).iter().map(|v| v * v).sum::<f64>();
        }
        (mean, sum_sq / (k - 1.0), mc_samples)
    } else {
        let pi = inst.pi();
        let samples = (0..inst.n())
            .map(|d| estimator_sample(inst, &cfg, d, None))
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; p];
        for (s, w) in samples.iter().zip(&pi) {
            for (a, b) in mean.iter_mut().zip(s) {
                *a += w * b;
            }
        }
        let var = samples
            .iter()
            .zip(&pi)
            .map(|(s, w)| w * sub(s, &mean).iter().map(|v| v * v).sum::<f64>())
            .sum();
        (mean, var, 0)
    };

    let bias_l2 = l2(&sub(&expectation, &target));
    let norm = l2(&target);
    Ok(GradReport {
        nabla0,
        nabla1,
        estimator_expectation: expectation,
        bias_l2,
        rel_bias: if norm > 0.0 { bias_l2 / norm } else { 0.0 },
        variance_trace,
        n_samples,
    })
}

/// Central differences `(L(p + h e_k) − L(p − h e_k)) / 2h`.
pub fn finite_diff_grad(loss_fn: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let plus = loss_fn(&p);
            p[k] = orig - h;
            let minus = loss_fn(&p);
            p[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order central differences
/// `(−L(p+2h) + 8L(p+h) − 8L(p−h) + L(p−2h)) / 12h`. Truncation error is
/// `O(h⁴)`, so a larger step keeps roundoff down.
pub fn five_point_grad(loss_fn: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            let mut at = |offset: f64| {
                p[k] = orig + offset;
                loss_fn(&p)
            };
            let v = -at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h);
            p[k] = orig;
            v / (12.0 * h)
        })
        .collect()
}

/// `max_k |a_k − b_k| / max(‖a‖∞, ‖b‖∞, 1e-3)`: elementwise disagreement
/// measured against the size of the gradient rather than each component.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(1e-3)
}

/// Five-point finite-difference gradient of [`exact_loss`] in the router
/// parameters.
pub fn exact_loss_fd(inst: &SmallInstance, h: f64) -> Vec<f64> {
    five_point_grad(|p| exact_loss(&inst.with_params(p)), &inst.params(), h)
}

/// Monte Carlo estimate of [`exact_loss`] by sampling `D ~ π`:
/// returns (mean, standard error).
pub fn monte_carlo_loss<R: Rng + ?Sized>(inst: &SmallInstance, samples: usize, rng: &mut R) -> (f64, f64) {
    let pi = inst.pi();
    let gate = crate::routing::GateVector::unmasked(pi.clone());
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            let d = crate::routing::sample_expert(&gate, rng).expert;
            inst.g.value(&inst.gated(d, 1.0, &pi))
        })
        .collect();
    mean_and_stderr(&values)
}

pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderStudyResult {
    pub epsilons: Vec<f64>,
    /// Median bias over the instance family at each ε.
    pub bias_norms: Vec<f64>,
    /// Median over instances of `bias(ε_j) / bias(ε_{j+1})`; `None` when every
    /// instance has (numerically) zero bias at that step.
    pub ratios: Vec<Option<f64>>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Bias of the estimator's `∇0` part as the expert outputs shrink by each ε.
/// The `∇1` path is always excluded so the bias is measured against `∇0`.
pub fn bias_order_study(
    family: &[SmallInstance],
    cfg: &EstimatorConfig,
    epsilons: &[f64],
) -> Result<OrderStudyResult> {
    let cfg = cfg.clone().with_nabla1(Nabla1Path::None);
    let mut per_instance = Vec::with_capacity(family.len());
    for inst in family {
        let biases = epsilons
            .iter()
            .map(|&eps| Ok(estimator_expectation(&inst.scaled(eps), &cfg, MIN_STGS_SAMPLES, 0)?.bias_l2))
            .collect::<Result<Vec<f64>>>()?;
        per_instance.push(biases);
    }
    let bias_norms = (0..epsilons.len())
        .map(|j| {
            let mut col: Vec<f64> = per_instance.iter().map(|b| b[j]).collect();
            median(&mut col).unwrap_or(0.0)
        })
        .collect();
    let ratios = (1..epsilons.len())
        .map(|j| {
            let mut defined: Vec<f64> = per_instance
                .iter()
                .filter(|b| b[j] > ZERO_BIAS && b[j - 1] > ZERO_BIAS)
                .map(|b| b[j - 1] / b[j])
                .collect();
            median(&mut defined)
        })
        .collect();
    Ok(OrderStudyResult {
        epsilons: epsilons.to_vec(),
        bias_norms,
        ratios,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeMethod {
    /// `g(t1) − g(t0) ≈ g'(t1)(t1 − t0)`
    EulerEndpoint,
    /// `g(t1) − g(t0) ≈ g'((t0 + t1)/2)(t1 − t0)`
    Midpoint,
}

impl OdeMethod {
    pub fn label(self) -> &'static str {
        match self {
            OdeMethod::EulerEndpoint => "euler_endpoint",
            OdeMethod::Midpoint => "midpoint",
        }
    }
}

/// Scalar test functions with closed-form derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarFn {
    Square,
    Cube,
    Tanh,
    Exp,
    /// `Σ_k c_k x^k`
    Poly(Vec<f64>),
}

impl ScalarFn {
    pub fn label(&self) -> &'static str {
        match self {
            ScalarFn::Square => "x^2",
            ScalarFn::Cube => "x^3",
            ScalarFn::Tanh => "tanh",
            ScalarFn::Exp => "exp",
            ScalarFn::Poly(_) => "poly",
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Square => x * x,
            ScalarFn::Cube => x * x * x,
            ScalarFn::Tanh => x.tanh(),
            ScalarFn::Exp => x.exp(),
            ScalarFn::Poly(c) => c.iter().rev().fold(0.0, |acc, ck| acc * x + ck),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Square => 2.0 * x,
            ScalarFn::Cube => 3.0 * x * x,
            ScalarFn::Tanh => 1.0 - x.tanh().powi(2),
            ScalarFn::Exp => x.exp(),
            ScalarFn::Poly(c) => c
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, ck)| acc * x + k as f64 * ck),
        }
    }
}

pub fn ode_solver_error(g: &ScalarFn, t0: f64, t1: f64, method: OdeMethod) -> f64 {
    let at = match method {
        OdeMethod::EulerEndpoint => t1,
        OdeMethod::Midpoint => 0.5 * (t0 + t1),
    };
    (g.value(t1) - g.value(t0) - g.derivative(at) * (t1 - t0)).abs()
}
