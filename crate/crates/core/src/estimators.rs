//! Router-gradient estimators.
//!
//! Every estimator produces the same kind of thing: the MoE output `y` on the
//! tape, wired so that backpropagating the downstream loss through it yields
//! the estimator's router gradient. Writing `∇0` for the score-function term
//! of the exact router gradient and `∇1` for the pathwise term through the
//! gate multiplier:
//!
//! | kind           | forward `y`          | router gradient (∇0 part)                  |
//! |----------------|----------------------|--------------------------------------------|
//! | `neglect`      | `π_D f_D`            | none                                       |
//! | `reinforce`    | `π_D f_D`            | `g · ∂log π_D/∂θ`                          |
//! | `st`           | `π_D f_D` (dense)    | `Σ_i ⟨g'(y), π_i f_i⟩ ∂π_i/∂θ`             |
//! | `stgs`         | `π_D f_D` (dense)    | `Σ_i ⟨g'(y), π_i f_i⟩ ∂S_τ,i/∂θ`           |
//! | `sparsemixer1` | `π_D f_D`            | `∂g(π_D f_D)/∂θ` via the gate              |
//! | `sparsemixer2` | `π_D f_D / 2`        | `2 · ∂g(π_D f_D / 2)/∂θ` via the gate      |
//! | `sparsemixer`  | 1st if `δ_D`, else 2nd                                            |
//!
//! With [`Nabla1Path::Standard`] the ordinary multiplier-path gradient of the
//! forward actually computed is added on top, so the total targets `∇0 + ∇1`.
//! [`Nabla1Path::None`] leaves the `∇0` estimate alone, which is what the
//! oracle measures bias against.
//!
//! The free functions [`grad_reinforce`], [`grad_st`] and [`grad_stgs`] give
//! the same per-sample `∇0` estimates in closed form, with respect to `θ`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, Tensor, Var};
use crate::error::{Error, Result};
use crate::routing::{argmax, GateVector, RoutingDecision, DEFAULT_JITTER};

/// Default STGS temperature.
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Neglect,
    Reinforce,
    St,
    Stgs,
    Sparsemixer1,
    Sparsemixer2,
    Sparsemixer,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Neglect,
        EstimatorKind::Reinforce,
        EstimatorKind::St,
        EstimatorKind::Stgs,
        EstimatorKind::Sparsemixer1,
        EstimatorKind::Sparsemixer2,
        EstimatorKind::Sparsemixer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Neglect => "neglect",
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::St => "st",
            EstimatorKind::Stgs => "stgs",
            EstimatorKind::Sparsemixer1 => "sparsemixer1",
            EstimatorKind::Sparsemixer2 => "sparsemixer2",
            EstimatorKind::Sparsemixer => "sparsemixer",
        }
    }

    /// ST and STGS evaluate every expert for every token.
    pub fn is_dense(self) -> bool {
        matches!(self, EstimatorKind::St | EstimatorKind::Stgs)
    }

    pub fn is_sparsemixer(self) -> bool {
        matches!(
            self,
            EstimatorKind::Sparsemixer1 | EstimatorKind::Sparsemixer2 | EstimatorKind::Sparsemixer
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::InvalidEstimator(format!("unknown estimator kind `{s}`")))
    }
}

/// Whether the multiplier-path (`∇1`) router gradient is kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nabla1Path {
    #[default]
    Standard,
    None,
}

impl Nabla1Path {
    fn factor(self) -> f64 {
        match self {
            Nabla1Path::Standard => 1.0,
            Nabla1Path::None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Restrict routing to the jitter-reachable experts.
    pub use_mask: bool,
    /// Trainable per-dimension output scale.
    pub use_omega: bool,
    /// `y = π_D f_D` when set, `y = f_D` otherwise.
    pub scale_gate: bool,
    pub nabla1_path: Nabla1Path,
    pub tau: f64,
    pub r: f64,
}

impl EstimatorConfig {
    /// Defaults: masked routing (unavailable to ST/STGS), ω on, gate scaling
    /// on, standard `∇1` path, `τ = 1`, `r = 0.1`.
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            use_mask: !kind.is_dense(),
            use_omega: true,
            scale_gate: true,
            nabla1_path: Nabla1Path::Standard,
            tau: DEFAULT_TAU,
            r: DEFAULT_JITTER,
        }
    }

    /// Plain softmax routing with no ω, as used by the oracle.
    pub fn simplified(kind: EstimatorKind) -> Self {
        Self {
            use_mask: false,
            use_omega: false,
            ..Self::new(kind)
        }
    }

    pub fn with_nabla1(mut self, path: Nabla1Path) -> Self {
        self.nabla1_path = path;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidEstimator(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(Error::InvalidEstimator(format!("r must lie in [0, 1), got {}", self.r)));
        }
        if self.kind.is_dense() && self.use_mask {
            return Err(Error::InvalidEstimator(format!(
                "{} runs only on unmasked routing; set use_mask = false",
                self.kind
            )));
        }
        if self.kind.is_sparsemixer() && !self.scale_gate {
            return Err(Error::InvalidEstimator(format!(
                "{} differentiates through the gate multiplier and needs scale_gate = true",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Everything a dense estimator needs beyond the sampled expert.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRoutingContext {
    /// `f_i(x)` for every expert.
    pub expert_outputs: Vec<Vec<f64>>,
    /// Gumbel draws `G_i` (STGS only).
    pub gumbel: Option<Vec<f64>>,
}

impl DenseRoutingContext {
    pub fn new(expert_outputs: Vec<Vec<f64>>) -> Self {
        Self {
            expert_outputs,
            gumbel: None,
        }
    }

    pub fn with_gumbel(mut self, gumbel: Vec<f64>) -> Self {
        self.gumbel = Some(gumbel);
        self
    }

    /// `h(D) = Σ_i D_i π_i f_i` for a (possibly relaxed) selection vector `D`.
    pub fn h(&self, selection: &[f64], pi: &[f64]) -> Vec<f64> {
        let dim = self.expert_outputs.first().map_or(0, Vec::len);
        let mut out = vec![0.0; dim];
        for ((d, p), f) in selection.iter().zip(pi).zip(&self.expert_outputs) {
            for (o, v) in out.iter_mut().zip(f) {
                *o += d * p * v;
            }
        }
        out
    }
}

/// `∂π_i/∂θ_k = π_i (δ_ik − π_k)`, scaled by `1/τ` for tempered softmax.
/// Rows and columns of masked entries vanish because their `π` is zero.
pub fn softmax_jacobian(pi: &[f64], tau: f64) -> Vec<Vec<f64>> {
    (0..pi.len())
        .map(|i| {
            (0..pi.len())
                .map(|k| {
                    let delta = if i == k { 1.0 } else { 0.0 };
                    pi[i] * (delta - pi[k]) / tau
                })
                .collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g · ∂log π_D/∂θ = g (e_D − π)`; zero on masked coordinates.
pub fn grad_reinforce(loss_value: f64, gates: &GateVector, decision: &RoutingDecision) -> Vec<f64> {
    gates
        .pi()
        .iter()
        .zip(gates.mask())
        .enumerate()
        .map(|(i, (&p, &live))| {
            if !live {
                return 0.0;
            }
            let indicator = if i == decision.expert { 1.0 } else { 0.0 };
            loss_value * (indicator - p)
        })
        .collect()
}

fn contract(ctx: &DenseRoutingContext, pi: &[f64], upstream: &[f64], jac: &[Vec<f64>]) -> Vec<f64> {
    let weights: Vec<f64> = ctx
        .expert_outputs
        .iter()
        .zip(pi)
        .map(|(f, p)| p * dot(upstream, f))
        .collect();
    (0..pi.len())
        .map(|k| weights.iter().zip(jac).map(|(w, row)| w * row[k]).sum())
        .collect()
}

/// Straight-through: `Σ_i ⟨upstream, π_i f_i⟩ ∂π_i/∂θ`.
pub fn grad_st(
    ctx: Option<&DenseRoutingContext>,
    gates: &GateVector,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let ctx = ctx.ok_or(Error::MissingDenseContext("st"))?;
    let jac = softmax_jacobian(gates.pi(), 1.0);
    Ok(contract(ctx, gates.pi(), upstream, &jac))
}

/// Straight-through Gumbel-softmax: `Σ_i ⟨upstream, π_i f_i⟩ ∂S_τ,i/∂θ` with
/// `S_τ = softmax((θ + G)/τ)` and `G` taken from the context.
pub fn grad_stgs(
    ctx: Option<&DenseRoutingContext>,
    gates: &GateVector,
    theta: &[f64],
    tau: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let ctx = ctx.ok_or(Error::MissingDenseContext("stgs"))?;
    let gumbel = ctx.gumbel.as_deref().ok_or(Error::MissingDenseContext("stgs"))?;
    let relaxed = relaxed_values(theta, gumbel, tau);
    let jac = softmax_jacobian(&relaxed, tau);
    Ok(contract(ctx, gates.pi(), upstream, &jac))
}

/// `S_τ = softmax((θ + G)/τ)`.
pub fn relaxed_values(theta: &[f64], gumbel: &[f64], tau: f64) -> Vec<f64> {
    let shifted: Vec<f64> = theta.iter().zip(gumbel).map(|(t, g)| (t + g) / tau).collect();
    softmax_values(&shifted, None)
}

/// `n` draws of `Gumbel(0, 1)`.
pub fn draw_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `argmax(θ + G)`, which is distributed as `softmax(θ)`.
pub fn gumbel_argmax(theta: &[f64], gumbel: &[f64]) -> usize {
    let perturbed: Vec<f64> = theta.iter().zip(gumbel).map(|(t, g)| t + g).collect();
    argmax(&perturbed)
}

/// Router state for one token on the tape.
#[derive(Clone, Debug)]
pub struct GateRoute<'t> {
    pub theta: Var<'t>,
    pub pi: Var<'t>,
    pub gates: GateVector,
    pub decision: RoutingDecision,
}

impl<'t> GateRoute<'t> {
    fn gate(&self) -> Result<Var<'t>> {
        let gate = self.pi.select(self.decision.expert)?;
        debug_assert_eq!(gate.item(), self.decision.gate);
        Ok(gate)
    }
}

/// `π_D` with its backward contribution multiplied by `factor`.
fn weighted_gate<'t>(gate: Var<'t>, factor: f64) -> Result<Var<'t>> {
    if factor == 0.0 {
        gate.stop_gradient()
    } else if factor == 1.0 {
        Ok(gate)
    } else {
        gate.scale_gradient(factor)
    }
}

/// Switch practice: the router learns only through the gate multiplier.
pub fn route_output_neglect<'t>(
    route: &GateRoute<'t>,
    expert_out: Var<'t>,
    nabla1: Nabla1Path,
) -> Result<Var<'t>> {
    let gate = weighted_gate(route.gate()?, nabla1.factor())?;
    gate.mul(expert_out)
}

/// `y = π_D f_D`; the gate path counts once for the forward-Euler `∇0`
/// estimate and once more for `∇1` under the standard path.
pub fn route_output_sparsemixer1<'t>(
    route: &GateRoute<'t>,
    expert_out: Var<'t>,
    nabla1: Nabla1Path,
) -> Result<Var<'t>> {
    let gate = weighted_gate(route.gate()?, 1.0 + nabla1.factor())?;
    gate.mul(expert_out)
}

/// `y = π_D f_D / 2`; the gate path is doubled for the mid-point `∇0`
/// estimate. Expert parameters see the halved forward unchanged.
pub fn route_output_sparsemixer2<'t>(
    route: &GateRoute<'t>,
    expert_out: Var<'t>,
    nabla1: Nabla1Path,
) -> Result<Var<'t>> {
    let gate = weighted_gate(route.gate()?, 2.0 + nabla1.factor())?;
    gate.mul(expert_out)?.scale(0.5)
}

/// First-order branch when the sampled expert is the argmax, mid-point otherwise.
pub fn route_output_sparsemixer<'t>(
    route: &GateRoute<'t>,
    expert_out: Var<'t>,
    nabla1: Nabla1Path,
) -> Result<Var<'t>> {
    if route.decision.is_argmax {
        route_output_sparsemixer1(route, expert_out, nabla1)
    } else {
        route_output_sparsemixer2(route, expert_out, nabla1)
    }
}

/// Zero-valued term whose gradient is `loss · ∂log π_D/∂θ`. Add it to the
/// objective to apply REINFORCE without changing the reported loss.
pub fn reinforce_surrogate<'t>(route: &GateRoute<'t>, loss: Var<'t>) -> Result<Var<'t>> {
    let log_gate = route.gate()?.log()?;
    let centred = log_gate.sub(log_gate.stop_gradient()?)?;
    loss.stop_gradient()?.mul(centred)
}

/// Straight-through selection vector: value `e_D`, gradient of `relaxed`.
pub fn straight_through_selection<'t>(relaxed: Var<'t>, expert: usize) -> Result<Var<'t>> {
    let n = relaxed.value_ref().numel();
    let mut onehot = vec![0.0; n];
    onehot[expert] = 1.0;
    let onehot = relaxed.tape().constant(Tensor::vector(onehot));
    let zero = relaxed.sub(relaxed.stop_gradient()?)?;
    onehot.add(zero)
}

/// `S_τ = softmax((θ + G)/τ)` on the tape.
pub fn relaxed_weights<'t>(theta: Var<'t>, gumbel: &[f64], tau: f64) -> Result<Var<'t>> {
    let noise = theta.tape().constant(Tensor::vector(gumbel.to_vec()));
    theta.add(noise)?.scale(1.0 / tau)?.softmax()
}

/// `y = h(D) = Σ_i D_i c_i f_i` with a straight-through `D` built from
/// `relaxed` (π for ST, S_τ for STGS). `c_i = π_i` when the gate scales the
/// output (live under the standard `∇1` path, frozen otherwise) and 1 when it
/// does not.
pub fn route_output_dense<'t>(
    route: &GateRoute<'t>,
    expert_outs: &[Var<'t>],
    relaxed: Var<'t>,
    nabla1: Nabla1Path,
    scale_gate: bool,
) -> Result<Var<'t>> {
    let selection = straight_through_selection(relaxed, route.decision.expert)?;
    let weights = if scale_gate {
        let coef = match nabla1 {
            Nabla1Path::Standard => route.pi,
            Nabla1Path::None => route.pi.stop_gradient()?,
        };
        selection.mul(coef)?
    } else {
        selection
    };
    let mut y: Option<Var<'t>> = None;
    for (i, f) in expert_outs.iter().enumerate() {
        let term = weights.select(i)?.mul(*f)?;
        y = Some(match y {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    y.ok_or(Error::MissingDenseContext("st"))
}

/// Expert outputs handed to [`route_output`].
pub enum ExpertOutputs<'t> {
    /// Only the selected expert was evaluated.
    Sparse(Var<'t>),
    /// Every expert was evaluated; `relaxed` is π (ST) or S_τ (STGS).
    Dense { outputs: Vec<Var<'t>>, relaxed: Var<'t> },
}

/// Dispatches to the route function of `cfg.kind`. REINFORCE additionally
/// needs [`reinforce_surrogate`] once the downstream loss is known.
pub fn route_output<'t>(
    cfg: &EstimatorConfig,
    route: &GateRoute<'t>,
    experts: ExpertOutputs<'t>,
) -> Result<Var<'t>> {
    let nabla1 = cfg.nabla1_path;
    match experts {
        ExpertOutputs::Dense { outputs, relaxed } => {
            if !cfg.kind.is_dense() {
                return Err(Error::InvalidEstimator(format!(
                    "{} must not evaluate every expert",
                    cfg.kind
                )));
            }
            route_output_dense(route, &outputs, relaxed, nabla1, cfg.scale_gate)
        }
        ExpertOutputs::Sparse(f) => {
            if cfg.kind.is_dense() {
                return Err(Error::MissingDenseContext(cfg.kind.label()));
            }
            if !cfg.scale_gate {
                return Ok(f);
            }
            match cfg.kind {
                EstimatorKind::Neglect | EstimatorKind::Reinforce => {
                    route_output_neglect(route, f, nabla1)
                }
                EstimatorKind::Sparsemixer1 => route_output_sparsemixer1(route, f, nabla1),
                EstimatorKind::Sparsemixer2 => route_output_sparsemixer2(route, f, nabla1),
                EstimatorKind::Sparsemixer => route_output_sparsemixer(route, f, nabla1),
                EstimatorKind::St | EstimatorKind::Stgs => unreachable!(),
            }
        }
    }
}

/// `ω ⊙ y`, differentiable in both.
pub fn apply_omega<'t>(y: Var<'t>, omega: Var<'t>) -> Result<Var<'t>> {
    let (ys, ws) = (y.shape(), omega.shape());
    if ys != ws {
        return Err(Error::ShapeMismatch {
            op: "apply_omega",
            shapes: vec![ys, ws],
        });
    }
    omega.mul(y)
}
