//! Top-1 mixture-of-experts layer.
//!
//! A layer owns its parameters as plain tensors. For a forward pass they are
//! bound to a [`Tape`] as leaves ([`MoeLayer::bind`]); gradients come back
//! keyed by the same leaves and are applied by the caller's optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{
    apply_omega, draw_gumbel, gumbel_argmax, relaxed_weights, route_output, EstimatorConfig,
    EstimatorKind, ExpertOutputs, GateRoute,
};
use crate::routing::{
    argmax_expert, jitter_argmax, masked_gates_var, router_logits, routing_mask, sample_expert,
    Logits, RoutingDecision, SelectionMode,
};

/// Expert `f(x) = V·act(U·x)` with `U: h×d`, `V: d×h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub u: Tensor,
    pub v: Tensor,
}

impl ExpertParams {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        let ok = u.shape().len() == 2
            && v.shape().len() == 2
            && u.rows() == v.cols()
            && u.cols() == v.rows();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "expert",
                shapes: vec![u.shape().to_vec(), v.shape().to_vec()],
            });
        }
        Ok(Self { u, v })
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    /// Smooth; required for the order-of-accuracy studies.
    #[default]
    Tanh,
    /// Kinked; only for qualitative training runs.
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OmegaMode {
    /// One scale per output dimension (length d).
    #[default]
    PerDim,
    /// One scale per expert (length N).
    PerExpert,
}

/// How training-mode forwards pick the expert for non-STGS kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampler {
    /// `D ~ π` (masked when the config says so).
    #[default]
    Gates,
    /// Switch-style `argmax(θ ⊙ u)`, `u ~ U(1−r, 1+r)`. Meant for `neglect`.
    Jitter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// `f(x) = V·tanh(U·x)`.
pub fn expert_forward(params: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let u = tape.constant(params.u.clone());
    let v = tape.constant(params.v.clone());
    let x = tape.constant(Tensor::vector(x.to_vec()));
    Ok(expert_var(u, v, x, Activation::Tanh)?.value().into_data())
}

fn expert_var<'t>(u: Var<'t>, v: Var<'t>, x: Var<'t>, act: Activation) -> Result<Var<'t>> {
    let pre = u.matmul(x)?;
    let hidden = match act {
        Activation::Tanh => pre.tanh()?,
        Activation::Relu => pre.relu()?,
    };
    v.matmul(hidden)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// Router weights, `N×d`.
    pub w_r: Tensor,
    pub experts: Vec<ExpertParams>,
    pub omega: Vec<f64>,
    pub config: EstimatorConfig,
    pub omega_mode: OmegaMode,
    pub activation: Activation,
    pub sampler: Sampler,
}

impl MoeLayer {
    /// Gaussian initialization: router and `U` with std `1/√d`, `V` with
    /// std `1/√h`; ω starts at ones.
    pub fn init<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        hidden: usize,
        config: EstimatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let w_r = draw(n, d, 1.0 / (d as f64).sqrt())?;
        let experts = (0..n)
            .map(|_| {
                let u = draw(hidden, d, 1.0 / (d as f64).sqrt())?;
                let v = draw(d, hidden, 1.0 / (hidden as f64).sqrt())?;
                ExpertParams::new(u, v)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(w_r, experts, config)
    }

    pub fn new(w_r: Tensor, experts: Vec<ExpertParams>, config: EstimatorConfig) -> Result<Self> {
        let d = w_r.shape().get(1).copied().unwrap_or(0);
        let layer = Self {
            omega: vec![1.0; d],
            w_r,
            experts,
            config,
            omega_mode: OmegaMode::PerDim,
            activation: Activation::Tanh,
            sampler: Sampler::Gates,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_omega_mode(mut self, mode: OmegaMode) -> Self {
        self.omega_mode = mode;
        self.omega = vec![1.0; self.omega_len()];
        self
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.w_r.cols()
    }

    fn omega_len(&self) -> usize {
        match self.omega_mode {
            OmegaMode::PerDim => self.dim(),
            OmegaMode::PerExpert => self.n_experts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.experts.len();
        if n < 2 || self.w_r.shape().len() != 2 || self.w_r.rows() != n {
            return Err(Error::InvalidEstimator(format!(
                "need N ≥ 2 experts matching the router rows, got {n} experts and router {:?}",
                self.w_r.shape()
            )));
        }
        let d = self.dim();
        let h = self.experts[0].hidden();
        for e in &self.experts {
            if e.dim() != d || e.hidden() != h {
                return Err(Error::ShapeMismatch {
                    op: "moe layer",
                    shapes: vec![e.u.shape().to_vec(), vec![h, d]],
                });
            }
        }
        if self.omega.len() != self.omega_len() {
            return Err(Error::ShapeMismatch {
                op: "omega",
                shapes: vec![vec![self.omega.len()], vec![self.omega_len()]],
            });
        }
        let finite = self.w_r.is_finite()
            && self.experts.iter().all(|e| e.u.is_finite() && e.v.is_finite())
            && self.omega.iter().all(|w| w.is_finite());
        if !finite {
            return Err(Error::Divergence("non-finite layer parameter".into()));
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind<'t, 'l>(&'l self, tape: &'t Tape) -> BoundLayer<'t, 'l> {
        BoundLayer {
            layer: self,
            w_r: tape.param(self.w_r.clone()),
            experts: self
                .experts
                .iter()
                .map(|e| (tape.param(e.u.clone()), tape.param(e.v.clone())))
                .collect(),
            omega: tape.param(Tensor::vector(self.omega.clone())),
        }
    }

    /// Parameters in a fixed order: router, then `U_i, V_i` per expert, then
    /// ω. Matches [`BoundLayer::gradients`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_r.data_mut()];
        for e in &mut self.experts {
            out.push(e.u.data_mut());
            out.push(e.v.data_mut());
        }
        out.push(&mut self.omega);
        out
    }
}

/// Per-batch routing statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingRecord {
    pub decisions: Vec<RoutingDecision>,
    /// Tokens routed to each expert.
    pub loads: Vec<usize>,
    /// Summed gate probability per expert.
    pub gate_mass: Vec<f64>,
    /// Number of expert evaluations performed.
    pub expert_calls: usize,
}

impl RoutingRecord {
    pub fn new(n: usize) -> Self {
        Self {
            decisions: Vec::new(),
            loads: vec![0; n],
            gate_mass: vec![0.0; n],
            expert_calls: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.decisions.len()
    }

    fn push(&mut self, decision: RoutingDecision, pi: &[f64]) {
        self.loads[decision.expert] += 1;
        for (m, p) in self.gate_mass.iter_mut().zip(pi) {
            *m += p;
        }
        self.decisions.push(decision);
    }

    pub fn load_fractions(&self) -> Vec<f64> {
        let t = self.tokens().max(1) as f64;
        self.loads.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn mean_gates(&self) -> Vec<f64> {
        let t = self.tokens().max(1) as f64;
        self.gate_mass.iter().map(|m| m / t).collect()
    }

    pub fn max_load_fraction(&self) -> f64 {
        self.load_fractions().into_iter().fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: &RoutingRecord) {
        self.decisions.extend(other.decisions.iter().cloned());
        for (a, b) in self.loads.iter_mut().zip(&other.loads) {
            *a += b;
        }
        for (a, b) in self.gate_mass.iter_mut().zip(&other.gate_mass) {
            *a += b;
        }
        self.expert_calls += other.expert_calls;
    }
}

/// `N · Σ_i frac_i · meanGate_i`.
pub fn load_balance_loss(record: &RoutingRecord, n: usize) -> Result<f64> {
    if record.tokens() == 0 {
        return Err(Error::EmptyBatch);
    }
    let frac = record.load_fractions();
    let gates = record.mean_gates();
    Ok(n as f64 * frac.iter().zip(&gates).map(|(f, g)| f * g).sum::<f64>())
}

/// Differentiable load-balance loss: the token fractions are constants and
/// the gradient flows through the per-token gate vectors `pis`.
pub fn load_balance_var<'t>(record: &RoutingRecord, pis: &[Var<'t>]) -> Result<Var<'t>> {
    let first = pis.first().ok_or(Error::EmptyBatch)?;
    if record.tokens() != pis.len() {
        return Err(Error::ShapeMismatch {
            op: "load_balance",
            shapes: vec![vec![record.tokens()], vec![pis.len()]],
        });
    }
    let n = record.loads.len() as f64;
    let t = pis.len() as f64;
    let coef: Vec<f64> = record.load_fractions().iter().map(|f| n * f / t).collect();
    let coef = first.tape().constant(Tensor::vector(coef));
    let mut total = first.dot(coef)?;
    for pi in &pis[1..] {
        total = total.add(pi.dot(coef)?)?;
    }
    Ok(total)
}

/// Output of one token's forward on the tape.
#[derive(Clone, Debug)]
pub struct TokenOutput<'t> {
    pub y: Var<'t>,
    pub route: GateRoute<'t>,
}

/// A layer whose parameters live on a tape.
pub struct BoundLayer<'t, 'l> {
    pub layer: &'l MoeLayer,
    pub w_r: Var<'t>,
    pub experts: Vec<(Var<'t>, Var<'t>)>,
    pub omega: Var<'t>,
}

impl<'t> BoundLayer<'t, '_> {
    fn expert(&self, i: usize, x: Var<'t>, record: &mut RoutingRecord) -> Result<Var<'t>> {
        record.expert_calls += 1;
        let (u, v) = self.experts[i];
        expert_var(u, v, x, self.layer.activation)
    }

    /// Routes one token and records the decision.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: Var<'t>,
        mode: Mode,
        rng: &mut R,
        record: &mut RoutingRecord,
    ) -> Result<TokenOutput<'t>> {
        let layer = self.layer;
        let cfg = &layer.config;
        let theta = router_logits(self.w_r, x)?;
        let logits = Logits::new(theta.value().into_data())?;
        let n = logits.len();
        let mask = if cfg.use_mask {
            routing_mask(&logits, cfg.r)
        } else {
            vec![true; n]
        };
        let (pi, gates) = masked_gates_var(theta, &mask)?;

        let mut gumbel = None;
        let decision = match mode {
            Mode::Infer => argmax_expert(&gates),
            Mode::Train if cfg.kind == EstimatorKind::Stgs => {
                let g = draw_gumbel(n, rng);
                let expert = gumbel_argmax(logits.as_slice(), &g);
                gumbel = Some(g);
                decision_for(&gates, expert)
            }
            Mode::Train => match layer.sampler {
                Sampler::Gates => sample_expert(&gates, rng),
                Sampler::Jitter => decision_for(&gates, jitter_argmax(&logits, cfg.r, rng)),
            },
        };
        record.push(decision, gates.pi());

        let route = GateRoute {
            theta,
            pi,
            gates,
            decision,
        };
        let dense = mode == Mode::Train && cfg.kind.is_dense();
        let y = if dense {
            let outputs = (0..n)
                .map(|i| self.expert(i, x, record))
                .collect::<Result<Vec<_>>>()?;
            let relaxed = match &gumbel {
                Some(g) => relaxed_weights(theta, g, cfg.tau)?,
                None => pi,
            };
            route_output(cfg, &route, ExpertOutputs::Dense { outputs, relaxed })?
        } else {
            let f = self.expert(route.decision.expert, x, record)?;
            if mode == Mode::Infer {
                // Estimators only shape gradients; inference is the plain gated forward.
                let sparse = EstimatorConfig {
                    kind: EstimatorKind::Neglect,
                    ..cfg.clone()
                };
                route_output(&sparse, &route, ExpertOutputs::Sparse(f))?
            } else {
                route_output(cfg, &route, ExpertOutputs::Sparse(f))?
            }
        };
        let y = if cfg.use_omega {
            match layer.omega_mode {
                OmegaMode::PerDim => apply_omega(y, self.omega)?,
                OmegaMode::PerExpert => self.omega.select(route.decision.expert)?.mul(y)?,
            }
        } else {
            y
        };
        Ok(TokenOutput { y, route })
    }

    /// Gradients in the order of [`MoeLayer::params_mut`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out = vec![grads.wrt(self.w_r)];
        for (u, v) in &self.experts {
            out.push(grads.wrt(*u));
            out.push(grads.wrt(*v));
        }
        out.push(grads.wrt(self.omega));
        out
    }
}

fn decision_for(gates: &crate::routing::GateVector, expert: usize) -> RoutingDecision {
    RoutingDecision {
        expert,
        gate: gates.pi()[expert],
        is_argmax: expert == gates.argmax(),
        mode: SelectionMode::Sampled,
    }
}

/// Single-token forward on a private tape.
pub fn moe_forward<R: Rng + ?Sized>(
    layer: &MoeLayer,
    x: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, RoutingRecord)> {
    let tape = Tape::new();
    let bound = layer.bind(&tape);
    let x = tape.constant(Tensor::vector(x.to_vec()));
    let mut record = RoutingRecord::new(layer.n_experts());
    let out = bound.forward(x, mode, rng, &mut record)?;
    Ok((out.y.value().into_data(), record))
}

/// Moves ω into the experts' output matrices and resets it to ones.
pub fn fold_omega(layer: &MoeLayer) -> MoeLayer {
    let mut folded = layer.clone();
    if !layer.config.use_omega {
        return folded;
    }
    let h = layer.experts[0].hidden();
    for (i, e) in folded.experts.iter_mut().enumerate() {
        let data = e.v.data_mut();
        for (row, chunk) in data.chunks_mut(h).enumerate() {
            let w = match layer.omega_mode {
                OmegaMode::PerDim => layer.omega[row],
                OmegaMode::PerExpert => layer.omega[i],
            };
            for v in chunk {
                *v *= w;
            }
        }
    }
    folded.omega.iter_mut().for_each(|w| *w = 1.0);
    folded
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_x(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn layer(kind: EstimatorKind, n: usize, seed: u64) -> MoeLayer {
        MoeLayer::init(n, 3, 5, EstimatorConfig::new(kind), &mut rng(seed)).unwrap()
    }

    #[test]
    fn expert_forward_examples() {
        let zero = ExpertParams::new(Tensor::zeros(&[4, 3]), Tensor::filled(&[3, 4], 1.0)).unwrap();
        assert_eq!(expert_forward(&zero, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 3]);

        let mut v = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            v.data_mut()[i * 4 + i] = 1.0;
        }
        let u = Tensor::matrix(4, 3, (0..12).map(|k| 1e-3 * (k as f64 - 5.0)).collect()).unwrap();
        let p = ExpertParams::new(u.clone(), v.clone()).unwrap();
        let x = [0.5, -0.8, 0.9];
        let out = expert_forward(&p, &x).unwrap();
        for i in 0..3 {
            let ux: f64 = (0..3).map(|j| u.at(i, j) * x[j]).sum();
            assert_abs_diff_eq!(out[i], ux, epsilon = 1e-4);
        }
        assert!(ExpertParams::new(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 3])).is_err());
        assert!(expert_forward(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn expert_gradient_matches_finite_differences() {
        let layer = layer(EstimatorKind::Neglect, 2, 4);
        let p = &layer.experts[0];
        let x = [0.4, -0.2, 0.7];
        let tape = Tape::new();
        let u = tape.param(p.u.clone());
        let v = tape.param(p.v.clone());
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let loss = expert_var(u, v, xv, Activation::Tanh).unwrap().square().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let gu = grads.wrt(u);
        let eval = |u: &Tensor| -> f64 {
            let e = ExpertParams::new(u.clone(), p.v.clone()).unwrap();
            expert_forward(&e, &x).unwrap().iter().map(|y| y * y).sum()
        };
        let h = 1e-5;
        for k in 0..p.u.numel() {
            let mut plus = p.u.clone();
            plus.data_mut()[k] += h;
            let mut minus = p.u.clone();
            minus.data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = gu.data()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn infer_mode_is_deterministic_argmax_and_never_halved() {
        for kind in EstimatorKind::ALL {
            let layer = layer(kind, 4, 9);
            let mut r = rng(1);
            let x = random_x(3, &mut r);
            let mut a = rng(100);
            let (y1, rec) = moe_forward(&layer, &x, Mode::Infer, &mut a).unwrap();
            // No RNG consumed.
            assert_eq!(a.gen::<u64>(), rng(100).gen::<u64>());
            let (y2, _) = moe_forward(&layer, &x, Mode::Infer, &mut rng(5)).unwrap();
            assert_eq!(y1, y2);
            let d = &rec.decisions[0];
            assert!(d.is_argmax);
            let f = expert_forward(&layer.experts[d.expert], &x).unwrap();
            for (y, f) in y1.iter().zip(&f) {
                assert_abs_diff_eq!(*y, d.gate * f, epsilon = 1e-14);
            }
            assert_eq!(rec.expert_calls, 1);
        }
    }

    #[test]
    fn scale_gate_off_returns_raw_expert() {
        let mut l = layer(EstimatorKind::Neglect, 3, 2);
        l.config.scale_gate = false;
        let x = [0.2, 0.1, -0.5];
        let (y, rec) = moe_forward(&l, &x, Mode::Train, &mut rng(3)).unwrap();
        assert_eq!(y, expert_forward(&l.experts[rec.decisions[0].expert], &x).unwrap());
    }

    #[test]
    fn saturated_router_picks_expert_zero() {
        let mut l = layer(EstimatorKind::Sparsemixer, 2, 7);
        // θ = W_r x = [10, −10] for x = e_0.
        l.w_r = Tensor::matrix(2, 3, vec![10.0, 0.0, 0.0, -10.0, 0.0, 0.0]).unwrap();
        let x = [1.0, 0.0, 0.0];
        let (y, rec) = moe_forward(&l, &x, Mode::Train, &mut rng(0)).unwrap();
        assert_eq!(rec.decisions[0].expert, 0);
        let f = expert_forward(&l.experts[0], &x).unwrap();
        for (a, b) in y.iter().zip(&f) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
    }

    #[test]
    fn expert_call_counts() {
        for kind in EstimatorKind::ALL {
            let l = layer(kind, 4, 1);
            let tape = Tape::new();
            let bound = l.bind(&tape);
            let mut record = RoutingRecord::new(4);
            let mut r = rng(8);
            for _ in 0..25 {
                let x = tape.constant(Tensor::vector(random_x(3, &mut r)));
                bound.forward(x, Mode::Train, &mut r, &mut record).unwrap();
            }
            let per_token = if kind.is_dense() { 4 } else { 1 };
            assert_eq!(record.expert_calls, 25 * per_token, "{kind}");
            assert_eq!(record.loads.iter().sum::<usize>(), 25);
        }
    }

    #[test]
    fn load_balance_examples() {
        let mut rec = RoutingRecord::new(4);
        for i in 0..8 {
            rec.push(decision_like(i % 4), &[0.25; 4]);
        }
        assert_abs_diff_eq!(load_balance_loss(&rec, 4).unwrap(), 1.0, epsilon = 1e-15);
        let mut rec = RoutingRecord::new(4);
        for _ in 0..5 {
            rec.push(decision_like(2), &[0.0, 0.0, 1.0, 0.0]);
        }
        assert_abs_diff_eq!(load_balance_loss(&rec, 4).unwrap(), 4.0, epsilon = 1e-15);
        assert!(matches!(load_balance_loss(&RoutingRecord::new(4), 4), Err(Error::EmptyBatch)));
    }

    fn decision_like(expert: usize) -> RoutingDecision {
        RoutingDecision {
            expert,
            gate: 0.25,
            is_argmax: true,
            mode: SelectionMode::Sampled,
        }
    }

    #[test]
    fn load_balance_var_matches_numeric_value() {
        let l = layer(EstimatorKind::Sparsemixer, 4, 12);
        let tape = Tape::new();
        let bound = l.bind(&tape);
        let mut record = RoutingRecord::new(4);
        let mut r = rng(2);
        let mut pis = Vec::new();
        for _ in 0..16 {
            let x = tape.constant(Tensor::vector(random_x(3, &mut r)));
            pis.push(bound.forward(x, Mode::Train, &mut r, &mut record).unwrap().route.pi);
        }
        let v = load_balance_var(&record, &pis).unwrap();
        assert_abs_diff_eq!(v.item(), load_balance_loss(&record, 4).unwrap(), epsilon = 1e-12);
        let grads = tape.backward(v).unwrap();
        assert!(grads.wrt(bound.w_r).data().iter().any(|g| *g != 0.0));
        assert!(grads.wrt(bound.experts[0].0).data().iter().all(|g| *g == 0.0));
    }

    fn assert_fold_preserves(l: &MoeLayer) {
        let folded = fold_omega(l);
        assert!(folded.omega.iter().all(|w| *w == 1.0));
        let mut r = rng(77);
        for _ in 0..100 {
            let x = random_x(3, &mut r);
            for mode in [Mode::Train, Mode::Infer] {
                let seed: u64 = r.gen();
                let (a, ra) = moe_forward(l, &x, mode, &mut rng(seed)).unwrap();
                let (b, rb) = moe_forward(&folded, &x, mode, &mut rng(seed)).unwrap();
                assert_eq!(ra.decisions, rb.decisions);
                for (a, b) in a.iter().zip(&b) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
        assert_eq!(fold_omega(&folded), folded);
    }

    #[test]
    fn omega_folding() {
        let l = layer(EstimatorKind::Sparsemixer, 4, 3);
        assert_eq!(fold_omega(&l), l);

        let mut doubled = l.clone();
        doubled.omega = vec![2.0; 3];
        let folded = fold_omega(&doubled);
        for (a, b) in folded.experts.iter().zip(&l.experts) {
            for (x, y) in a.v.data().iter().zip(b.v.data()) {
                assert_eq!(*x, 2.0 * y);
            }
        }
        assert_fold_preserves(&doubled);

        let mut r = rng(31);
        let mut random = l.clone();
        random.omega = (0..3).map(|_| r.gen_range(0.2..3.0)).collect();
        assert_fold_preserves(&random);

        let mut per_expert = l.clone().with_omega_mode(OmegaMode::PerExpert);
        per_expert.omega = (0..4).map(|_| r.gen_range(0.2..3.0)).collect();
        assert_fold_preserves(&per_expert);
    }

    #[test]
    fn layer_validation() {
        let l = layer(EstimatorKind::Neglect, 2, 0);
        let mut bad = l.clone();
        bad.experts.pop();
        assert!(bad.validate().is_err());
        let mut bad = l.clone();
        bad.omega.push(1.0);
        assert!(bad.validate().is_err());
        let mut bad = l;
        bad.config.kind = EstimatorKind::St;
        assert!(bad.validate().is_err());
    }
}
