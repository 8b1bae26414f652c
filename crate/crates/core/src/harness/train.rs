//! Training runs: one MoE layer, a linear readout and a smooth loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, TaskKind};
use super::data::{gen_synthetic, Dataset, SyntheticData};
use super::optim::Optimizer;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{reinforce_surrogate, EstimatorKind};
use crate::moe::{load_balance_loss, load_balance_var, BoundLayer, Mode, MoeLayer, RoutingRecord};

/// Steps excluded from timing at the start of each run.
pub const TIMING_WARMUP: usize = 10;

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

/// Independent generator stream `stream` for `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub seed: u64,
    pub estimator: String,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub lb_loss: f64,
    /// Median wall time of the timed steps since the previous row; empty when
    /// no step in the interval is past warmup.
    pub step_time_ms: Option<f64>,
    pub max_expert_load_fraction: f64,
}

/// `out = W_o·moe(x) + b_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layer: MoeLayer,
    pub w_o: Tensor,
    pub b_o: Vec<f64>,
    pub task: TaskKind,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(cfg: &ExperimentConfig, d_out: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let layer = MoeLayer::init(cfg.num_experts, d, cfg.d_hidden, cfg.estimator.clone(), rng)?;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let w_o = Tensor::matrix(d_out, d, (0..d_out * d).map(|_| normal.sample(rng)).collect())?;
        Ok(Self {
            layer,
            w_o,
            b_o: vec![0.0; d_out],
            task: cfg.task.kind,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.layer.params_mut();
        out.push(self.w_o.data_mut());
        out.push(&mut self.b_o);
        out
    }

    fn bind<'t, 'l>(&'l self, tape: &'t Tape) -> BoundNetwork<'t, 'l> {
        BoundNetwork {
            layer: self.layer.bind(tape),
            w_o: tape.param(self.w_o.clone()),
            b_o: tape.param(Tensor::vector(self.b_o.clone())),
            task: self.task,
        }
    }

    /// Inference-mode mean loss over a dataset, with the routing record.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, RoutingRecord)> {
        let tape = Tape::new();
        let net = self.bind(&tape);
        let mut record = RoutingRecord::new(self.layer.n_experts());
        // Inference consumes no randomness; the generator is a placeholder.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for i in 0..data.len() {
            let (loss, _) = net.token(data, i, Mode::Infer, &mut rng, &mut record)?;
            total += loss.item();
        }
        Ok((total / data.len() as f64, record))
    }
}

struct BoundNetwork<'t, 'l> {
    layer: BoundLayer<'t, 'l>,
    w_o: Var<'t>,
    b_o: Var<'t>,
    task: TaskKind,
}

impl<'t> BoundNetwork<'t, '_> {
    fn token<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        i: usize,
        mode: Mode,
        rng: &mut R,
        record: &mut RoutingRecord,
    ) -> Result<(Var<'t>, crate::moe::TokenOutput<'t>)> {
        let tape = self.w_o.tape();
        let x = tape.constant(Tensor::vector(data.inputs.row(i).to_vec()));
        let target = data.targets.row(i);
        let out = self.layer.forward(x, mode, rng, record)?;
        let pred = self.w_o.matmul(out.y)?.add(self.b_o)?;
        let loss = match self.task {
            TaskKind::Regression => {
                let t = tape.constant(Tensor::vector(target.to_vec()));
                pred.sub(t)?.square()?.mean()?
            }
            TaskKind::Classification => {
                let class = crate::routing::argmax(target);
                pred.softmax()?.select(class)?.log()?.scale(-1.0)?
            }
        };
        Ok((loss, out))
    }
}

/// Result of one replica.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Wall time of every training step, in milliseconds.
    pub step_times_ms: Vec<f64>,
    /// Expert evaluations during training steps.
    pub expert_calls: usize,
    /// Tokens routed during training steps.
    pub tokens: usize,
    pub diverged: bool,
    pub final_network: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// All replicas' rows sorted by (estimator, seed, step).
    pub rows: Vec<MetricsRow>,
    pub replicas: Vec<ReplicaOutcome>,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.replicas.iter().any(|r| r.diverged)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    crate::oracle::median(&mut v)
}

/// One training step on a batch. Returns the total objective value.
fn train_step(
    net: &mut Network,
    data: &Dataset,
    batch: &[usize],
    coef: f64,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
    calls: &mut usize,
) -> Result<f64> {
    let grads;
    let value;
    {
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let mut record = RoutingRecord::new(net.layer.n_experts());
        let reinforce = net.layer.config.kind == EstimatorKind::Reinforce;
        let mut objective: Option<Var> = None;
        let mut pis = Vec::with_capacity(batch.len());
        for &i in batch {
            let (loss, out) = bound.token(data, i, Mode::Train, rng, &mut record)?;
            let term = if reinforce {
                loss.add(reinforce_surrogate(&out.route, loss)?)?
            } else {
                loss
            };
            pis.push(out.route.pi);
            objective = Some(match objective {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        let task = objective.ok_or(Error::EmptyBatch)?.scale(1.0 / batch.len() as f64)?;
        let total = if coef > 0.0 {
            task.add(load_balance_var(&record, &pis)?.scale(coef)?)?
        } else {
            task
        };
        value = total.item();
        *calls += record.expert_calls;
        let g = tape.backward(total)?;
        let mut all = bound.layer.gradients(&g);
        all.push(g.wrt(bound.w_o));
        all.push(g.wrt(bound.b_o));
        grads = all;
    }
    if value.is_finite() {
        opt.step(net.params_mut(), &grads);
    }
    Ok(value)
}

/// One replica's training state, advanced a step at a time.
pub struct Replica {
    cfg: ExperimentConfig,
    seed: u64,
    train: Dataset,
    eval: Dataset,
    net: Network,
    rng: ChaCha8Rng,
    opt: Optimizer,
    label: String,
    step: usize,
    rows: Vec<MetricsRow>,
    step_times: Vec<f64>,
    interval_start: usize,
    calls: usize,
    tokens: usize,
    diverged: bool,
    done: bool,
}

impl Replica {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let SyntheticData { train, eval, d_out } =
            gen_synthetic(&cfg.task, cfg.d_model, &mut stream_rng(seed, DATA_STREAM))?;
        let net = Network::init(cfg, d_out, &mut stream_rng(seed, INIT_STREAM))?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            train,
            eval,
            net,
            rng: stream_rng(seed, SAMPLE_STREAM),
            opt: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            label: cfg.estimator.kind.label().to_string(),
            step: 0,
            rows: Vec::new(),
            step_times: Vec::with_capacity(cfg.steps),
            interval_start: 0,
            calls: 0,
            tokens: 0,
            diverged: false,
            done: false,
        })
    }

    /// Logs a row if one is due, then runs one training step. Returns false
    /// once the step budget is spent or the run has diverged.
    pub fn advance(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        let cfg = &self.cfg;
        let step = self.step;
        if step.is_multiple_of(cfg.log_every) || step == cfg.steps {
            let (train_loss, record) = self.net.evaluate(&self.train)?;
            let (eval_loss, _) = self.net.evaluate(&self.eval)?;
            let from = self.interval_start.max(TIMING_WARMUP).min(self.step_times.len());
            self.interval_start = self.step_times.len();
            self.rows.push(MetricsRow {
                step,
                seed: self.seed,
                estimator: self.label.clone(),
                train_loss,
                eval_loss,
                lb_loss: load_balance_loss(&record, cfg.num_experts)?,
                step_time_ms: median(&self.step_times[from..]),
                max_expert_load_fraction: record.max_load_fraction(),
            });
            if !train_loss.is_finite() {
                self.diverged = true;
                self.done = true;
                return Ok(false);
            }
        }
        if step == cfg.steps {
            self.done = true;
            return Ok(false);
        }
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| self.rng.gen_range(0..self.train.len())).collect();
        let start = Instant::now();
        let value = train_step(
            &mut self.net,
            &self.train,
            &batch,
            cfg.load_balance_coef,
            &mut self.opt,
            &mut self.rng,
            &mut self.calls,
        )?;
        self.step_times.push(start.elapsed().as_secs_f64() * 1e3);
        self.tokens += batch.len();
        self.step += 1;
        if !value.is_finite() {
            // The non-finite training loss is the divergence flag.
            self.rows.push(MetricsRow {
                step: self.step,
                seed: self.seed,
                estimator: self.label.clone(),
                train_loss: f64::NAN,
                eval_loss: f64::NAN,
                lb_loss: f64::NAN,
                step_time_ms: None,
                max_expert_load_fraction: f64::NAN,
            });
            self.diverged = true;
            self.done = true;
            return Ok(false);
        }
        Ok(true)
    }

    pub fn finish(self) -> ReplicaOutcome {
        ReplicaOutcome {
            seed: self.seed,
            rows: self.rows,
            step_times_ms: self.step_times,
            expert_calls: self.calls,
            tokens: self.tokens,
            diverged: self.diverged,
            final_network: self.net,
        }
    }
}

/// Trains one replica with seed `seed`.
pub fn run_replica(cfg: &ExperimentConfig, seed: u64) -> Result<ReplicaOutcome> {
    let mut replica = Replica::new(cfg, seed)?;
    while replica.advance()? {}
    Ok(replica.finish())
}

/// Trains `cfg.replicas` replicas with seeds `seed + i`, in parallel.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let replicas = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| run_replica(cfg, cfg.seed + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(replicas))
}

/// Same as [`run_train`] but one replica at a time, for timing.
pub fn run_train_sequential(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let replicas = (0..cfg.replicas as u64)
        .map(|i| run_replica(cfg, cfg.seed + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(replicas))
}

fn assemble(replicas: Vec<ReplicaOutcome>) -> TrainReport {
    let mut rows: Vec<MetricsRow> = replicas.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    rows.sort_by(|a, b| (&a.estimator, a.seed, a.step).cmp(&(&b.estimator, b.seed, b.step)));
    TrainReport { rows, replicas }
}
