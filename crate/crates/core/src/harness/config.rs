//! Experiment configuration: strict JSON with defaults.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind, Nabla1Path, DEFAULT_TAU};
use crate::oracle::MAX_EXPERTS;

/// Expert counts used in the reference sweep; others are accepted with a note.
pub const SWEEP_EXPERTS: [usize; 5] = [2, 4, 6, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f64,
    /// Number of input regions with distinct target maps.
    pub regions: usize,
    pub n_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamKind {
    Readout,
    Quadratic,
    Cubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Random,
    Reference,
}

/// Settings for the oracle studies (`biasvar`, `order`).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub instance: InstanceKind,
    pub instances: usize,
    pub epsilons: Vec<f64>,
    pub mc_samples: usize,
    pub downstream: DownstreamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_experts: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub estimator: EstimatorConfig,
    pub jitter_r: f64,
    pub load_balance_coef: f64,
    pub task: TaskConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub learning_rate: f64,
    pub replicas: usize,
    pub log_every: usize,
    pub oracle: OracleConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(default = "defaults::num_experts")]
    num_experts: usize,
    #[serde(default = "defaults::d_model")]
    d_model: usize,
    #[serde(default = "defaults::d_hidden")]
    d_hidden: usize,
    estimator: Option<RawEstimator>,
    #[serde(default = "defaults::jitter_r")]
    jitter_r: f64,
    #[serde(default = "defaults::load_balance_coef")]
    load_balance_coef: f64,
    #[serde(default)]
    task: RawTask,
    #[serde(default = "defaults::steps")]
    steps: usize,
    #[serde(default = "defaults::batch_size")]
    batch_size: usize,
    #[serde(default)]
    optimizer: RawOptimizer,
    #[serde(default = "defaults::learning_rate")]
    learning_rate: f64,
    #[serde(default = "defaults::replicas")]
    replicas: usize,
    #[serde(default = "defaults::log_every")]
    log_every: usize,
    #[serde(default)]
    oracle: RawOracle,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    kind: EstimatorKind,
    use_mask: Option<bool>,
    use_omega: Option<bool>,
    scale_gate: Option<bool>,
    nabla1_path: Option<Nabla1Path>,
    tau: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    #[serde(default = "defaults::task_kind")]
    kind: TaskKind,
    #[serde(default = "defaults::n_train")]
    n_train: usize,
    #[serde(default = "defaults::n_eval")]
    n_eval: usize,
    #[serde(default = "defaults::noise_std")]
    noise_std: f64,
    regions: Option<usize>,
    #[serde(default = "defaults::n_classes")]
    n_classes: usize,
}

impl Default for RawTask {
    fn default() -> Self {
        Self {
            kind: defaults::task_kind(),
            n_train: defaults::n_train(),
            n_eval: defaults::n_eval(),
            noise_std: defaults::noise_std(),
            regions: None,
            n_classes: defaults::n_classes(),
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawOptimizer {
    Sgd,
    Adam {
        #[serde(default = "defaults::beta1")]
        beta1: f64,
        #[serde(default = "defaults::beta2")]
        beta2: f64,
        #[serde(default = "defaults::adam_eps")]
        eps: f64,
    },
}

impl Default for RawOptimizer {
    fn default() -> Self {
        RawOptimizer::Adam {
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::adam_eps(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOracle {
    #[serde(default = "defaults::instance")]
    instance: InstanceKind,
    #[serde(default = "defaults::instances")]
    instances: usize,
    #[serde(default = "defaults::epsilons")]
    epsilons: Vec<f64>,
    #[serde(default = "defaults::mc_samples")]
    mc_samples: usize,
    #[serde(default = "defaults::downstream")]
    downstream: DownstreamKind,
}

impl Default for RawOracle {
    fn default() -> Self {
        Self {
            instance: defaults::instance(),
            instances: defaults::instances(),
            epsilons: defaults::epsilons(),
            mc_samples: defaults::mc_samples(),
            downstream: defaults::downstream(),
        }
    }
}

mod defaults {
    use super::{DownstreamKind, InstanceKind, TaskKind};

    pub fn num_experts() -> usize {
        4
    }
    pub fn d_model() -> usize {
        8
    }
    pub fn d_hidden() -> usize {
        16
    }
    pub fn jitter_r() -> f64 {
        crate::routing::DEFAULT_JITTER
    }
    pub fn load_balance_coef() -> f64 {
        0.01
    }
    pub fn steps() -> usize {
        300
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-2
    }
    pub fn replicas() -> usize {
        1
    }
    pub fn log_every() -> usize {
        10
    }
    pub fn task_kind() -> TaskKind {
        TaskKind::Regression
    }
    pub fn n_train() -> usize {
        1024
    }
    pub fn n_eval() -> usize {
        256
    }
    pub fn noise_std() -> f64 {
        0.01
    }
    pub fn n_classes() -> usize {
        4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.98
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn instance() -> InstanceKind {
        InstanceKind::Random
    }
    pub fn instances() -> usize {
        20
    }
    pub fn epsilons() -> Vec<f64> {
        vec![0.1, 0.05, 0.025]
    }
    pub fn mc_samples() -> usize {
        10_000
    }
    pub fn downstream() -> DownstreamKind {
        DownstreamKind::Readout
    }
}

/// A parsed configuration plus non-fatal remarks about it.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
}

pub fn parse_config(path: &Path) -> Result<Parsed> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<Parsed> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
    })?;
    build(raw)
}

fn positive(path: &str, value: usize) -> Result<usize> {
    if value == 0 {
        return Err(Error::config(path, "must be at least 1"));
    }
    Ok(value)
}

fn build(raw: RawConfig) -> Result<Parsed> {
    let mut notes = Vec::new();
    let seed = raw
        .seed
        .ok_or_else(|| Error::config("seed", "required for reproducibility"))?;
    let est = raw
        .estimator
        .ok_or_else(|| Error::config("estimator", "required (at least `kind`)"))?;

    if raw.num_experts < 2 {
        return Err(Error::config("num_experts", "need at least 2 experts"));
    }
    if !SWEEP_EXPERTS.contains(&raw.num_experts) {
        notes.push(format!(
            "num_experts = {} is outside the usual sweep {:?}",
            raw.num_experts, SWEEP_EXPERTS
        ));
    }
    positive("d_model", raw.d_model)?;
    positive("d_hidden", raw.d_hidden)?;
    if !(0.0..1.0).contains(&raw.jitter_r) {
        return Err(Error::config("jitter_r", "must lie in [0, 1)"));
    }
    if !(raw.load_balance_coef.is_finite() && raw.load_balance_coef >= 0.0) {
        return Err(Error::config("load_balance_coef", "must be finite and ≥ 0"));
    }

    let mut estimator = EstimatorConfig::new(est.kind);
    estimator.r = raw.jitter_r;
    if let Some(v) = est.use_mask {
        estimator.use_mask = v;
    }
    if let Some(v) = est.use_omega {
        estimator.use_omega = v;
    }
    if let Some(v) = est.scale_gate {
        estimator.scale_gate = v;
    }
    if let Some(v) = est.nabla1_path {
        estimator.nabla1_path = v;
    }
    estimator.tau = est.tau.unwrap_or(DEFAULT_TAU);
    if estimator.kind.is_dense() && estimator.use_mask {
        return Err(Error::config(
            "estimator.use_mask",
            format!("{} cannot run with masked routing", estimator.kind),
        ));
    }
    if estimator.kind.is_sparsemixer() && !estimator.scale_gate {
        return Err(Error::config(
            "estimator.scale_gate",
            format!("{} needs the gate-scaled output", estimator.kind),
        ));
    }
    if !(estimator.tau.is_finite() && estimator.tau > 0.0) {
        return Err(Error::config("estimator.tau", "must be > 0"));
    }
    estimator
        .validate()
        .map_err(|e| Error::config("estimator", e.to_string()))?;

    let t = raw.task;
    positive("task.n_train", t.n_train)?;
    positive("task.n_eval", t.n_eval)?;
    if !(t.noise_std.is_finite() && t.noise_std >= 0.0) {
        return Err(Error::config("task.noise_std", "must be finite and ≥ 0"));
    }
    let regions = positive("task.regions", t.regions.unwrap_or(raw.num_experts))?;
    if t.kind == TaskKind::Classification && t.n_classes < 2 {
        return Err(Error::config("task.n_classes", "need at least 2 classes"));
    }

    let optimizer = match raw.optimizer {
        RawOptimizer::Sgd => OptimizerConfig::Sgd,
        RawOptimizer::Adam { beta1, beta2, eps } => {
            for (name, b) in [("optimizer.beta1", beta1), ("optimizer.beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(name, "must lie in [0, 1)"));
                }
            }
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::config("optimizer.eps", "must be > 0"));
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
        }
    };
    if !(raw.learning_rate.is_finite() && raw.learning_rate > 0.0) {
        return Err(Error::config("learning_rate", "must be > 0"));
    }
    positive("batch_size", raw.batch_size)?;
    positive("replicas", raw.replicas)?;
    positive("log_every", raw.log_every)?;
    if raw.seed.unwrap_or(0).checked_add(raw.replicas as u64).is_none() {
        return Err(Error::config("replicas", "seed + replicas overflows u64"));
    }

    let o = raw.oracle;
    if o.epsilons.len() < 2 || o.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::config("oracle.epsilons", "need at least two positive values"));
    }
    positive("oracle.instances", o.instances)?;
    if raw.num_experts > MAX_EXPERTS {
        notes.push(format!(
            "num_experts = {} exceeds the oracle limit {MAX_EXPERTS}; biasvar and order will refuse it",
            raw.num_experts
        ));
    }

    let config = ExperimentConfig {
        seed,
        num_experts: raw.num_experts,
        d_model: raw.d_model,
        d_hidden: raw.d_hidden,
        estimator,
        jitter_r: raw.jitter_r,
        load_balance_coef: raw.load_balance_coef,
        task: TaskConfig {
            kind: t.kind,
            n_train: t.n_train,
            n_eval: t.n_eval,
            noise_std: t.noise_std,
            regions,
            n_classes: t.n_classes,
        },
        steps: raw.steps,
        batch_size: raw.batch_size,
        optimizer,
        learning_rate: raw.learning_rate,
        replicas: raw.replicas,
        log_every: raw.log_every,
        oracle: OracleConfig {
            instance: o.instance,
            instances: o.instances,
            epsilons: o.epsilons,
            mc_samples: o.mc_samples,
            downstream: o.downstream,
        },
    };
    Ok(Parsed { config, notes })
}

impl ExperimentConfig {
    /// Defaults around a given seed and estimator kind.
    pub fn with_defaults(seed: u64, kind: EstimatorKind) -> Self {
        let text = format!(r#"{{"seed": {seed}, "estimator": {{"kind": "{kind}"}}}}"#);
        parse_config_str(&text).expect("defaults are valid").config
    }

    /// Same configuration with a different estimator kind; mask default
    /// follows the kind.
    pub fn with_kind(&self, kind: EstimatorKind) -> Self {
        let mut estimator = EstimatorConfig {
            kind,
            ..self.estimator.clone()
        };
        if kind.is_dense() {
            estimator.use_mask = false;
        }
        Self {
            estimator,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::DEFAULT_JITTER;

    fn err_path(text: &str) -> String {
        match parse_config_str(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_applied() {
        let p = parse_config_str(r#"{"seed": 3, "estimator": {"kind": "sparsemixer"}}"#).unwrap();
        let c = p.config;
        assert_eq!(c.jitter_r, 0.1);
        assert_eq!(c.estimator.r, DEFAULT_JITTER);
        assert_eq!(c.load_balance_coef, 0.01);
        assert_eq!(c.estimator.tau, 1.0);
        assert!(c.estimator.use_mask);
        assert_eq!(c.task.regions, c.num_experts);
        assert_eq!(
            c.optimizer,
            OptimizerConfig::Adam {
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8
            }
        );
        assert!(p.notes.is_empty());
        let st = parse_config_str(r#"{"seed": 3, "estimator": {"kind": "st"}}"#).unwrap();
        assert!(!st.config.estimator.use_mask);
    }

    #[test]
    fn rejections_carry_key_paths() {
        assert_eq!(err_path(r#"{"estimator": {"kind": "st"}}"#), "seed");
        assert_eq!(
            err_path(r#"{"seed": 1, "estimator": {"kind": "stgs", "use_mask": true}}"#),
            "estimator.use_mask"
        );
        assert_eq!(
            err_path(r#"{"seed": 1, "estimator": {"kind": "st", "colour": 1}}"#),
            "estimator.colour"
        );
        assert_eq!(err_path(r#"{"seed": 1, "estimator": {"kind": "topk"}}"#), "estimator.kind");
        assert_eq!(
            err_path(r#"{"seed": 1, "estimator": {"kind": "st"}, "task": {"kind": "ranking"}}"#),
            "task.kind"
        );
        assert_eq!(
            err_path(r#"{"seed": 1, "estimator": {"kind": "st"}, "optimizer": {"kind": "adam", "beta3": 1}}"#),
            "optimizer"
        );
        assert_eq!(err_path(r#"{"seed": 1, "estimator": {"kind": "st"}, "num_experts": 1}"#), "num_experts");
        assert_eq!(err_path(r#"{"seed": 1, "estimator": {"kind": "st"}, "extra": 0}"#), "extra");
        assert_eq!(err_path(r#"{"seed": 1, "estimator": {"kind": "sparsemixer", "scale_gate": false}}"#), "estimator.scale_gate");
        assert!(matches!(parse_config_str("{"), Err(Error::Config { .. })));
    }

    #[test]
    fn unusual_expert_count_is_noted() {
        let p = parse_config_str(r#"{"seed": 1, "num_experts": 3, "estimator": {"kind": "neglect"}}"#).unwrap();
        assert_eq!(p.notes.len(), 1);
    }

    #[test]
    fn sgd_optimizer_parses() {
        let p = parse_config_str(r#"{"seed": 1, "estimator": {"kind": "neglect"}, "optimizer": {"kind": "sgd"}}"#).unwrap();
        assert_eq!(p.config.optimizer, OptimizerConfig::Sgd);
    }
}
