//! Oracle-backed studies: bias/variance, order of accuracy, ODE rules.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DownstreamKind, ExperimentConfig, InstanceKind};
use super::train::stream_rng;
use crate::error::Result;
use crate::estimators::{EstimatorConfig, EstimatorKind, Nabla1Path};
use crate::oracle::{
    bias_order_study, estimator_expectation, ode_solver_error, Downstream, OdeMethod, ScalarFn,
    SmallInstance, ZERO_BIAS,
};

/// Kinds compared by the order study.
pub const ORDER_KINDS: [EstimatorKind; 5] = [
    EstimatorKind::Reinforce,
    EstimatorKind::St,
    EstimatorKind::Sparsemixer1,
    EstimatorKind::Sparsemixer2,
    EstimatorKind::Sparsemixer,
];

/// Step sizes used by `odecheck`.
pub const ODE_STEPS: [f64; 3] = [1e-1, 5e-2, 2.5e-2];

const INSTANCE_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasVarRow {
    pub estimator: String,
    pub bias_l2: f64,
    pub rel_bias: f64,
    pub variance_trace: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderRow {
    pub estimator: String,
    pub epsilon: f64,
    pub bias_l2: f64,
    /// `bias(previous ε) / bias(ε)`; empty on the first row or when undefined.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OdeRow {
    pub method: String,
    pub function: String,
    pub h: f64,
    pub error: f64,
    /// `error(previous h) / error(h)`; empty on the first row or when undefined.
    pub ratio: Option<f64>,
}

fn downstream(kind: DownstreamKind, inst: &SmallInstance) -> Downstream {
    match kind {
        DownstreamKind::Readout => inst.g.clone(),
        DownstreamKind::Quadratic => Downstream::Quadratic,
        DownstreamKind::Cubic => Downstream::Cubic,
    }
}

/// The study instances: the reference instance, or `count` random ones of
/// size `N × d_model` drawn from the config seed.
pub fn study_instances(cfg: &ExperimentConfig, count: usize) -> Result<Vec<SmallInstance>> {
    let o = &cfg.oracle;
    let family = match o.instance {
        InstanceKind::Reference => vec![SmallInstance::reference()],
        InstanceKind::Random => {
            let mut rng = stream_rng(cfg.seed, INSTANCE_STREAM);
            (0..count)
                .map(|_| SmallInstance::random(cfg.num_experts, cfg.d_model, cfg.d_model, &mut rng))
                .collect()
        }
    };
    family
        .into_iter()
        .map(|inst| {
            let g = match o.instance {
                // The reference instance fixes its own g.
                InstanceKind::Reference => inst.g.clone(),
                InstanceKind::Random => downstream(o.downstream, &inst),
            };
            let inst = SmallInstance { g, ..inst };
            inst.validate()?;
            Ok(inst)
        })
        .collect()
}

fn study_config(cfg: &ExperimentConfig, kind: EstimatorKind) -> EstimatorConfig {
    EstimatorConfig {
        tau: cfg.estimator.tau,
        ..EstimatorConfig::simplified(kind).with_nabla1(Nabla1Path::None)
    }
}

/// Bias and variance of every estimator's `∇0` part on one instance.
pub fn run_biasvar(cfg: &ExperimentConfig) -> Result<Vec<BiasVarRow>> {
    let inst = study_instances(cfg, 1)?.remove(0);
    EstimatorKind::ALL
        .par_iter()
        .map(|&kind| {
            let rep = estimator_expectation(&inst, &study_config(cfg, kind), cfg.oracle.mc_samples, cfg.seed)?;
            Ok(BiasVarRow {
                estimator: kind.label().to_string(),
                bias_l2: rep.bias_l2,
                rel_bias: rep.rel_bias,
                variance_trace: rep.variance_trace,
                n_samples: rep.n_samples,
            })
        })
        .collect()
}

/// Median bias and bias ratios as expert outputs shrink.
pub fn run_order_study(cfg: &ExperimentConfig) -> Result<Vec<OrderRow>> {
    let family = study_instances(cfg, cfg.oracle.instances)?;
    let eps = &cfg.oracle.epsilons;
    let per_kind = ORDER_KINDS
        .par_iter()
        .map(|&kind| Ok((kind, bias_order_study(&family, &study_config(cfg, kind), eps)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (kind, study) in per_kind {
        for (j, (&epsilon, &bias_l2)) in study.epsilons.iter().zip(&study.bias_norms).enumerate() {
            rows.push(OrderRow {
                estimator: kind.label().to_string(),
                epsilon,
                bias_l2,
                ratio: if j == 0 { None } else { study.ratios[j - 1] },
            });
        }
    }
    Ok(rows)
}

pub fn ode_functions() -> Vec<ScalarFn> {
    vec![ScalarFn::Square, ScalarFn::Cube, ScalarFn::Tanh, ScalarFn::Exp]
}

/// Errors of both rules on `[0, h]` for each function and step.
pub fn ode_rows(functions: &[ScalarFn], steps: &[f64]) -> Vec<OdeRow> {
    let mut rows = Vec::new();
    for method in [OdeMethod::EulerEndpoint, OdeMethod::Midpoint] {
        for g in functions {
            let mut prev: Option<f64> = None;
            for &h in steps {
                let error = ode_solver_error(g, 0.0, h, method);
                let ratio = match prev {
                    Some(p) if error > ZERO_BIAS && p > ZERO_BIAS => Some(p / error),
                    _ => None,
                };
                rows.push(OdeRow {
                    method: method.label().to_string(),
                    function: g.label().to_string(),
                    h,
                    error,
                    ratio,
                });
                prev = Some(error);
            }
        }
    }
    rows
}

pub fn run_ode_check() -> Vec<OdeRow> {
    ode_rows(&ode_functions(), &ODE_STEPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn config(text: &str) -> ExperimentConfig {
        super::super::config::parse_config_str(text).unwrap().config
    }

    #[test]
    fn biasvar_on_reference_instance() {
        let cfg = config(r#"{"seed": 1, "estimator": {"kind": "sparsemixer"}, "num_experts": 2, "oracle": {"instance": "reference"}}"#);
        let rows = run_biasvar(&cfg).unwrap();
        assert_eq!(rows.len(), 7);
        let get = |k: &str| rows.iter().find(|r| r.estimator == k).unwrap();
        assert!(get("reinforce").bias_l2 <= 1e-15);
        assert!(get("sparsemixer2").bias_l2 <= 1e-13);
        assert_abs_diff_eq!(get("reinforce").variance_trace, 0.1953125, epsilon = 1e-15);
        assert_eq!(get("stgs").n_samples, 10_000);
        assert_eq!(get("st").n_samples, 0);
    }

    #[test]
    fn biasvar_refuses_large_n() {
        let cfg = config(r#"{"seed": 1, "estimator": {"kind": "sparsemixer"}, "num_experts": 17}"#);
        assert!(matches!(run_biasvar(&cfg), Err(crate::error::Error::Intractable(_))));
    }

    #[test]
    fn order_rows_layout() {
        let cfg = config(r#"{"seed": 2, "estimator": {"kind": "sparsemixer"}, "d_model": 3, "oracle": {"instances": 4}}"#);
        let rows = run_order_study(&cfg).unwrap();
        assert_eq!(rows.len(), ORDER_KINDS.len() * 3);
        for chunk in rows.chunks(3) {
            assert!(chunk[0].ratio.is_none());
            assert_eq!(chunk[0].epsilon, 0.1);
        }
        // REINFORCE is unbiased at every ε.
        assert!(rows.iter().filter(|r| r.estimator == "reinforce").all(|r| r.ratio.is_none()));
    }

    #[test]
    fn ode_examples() {
        let rows = run_ode_check();
        assert_eq!(rows.len(), 2 * 4 * 3);
        let pick = |m: &str, f: &str| -> Vec<&OdeRow> {
            rows.iter().filter(|r| r.method == m && r.function == f).collect()
        };
        for r in pick("midpoint", "x^2") {
            assert!(r.error <= 1e-15);
            assert!(r.ratio.is_none());
        }
        for r in &pick("midpoint", "x^3")[1..] {
            assert_abs_diff_eq!(r.ratio.unwrap(), 8.0, epsilon = 0.01);
        }
        for r in &pick("euler_endpoint", "x^2")[1..] {
            assert_abs_diff_eq!(r.ratio.unwrap(), 4.0, epsilon = 0.01);
        }
    }
}
