//! Deterministic mini-batch training.
//!
//! Every step draws one batch of equal size `K` from each environment
//! (without replacement within an epoch, reshuffled every epoch from the run
//! seed) and applies the block rule of the objective: β follows the data
//! loss, φ follows loss + λ(epoch)·penalty.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{fmt_f64, DataError, EnvironmentData};
use crate::model::{Model, ModelError};
use crate::objectives::{total_objective, ObjectiveError, ObjectiveSpec, ObjectiveState, PenaltyTrace};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("no training environments")]
    NoEnvironments,
    #[error("environment `{0}` would keep no training rows")]
    EmptySplit(String),
    #[error("non-finite loss or gradient at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, trace: Box<TrainTrace> },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub validation_fraction: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub l2_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 100,
            batch_size: 128,
            optimizer: Optimizer::adam(),
            seed: 0,
            early_stop: None,
            l2_reg: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key, reason: String| Err(TrainError::InvalidConfig { key, reason });
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate", format!("must be >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("train.epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be >= 1".into());
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return bad("train.l2_reg", format!("must be >= 0, got {}", self.l2_reg));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("train.optimizer", "adam needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        if let Some(es) = self.early_stop {
            if !(0.0..1.0).contains(&es.validation_fraction) {
                return bad(
                    "train.early_stop.validation_fraction",
                    format!("must be in [0, 1), got {}", es.validation_fraction),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of each environment's batch loss.
    pub env_losses: Vec<f64>,
    pub penalty: f64,
    pub lambda: f64,
    /// Head weights at the end of the epoch (φ-identity models only).
    pub coefficients: Option<Vec<f64>>,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub env_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub records: Vec<EpochRecord>,
    pub penalty: PenaltyTrace,
    /// Seconds since the start of training, per epoch. Not deterministic.
    pub wall_clock: Vec<f64>,
}

impl TrainTrace {
    /// Epochs actually run.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One row per (epoch, environment):
    /// `epoch, env_id, loss, penalty, lambda, coef_<feature>…`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let coefs = self.records.first().is_some_and(|r| r.coefficients.is_some());
        let mut header: Vec<String> = ["epoch", "env_id", "loss", "penalty", "lambda"].map(String::from).to_vec();
        if coefs {
            header.extend(self.feature_names.iter().map(|f| format!("coef_{f}")));
        }
        w.write_record(&header)?;
        for r in &self.records {
            for (id, loss) in self.env_ids.iter().zip(&r.env_losses) {
                let mut row = vec![r.epoch.to_string(), id.clone(), fmt_f64(*loss), fmt_f64(r.penalty), fmt_f64(r.lambda)];
                if let Some(c) = &r.coefficients {
                    row.extend(c.iter().map(|v| fmt_f64(*v)));
                }
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Holds out `round(fraction · n_e)` rows of every environment and pools
/// them into one validation set.
pub fn pooled_validation_split(
    envs: &[EnvironmentData],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<EnvironmentData>, EnvironmentData), TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::InvalidConfig {
            key: "train.early_stop.validation_fraction",
            reason: format!("must be in (0, 1), got {fraction}"),
        });
    }
    if envs.is_empty() {
        return Err(TrainError::NoEnvironments);
    }
    let mut train = Vec::with_capacity(envs.len());
    let mut held = Vec::with_capacity(envs.len());
    for (k, env) in envs.iter().enumerate() {
        let n = env.n_samples();
        let n_val = (fraction * n as f64).round() as usize;
        if n_val >= n {
            return Err(TrainError::EmptySplit(env.env_id.clone()));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng::sub_rng(rng::derive_seed(seed, 0x5911), k as u64));
        let (val, keep) = rows.split_at_mut(n_val);
        val.sort_unstable();
        keep.sort_unstable();
        train.push(env.select_rows(keep));
        held.push(env.select_rows(val));
    }
    let parts: Vec<&EnvironmentData> = held.iter().collect();
    let validation = EnvironmentData::concat(&parts, "validation")?;
    Ok((train, validation))
}

/// Head weights of a φ-identity model, aligned to the input features.
pub fn effective_coefficients(model: &Model) -> Result<Vec<f64>, ModelError> {
    if model.has_phi_params() {
        return Err(ModelError::Unsupported("effective coefficients need a model without hidden layers".into()));
    }
    Ok(model.head_weight.to_vec())
}

enum OptState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32, beta1: f64, beta2: f64, eps: f64 },
}

impl OptState {
    fn new(opt: Optimizer, len: usize) -> Self {
        match opt {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                Self::Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
            }
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Self::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Self::Adam { m, v, t, beta1, beta2, eps } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Trains `init` on `envs`. Deterministic in all inputs; the wall-clock
/// column of the trace is the only non-reproducible output.
pub fn train(
    init: &Model,
    envs: &[EnvironmentData],
    objective: &ObjectiveSpec,
    config: &TrainConfig,
) -> Result<(Model, TrainTrace), TrainError> {
    config.validate()?;
    objective.validate()?;
    init.validate()?;
    if envs.is_empty() {
        return Err(TrainError::NoEnvironments);
    }
    let split;
    let (train_envs, validation): (&[EnvironmentData], Option<&EnvironmentData>) = match config.early_stop {
        Some(es) if es.validation_fraction > 0.0 => {
            split = pooled_validation_split(envs, es.validation_fraction, config.seed)?;
            (&split.0, Some(&split.1))
        }
        _ => (envs, None),
    };
    if let Some(empty) = train_envs.iter().find(|e| e.n_samples() == 0) {
        return Err(TrainError::Model(ModelError::EmptyEnvironment(empty.env_id.clone())));
    }

    let mut model = init.clone();
    let mut params = model.to_params().values;
    let trainable_bias = model.head_bias_trainable;
    let bias_slot = params.len() - 1;
    let mut opt = OptState::new(config.optimizer, params.len());
    let mut state = ObjectiveState::new(train_envs.len());
    let min_n = train_envs.iter().map(EnvironmentData::n_samples).min().expect("non-empty");
    let k = config.batch_size.min(min_n);
    let steps = min_n / k;
    let full_batch = train_envs.iter().all(|e| e.n_samples() == k);

    let mut trace = TrainTrace {
        env_ids: train_envs.iter().map(|e| e.env_id.clone()).collect(),
        feature_names: train_envs[0].feature_names.clone(),
        ..TrainTrace::default()
    };
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0usize;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let perms: Vec<Vec<usize>> = if full_batch {
            Vec::new()
        } else {
            let epoch_seed = rng::derive_seed(config.seed, epoch as u64);
            train_envs
                .iter()
                .enumerate()
                .map(|(e, env)| {
                    let mut rows: Vec<usize> = (0..env.n_samples()).collect();
                    rows.shuffle(&mut rng::sub_rng(epoch_seed, e as u64));
                    rows
                })
                .collect()
        };
        let mut env_losses = vec![0.0; train_envs.len()];
        let mut penalty = 0.0;
        let mut lambda = 0.0;
        for step in 0..steps {
            let owned: Vec<EnvironmentData>;
            let batch: &[EnvironmentData] = if full_batch {
                train_envs
            } else {
                owned = train_envs
                    .iter()
                    .zip(&perms)
                    .map(|(env, rows)| env.select_rows(&rows[step * k..(step + 1) * k]))
                    .collect();
                &owned
            };
            let outcome = total_objective(&model, batch, objective, epoch, &mut state);
            let (value, report) = match outcome {
                Err(ObjectiveError::Model(ModelError::NonFinite)) => {
                    return Err(TrainError::NonFiniteLoss { epoch, trace: Box::new(trace) })
                }
                other => other?,
            };
            let mut grad = report.flat(&model);
            if config.l2_reg > 0.0 {
                for (i, (g, p)) in grad.iter_mut().zip(&params).enumerate() {
                    if i != bias_slot || trainable_bias {
                        *g += config.l2_reg * p;
                    }
                }
            }
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, trace: Box::new(trace) });
            }
            for (acc, l) in env_losses.iter_mut().zip(&report.env_losses) {
                *acc += l / steps as f64;
            }
            penalty += report.penalty / steps as f64;
            lambda = report.lambda;
            trace.penalty.push(epoch, &report);
            opt.step(&mut params, &grad, config.learning_rate);
            model.set_flat(&params);
        }
        let validation_loss = match validation {
            Some(v) => Some(crate::grad::loss(&model, v).map_err(|e| match e {
                ModelError::NonFinite => TrainError::NonFiniteLoss { epoch, trace: Box::new(trace.clone()) },
                other => other.into(),
            })?),
            None => None,
        };
        trace.records.push(EpochRecord {
            epoch,
            env_losses,
            penalty,
            lambda,
            coefficients: effective_coefficients(&model).ok(),
            validation_loss,
        });
        trace.wall_clock.push(start.elapsed().as_secs_f64());
        if let (Some(vl), Some(es)) = (validation_loss, config.early_stop) {
            match &best {
                Some((b, _)) if vl >= *b => since_best += 1,
                _ => {
                    best = Some((vl, model.clone()));
                    since_best = 0;
                }
            }
            if since_best >= es.patience {
                break;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layout, Link};
    use crate::presets::{intro_example_spec, intro_training_environments};
    use crate::scm::{pooled_population_ols, sample};
    use ndarray::{Array1, Array2};

    fn intro_envs(n: usize, seed: u64) -> Vec<EnvironmentData> {
        let spec = intro_example_spec(true);
        intro_training_environments()
            .iter()
            .enumerate()
            .map(|(i, iv)| sample(&spec, iv, n, rng::derive_seed(seed, i as u64)).unwrap())
            .collect()
    }

    fn small(n: usize) -> EnvironmentData {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        EnvironmentData::new(x, Array1::zeros(n), "e", vec!["a".into()]).unwrap()
    }

    #[test]
    fn split_examples() {
        let envs = [small(100).with_id("a"), small(100).with_id("b")];
        let (train_envs, val) = pooled_validation_split(&envs, 0.2, 3).unwrap();
        assert_eq!(val.n_samples(), 40);
        assert!(train_envs.iter().all(|e| e.n_samples() == 80));
        assert_eq!(pooled_validation_split(&envs, 0.2, 3).unwrap().1, val);
        assert!(matches!(pooled_validation_split(&envs, 0.0, 3), Err(TrainError::InvalidConfig { .. })));
        assert!(matches!(pooled_validation_split(&[small(1)], 0.6, 3), Err(TrainError::EmptySplit(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let envs = intro_envs(200, 1);
        let init = Model::xavier(&Layout::new(2, &[3], Link::Identity).unwrap(), 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 32, ..TrainConfig::default() };
        let (m, trace) = train(&init, &envs, &ObjectiveSpec::dirm(1.0), &cfg).unwrap();
        assert_eq!(m, init);
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn zero_lambda_reproduces_erm_bitwise() {
        let envs = intro_envs(300, 4);
        let init = Model::xavier(&Layout::new(2, &[4], Link::Identity).unwrap(), 5).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 50, ..TrainConfig::default() };
        let (erm, erm_trace) = train(&init, &envs, &ObjectiveSpec::erm(), &cfg).unwrap();
        for spec in [ObjectiveSpec::dirm(0.0), ObjectiveSpec::irm(0.0), ObjectiveSpec::rex(0.0)] {
            let (m, t) = train(&init, &envs, &spec, &cfg).unwrap();
            assert_eq!(m.to_params().values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                erm.to_params().values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            let losses: Vec<_> = t.records.iter().map(|r| r.env_losses.clone()).collect();
            let erm_losses: Vec<_> = erm_trace.records.iter().map(|r| r.env_losses.clone()).collect();
            assert_eq!(losses, erm_losses);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let envs = intro_envs(200, 6);
        let init = Model::xavier(&Layout::new(2, &[3], Link::Identity).unwrap(), 1).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 40, ..TrainConfig::default() };
        let spec = ObjectiveSpec { warmup_epochs: 2, ..ObjectiveSpec::dirm(3.0) };
        let a = train(&init, &envs, &spec, &cfg).unwrap();
        let b = train(&init, &envs, &spec, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.records, b.1.records);
        assert_eq!(a.1.penalty, b.1.penalty);
        assert_eq!(a.1.records[1].lambda, 0.0);
        assert_eq!(a.1.records[2].lambda, 3.0);
    }

    #[test]
    fn erm_matches_pooled_population_ols() {
        let envs = intro_envs(10_000, 7);
        let init = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        let cfg = TrainConfig { epochs: 1500, batch_size: usize::MAX, learning_rate: 5e-2, ..TrainConfig::default() };
        let (m, _) = train(&init, &envs, &ObjectiveSpec::erm(), &cfg).unwrap();
        let ols = pooled_population_ols(&intro_example_spec(true), &intro_training_environments()).unwrap();
        let c = effective_coefficients(&m).unwrap();
        for j in 0..2 {
            assert!((c[j] - ols.coefficients[j]).abs() < 0.05, "{c:?} vs {:?}", ols.coefficients);
        }
    }

    #[test]
    fn effective_coefficients_examples() {
        assert_eq!(effective_coefficients(&Model::linear(&[0.0, 1.0], 0.3, Link::Identity)).unwrap(), vec![0.0, 1.0]);
        let deep = Model::xavier(&Layout::new(2, &[2], Link::Identity).unwrap(), 0).unwrap();
        assert!(matches!(effective_coefficients(&deep), Err(ModelError::Unsupported(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let envs = intro_envs(100, 2);
        let init = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        let cfg = TrainConfig { epochs: 500, learning_rate: 10.0, optimizer: Optimizer::Sgd, batch_size: 100, ..TrainConfig::default() };
        match train(&init, &envs, &ObjectiveSpec::erm(), &cfg) {
            Err(TrainError::NonFiniteLoss { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn early_stopping_limits_epochs() {
        let envs = intro_envs(200, 3);
        let init = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        let cfg = TrainConfig {
            epochs: 2000,
            learning_rate: 0.1,
            batch_size: 200,
            early_stop: Some(EarlyStop { validation_fraction: 0.25, patience: 5 }),
            ..TrainConfig::default()
        };
        let (_, trace) = train(&init, &envs, &ObjectiveSpec::erm(), &cfg).unwrap();
        assert!(trace.len() < 2000);
        assert!(trace.records.iter().all(|r| r.validation_loss.is_some()));
    }

    #[test]
    fn trace_csv_columns() {
        let envs = intro_envs(50, 1);
        let init = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        let cfg = TrainConfig { epochs: 2, batch_size: 50, ..TrainConfig::default() };
        let (_, trace) = train(&init, &envs, &ObjectiveSpec::dirm(1.0), &cfg).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,env_id,loss,penalty,lambda,coef_X1,coef_X2\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }
}
