//! Preset experiment pipelines. Every grid cell trains independently;
//! cells run on the rayon pool and are merged in grid order, so a report is
//! a pure function of its preset and seeds.

mod coeffs;
mod features;
mod fig1;
mod report;
mod stability;
mod theorem1;

pub use coeffs::{run_coeff_tables, CoeffConfig};
pub use features::{
    generate_studies, run_feature_stability, run_penalty_approximation, ApproxConfig, FeatureConfig, StudyGenerator,
};
pub use fig1::{run_fig1, Fig1Config, Scenario, ShiftAxis, ShiftKind, TestShift};
pub use report::{median, ExperimentReport, GridValue, Row, Table};
pub use stability::{run_stability, StabilityConfig};
pub use theorem1::{run_theorem1_check, Theorem1Config};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EnvironmentData;
use crate::model::{Layout, Link, Model, ModelError};
use crate::objectives::{DirmForm, ObjectiveError, ObjectiveKind, ObjectiveSpec};
use crate::scm::{sample, Intervention, ScmError, ScmSpec};
use crate::trainer::{effective_coefficients, train, Optimizer, TrainConfig, TrainError};
use crate::rng;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("io: {0}")]
    Io(String),
}

const INIT_TAG: u64 = 0x1417_0001;

/// Training recipe shared by the linear experiments on the introductory
/// model. Full-batch Adam; the penalty weight switches on after
/// `warmup_epochs`, so penalized runs start from the least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntroPreset {
    pub n_per_env: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub dirm_form: DirmForm,
    /// Stand-in for `λ → ∞`.
    pub large_lambda: f64,
    /// When false the head bias stays at 0. Environments that differ only
    /// in second moments carry no information about the bias, and matching
    /// its gradient would then constrain β through sampling noise alone.
    pub fit_intercept: bool,
}

impl Default for IntroPreset {
    fn default() -> Self {
        Self {
            n_per_env: 10_000,
            epochs: 5_000,
            learning_rate: 1e-2,
            warmup_epochs: 500,
            dirm_form: DirmForm::Gradient,
            large_lambda: 1e4,
            fit_intercept: false,
        }
    }
}

impl IntroPreset {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: usize::MAX,
            optimizer: Optimizer::adam(),
            seed,
            early_stop: None,
            l2_reg: 0.0,
        }
    }

    pub fn objective(&self, kind: ObjectiveKind, lambda: f64) -> ObjectiveSpec {
        ObjectiveSpec { warmup_epochs: self.warmup_epochs, dirm_form: self.dirm_form, ..ObjectiveSpec::with_kind(kind, lambda) }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_per_env == 0 || self.epochs == 0 {
            return Err(ExperimentError::InvalidGrid("n_per_env and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Samples one environment per intervention; environment `k` uses the
/// sub-seed `(seed, k)`.
pub fn sample_envs(
    spec: &ScmSpec,
    ivs: &[(String, Intervention)],
    n: usize,
    seed: u64,
) -> Result<Vec<EnvironmentData>, ExperimentError> {
    ivs.iter()
        .enumerate()
        .map(|(k, (id, iv))| Ok(sample(spec, iv, n, rng::derive_seed(seed, k as u64))?.with_id(id.clone())))
        .collect()
}

/// Linear fit: coefficients aligned to the features, then the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Trains a φ-identity regression model from a seeded Xavier start.
pub fn fit_linear(
    envs: &[EnvironmentData],
    objective: &ObjectiveSpec,
    config: &TrainConfig,
    fit_intercept: bool,
) -> Result<LinearFit, ExperimentError> {
    let d = envs.first().map(EnvironmentData::n_features).ok_or(TrainError::NoEnvironments)?;
    let mut init = Model::xavier(&Layout::new(d, &[], Link::Identity)?, rng::derive_seed(config.seed, INIT_TAG))?;
    if !fit_intercept {
        init = init.with_frozen_head_bias();
    }
    let (model, _) = train(&init, envs, objective, config)?;
    Ok(LinearFit { coefficients: effective_coefficients(&model)?, intercept: model.head_bias })
}

fn check_seeds(seeds: &[u64]) -> Result<(), ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::InvalidGrid("at least one seed is required".into()));
    }
    Ok(())
}
