//! Learned linear coefficients on the introductory model against the
//! structural coefficients `(0, 1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::ObjectiveKind;
use crate::presets::{intro_example_spec, intro_training_environments, INTRO_CAUSAL_COEFFICIENTS};

use super::{check_seeds, fit_linear, sample_envs, ExperimentError, ExperimentReport, IntroPreset, LinearFit, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoeffConfig {
    pub confounded: bool,
    pub seeds: Vec<u64>,
    pub preset: IntroPreset,
}

impl Default for CoeffConfig {
    fn default() -> Self {
        Self { confounded: true, seeds: (0..10).collect(), preset: IntroPreset::default() }
    }
}

/// Objectives reported, in row order. IRM and DIRM use `preset.large_lambda`.
pub const COEFF_OBJECTIVES: [ObjectiveKind; 3] = [ObjectiveKind::Erm, ObjectiveKind::Irm, ObjectiveKind::Dirm];

/// Main table axes: `scenario`; metrics: `coef_X1, coef_X2, intercept`.
/// Objectives: `truth`, `erm`, `irm`, `dirm`. The `summary` table holds
/// medians over seeds.
pub fn run_coeff_tables(cfg: &CoeffConfig) -> Result<ExperimentReport, ExperimentError> {
    check_seeds(&cfg.seeds)?;
    cfg.preset.validate()?;
    let spec = intro_example_spec(cfg.confounded);
    let ivs: Vec<_> = intro_training_environments()
        .into_iter()
        .zip(["sigma2=1", "sigma2=2"])
        .map(|(iv, id)| (id.to_string(), iv))
        .collect();
    let cells: Vec<(u64, ObjectiveKind)> =
        cfg.seeds.iter().flat_map(|&s| COEFF_OBJECTIVES.iter().map(move |&k| (s, k))).collect();
    let fits: Vec<LinearFit> = cells
        .par_iter()
        .map(|&(seed, kind)| {
            let envs = sample_envs(&spec, &ivs, cfg.preset.n_per_env, seed)?;
            let lambda = if kind == ObjectiveKind::Erm { 0.0 } else { cfg.preset.large_lambda };
            fit_linear(&envs, &cfg.preset.objective(kind, lambda), &cfg.preset.train_config(seed), cfg.preset.fit_intercept)
        })
        .collect::<Result<_, _>>()?;

    let scenario = if cfg.confounded { "confounded" } else { "no_confounding" };
    let mut table = Table::new("report", &["scenario"], &["coef_X1", "coef_X2", "intercept"]);
    for &seed in &cfg.seeds {
        let [c1, c2] = INTRO_CAUSAL_COEFFICIENTS;
        table.push("truth", Some(seed), vec![scenario.into()], vec![c1, c2, 0.0]);
    }
    for (&(seed, kind), fit) in cells.iter().zip(&fits) {
        table.push(
            kind.label(),
            Some(seed),
            vec![scenario.into()],
            vec![fit.coefficients[0], fit.coefficients[1], fit.intercept],
        );
    }
    let mut report = ExperimentReport::new("coeffs", &cfg.seeds, cfg);
    let summary = table.median_over_seeds("summary");
    report.tables = vec![table, summary];
    Ok(report)
}
