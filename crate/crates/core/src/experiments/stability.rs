//! Test MSE under growing mean shifts of one exogenous group, for models
//! trained on two environments whose means for that group are 0 and 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::ObjectiveKind;
use crate::presets::{intro_example_spec, ShiftTarget};
use crate::scm::linear_predictor_mse;
use crate::svg::{Plot, Series};

use super::{check_seeds, fit_linear, median, sample_envs, ExperimentError, ExperimentReport, IntroPreset, LinearFit, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub targets: Vec<ShiftTarget>,
    pub max_shift: f64,
    /// Number of evenly spaced test shifts in `[0, max_shift]`.
    pub n_shifts: usize,
    /// Training means of the shifted group.
    pub train_means: [f64; 2],
    pub seeds: Vec<u64>,
    pub preset: IntroPreset,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            targets: ShiftTarget::ALL.to_vec(),
            max_shift: 5.0,
            n_shifts: 6,
            train_means: [0.0, 1.0],
            seeds: (0..10).collect(),
            preset: IntroPreset { fit_intercept: true, ..IntroPreset::default() },
        }
    }
}

impl StabilityConfig {
    pub fn shifts(&self) -> Vec<f64> {
        if self.n_shifts == 1 {
            return vec![0.0];
        }
        (0..self.n_shifts).map(|i| self.max_shift * i as f64 / (self.n_shifts - 1) as f64).collect()
    }
}

/// ERM and DIRM(`preset.large_lambda`) on the confounded introductory model.
///
/// Main table axes: `target, shift`; metrics: `test_mse, increase,
/// coef_X1, coef_X2, intercept` where `increase` is the test MSE minus the
/// same model's test MSE at shift 0.
pub fn run_stability(cfg: &StabilityConfig) -> Result<ExperimentReport, ExperimentError> {
    check_seeds(&cfg.seeds)?;
    cfg.preset.validate()?;
    if !(cfg.max_shift >= 0.0 && cfg.max_shift.is_finite()) || cfg.n_shifts == 0 || cfg.targets.is_empty() {
        return Err(ExperimentError::InvalidGrid("need targets, max_shift >= 0 and n_shifts >= 1".into()));
    }
    let spec = intro_example_spec(true);
    let kinds = [ObjectiveKind::Erm, ObjectiveKind::Dirm];
    let cells: Vec<(ShiftTarget, u64, ObjectiveKind)> = cfg
        .targets
        .iter()
        .flat_map(|&t| cfg.seeds.iter().flat_map(move |&s| kinds.into_iter().map(move |k| (t, s, k))))
        .collect();
    let fits: Vec<LinearFit> = cells
        .par_iter()
        .map(|&(target, seed, kind)| {
            let ivs: Vec<_> = cfg
                .train_means
                .iter()
                .map(|&m| (format!("{}_mean={m}", target.label()), target.mean_shift(m)))
                .collect();
            let envs = sample_envs(&spec, &ivs, cfg.preset.n_per_env, seed)?;
            let lambda = if kind == ObjectiveKind::Dirm { cfg.preset.large_lambda } else { 0.0 };
            fit_linear(&envs, &cfg.preset.objective(kind, lambda), &cfg.preset.train_config(seed), cfg.preset.fit_intercept)
        })
        .collect::<Result<_, _>>()?;

    let shifts = cfg.shifts();
    let mut table = Table::new("report", &["target", "shift"], &["test_mse", "increase", "coef_X1", "coef_X2", "intercept"]);
    for (&(target, seed, kind), fit) in cells.iter().zip(&fits) {
        let mse = |m: f64| linear_predictor_mse(&spec, &target.mean_shift(m), &fit.coefficients, fit.intercept);
        let base = mse(0.0)?;
        for &m in &shifts {
            let v = mse(m)?;
            table.push(
                kind.label(),
                Some(seed),
                vec![target.label().into(), m.into()],
                vec![v, v - base, fit.coefficients[0], fit.coefficients[1], fit.intercept],
            );
        }
    }

    let mut report = ExperimentReport::new("stability", &cfg.seeds, cfg);
    report.plots = cfg
        .targets
        .iter()
        .map(|&t| Plot {
            name: format!("stability_{}", t.label()),
            title: format!("mean shift of {}", t.label()),
            x_label: "mean shift".into(),
            y_label: "test MSE (median over seeds)".into(),
            series: kinds
                .iter()
                .map(|k| Series {
                    name: k.label().into(),
                    points: shifts
                        .iter()
                        .map(|&m| {
                            let f = [("target", t.label().into()), ("shift", m.into())];
                            (m, median(&table.values(k.label(), &f, "test_mse")))
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let summary = table.median_over_seeds("summary");
    report.tables = vec![table, summary];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_target_has_the_same_grid() {
        let cfg = StabilityConfig {
            seeds: vec![3],
            preset: IntroPreset { n_per_env: 1000, epochs: 300, learning_rate: 5e-2, warmup_epochs: 50, fit_intercept: true, ..IntroPreset::default() },
            ..StabilityConfig::default()
        };
        let rep = run_stability(&cfg).unwrap();
        let t = rep.main();
        let counts: Vec<usize> = ShiftTarget::ALL
            .iter()
            .map(|tg| t.values("dirm", &[("target", tg.label().into())], "test_mse").len())
            .collect();
        assert_eq!(counts, vec![6, 6, 6]);
        assert!(t.values("erm", &[("shift", 0.0.into())], "increase").iter().all(|v| *v == 0.0));
        assert_eq!(rep.plots.len(), 3);
    }

    #[test]
    fn shift_grid() {
        assert_eq!(StabilityConfig::default().shifts(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
