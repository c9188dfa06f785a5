//! Interpolation between least squares and the causal solution on the
//! introductory model, evaluated under test-time shifts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::ObjectiveKind;
use crate::presets::{intro_example_spec, intro_training_environments, INTRO_CAUSAL_COEFFICIENTS, INTRO_FEATURE_NOISE};
use crate::scm::{linear_predictor_mse, Intervention};
use crate::svg::{Plot, Series};

use super::{check_seeds, fit_linear, median, sample_envs, ExperimentError, ExperimentReport, IntroPreset, LinearFit, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NoConfounding,
    Confounded,
}

impl Scenario {
    pub fn confounded(self) -> bool {
        self == Self::Confounded
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::NoConfounding => "no_confounding",
            Self::Confounded => "confounded",
        }
    }
}

/// Exogenous group moved at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftAxis {
    /// `E_X1`, the noise of the feature caused by `Y`.
    Observed,
    /// `E_H`.
    Hidden,
}

impl ShiftAxis {
    pub fn label(self) -> &'static str {
        match self {
            Self::Observed => "observed",
            Self::Hidden => "hidden",
        }
    }

    fn exogenous(self) -> &'static [&'static str] {
        match self {
            Self::Observed => &INTRO_FEATURE_NOISE[..1],
            Self::Hidden => &["E_H"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Adds `magnitude` to the mean.
    Mean,
    /// Multiplies the variance by `magnitude`.
    Variance,
}

impl ShiftKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Variance => "variance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestShift {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl TestShift {
    pub fn intervention(&self, axis: ShiftAxis) -> Intervention {
        axis.exogenous().iter().fold(Intervention::none(), |iv, name| match self.kind {
            ShiftKind::Mean => iv.shift(*name, self.magnitude),
            ShiftKind::Variance => iv.scale(*name, self.magnitude.sqrt()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub scenario: Scenario,
    pub axes: Vec<ShiftAxis>,
    /// Mean shifts over `[0, 5]` and variance factors over `[1, 4]`.
    pub shifts: Vec<TestShift>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub preset: IntroPreset,
}

impl Default for Fig1Config {
    fn default() -> Self {
        let mean = (0..=5).map(|m| TestShift { kind: ShiftKind::Mean, magnitude: m as f64 });
        let var = (1..=4).map(|m| TestShift { kind: ShiftKind::Variance, magnitude: m as f64 });
        Self {
            scenario: Scenario::Confounded,
            axes: vec![ShiftAxis::Observed, ShiftAxis::Hidden],
            shifts: mean.chain(var).collect(),
            lambdas: vec![0.0, 0.1, 1.0, 10.0, 100.0, 1e4],
            seeds: (0..10).collect(),
            preset: IntroPreset::default(),
        }
    }
}

/// Trains least squares (ERM) and DIRM for every λ on the two training
/// environments (`σ² = 1, 2`) and records population test MSE under every
/// shift, next to the fixed causal predictor `(0, 1)`.
///
/// Main table axes: `scenario, shift_axis, shift_kind, magnitude, lambda`
/// (`lambda` is NaN for `ols` and `causal`); metrics: `test_mse, coef_X1,
/// coef_X2, intercept`.
pub fn run_fig1(cfg: &Fig1Config) -> Result<ExperimentReport, ExperimentError> {
    check_seeds(&cfg.seeds)?;
    cfg.preset.validate()?;
    if cfg.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(ExperimentError::InvalidGrid("lambdas must be finite and >= 0".into()));
    }
    if cfg.shifts.iter().any(|s| s.kind == ShiftKind::Variance && !(s.magnitude > 0.0)) {
        return Err(ExperimentError::InvalidGrid("variance factors must be > 0".into()));
    }
    let spec = intro_example_spec(cfg.scenario.confounded());
    let ivs: Vec<_> = intro_training_environments()
        .into_iter()
        .zip(["sigma2=1", "sigma2=2"])
        .map(|(iv, id)| (id.to_string(), iv))
        .collect();

    // Cell = (seed, objective); None is least squares.
    let cells: Vec<(u64, Option<f64>)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| std::iter::once((s, None)).chain(cfg.lambdas.iter().map(move |&l| (s, Some(l)))))
        .collect();
    let fits: Vec<LinearFit> = cells
        .par_iter()
        .map(|&(seed, lambda)| {
            let envs = sample_envs(&spec, &ivs, cfg.preset.n_per_env, seed)?;
            let objective = match lambda {
                None => cfg.preset.objective(ObjectiveKind::Erm, 0.0),
                Some(l) => cfg.preset.objective(ObjectiveKind::Dirm, l),
            };
            fit_linear(&envs, &objective, &cfg.preset.train_config(seed), cfg.preset.fit_intercept)
        })
        .collect::<Result<_, _>>()?;

    let causal = LinearFit { coefficients: INTRO_CAUSAL_COEFFICIENTS.to_vec(), intercept: 0.0 };
    let mut table = Table::new(
        "report",
        &["scenario", "shift_axis", "shift_kind", "magnitude", "lambda"],
        &["test_mse", "coef_X1", "coef_X2", "intercept"],
    );
    for &axis in &cfg.axes {
        for shift in &cfg.shifts {
            let iv = shift.intervention(axis);
            let mut emit = |name: &str, seed: u64, lambda: f64, fit: &LinearFit| -> Result<(), ExperimentError> {
                let mse = linear_predictor_mse(&spec, &iv, &fit.coefficients, fit.intercept)?;
                table.push(
                    name,
                    Some(seed),
                    vec![
                        cfg.scenario.label().into(),
                        axis.label().into(),
                        shift.kind.label().into(),
                        shift.magnitude.into(),
                        lambda.into(),
                    ],
                    vec![mse, fit.coefficients[0], fit.coefficients[1], fit.intercept],
                );
                Ok(())
            };
            for (&(seed, lambda), fit) in cells.iter().zip(&fits) {
                match lambda {
                    None => {
                        emit("ols", seed, f64::NAN, fit)?;
                        emit("causal", seed, f64::NAN, &causal)?;
                    }
                    Some(l) => emit("dirm", seed, l, fit)?,
                }
            }
        }
    }

    let mut report = ExperimentReport::new("fig1", &cfg.seeds, cfg);
    report.plots = plots(cfg, &table);
    let summary = table.median_over_seeds("summary");
    report.tables = vec![table, summary];
    Ok(report)
}

fn plots(cfg: &Fig1Config, table: &Table) -> Vec<Plot> {
    let mut out = Vec::new();
    for &axis in &cfg.axes {
        for kind in [ShiftKind::Mean, ShiftKind::Variance] {
            let shifts: Vec<f64> = cfg.shifts.iter().filter(|s| s.kind == kind).map(|s| s.magnitude).collect();
            if shifts.is_empty() {
                continue;
            }
            let curve = |objective: &str, lambda: f64| Series {
                name: if objective == "dirm" { format!("dirm λ={lambda}") } else { objective.to_string() },
                points: shifts
                    .iter()
                    .map(|&m| {
                        let filter = [
                            ("shift_axis", axis.label().into()),
                            ("shift_kind", kind.label().into()),
                            ("magnitude", m.into()),
                            ("lambda", lambda.into()),
                        ];
                        (m, median(&table.values(objective, &filter, "test_mse")))
                    })
                    .collect(),
            };
            let mut series = vec![curve("ols", f64::NAN), curve("causal", f64::NAN)];
            series.extend(cfg.lambdas.iter().map(|&l| curve("dirm", l)));
            out.push(Plot {
                name: format!("fig1_{}_{}_{}", cfg.scenario.label(), axis.label(), kind.label()),
                title: format!("{} data, {} shift of the {} noise", cfg.scenario.label(), kind.label(), axis.label()),
                x_label: if kind == ShiftKind::Mean { "mean shift".into() } else { "variance factor".into() },
                y_label: "test MSE (median over seeds)".into(),
                series,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> Fig1Config {
        Fig1Config {
            shifts: vec![TestShift { kind: ShiftKind::Mean, magnitude: 0.0 }, TestShift { kind: ShiftKind::Mean, magnitude: 5.0 }],
            lambdas: vec![0.0, 1.0],
            seeds: vec![0, 1],
            preset: IntroPreset { n_per_env: 2000, epochs: 800, learning_rate: 5e-2, warmup_epochs: 100, ..IntroPreset::default() },
            ..Fig1Config::default()
        }
    }

    #[test]
    fn zero_lambda_matches_least_squares() {
        let rep = run_fig1(&quick()).unwrap();
        let t = rep.main();
        let f = [("shift_axis", "observed".into()), ("magnitude", 0.0.into())];
        let ols = t.values("ols", &f, "test_mse");
        let dirm0 = t.values("dirm", &[("shift_axis", "observed".into()), ("magnitude", 0.0.into()), ("lambda", 0.0.into())], "test_mse");
        assert_eq!(ols, dirm0);
        assert_eq!(rep.plots.len(), 2);
    }

    #[test]
    fn report_shape() {
        let cfg = quick();
        let rep = run_fig1(&cfg).unwrap();
        // (ols + causal + 2 λ) × seeds × axes × shifts
        assert_eq!(rep.main().rows.len(), 4 * 2 * 2 * 2);
        assert_eq!(rep.table("summary").unwrap().rows.len(), 4 * 2 * 2);
    }

    fn population_mse(confounded: bool, axis: ShiftAxis, magnitude: f64, coefs: &[f64], intercept: f64) -> f64 {
        let iv = TestShift { kind: ShiftKind::Mean, magnitude }.intervention(axis);
        linear_predictor_mse(&intro_example_spec(confounded), &iv, coefs, intercept).unwrap()
    }

    #[test]
    fn large_shift_orderings_hold_in_population() {
        let spec = intro_example_spec(true);
        let ols = crate::scm::pooled_population_ols(&spec, &intro_training_environments()).unwrap();
        let c = ols.coefficients.to_vec();
        let causal = INTRO_CAUSAL_COEFFICIENTS;
        let h_ols = population_mse(true, ShiftAxis::Hidden, 5.0, &c, ols.intercept);
        let h_causal = population_mse(true, ShiftAxis::Hidden, 5.0, &causal, 0.0);
        assert!(h_ols < h_causal, "{h_ols} vs {h_causal}");
        let o_ols = population_mse(true, ShiftAxis::Observed, 5.0, &c, ols.intercept);
        let o_causal = population_mse(true, ShiftAxis::Observed, 5.0, &causal, 0.0);
        assert!(o_causal < o_ols, "{o_causal} vs {o_ols}");
        // Var(3H + E_Y) whatever the observed shift.
        assert!((o_causal - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        let cfg = Fig1Config { lambdas: vec![-1.0], ..quick() };
        assert!(matches!(run_fig1(&cfg), Err(ExperimentError::InvalidGrid(_))));
        let cfg = Fig1Config { seeds: vec![], ..quick() };
        assert!(matches!(run_fig1(&cfg), Err(ExperimentError::InvalidGrid(_))));
    }
}
