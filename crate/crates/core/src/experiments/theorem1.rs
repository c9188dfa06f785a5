//! Exact affine worst case over random linear models and environments.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EnvironmentData;
use crate::grad::loss;
use crate::model::{Link, Model};
use crate::objectives::{affine_sup, mean, vertex_sup};
use crate::rng;

use super::{ExperimentError, ExperimentReport, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Config {
    /// Trial `t` uses `n_envs[t % len]` environments.
    pub n_envs: Vec<usize>,
    pub eta_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub rows_per_env: usize,
    pub n_features: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self { n_envs: vec![2, 3, 4], eta_grid: vec![0.0, 0.5, 1.0, 5.0], trials: 1000, seed: 0, rows_per_env: 32, n_features: 3 }
    }
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_env(r: &mut rng::Rng, rows: usize, d: usize, truth: &[f64], id: usize) -> EnvironmentData {
    let shift: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let scale: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
    let noise = r.random_range(0.1..1.5);
    let x = Array2::from_shape_fn((rows, d), |(_, j)| shift[j] + scale[j] * normal(r));
    let y = Array1::from_shape_fn(rows, |i| (0..d).map(|j| truth[j] * x[[i, j]]).sum::<f64>() + noise * normal(r));
    EnvironmentData::new(x, y, format!("env{id}"), (0..d).map(|j| format!("x{j}")).collect()).expect("finite draws")
}

/// One row per (trial, η). Axes: `trial, n_envs, eta`; metrics:
/// `affine_sup, vertex_sup, mean_loss, max_loss, scaled_gap, rel_err_vertex,
/// rel_err_identity` where `scaled_gap = (1+nη)(max − mean)` and both
/// relative errors are normalized by `(1+nη)·max_e |L_e|`.
pub fn run_theorem1_check(cfg: &Theorem1Config) -> Result<ExperimentReport, ExperimentError> {
    if cfg.trials == 0 || cfg.n_envs.is_empty() || cfg.n_envs.contains(&0) || cfg.eta_grid.is_empty() {
        return Err(ExperimentError::InvalidGrid("need trials >= 1, non-empty n_envs >= 1 and an eta grid".into()));
    }
    if cfg.rows_per_env == 0 || cfg.n_features == 0 {
        return Err(ExperimentError::InvalidGrid("rows_per_env and n_features must be >= 1".into()));
    }
    let d = cfg.n_features;
    let mut table = Table::new(
        "report",
        &["trial", "n_envs", "eta"],
        &["affine_sup", "vertex_sup", "mean_loss", "max_loss", "scaled_gap", "rel_err_vertex", "rel_err_identity"],
    );
    for trial in 0..cfg.trials {
        let mut r = rng::sub_rng(cfg.seed, trial as u64);
        let n = cfg.n_envs[trial % cfg.n_envs.len()];
        let truth: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let weights: Vec<f64> = (0..d).map(|_| 2.0 * normal(&mut r)).collect();
        let model = Model::linear(&weights, normal(&mut r), Link::Identity);
        let losses: Vec<f64> = (0..n)
            .map(|e| loss(&model, &random_env(&mut r, cfg.rows_per_env, d, &truth, e)))
            .collect::<Result<_, _>>()?;
        let m = mean(&losses);
        let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_abs = losses.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        for &eta in &cfg.eta_grid {
            let sup = affine_sup(&losses, eta)?;
            let vertex = vertex_sup(&losses, eta)?;
            let k = 1.0 + n as f64 * eta;
            let norm = (k * max_abs).max(f64::MIN_POSITIVE);
            let gap = k * (max - m);
            table.push(
                "affine",
                Some(cfg.seed),
                vec![trial.into(), n.into(), eta.into()],
                vec![sup, vertex, m, max, gap, (sup - vertex).abs() / norm, ((sup - m) - gap).abs() / norm],
            );
        }
    }
    let mut report = ExperimentReport::new("theorem1", &[cfg.seed], cfg);
    report.tables.push(table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_holds_and_sup_grows_with_eta() {
        let cfg = Theorem1Config { trials: 30, ..Theorem1Config::default() };
        let rep = run_theorem1_check(&cfg).unwrap();
        let t = rep.main();
        assert!(t.values("affine", &[], "rel_err_vertex").iter().all(|e| *e < 1e-10));
        assert!(t.values("affine", &[], "rel_err_identity").iter().all(|e| *e < 1e-10));
        for trial in 0..30usize {
            let sups = t.values("affine", &[("trial", trial.into())], "affine_sup");
            assert!(sups.windows(2).all(|w| w[0] <= w[1]));
            let at_zero = t.values("affine", &[("trial", trial.into()), ("eta", 0.0.into())], "affine_sup")[0];
            let max = t.values("affine", &[("trial", trial.into()), ("eta", 0.0.into())], "max_loss")[0];
            assert_eq!(at_zero, max);
        }
    }

    #[test]
    fn zero_trials_is_rejected() {
        let cfg = Theorem1Config { trials: 0, ..Theorem1Config::default() };
        assert!(run_theorem1_check(&cfg).is_err());
    }
}
