//! Feature-selection reproducibility across pairs of synthetic studies.
//!
//! Generator: every study shares a few stable features that cause the
//! binary label with fixed coefficients. Each study also has its own hidden
//! confounder that moves the label and a study-specific subset of the
//! remaining features, so those features predict the label inside the study
//! with a sign and strength that change from study to study. Features are
//! standardized per study.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EnvironmentData;
use crate::model::{sigmoid, Layout, Link, Model};
use crate::objectives::{DirmForm, NormMode, ObjectiveKind, ObjectiveSpec};
use crate::rng;
use crate::trainer::{pooled_validation_split, train, Optimizer, TrainConfig};

use super::{check_seeds, median, ExperimentError, ExperimentReport, Table};

const PAIR_TAG: u64 = 0xFA11;
const INIT_TAG: u64 = 0xFA12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyGenerator {
    pub n_features: usize,
    /// Label coefficients of the stable features `0..len`.
    pub stable_coefficients: Vec<f64>,
    pub spurious_per_study: usize,
    pub rows_per_study: usize,
    /// Magnitude of the confounder's effect on the label logit; the sign is
    /// drawn per study.
    pub confounder_effect: f64,
    /// Loadings of spurious features on the confounder are drawn from
    /// `±[lo, hi]`.
    pub proxy_loading: [f64; 2],
    pub proxy_noise: f64,
}

impl Default for StudyGenerator {
    fn default() -> Self {
        Self {
            n_features: 20,
            stable_coefficients: vec![1.0, -0.9, 0.8, -0.7, 0.6],
            spurious_per_study: 5,
            rows_per_study: 600,
            confounder_effect: 1.5,
            proxy_loading: [0.8, 1.2],
            proxy_noise: 0.5,
        }
    }
}

impl StudyGenerator {
    pub fn n_stable(&self) -> usize {
        self.stable_coefficients.len()
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let pool = self.n_features.saturating_sub(self.n_stable());
        if self.n_stable() > self.n_features || self.spurious_per_study > pool || self.rows_per_study < 2 {
            return Err(ExperimentError::InvalidGrid(
                "generator needs stable + spurious <= n_features and at least 2 rows per study".into(),
            ));
        }
        Ok(())
    }
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// `n_studies` standardized logistic studies; study `s` draws from the
/// sub-stream `(seed, s)`.
pub fn generate_studies(gen: &StudyGenerator, n_studies: usize, seed: u64) -> Result<Vec<EnvironmentData>, ExperimentError> {
    gen.validate()?;
    let d = gen.n_features;
    let k = gen.n_stable();
    let names: Vec<String> = (0..d).map(|j| format!("f{j:02}")).collect();
    (0..n_studies)
        .map(|s| {
            let mut r = rng::sub_rng(seed, s as u64);
            let mut pool: Vec<usize> = (k..d).collect();
            pool.shuffle(&mut r);
            let spurious = &pool[..gen.spurious_per_study];
            let loadings: Vec<f64> = spurious
                .iter()
                .map(|_| {
                    let m = r.random_range(gen.proxy_loading[0]..=gen.proxy_loading[1]);
                    if r.random_bool(0.5) { m } else { -m }
                })
                .collect();
            let effect = if r.random_bool(0.5) { gen.confounder_effect } else { -gen.confounder_effect };
            let n = gen.rows_per_study;
            let mut x = Array2::zeros((n, d));
            let mut y = Array1::zeros(n);
            for i in 0..n {
                for j in 0..d {
                    x[[i, j]] = normal(&mut r);
                }
                let c = normal(&mut r);
                for (&j, &l) in spurious.iter().zip(&loadings) {
                    x[[i, j]] = l * c + gen.proxy_noise * normal(&mut r);
                }
                let logit: f64 = (0..k).map(|j| gen.stable_coefficients[j] * x[[i, j]]).sum::<f64>() + effect * c;
                y[i] = f64::from(u8::from(r.random::<f64>() < sigmoid(logit)));
            }
            Ok(EnvironmentData::new(x, y, format!("study{s:02}"), names.clone())
                .expect("finite draws")
                .standardized())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub generator: StudyGenerator,
    pub n_studies: usize,
    pub pairs: usize,
    /// DIRM keeps a feature only if it is significant for every λ here.
    pub lambda_grid: Vec<f64>,
    pub top_k: usize,
    /// `|coef| >=` this after per-study standardization.
    pub threshold: f64,
    /// Fraction of runs a feature must be selected in to count.
    pub runs_level: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub dirm_form: DirmForm,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            generator: StudyGenerator::default(),
            n_studies: 15,
            pairs: 100,
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            top_k: 10,
            threshold: 0.1,
            runs_level: 0.8,
            seeds: vec![0],
            epochs: 200,
            learning_rate: 5e-2,
            warmup_epochs: 50,
            dirm_form: DirmForm::Gradient,
        }
    }
}

impl FeatureConfig {
    fn validate(&self) -> Result<(), ExperimentError> {
        self.generator.validate()?;
        let all_pairs = self.n_studies * self.n_studies.saturating_sub(1) / 2;
        if self.top_k == 0 || self.top_k > self.generator.n_features {
            return Err(ExperimentError::InvalidGrid(format!(
                "top_k must be in 1..={} (feature count), got {}",
                self.generator.n_features, self.top_k
            )));
        }
        if self.pairs == 0 || self.pairs > all_pairs {
            return Err(ExperimentError::InvalidGrid(format!("pairs must be in 1..={all_pairs}, got {}", self.pairs)));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(ExperimentError::InvalidGrid("lambda_grid must be non-empty with finite values >= 0".into()));
        }
        if !(self.runs_level > 0.0 && self.runs_level <= 1.0) {
            return Err(ExperimentError::InvalidGrid("runs_level must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
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

    fn objective(&self, kind: ObjectiveKind, lambda: f64, mode: NormMode) -> ObjectiveSpec {
        ObjectiveSpec {
            warmup_epochs: self.warmup_epochs,
            dirm_form: self.dirm_form,
            dirm_norm_mode: mode,
            ..ObjectiveSpec::with_kind(kind, lambda)
        }
    }
}

fn fit_logistic(envs: &[EnvironmentData], objective: &ObjectiveSpec, cfg: &TrainConfig) -> Result<Model, ExperimentError> {
    let d = envs[0].n_features();
    let init = Model::xavier(&Layout::new(d, &[], Link::Logistic)?, rng::derive_seed(cfg.seed, INIT_TAG))?;
    Ok(train(&init, envs, objective, cfg)?.0)
}

/// Percentage of rows whose thresholded probability equals the label.
pub fn accuracy(model: &Model, env: &EnvironmentData) -> Result<f64, ExperimentError> {
    let p = model.forward(&env.x)?;
    let hits = p.iter().zip(env.y.iter()).filter(|(p, y)| f64::from(u8::from(**p >= 0.5)) == **y).count();
    Ok(100.0 * hits as f64 / env.n_samples() as f64)
}

/// Up to `k` features with `score >= threshold`, ranked by score
/// (ties by index).
fn top_features(scores: &[f64], threshold: f64, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= threshold).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Trains ERM and DIRM (every λ of the grid) per study pair. ERM selects
/// the top-k features by `|coef|`; DIRM selects by `min_λ |coef_λ|`. Both
/// keep only features at or above `threshold`.
///
/// Tables: `report` (one row per run and λ: `coef_fXX…, accuracy`),
/// `selection` (runs in which each feature was selected) and `summary`
/// (`intersection_count`: features selected in at least
/// `ceil(runs_level · runs)` runs; `planted_recovery_min`: smallest
/// selection fraction over the stable features).
pub fn run_feature_stability(cfg: &FeatureConfig) -> Result<ExperimentReport, ExperimentError> {
    check_seeds(&cfg.seeds)?;
    cfg.validate()?;
    let d = cfg.generator.n_features;
    let coef_names: Vec<String> = (0..d).map(|j| format!("coef_f{j:02}")).collect();
    let mut metric_names: Vec<&str> = coef_names.iter().map(String::as_str).collect();
    metric_names.push("accuracy");
    let mut runs = Table::new("report", &["pair", "study_a", "study_b", "lambda"], &metric_names);
    let mut selection = Table::new("selection", &["feature", "planted"], &["runs_selected", "fraction"]);
    let mut summary = Table::new("summary", &["runs"], &["intersection_count", "planted_recovery_min"]);

    for &seed in &cfg.seeds {
        let studies = generate_studies(&cfg.generator, cfg.n_studies, seed)?;
        let mut pairs: Vec<(usize, usize)> =
            (0..cfg.n_studies).flat_map(|a| (a + 1..cfg.n_studies).map(move |b| (a, b))).collect();
        pairs.shuffle(&mut rng::sub_rng(seed, PAIR_TAG));
        pairs.truncate(cfg.pairs);

        let lambdas: Vec<Option<f64>> = std::iter::once(None).chain(cfg.lambda_grid.iter().map(|&l| Some(l))).collect();
        let cells: Vec<(usize, Option<f64>)> =
            (0..pairs.len()).flat_map(|p| lambdas.iter().map(move |&l| (p, l))).collect();
        let fits: Vec<(Vec<f64>, f64)> = cells
            .par_iter()
            .map(|&(p, lambda)| {
                let (a, b) = pairs[p];
                let envs = [studies[a].clone(), studies[b].clone()];
                let run_seed = rng::derive_seed(seed, p as u64);
                let objective = match lambda {
                    None => cfg.objective(ObjectiveKind::Erm, 0.0, NormMode::Point),
                    Some(l) => cfg.objective(ObjectiveKind::Dirm, l, NormMode::Point),
                };
                let model = fit_logistic(&envs, &objective, &cfg.train_config(run_seed))?;
                let pooled = EnvironmentData::concat(&[&envs[0], &envs[1]], "pooled").expect("same features");
                Ok((model.head_weight.to_vec(), accuracy(&model, &pooled)?))
            })
            .collect::<Result<_, ExperimentError>>()?;

        let mut erm_counts = vec![0usize; d];
        let mut dirm_counts = vec![0usize; d];
        let per_pair = lambdas.len();
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let block = &fits[p * per_pair..(p + 1) * per_pair];
            for (&lambda, (coefs, acc)) in lambdas.iter().zip(block) {
                let mut m = coefs.clone();
                m.push(*acc);
                let (name, l) = match lambda {
                    None => ("erm", f64::NAN),
                    Some(l) => ("dirm", l),
                };
                runs.push(name, Some(seed), vec![p.into(), a.into(), b.into(), l.into()], m);
            }
            let erm_scores: Vec<f64> = block[0].0.iter().map(|c| c.abs()).collect();
            let dirm_scores: Vec<f64> = (0..d)
                .map(|j| block[1..].iter().map(|(c, _)| c[j].abs()).fold(f64::INFINITY, f64::min))
                .collect();
            for j in top_features(&erm_scores, cfg.threshold, cfg.top_k) {
                erm_counts[j] += 1;
            }
            for j in top_features(&dirm_scores, cfg.threshold, cfg.top_k) {
                dirm_counts[j] += 1;
            }
        }
        let n_runs = pairs.len();
        let level = (cfg.runs_level * n_runs as f64 - 1e-9).ceil() as usize;
        for (name, counts) in [("erm", &erm_counts), ("dirm", &dirm_counts)] {
            for (j, &c) in counts.iter().enumerate() {
                let planted = usize::from(j < cfg.generator.n_stable());
                selection.push(name, Some(seed), vec![format!("f{j:02}").into(), planted.into()], vec![c as f64, c as f64 / n_runs as f64]);
            }
            let intersection = counts.iter().filter(|&&c| c >= level).count();
            let planted_min = counts[..cfg.generator.n_stable()].iter().map(|&c| c as f64 / n_runs as f64).fold(f64::INFINITY, f64::min);
            summary.push(name, Some(seed), vec![n_runs.into()], vec![intersection as f64, planted_min]);
        }
    }
    let mut report = ExperimentReport::new("features", &cfg.seeds, cfg);
    report.tables = vec![runs, selection, summary];
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxConfig {
    pub features: FeatureConfig,
    pub lambda: f64,
    pub validation_fraction: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig { seeds: (0..10).collect(), ..FeatureConfig::default() },
            lambda: 1.0,
            validation_fraction: 0.2,
        }
    }
}

/// Point-mode against scaled-grid DIRM on one study pair per seed.
/// Table `report`: objectives `dirm_point`, `dirm_grid`; metric
/// `val_accuracy` in percent on a pooled held-out split of both studies.
/// Table `summary`: per-seed `abs_diff` and its median (`seed = median`).
pub fn run_penalty_approximation(cfg: &ApproxConfig) -> Result<ExperimentReport, ExperimentError> {
    let f = &cfg.features;
    check_seeds(&f.seeds)?;
    f.generator.validate()?;
    let modes = [("dirm_point", NormMode::Point), ("dirm_grid", NormMode::ScaledGrid)];
    let cells: Vec<(u64, usize)> = f.seeds.iter().flat_map(|&s| (0..modes.len()).map(move |m| (s, m))).collect();
    let accs: Vec<f64> = cells
        .par_iter()
        .map(|&(seed, m)| {
            let studies = generate_studies(&f.generator, 2, seed)?;
            let (train_envs, validation) = pooled_validation_split(&studies, cfg.validation_fraction, seed)?;
            let objective = f.objective(ObjectiveKind::Dirm, cfg.lambda, modes[m].1);
            let model = fit_logistic(&train_envs, &objective, &f.train_config(seed))?;
            accuracy(&model, &validation)
        })
        .collect::<Result<_, ExperimentError>>()?;
    let mut table = Table::new("report", &["lambda"], &["val_accuracy"]);
    let mut summary = Table::new("summary", &["lambda"], &["abs_diff"]);
    let mut diffs = Vec::new();
    for (k, &seed) in f.seeds.iter().enumerate() {
        let pair = &accs[k * modes.len()..(k + 1) * modes.len()];
        for ((name, _), acc) in modes.iter().zip(pair) {
            table.push(name, Some(seed), vec![cfg.lambda.into()], vec![*acc]);
        }
        let diff = (pair[0] - pair[1]).abs();
        diffs.push(diff);
        summary.push("point_vs_grid", Some(seed), vec![cfg.lambda.into()], vec![diff]);
    }
    summary.push("point_vs_grid", None, vec![cfg.lambda.into()], vec![median(&diffs)]);
    let mut report = ExperimentReport::new("approximation", &f.seeds, cfg);
    report.tables = vec![table, summary];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureConfig {
        FeatureConfig {
            generator: StudyGenerator { rows_per_study: 200, ..StudyGenerator::default() },
            n_studies: 4,
            pairs: 3,
            epochs: 60,
            warmup_epochs: 10,
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn studies_are_standardized_and_seeded() {
        let g = StudyGenerator { rows_per_study: 300, ..StudyGenerator::default() };
        let a = generate_studies(&g, 3, 5).unwrap();
        assert_eq!(a, generate_studies(&g, 3, 5).unwrap());
        for s in &a {
            for col in s.x.columns() {
                let m = col.sum() / 300.0;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 300.0;
                assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
            }
            assert!(s.y.iter().all(|y| *y == 0.0 || *y == 1.0));
        }
    }

    #[test]
    fn zero_lambda_grid_selects_like_erm() {
        let cfg = FeatureConfig { lambda_grid: vec![0.0], ..tiny() };
        let rep = run_feature_stability(&cfg).unwrap();
        let sel = rep.table("selection").unwrap();
        assert_eq!(sel.values("erm", &[], "runs_selected"), sel.values("dirm", &[], "runs_selected"));
    }

    #[test]
    fn top_k_beyond_feature_count_is_rejected() {
        let cfg = FeatureConfig { top_k: 21, ..tiny() };
        assert!(matches!(run_feature_stability(&cfg), Err(ExperimentError::InvalidGrid(_))));
    }

    #[test]
    fn ranking_respects_threshold_and_ties() {
        assert_eq!(top_features(&[0.5, 0.05, 0.5, 0.2], 0.1, 2), vec![0, 2]);
        assert_eq!(top_features(&[0.05, 0.01], 0.1, 5), Vec::<usize>::new());
    }
}
