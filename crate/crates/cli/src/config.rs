//! Run configuration. Every default is listed in `config/reference.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dirm_core::experiments::{ApproxConfig, CoeffConfig, Fig1Config, FeatureConfig, StabilityConfig, Theorem1Config};
use dirm_core::model::{Link, MAX_HIDDEN_LAYERS};
use dirm_core::objectives::{ObjectiveError, ObjectiveSpec};
use dirm_core::presets::{intro_example_spec, intro_variance_environment};
use dirm_core::scm::{validate_and_order, Intervention, ScmSpec};
use dirm_core::trainer::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    /// `line`/`column` are 1-based; `None` when the file could not be read.
    #[error("{}: {message}", location(.path, .position))]
    Parse { path: String, position: Option<(usize, usize)>, message: String },
    #[error("invalid `{key}`: {reason}")]
    Validation { key: String, reason: String },
}

fn location(path: &str, position: &Option<(usize, usize)>) -> String {
    match position {
        Some((line, column)) => format!("{path}:{line}:{column}"),
        None => path.to_string(),
    }
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation { key: key.into(), reason: reason.into() }
}

pub const SCM_PRESETS: [&str; 2] = ["intro", "intro-unconfounded"];

/// Exactly one of `preset` and `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for ScmSource {
    fn default() -> Self {
        Self { preset: Some("intro".into()), path: None }
    }
}

impl ScmSource {
    pub fn load(&self) -> Result<ScmSpec, ConfigError> {
        match (&self.preset, &self.path) {
            (Some(p), None) => match p.as_str() {
                "intro" => Ok(intro_example_spec(true)),
                "intro-unconfounded" => Ok(intro_example_spec(false)),
                other => Err(invalid("scm.preset", format!("unknown preset `{other}`, expected one of {SCM_PRESETS:?}"))),
            },
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid("scm.path", format!("cannot read {}: {e}", path.display())))?;
                let spec = ScmSpec::from_toml_str(&text).map_err(|e| invalid("scm.path", e.to_string()))?;
                validate_and_order(&spec).map_err(|e| invalid("scm.path", e.to_string()))?;
                Ok(spec)
            }
            _ => Err(invalid("scm", "set exactly one of `preset` and `path`")),
        }
    }
}

/// One training environment: mean shifts and standard-deviation
/// multipliers of named exogenous variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub shifts: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scales: BTreeMap<String, f64>,
}

impl EnvironmentConfig {
    pub fn intervention(&self) -> Intervention {
        Intervention { shifts: self.shifts.clone(), scales: self.scales.clone() }
    }

    fn from_intervention(id: &str, iv: Intervention) -> Self {
        Self { id: id.into(), shifts: iv.shifts, scales: iv.scales }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// ELU layer widths, at most two.
    pub hidden: Vec<usize>,
    pub link: Link,
    pub fit_intercept: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: Vec::new(), link: Link::Identity, fit_intercept: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPresets {
    pub fig1: Fig1Config,
    pub stability: StabilityConfig,
    pub coeffs: CoeffConfig,
    pub theorem1: Theorem1Config,
    pub features: FeatureConfig,
    pub approximation: ApproxConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scm: ScmSource,
    #[serde(rename = "intervention")]
    pub interventions: Vec<EnvironmentConfig>,
    pub n_per_env: usize,
    /// Seeds for `simulate` and `train`; experiments carry their own.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub model: ModelConfig,
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    pub experiment: ExperimentPresets,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scm: ScmSource::default(),
            interventions: vec![
                EnvironmentConfig::from_intervention("sigma2=1", intro_variance_environment(1.0)),
                EnvironmentConfig::from_intervention("sigma2=2", intro_variance_environment(2.0)),
            ],
            n_per_env: 10_000,
            seeds: vec![0],
            output: PathBuf::from("runs"),
            model: ModelConfig::default(),
            objective: ObjectiveSpec::default(),
            train: TrainConfig::default(),
            experiment: ExperimentPresets::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = self.scm.load()?;
        if self.interventions.is_empty() {
            return Err(invalid("intervention", "at least one environment is required"));
        }
        for (k, env) in self.interventions.iter().enumerate() {
            if self.interventions[..k].iter().any(|e| e.id == env.id) {
                return Err(invalid(format!("intervention[{k}].id"), format!("duplicate id `{}`", env.id)));
            }
            env.intervention().validate(&spec).map_err(|e| invalid(format!("intervention[{k}]"), e.to_string()))?;
        }
        if self.n_per_env == 0 {
            return Err(invalid("n_per_env", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.output.is_file() {
            return Err(invalid("output", format!("{} is a file", self.output.display())));
        }
        if self.model.hidden.len() > MAX_HIDDEN_LAYERS || self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", format!("at most {MAX_HIDDEN_LAYERS} layers of width >= 1")));
        }
        self.objective.validate().map_err(|e| match e {
            ObjectiveError::InvalidSpec { key, reason } => invalid(key, reason),
            other => invalid("objective", other.to_string()),
        })?;
        self.train.validate().map_err(|e| match e {
            TrainError::InvalidConfig { key, reason } => invalid(key, reason),
            other => invalid("train", other.to_string()),
        })?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates `text`; `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.into(),
        position: e.span().map(|s| line_column(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        position: None,
        message: format!("cannot read: {e}"),
    })?;
    parse_config(&text, &path.display().to_string())
}

/// 1-based line and column (in characters) of byte offset `at`.
fn line_column(text: &str, at: usize) -> (usize, usize) {
    let before = &text[..at.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dirm_core::trainer::Optimizer;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = parse_config("", "inline").unwrap();
        assert_eq!(cfg.train.optimizer, Optimizer::adam());
        assert_eq!(cfg.train.learning_rate, 1e-2);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn negative_lambda_names_the_key() {
        let err = parse_config("[objective]\nkind = \"dirm\"\nlambda = -1.0\n", "inline").unwrap_err();
        assert!(matches!(&err, ConfigError::Validation { key, .. } if key == "objective.lambda"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let err = parse_config("n_per_env = 10\nseeds = [1,\n", "inline").unwrap_err();
        let ConfigError::Parse { position: Some((line, _)), .. } = err else { panic!("{err:?}") };
        assert_eq!(line, 2);
        let err = parse_config("[train]\nepochz = 3\n", "inline").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { position: Some((2, 1)), .. }), "{err:?}");
    }

    #[test]
    fn missing_file_is_a_parse_error() {
        let err = load_config(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { position: None, .. }));
    }

    #[test]
    fn scm_source_must_be_unique() {
        let err = parse_config("[scm]\npreset = \"intro\"\npath = \"x.toml\"\n", "inline").unwrap_err();
        assert!(matches!(&err, ConfigError::Validation { key, .. } if key == "scm"));
        let err = parse_config("[scm]\npreset = \"nope\"\n", "inline").unwrap_err();
        assert!(matches!(&err, ConfigError::Validation { key, .. } if key == "scm.preset"));
    }

    #[test]
    fn interventions_are_checked_against_the_scm() {
        let text = "[[intervention]]\nid = \"a\"\nshifts = { E_Q = 1.0 }\n";
        let err = parse_config(text, "inline").unwrap_err();
        assert!(matches!(&err, ConfigError::Validation { key, .. } if key == "intervention[0]"), "{err}");
    }

    #[test]
    fn line_column_examples() {
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
        assert_eq!(line_column("", 0), (1, 1));
    }
}
