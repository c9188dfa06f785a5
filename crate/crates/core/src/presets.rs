//! Built-in structural causal models.

use indexmap::IndexMap;

use crate::scm::{ExogenousSpec, Intervention, Role, ScmSpec, StructuralEquation};

/// Observed feature names of the introductory model, in column order.
pub const INTRO_FEATURES: [&str; 2] = ["X1", "X2"];

/// Structural coefficients of the target on `(X1, X2)`.
pub const INTRO_CAUSAL_COEFFICIENTS: [f64; 2] = [0.0, 1.0];

/// Exogenous sources that drive the observed features.
pub const INTRO_FEATURE_NOISE: [&str; 2] = ["E_X1", "E_X2"];

fn eq(target: &str, parents: &[(&str, f64)], exogenous: &str) -> StructuralEquation {
    StructuralEquation {
        target: target.into(),
        parents: parents.iter().map(|(p, c)| (p.to_string(), *c)).collect(),
        exogenous: exogenous.into(),
    }
}

/// The introductory example:
///
/// ```text
/// H  := E_H
/// X2 := -H + E_X2
/// Y  := X2 + 3H + E_Y
/// X1 := Y + X2 + E_X1
/// ```
///
/// All exogenous sources are standard normal. With `confounded = false`
/// the variance of `E_H` is zero, so `H ≡ 0` and every path through `H` is
/// inert. `X1` and `X2` are observed, `H` is hidden and `Y` is the target.
pub fn intro_example_spec(confounded: bool) -> ScmSpec {
    let exogenous = vec![
        ExogenousSpec { name: "E_H".into(), mean: 0.0, variance: if confounded { 1.0 } else { 0.0 } },
        ExogenousSpec { name: "E_X2".into(), mean: 0.0, variance: 1.0 },
        ExogenousSpec { name: "E_Y".into(), mean: 0.0, variance: 1.0 },
        ExogenousSpec { name: "E_X1".into(), mean: 0.0, variance: 1.0 },
    ];
    let equations = vec![
        eq("X2", &[("H", -1.0)], "E_X2"),
        eq("Y", &[("X2", 1.0), ("H", 3.0)], "E_Y"),
        eq("X1", &[("Y", 1.0), ("X2", 1.0)], "E_X1"),
        eq("H", &[], "E_H"),
    ];
    let mut roles = IndexMap::new();
    roles.insert("X1".to_string(), Role::Observed);
    roles.insert("X2".to_string(), Role::Observed);
    roles.insert("H".to_string(), Role::Hidden);
    roles.insert("Y".to_string(), Role::Target);
    ScmSpec { exogenous, equations, roles }
}

/// Environment whose feature noise `E_X1, E_X2` has variance `sigma2`.
pub fn intro_variance_environment(sigma2: f64) -> Intervention {
    INTRO_FEATURE_NOISE
        .iter()
        .fold(Intervention::none(), |iv, name| iv.scale(*name, sigma2.sqrt()))
}

/// The two training environments of the introductory example
/// (`σ² = 1` and `σ² = 2`).
pub fn intro_training_environments() -> [Intervention; 2] {
    [intro_variance_environment(1.0), intro_variance_environment(2.0)]
}

/// Which exogenous group a shift acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ShiftTarget {
    /// Both feature noises `E_X1` and `E_X2`.
    #[serde(rename = "E_X")]
    FeatureNoise,
    #[serde(rename = "E_H")]
    Hidden,
    #[serde(rename = "E_Y")]
    TargetNoise,
}

impl ShiftTarget {
    pub const ALL: [ShiftTarget; 3] = [Self::FeatureNoise, Self::Hidden, Self::TargetNoise];

    pub fn exogenous(self) -> &'static [&'static str] {
        match self {
            Self::FeatureNoise => &INTRO_FEATURE_NOISE,
            Self::Hidden => &["E_H"],
            Self::TargetNoise => &["E_Y"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::FeatureNoise => "E_X",
            Self::Hidden => "E_H",
            Self::TargetNoise => "E_Y",
        }
    }

    /// Shifts the mean of every source in the group by `by`.
    pub fn mean_shift(self, by: f64) -> Intervention {
        self.exogenous().iter().fold(Intervention::none(), |iv, n| iv.shift(*n, by))
    }

    /// Multiplies the variance of every source in the group by `factor`.
    pub fn variance_scale(self, factor: f64) -> Intervention {
        self.exogenous().iter().fold(Intervention::none(), |iv, n| iv.scale(*n, factor.sqrt()))
    }
}

impl std::str::FromStr for ShiftTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "E_X" | "x" | "X" | "observed" => Ok(Self::FeatureNoise),
            "E_H" | "h" | "H" | "hidden" => Ok(Self::Hidden),
            "E_Y" | "y" | "Y" | "target" => Ok(Self::TargetNoise),
            other => Err(format!("unknown shift target `{other}` (expected E_X, E_H or E_Y)")),
        }
    }
}
