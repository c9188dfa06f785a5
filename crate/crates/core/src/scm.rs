//! Linear-Gaussian additive structural causal models.
//!
//! A model is a list of structural equations `V := Σ c_p · parent_p + E_V`
//! over endogenous variables, each driven by one exogenous Gaussian source
//! with unit loading. Environments are produced by shifting the mean or
//! scaling the standard deviation of exogenous sources; the equations
//! themselves never change.
//!
//! Every sample variance and covariance in this crate uses the population
//! convention (denominator `n`).

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EnvironmentData};
use crate::rng;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("structural equations contain a cycle through `{0}`")]
    CyclicGraph(String),
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("name `{0}` is declared more than once")]
    DuplicateName(String),
    #[error("equation for `{0}` lists itself as a parent")]
    SelfLoop(String),
    #[error("exogenous `{name}` has invalid variance {variance}")]
    InvalidVariance { name: String, variance: f64 },
    #[error("non-finite parameter in `{0}`")]
    NonFinite(String),
    #[error("expected exactly one target variable, found {0}")]
    TargetCount(usize),
    #[error("endogenous `{0}` has no role")]
    MissingRole(String),
    #[error("intervention scale for `{name}` must be > 0, got {scale}")]
    InvalidScale { name: String, scale: f64 },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("feature covariance is singular")]
    SingularCovariance,
    #[error("toml: {0}")]
    Toml(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSpec {
    pub name: String,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub variance: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEquation {
    pub target: String,
    #[serde(default)]
    pub parents: IndexMap<String, f64>,
    pub exogenous: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observed,
    Hidden,
    Target,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScmSpec {
    #[serde(rename = "exogenous", default)]
    pub exogenous: Vec<ExogenousSpec>,
    #[serde(rename = "equation", default)]
    pub equations: Vec<StructuralEquation>,
    /// Role of every endogenous variable. Declaration order fixes the
    /// column order of observed features.
    #[serde(default)]
    pub roles: IndexMap<String, Role>,
}

impl ScmSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ScmError> {
        toml::from_str(text).map_err(|e| ScmError::Toml(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec is always representable as toml")
    }

    /// Observed feature names in role declaration order (target excluded).
    pub fn feature_names(&self) -> Vec<String> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::Observed)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn target_name(&self) -> Option<&str> {
        self.roles.iter().find(|(_, r)| **r == Role::Target).map(|(n, _)| n.as_str())
    }

    fn exogenous_index(&self, name: &str) -> Option<usize> {
        self.exogenous.iter().position(|e| e.name == name)
    }

    /// Endogenous variables (in plan order) whose value depends on the
    /// exogenous source `name`.
    pub fn descendants_of_exogenous(&self, name: &str) -> Result<BTreeSet<String>, ScmError> {
        let plan = validate_and_order(self)?;
        let mut hit = BTreeSet::new();
        for &eq in &plan.order {
            let e = &self.equations[eq];
            if e.exogenous == name || e.parents.keys().any(|p| hit.contains(p)) {
                hit.insert(e.target.clone());
            }
        }
        Ok(hit)
    }
}

/// Per-exogenous mean shifts and standard-deviation multipliers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Intervention {
    #[serde(default)]
    pub shifts: BTreeMap<String, f64>,
    #[serde(default)]
    pub scales: BTreeMap<String, f64>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn shift(mut self, name: impl Into<String>, by: f64) -> Self {
        *self.shifts.entry(name.into()).or_insert(0.0) += by;
        self
    }

    pub fn scale(mut self, name: impl Into<String>, by: f64) -> Self {
        *self.scales.entry(name.into()).or_insert(1.0) *= by;
        self
    }

    pub fn validate(&self, spec: &ScmSpec) -> Result<(), ScmError> {
        for name in self.shifts.keys().chain(self.scales.keys()) {
            if spec.exogenous_index(name).is_none() {
                return Err(ScmError::UnknownName { kind: "exogenous", name: name.clone() });
            }
        }
        for (name, v) in &self.shifts {
            if !v.is_finite() {
                return Err(ScmError::NonFinite(name.clone()));
            }
        }
        for (name, &scale) in &self.scales {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(ScmError::InvalidScale { name: name.clone(), scale });
            }
        }
        Ok(())
    }

    /// Exogenous (mean, standard deviation) after the intervention.
    fn apply(&self, spec: &ScmSpec) -> Vec<(f64, f64)> {
        spec.exogenous
            .iter()
            .map(|e| {
                let mean = e.mean + self.shifts.get(&e.name).copied().unwrap_or(0.0);
                let sd = e.variance.sqrt() * self.scales.get(&e.name).copied().unwrap_or(1.0);
                (mean, sd)
            })
            .collect()
    }
}

/// Topological evaluation order over the equations of a validated spec.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPlan {
    /// Indices into `ScmSpec::equations`.
    pub order: Vec<usize>,
    /// Target names in evaluation order.
    pub names: Vec<String>,
}

pub fn validate_and_order(spec: &ScmSpec) -> Result<EvaluationPlan, ScmError> {
    let mut exo_names = BTreeSet::new();
    for e in &spec.exogenous {
        if !exo_names.insert(e.name.as_str()) {
            return Err(ScmError::DuplicateName(e.name.clone()));
        }
        if !e.mean.is_finite() {
            return Err(ScmError::NonFinite(e.name.clone()));
        }
        if !(e.variance >= 0.0 && e.variance.is_finite()) {
            return Err(ScmError::InvalidVariance { name: e.name.clone(), variance: e.variance });
        }
    }

    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, eq) in spec.equations.iter().enumerate() {
        if index.insert(eq.target.as_str(), i).is_some() || exo_names.contains(eq.target.as_str()) {
            return Err(ScmError::DuplicateName(eq.target.clone()));
        }
    }

    let mut graph = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = (0..spec.equations.len()).map(|i| graph.add_node(i)).collect();
    for (i, eq) in spec.equations.iter().enumerate() {
        if !exo_names.contains(eq.exogenous.as_str()) {
            return Err(ScmError::UnknownName { kind: "exogenous", name: eq.exogenous.clone() });
        }
        for (parent, coef) in &eq.parents {
            if parent == &eq.target {
                return Err(ScmError::SelfLoop(eq.target.clone()));
            }
            let Some(&p) = index.get(parent.as_str()) else {
                return Err(ScmError::UnknownName { kind: "endogenous", name: parent.clone() });
            };
            if !coef.is_finite() {
                return Err(ScmError::NonFinite(eq.target.clone()));
            }
            graph.add_edge(nodes[p], nodes[i], ());
        }
    }

    if !spec.equations.is_empty() || !spec.roles.is_empty() {
        for name in spec.roles.keys() {
            if !index.contains_key(name.as_str()) {
                return Err(ScmError::UnknownName { kind: "endogenous", name: name.clone() });
            }
        }
        for eq in &spec.equations {
            if !spec.roles.contains_key(&eq.target) {
                return Err(ScmError::MissingRole(eq.target.clone()));
            }
        }
        let targets = spec.roles.values().filter(|r| **r == Role::Target).count();
        if targets != 1 {
            return Err(ScmError::TargetCount(targets));
        }
    }

    let sorted = toposort(&graph, None)
        .map_err(|c| ScmError::CyclicGraph(spec.equations[graph[c.node_id()]].target.clone()))?;
    let order: Vec<usize> = sorted.into_iter().map(|n| graph[n]).collect();
    let names = order.iter().map(|&i| spec.equations[i].target.clone()).collect();
    Ok(EvaluationPlan { order, names })
}

/// Draws `n` joint samples under the intervention.
///
/// Exogenous source `k` (declaration order) reads standard normals from
/// sub-stream `k` of `seed`, so the output is a pure function of
/// `(spec, iv, n, seed)` and sources keep common random numbers across
/// interventions.
pub fn sample(
    spec: &ScmSpec,
    iv: &Intervention,
    n: usize,
    seed: u64,
) -> Result<EnvironmentData, ScmError> {
    if n == 0 {
        return Err(ScmError::EmptySample);
    }
    let plan = validate_and_order(spec)?;
    iv.validate(spec)?;
    let params = iv.apply(spec);

    let exo: Vec<Vec<f64>> = params
        .iter()
        .enumerate()
        .map(|(k, &(mean, sd))| {
            let mut r = rng::sub_rng(seed, k as u64);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    mean + sd * z
                })
                .collect()
        })
        .collect();

    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &eq_idx in &plan.order {
        let eq = &spec.equations[eq_idx];
        let src = spec.exogenous_index(&eq.exogenous).expect("validated");
        let mut col = exo[src].clone();
        for (parent, &coef) in &eq.parents {
            let pv = &values[parent.as_str()];
            for (c, p) in col.iter_mut().zip(pv) {
                *c += coef * p;
            }
        }
        values.insert(eq.target.as_str(), col);
    }

    let features = spec.feature_names();
    let target = spec.target_name().expect("validated target");
    let mut x = Array2::zeros((n, features.len()));
    for (j, f) in features.iter().enumerate() {
        for (i, v) in values[f.as_str()].iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let y = Array1::from(values[target].clone());
    Ok(EnvironmentData::new(x, y, format!("seed{seed}"), features)?)
}

/// Exact first and second moments of all endogenous variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// Endogenous names in evaluation order.
    pub names: Vec<String>,
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    /// `loadings[(v, k)]`: coefficient of exogenous source `k` in variable `v`.
    pub loadings: Array2<f64>,
}

impl Moments {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn variance(&self, name: &str) -> f64 {
        let i = self.index(name).expect("known variable");
        self.cov[(i, i)]
    }

    pub fn covariance(&self, a: &str, b: &str) -> f64 {
        self.cov[(self.index(a).expect("known variable"), self.index(b).expect("known variable"))]
    }

    pub fn mean_of(&self, name: &str) -> f64 {
        self.mean[self.index(name).expect("known variable")]
    }

    /// Mean and variance of the linear combination `Σ w_v V_v`.
    pub fn linear_combination(&self, weights: &[(usize, f64)]) -> (f64, f64) {
        let mean = weights.iter().map(|&(i, w)| w * self.mean[i]).sum();
        let mut var = 0.0;
        for &(i, wi) in weights {
            for &(j, wj) in weights {
                var += wi * wj * self.cov[(i, j)];
            }
        }
        (mean, var)
    }
}

/// Linear propagation of exogenous moments through the evaluation order.
pub fn analytic_moments(spec: &ScmSpec, iv: &Intervention) -> Result<Moments, ScmError> {
    let plan = validate_and_order(spec)?;
    iv.validate(spec)?;
    let params = iv.apply(spec);
    let n_exo = spec.exogenous.len();
    let n_endo = plan.order.len();

    let mut loadings = Array2::<f64>::zeros((n_endo, n_exo));
    let mut row_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (row, &eq_idx) in plan.order.iter().enumerate() {
        let eq = &spec.equations[eq_idx];
        loadings[(row, spec.exogenous_index(&eq.exogenous).expect("validated"))] += 1.0;
        for (parent, &coef) in &eq.parents {
            let prow = row_of[parent.as_str()];
            for k in 0..n_exo {
                loadings[(row, k)] += coef * loadings[(prow, k)];
            }
        }
        row_of.insert(eq.target.as_str(), row);
    }

    let exo_mean = Array1::from_iter(params.iter().map(|p| p.0));
    let exo_var = Array1::from_iter(params.iter().map(|p| p.1 * p.1));
    let mean = loadings.dot(&exo_mean);
    let scaled = &loadings * &exo_var.view().insert_axis(ndarray::Axis(0));
    let cov = scaled.dot(&loadings.t());
    Ok(Moments { names: plan.names, mean, cov, loadings })
}

/// Population least-squares fit of the target on all observed features.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub feature_names: Vec<String>,
    pub coefficients: Array1<f64>,
    pub intercept: f64,
}

/// Solves `Cov(X,X) b = Cov(X,y)` from the analytic moments.
pub fn population_ols(spec: &ScmSpec, iv: &Intervention) -> Result<OlsFit, ScmError> {
    pooled_population_ols(spec, std::slice::from_ref(iv))
}

/// Population least squares on the equal-weight mixture of environments.
pub fn pooled_population_ols(spec: &ScmSpec, ivs: &[Intervention]) -> Result<OlsFit, ScmError> {
    let features = spec.feature_names();
    let target = spec.target_name().ok_or(ScmError::TargetCount(0))?.to_owned();
    let d = features.len();
    // Second moments of (x, 1) and their cross moment with y, averaged over
    // mixture components.
    let mut gram = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut cross = DVector::<f64>::zeros(d + 1);
    let w = 1.0 / ivs.len() as f64;
    for iv in ivs {
        let m = analytic_moments(spec, iv)?;
        let idx: Vec<usize> = features
            .iter()
            .map(|f| m.index(f).expect("feature is endogenous"))
            .chain(std::iter::once(usize::MAX))
            .collect();
        let t = m.index(&target).expect("target is endogenous");
        let second = |a: usize, b: usize| -> f64 {
            match (a, b) {
                (usize::MAX, usize::MAX) => 1.0,
                (usize::MAX, j) | (j, usize::MAX) => m.mean[j],
                (i, j) => m.cov[(i, j)] + m.mean[i] * m.mean[j],
            }
        };
        for (r, &a) in idx.iter().enumerate() {
            for (c, &b) in idx.iter().enumerate() {
                gram[(r, c)] += w * second(a, b);
            }
            cross[r] += w * second(a, t);
        }
    }
    let sol = crate::linalg::solve_spd(&gram, &cross).ok_or(ScmError::SingularCovariance)?;
    Ok(OlsFit {
        feature_names: features,
        coefficients: Array1::from_iter(sol.iter().take(d).copied()),
        intercept: sol[d],
    })
}

/// Population mean squared error of `coefᵀx + intercept` for the target.
pub fn linear_predictor_mse(
    spec: &ScmSpec,
    iv: &Intervention,
    coefficients: &[f64],
    intercept: f64,
) -> Result<f64, ScmError> {
    let m = analytic_moments(spec, iv)?;
    let target = spec.target_name().ok_or(ScmError::TargetCount(0))?;
    let mut weights = vec![(m.index(target).expect("target is endogenous"), 1.0)];
    for (f, c) in spec.feature_names().iter().zip(coefficients) {
        weights.push((m.index(f).expect("feature is endogenous"), -c));
    }
    let (mean, var) = m.linear_combination(&weights);
    Ok(var + (mean - intercept).powi(2))
}
