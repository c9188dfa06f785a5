//! Training objectives, their penalties and the affine worst-case bound.
//!
//! All variances are population variances (denominator = number of
//! environments). Per-environment terms are always reduced in the order the
//! environments are given.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EnvironmentData;
use crate::grad::EnvEval;
use crate::model::{Link, Model, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid `{key}`: {reason}")]
    InvalidSpec { key: &'static str, reason: String },
    #[error("weights are not a probability vector")]
    NotOnSimplex,
    #[error("length mismatch: {0} weights, {1} losses")]
    LengthMismatch(usize, usize),
    #[error("need at least one loss")]
    Empty,
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Scalings of β probed by the grid approximation of the penalty.
pub const GRID_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Statistic of the per-environment β-gradients whose spread is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirmForm {
    /// `Var_e ‖g_e‖²`
    SquaredNorm,
    /// `Var_e ‖g_e‖`
    Norm,
    /// `(1/E) Σ_e ‖g_e − ḡ‖²`, the variance of the gradient vectors.
    Gradient,
}

impl DirmForm {
    pub const ALL: [DirmForm; 3] = [Self::SquaredNorm, Self::Norm, Self::Gradient];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Point,
    ScaledGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Dirm { form: DirmForm, mode: NormMode },
    Irm,
    Rex,
}

impl Penalty {
    pub fn value(&self, model: &Model, envs: &[EnvironmentData]) -> Result<f64, ModelError> {
        let evals = evaluate_all(model, envs)?;
        Ok(penalty_from_evals(self, model, envs, &evals, false)?.0)
    }

    /// Penalty value and its full flat gradient (`ParamVector` order).
    pub fn value_and_grad(&self, model: &Model, envs: &[EnvironmentData]) -> Result<(f64, Vec<f64>), ModelError> {
        let evals = evaluate_all(model, envs)?;
        let (v, g) = penalty_from_evals(self, model, envs, &evals, true)?;
        Ok((v, g.expect("requested")))
    }
}

fn evaluate_all<'a>(model: &Model, envs: &'a [EnvironmentData]) -> Result<Vec<EnvEval<'a>>, ModelError> {
    if envs.is_empty() {
        return Err(ModelError::NoEnvironments);
    }
    envs.iter().map(|e| EnvEval::new(model, e)).collect()
}

fn penalty_from_evals(
    penalty: &Penalty,
    model: &Model,
    envs: &[EnvironmentData],
    evals: &[EnvEval<'_>],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), ModelError> {
    match *penalty {
        Penalty::Dirm { form, mode: NormMode::Point } => Ok(dirm_point(model, evals, form, want_grad)),
        Penalty::Dirm { form, mode: NormMode::ScaledGrid } => {
            let k = GRID_SCALES.len() as f64;
            let mut value = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; model.layout().len()]);
            let beta = model.layout().beta_range();
            for c in GRID_SCALES {
                let (v, g) = if c == 1.0 {
                    dirm_point(model, evals, form, want_grad)
                } else {
                    let scaled = model.with_scaled_beta(c);
                    let ev = evaluate_all(&scaled, envs)?;
                    dirm_point(&scaled, &ev, form, want_grad)
                };
                value += v / k;
                if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        let chain = if beta.contains(&i) { c } else { 1.0 };
                        *a += chain * b / k;
                    }
                }
            }
            Ok((value, grad))
        }
        Penalty::Irm => {
            let mut value = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; model.layout().len()]);
            for ev in evals {
                let s = &ev.pass.scores;
                let r = ev.d1.dot(s) / ev.n();
                value += r * r;
                if let Some(acc) = grad.as_mut() {
                    let ds = (&ev.d2 * s + &ev.d1) * (2.0 * r / ev.n());
                    add(acc, &crate::grad::backprop(model, ev, &ds, None));
                }
            }
            Ok((value, grad))
        }
        Penalty::Rex => {
            let losses: Vec<f64> = evals.iter().map(|e| e.loss).collect();
            let mean = mean(&losses);
            let e = losses.len() as f64;
            let value = population_variance(&losses);
            let grad = want_grad.then(|| {
                let mut acc = vec![0.0; model.layout().len()];
                for ev in evals {
                    let w = 2.0 * (ev.loss - mean) / e;
                    if w != 0.0 {
                        for (a, b) in acc.iter_mut().zip(ev.grad_loss(model)) {
                            *a += w * b;
                        }
                    }
                }
                acc
            });
            Ok((value, grad))
        }
    }
}

fn add(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn dirm_point(model: &Model, evals: &[EnvEval<'_>], form: DirmForm, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let grads: Vec<Array1<f64>> = evals.iter().map(|e| e.grad_beta(model)).collect();
    let (value, dirs) = penalty_of_gradients_with_dirs(&grads, form);
    let grad = want_grad.then(|| {
        let mut acc = vec![0.0; model.layout().len()];
        for (ev, v) in evals.iter().zip(&dirs) {
            if v.iter().any(|x| *x != 0.0) {
                add(&mut acc, &ev.grad_directional(model, v.as_slice().expect("contiguous")));
            }
        }
        acc
    });
    (value, grad)
}

/// DIRM penalty of explicit per-environment β-gradients.
pub fn penalty_of_gradients(grads: &[Array1<f64>], form: DirmForm) -> f64 {
    penalty_of_gradients_with_dirs(grads, form).0
}

/// Value and `∂P/∂g_e` for every environment.
fn penalty_of_gradients_with_dirs(grads: &[Array1<f64>], form: DirmForm) -> (f64, Vec<Array1<f64>>) {
    let e = grads.len() as f64;
    match form {
        DirmForm::SquaredNorm | DirmForm::Norm => {
            let sq: Vec<f64> = grads.iter().map(|g| g.dot(g)).collect();
            let stat: Vec<f64> = match form {
                DirmForm::SquaredNorm => sq.clone(),
                _ => sq.iter().map(|s| s.sqrt()).collect(),
            };
            let m = mean(&stat);
            let value = population_variance(&stat);
            let dirs = grads
                .iter()
                .zip(&stat)
                .map(|(g, &t)| match form {
                    DirmForm::SquaredNorm => g * (4.0 * (t - m) / e),
                    _ if t > 0.0 => g * (2.0 * (t - m) / (e * t)),
                    _ => Array1::zeros(g.len()),
                })
                .collect();
            (value, dirs)
        }
        DirmForm::Gradient => {
            let mut centre = Array1::zeros(grads[0].len());
            for g in grads {
                centre += &(g / e);
            }
            let diffs: Vec<Array1<f64>> = grads.iter().map(|g| g - &centre).collect();
            let value = diffs.iter().map(|d| d.dot(d)).sum::<f64>() / e;
            let dirs = diffs.into_iter().map(|d| d * (2.0 / e)).collect();
            (value, dirs)
        }
    }
}

/// Population variance across environments of `‖∇_β L_e‖²` at the current β.
pub fn dirm_penalty(model: &Model, envs: &[EnvironmentData]) -> Result<f64, ModelError> {
    dirm_penalty_with(model, envs, DirmForm::SquaredNorm)
}

pub fn dirm_penalty_with(model: &Model, envs: &[EnvironmentData], form: DirmForm) -> Result<f64, ModelError> {
    Penalty::Dirm { form, mode: NormMode::Point }.value(model, envs)
}

/// Mean of the point penalty over the heads `c·β`, `c ∈ GRID_SCALES`.
pub fn dirm_penalty_grid(model: &Model, envs: &[EnvironmentData], form: DirmForm) -> Result<f64, ModelError> {
    Penalty::Dirm { form, mode: NormMode::ScaledGrid }.value(model, envs)
}

/// IRMv1: `Σ_e (∂/∂w L_e(w · s))²` at `w = 1`.
pub fn irm_penalty(model: &Model, envs: &[EnvironmentData]) -> Result<f64, ModelError> {
    Penalty::Irm.value(model, envs)
}

/// Population variance of the environment losses.
pub fn rex_penalty(model: &Model, envs: &[EnvironmentData]) -> Result<f64, ModelError> {
    Penalty::Rex.value(model, envs)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn check_simplex(weights: &[f64]) -> Result<(), ObjectiveError> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::NotOnSimplex);
    }
    Ok(())
}

/// Exponentiated-gradient step `w_e ∝ w_e · exp(step · L_e)`.
pub fn dro_reweight(weights: &[f64], losses: &[f64], step: f64) -> Result<Vec<f64>, ObjectiveError> {
    check_simplex(weights)?;
    if weights.len() != losses.len() {
        return Err(ObjectiveError::LengthMismatch(weights.len(), losses.len()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(ObjectiveError::InvalidSpec { key: "objective.dro_step", reason: format!("must be > 0, got {step}") });
    }
    let top = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = weights.iter().zip(losses).map(|(w, l)| w * (step * (l - top)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// All mass on the first environment with the largest loss.
pub fn dro_hard_max(losses: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    let (arg, _) = losses
        .iter()
        .enumerate()
        .fold((None, f64::NEG_INFINITY), |(a, best), (i, &l)| if l > best { (Some(i), l) } else { (a, best) });
    let arg = arg.ok_or(ObjectiveError::Empty)?;
    Ok((0..losses.len()).map(|i| f64::from(u8::from(i == arg))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Erm,
    GroupDro,
    Irm,
    Rex,
    Dirm,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "erm" | "ols" => Ok(Self::Erm),
            "group_dro" | "groupdro" | "dro" => Ok(Self::GroupDro),
            "irm" => Ok(Self::Irm),
            "rex" => Ok(Self::Rex),
            "dirm" => Ok(Self::Dirm),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

impl ObjectiveKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::GroupDro => "group_dro",
            Self::Irm => "irm",
            Self::Rex => "rex",
            Self::Dirm => "dirm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// 0 before `warmup_epochs`, `lambda_final` from then on.
    Step,
    /// `lambda_final · min(1, epoch / warmup_epochs)`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DroMode {
    Exponentiated,
    HardMax,
}

/// Which parameters receive the penalty gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRule {
    /// β sees the data loss only, φ sees loss + λ·penalty.
    Split,
    /// Every parameter sees loss + λ·penalty.
    Joint,
    /// `Split` when φ has parameters, `Joint` when φ is the identity.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(rename = "lambda")]
    pub lambda_final: f64,
    pub warmup_epochs: usize,
    pub schedule: LambdaSchedule,
    pub dirm_norm_mode: NormMode,
    pub dirm_form: DirmForm,
    pub block_rule: BlockRule,
    pub dro_step: f64,
    pub dro_mode: DroMode,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Erm,
            lambda_final: 0.0,
            warmup_epochs: 0,
            schedule: LambdaSchedule::Step,
            dirm_norm_mode: NormMode::Point,
            dirm_form: DirmForm::SquaredNorm,
            block_rule: BlockRule::Auto,
            dro_step: 0.01,
            dro_mode: DroMode::Exponentiated,
        }
    }
}

impl ObjectiveSpec {
    pub fn erm() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: ObjectiveKind, lambda_final: f64) -> Self {
        Self { kind, lambda_final, ..Self::default() }
    }

    pub fn dirm(lambda_final: f64) -> Self {
        Self::with_kind(ObjectiveKind::Dirm, lambda_final)
    }

    pub fn irm(lambda_final: f64) -> Self {
        Self::with_kind(ObjectiveKind::Irm, lambda_final)
    }

    pub fn rex(lambda_final: f64) -> Self {
        Self::with_kind(ObjectiveKind::Rex, lambda_final)
    }

    pub fn group_dro(step: f64) -> Self {
        Self { kind: ObjectiveKind::GroupDro, dro_step: step, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lambda_final >= 0.0 && self.lambda_final.is_finite()) {
            return Err(ObjectiveError::InvalidSpec {
                key: "objective.lambda",
                reason: format!("must be finite and >= 0, got {}", self.lambda_final),
            });
        }
        if !(self.dro_step > 0.0 && self.dro_step.is_finite()) {
            return Err(ObjectiveError::InvalidSpec {
                key: "objective.dro_step",
                reason: format!("must be > 0, got {}", self.dro_step),
            });
        }
        Ok(())
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Step if epoch < self.warmup_epochs => 0.0,
            LambdaSchedule::Step => self.lambda_final,
            LambdaSchedule::Linear if self.warmup_epochs == 0 => self.lambda_final,
            LambdaSchedule::Linear => self.lambda_final * (epoch as f64 / self.warmup_epochs as f64).min(1.0),
        }
    }

    pub fn penalty(&self) -> Option<Penalty> {
        match self.kind {
            ObjectiveKind::Dirm => Some(Penalty::Dirm { form: self.dirm_form, mode: self.dirm_norm_mode }),
            ObjectiveKind::Irm => Some(Penalty::Irm),
            ObjectiveKind::Rex => Some(Penalty::Rex),
            ObjectiveKind::Erm | ObjectiveKind::GroupDro => None,
        }
    }

    /// Whether the β block receives the penalty gradient for this model.
    pub fn penalizes_beta(&self, model: &Model) -> bool {
        match self.block_rule {
            BlockRule::Split => false,
            BlockRule::Joint => true,
            BlockRule::Auto => !model.has_phi_params(),
        }
    }
}

/// Mutable state carried across steps (GroupDRO environment weights).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveState {
    pub dro_weights: Vec<f64>,
}

impl ObjectiveState {
    pub fn new(n_envs: usize) -> Self {
        Self { dro_weights: vec![1.0 / n_envs as f64; n_envs] }
    }
}

/// Objective value and gradients split by block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `data_loss + λ · penalty`
    pub value: f64,
    /// Mean of the environment losses.
    pub mean_loss: f64,
    /// Loss term actually optimized (DRO-weighted for GroupDRO).
    pub data_loss: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub env_losses: Vec<f64>,
    pub env_grad_sq_norms: Vec<f64>,
    pub grad_phi: Vec<f64>,
    /// Gradient over the β block (bias included when trainable).
    pub grad_beta: Vec<f64>,
}

impl GradReport {
    /// Gradient in `ParamVector` order; a frozen head bias gets 0.
    pub fn flat(&self, model: &Model) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.layout().len());
        out.extend_from_slice(&self.grad_phi);
        out.extend_from_slice(&self.grad_beta);
        if !model.head_bias_trainable {
            out.push(0.0);
        }
        out
    }
}

/// Objective at `epoch`. For GroupDRO the environment weights in `state` are
/// updated with the current losses before the weighted loss is formed.
pub fn total_objective(
    model: &Model,
    envs: &[EnvironmentData],
    spec: &ObjectiveSpec,
    epoch: usize,
    state: &mut ObjectiveState,
) -> Result<(f64, GradReport), ObjectiveError> {
    spec.validate()?;
    let evals = evaluate_all(model, envs)?;
    let e = evals.len() as f64;
    let env_losses: Vec<f64> = evals.iter().map(|ev| ev.loss).collect();
    let env_grad_sq_norms: Vec<f64> = evals
        .iter()
        .map(|ev| {
            let g = ev.grad_beta(model);
            g.dot(&g)
        })
        .collect();
    let weights = match spec.kind {
        ObjectiveKind::GroupDro => {
            if state.dro_weights.len() != evals.len() {
                *state = ObjectiveState::new(evals.len());
            }
            state.dro_weights = match spec.dro_mode {
                DroMode::Exponentiated => dro_reweight(&state.dro_weights, &env_losses, spec.dro_step)?,
                DroMode::HardMax => dro_hard_max(&env_losses)?,
            };
            state.dro_weights.clone()
        }
        _ => vec![1.0 / e; evals.len()],
    };
    let len = model.layout().len();
    let mut grad = vec![0.0; len];
    let mut data_loss = 0.0;
    for ((ev, w), l) in evals.iter().zip(&weights).zip(&env_losses) {
        data_loss += w * l;
        if *w != 0.0 {
            for (a, b) in grad.iter_mut().zip(ev.grad_loss(model)) {
                *a += w * b;
            }
        }
    }
    let lambda = spec.lambda_at(epoch);
    let mut penalty_value = 0.0;
    if let Some(p) = spec.penalty() {
        let (v, pg) = penalty_from_evals(&p, model, envs, &evals, lambda > 0.0)?;
        penalty_value = v;
        if let Some(pg) = pg {
            let layout = model.layout();
            let to = if spec.penalizes_beta(model) { layout.beta_range().end } else { layout.phi_len() };
            for (a, b) in grad[..to].iter_mut().zip(&pg[..to]) {
                *a += lambda * b;
            }
        }
    }
    let layout = model.layout();
    let value = if lambda > 0.0 { data_loss + lambda * penalty_value } else { data_loss };
    let report = GradReport {
        value,
        mean_loss: mean(&env_losses),
        data_loss,
        penalty: penalty_value,
        lambda,
        env_losses,
        env_grad_sq_norms,
        grad_phi: grad[layout.phi_range()].to_vec(),
        grad_beta: grad[layout.beta_range()].to_vec(),
    };
    Ok((value, report))
}

/// `sup_{α ∈ Δ_η} Σ α_e L_e = (1 + nη) · max_e L_e − η · Σ_e L_e` over
/// `Δ_η = {α : α_e ≥ −η, Σ α_e = 1}`.
pub fn affine_sup(losses: &[f64], eta: f64) -> Result<f64, ObjectiveError> {
    check_affine(losses, eta)?;
    let n = losses.len() as f64;
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((1.0 + n * eta) * max - eta * losses.iter().sum::<f64>())
}

/// Same supremum by direct enumeration of the vertices of `Δ_η`
/// (one coordinate at `1 + (n−1)η`, the rest at `−η`).
pub fn vertex_sup(losses: &[f64], eta: f64) -> Result<f64, ObjectiveError> {
    check_affine(losses, eta)?;
    let n = losses.len();
    let mut best = f64::NEG_INFINITY;
    for k in 0..n {
        let v: f64 = losses
            .iter()
            .enumerate()
            .map(|(e, l)| if e == k { (1.0 + (n as f64 - 1.0) * eta) * l } else { -eta * l })
            .sum();
        best = best.max(v);
    }
    Ok(best)
}

fn check_affine(losses: &[f64], eta: f64) -> Result<(), ObjectiveError> {
    if losses.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ObjectiveError::InvalidSpec { key: "eta", reason: format!("must be >= 0, got {eta}") });
    }
    Ok(())
}

/// Empirical mean of `∇_β f · (y − f)` with per-coordinate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentResidual {
    pub mean: Array1<f64>,
    pub std_error: Array1<f64>,
    pub n: usize,
}

/// `(1/n) Σ (z_i, 1)(y_i − s_i)`; equals `−½ ∇_β` of the squared error.
pub fn moment_residual(model: &Model, env: &EnvironmentData) -> Result<MomentResidual, ObjectiveError> {
    if model.link != Link::Identity {
        return Err(ObjectiveError::Unsupported("moment residual needs the identity link".into()));
    }
    let ev = EnvEval::new(model, env)?;
    let z = ev.z();
    let n = env.n_samples();
    let width = z.ncols() + usize::from(model.head_bias_trainable);
    let mut sum = Array1::<f64>::zeros(width);
    let mut sum_sq = Array1::<f64>::zeros(width);
    for (i, zr) in z.outer_iter().enumerate() {
        let r = env.y[i] - ev.pass.scores[i];
        for j in 0..width {
            let m = if j < zr.len() { zr[j] * r } else { r };
            sum[j] += m;
            sum_sq[j] += m * m;
        }
    }
    let nf = n as f64;
    let mean = &sum / nf;
    let var = (&sum_sq / nf - &mean * &mean).mapv(|v: f64| v.max(0.0));
    let std_error = var.mapv(|v| (v / nf).sqrt());
    Ok(MomentResidual { mean, std_error, n })
}

/// One row per optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRecord {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub penalty: f64,
    pub env_grad_sq_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTrace {
    pub records: Vec<PenaltyRecord>,
}

impl PenaltyTrace {
    pub fn push(&mut self, epoch: usize, report: &GradReport) {
        let step = self.records.len();
        self.records.push(PenaltyRecord {
            epoch,
            step,
            lambda: report.lambda,
            penalty: report.penalty,
            env_grad_sq_norms: report.env_grad_sq_norms.clone(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn env(x: Array2<f64>, y: Array1<f64>, id: &str) -> EnvironmentData {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        EnvironmentData::new(x, y, id, names).unwrap()
    }

    fn random_envs(seed: u64, k: usize, n: usize) -> Vec<EnvironmentData> {
        let mut r = crate::rng::rng(seed);
        (0..k)
            .map(|e| {
                let x = Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0) * (1.0 + e as f64));
                let y = Array1::from_shape_fn(n, |i| x[[i, 0]] - 0.5 * x[[i, 1]] + r.random_range(-0.3..0.3));
                env(x, y, &format!("e{e}"))
            })
            .collect()
    }

    #[test]
    fn penalty_hand_case() {
        let g = [array![1.0, 0.0], array![0.0, 2.0]];
        assert_eq!(penalty_of_gradients(&g, DirmForm::SquaredNorm), 2.25);
        assert_eq!(penalty_of_gradients(&g, DirmForm::Norm), 0.25);
        assert_eq!(penalty_of_gradients(&g, DirmForm::Gradient), 1.25);
    }

    #[test]
    fn single_and_identical_envs_give_zero() {
        let m = Model::linear(&[0.3, 0.1], 0.2, Link::Identity);
        let envs = random_envs(1, 1, 20);
        assert_eq!(dirm_penalty(&m, &envs).unwrap(), 0.0);
        assert_eq!(rex_penalty(&m, &envs).unwrap(), 0.0);
        let twin = [envs[0].clone(), envs[0].clone()];
        for form in DirmForm::ALL {
            assert!(dirm_penalty_with(&m, &twin, form).unwrap().abs() < 1e-12);
            assert!(dirm_penalty_grid(&m, &twin, form).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_mean_of_scaled_point_penalties() {
        let m = Model::xavier(&Layout::new(2, &[3], Link::Identity).unwrap(), 4).unwrap();
        let envs = random_envs(2, 2, 25);
        let explicit: f64 =
            GRID_SCALES.iter().map(|&c| dirm_penalty(&m.with_scaled_beta(c), &envs).unwrap()).sum::<f64>() / 5.0;
        let grid = dirm_penalty_grid(&m, &envs, DirmForm::SquaredNorm).unwrap();
        assert!((grid - explicit).abs() <= 1e-12 * explicit.abs().max(1.0));
        let zero = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        assert_eq!(
            dirm_penalty_grid(&zero, &envs, DirmForm::SquaredNorm).unwrap(),
            dirm_penalty(&zero, &envs).unwrap()
        );
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let m = Model::xavier(&Layout::new(2, &[3], Link::Identity).unwrap(), 6).unwrap();
        let envs = random_envs(3, 3, 12);
        let p = Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::ScaledGrid };
        let (_, g) = p.value_and_grad(&m, &envs).unwrap();
        let base = m.to_params().values;
        let mut probe = m.clone();
        for k in 0..base.len() {
            let h = 1e-5;
            let mut v = base.clone();
            v[k] += h;
            probe.set_flat(&v);
            let up = p.value(&probe, &envs).unwrap();
            v[k] -= 2.0 * h;
            probe.set_flat(&v);
            let down = p.value(&probe, &envs).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-3), "coord {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn irm_examples() {
        let zero = Model::linear(&[0.0], 0.0, Link::Identity);
        let e = env(array![[1.0], [2.0], [3.0]], array![-1.0, 0.0, 1.0], "e");
        assert_eq!(irm_penalty(&zero, std::slice::from_ref(&e)).unwrap(), 0.0);
        // The least-squares fit through the origin is stationary in w.
        let x = array![[1.0], [2.0], [3.0]];
        let y = array![1.5, 1.5, 3.5];
        let w = x.column(0).dot(&y) / x.column(0).dot(&x.column(0));
        let m = Model::linear(&[w], 0.0, Link::Identity);
        assert!(irm_penalty(&m, &[env(x, y, "e")]).unwrap() < 1e-28);
    }

    #[test]
    fn irm_matches_finite_difference_in_scale() {
        let m = Model::linear(&[0.7, -0.2], 0.3, Link::Identity);
        let envs = random_envs(5, 2, 30);
        let h = 1e-5;
        let fd: f64 = envs
            .iter()
            .map(|e| {
                let up = crate::grad::loss(&m.with_scaled_beta(1.0 + h), e).unwrap();
                let down = crate::grad::loss(&m.with_scaled_beta(1.0 - h), e).unwrap();
                ((up - down) / (2.0 * h)).powi(2)
            })
            .sum();
        let p = irm_penalty(&m, &envs).unwrap();
        assert!((p - fd).abs() / p < 1e-4);
    }

    #[test]
    fn rex_examples() {
        assert_eq!(population_variance(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(population_variance(&[0.0, 2.0]), 1.0);
    }

    #[test]
    fn dro_examples() {
        assert_eq!(dro_reweight(&[0.3, 0.7], &[2.0, 2.0], 1.0).unwrap(), vec![0.3, 0.7]);
        let w = dro_reweight(&[0.5, 0.5], &[0.0, 10.0], 50.0).unwrap();
        assert!(w[1] > 1.0 - 1e-12);
        let w = dro_reweight(&[0.5, 0.5], &[1.0, 2.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = [0.5 * e / (0.5 * e + 0.5 * e * e), 0.5 * e * e / (0.5 * e + 0.5 * e * e)];
        assert!((w[0] - expect[0]).abs() < 1e-15 && (w[1] - expect[1]).abs() < 1e-15);
        assert_eq!(dro_reweight(&[0.2, 0.2], &[1.0, 1.0], 1.0), Err(ObjectiveError::NotOnSimplex));
        assert_eq!(dro_hard_max(&[1.0, 3.0, 3.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn erm_value_is_mean_loss_and_warmup_matches_erm() {
        let m = Model::xavier(&Layout::new(2, &[3], Link::Identity).unwrap(), 1).unwrap();
        let envs = random_envs(7, 3, 20);
        let (v, r) = total_objective(&m, &envs, &ObjectiveSpec::erm(), 0, &mut ObjectiveState::new(3)).unwrap();
        let direct: f64 = envs.iter().map(|e| crate::grad::loss(&m, e).unwrap()).sum::<f64>() / 3.0;
        assert_eq!(v, r.data_loss);
        assert!((v - r.mean_loss).abs() < 1e-15);
        assert!((v - direct).abs() < 1e-15);
        let dirm = ObjectiveSpec { warmup_epochs: 10, ..ObjectiveSpec::dirm(5.0) };
        let (vd, rd) = total_objective(&m, &envs, &dirm, 3, &mut ObjectiveState::new(3)).unwrap();
        assert_eq!(vd, v);
        assert_eq!(rd.grad_phi, r.grad_phi);
        assert_eq!(rd.grad_beta, r.grad_beta);
        let (vl, rl) = total_objective(&m, &envs, &dirm, 10, &mut ObjectiveState::new(3)).unwrap();
        assert!((vl - (v + 5.0 * rl.penalty)).abs() < 1e-12);
        assert_ne!(rl.grad_phi, r.grad_phi);
        assert_eq!(rl.grad_beta, r.grad_beta, "split rule leaves β with the data gradient");
    }

    #[test]
    fn auto_rule_penalizes_beta_for_identity_phi() {
        let m = Model::linear(&[0.2, 0.4], 0.0, Link::Identity);
        let envs = random_envs(8, 2, 20);
        let (_, erm) = total_objective(&m, &envs, &ObjectiveSpec::erm(), 0, &mut ObjectiveState::new(2)).unwrap();
        let (_, d) = total_objective(&m, &envs, &ObjectiveSpec::dirm(1.0), 0, &mut ObjectiveState::new(2)).unwrap();
        assert_ne!(erm.grad_beta, d.grad_beta);
        let split = ObjectiveSpec { block_rule: BlockRule::Split, ..ObjectiveSpec::dirm(1.0) };
        let (_, s) = total_objective(&m, &envs, &split, 0, &mut ObjectiveState::new(2)).unwrap();
        assert_eq!(erm.grad_beta, s.grad_beta);
    }

    #[test]
    fn schedules() {
        let s = ObjectiveSpec { warmup_epochs: 4, ..ObjectiveSpec::dirm(2.0) };
        assert_eq!((s.lambda_at(3), s.lambda_at(4)), (0.0, 2.0));
        let l = ObjectiveSpec { schedule: LambdaSchedule::Linear, ..s };
        assert_eq!((l.lambda_at(0), l.lambda_at(2), l.lambda_at(9)), (0.0, 1.0, 2.0));
        assert!(matches!(
            ObjectiveSpec::dirm(-1.0).validate(),
            Err(ObjectiveError::InvalidSpec { key: "objective.lambda", .. })
        ));
    }

    #[test]
    fn affine_sup_examples() {
        assert_eq!(affine_sup(&[2.0], 3.0).unwrap(), 2.0);
        assert_eq!(affine_sup(&[1.0, 3.0], 0.0).unwrap(), 3.0);
        assert_eq!(affine_sup(&[1.0, 3.0], 0.5).unwrap(), 4.0);
        assert_eq!(vertex_sup(&[1.0, 3.0], 0.5).unwrap(), 4.0);
        assert_eq!(affine_sup(&[], 0.5), Err(ObjectiveError::Empty));
    }

    #[test]
    fn moment_residual_examples() {
        let zero = Model::linear(&[0.0, 0.0], 0.0, Link::Identity);
        let e = env(array![[1.0, 2.0], [3.0, -1.0]], array![0.0, 0.0], "e");
        let r = moment_residual(&zero, &e).unwrap();
        assert!(r.mean.iter().all(|v| *v == 0.0));
        let g = crate::grad::grad_beta_env(&Model::linear(&[0.4, -0.1], 0.2, Link::Identity), &e).unwrap();
        let r = moment_residual(&Model::linear(&[0.4, -0.1], 0.2, Link::Identity), &e).unwrap();
        for j in 0..3 {
            assert!((r.mean[j] + 0.5 * g[j]).abs() < 1e-15);
        }
        let lz = Model::linear(&[0.0, 0.0], 0.0, Link::Logistic);
        assert!(matches!(moment_residual(&lz, &e), Err(ObjectiveError::Unsupported(_))));
    }

    proptest! {
        #[test]
        fn penalties_are_non_negative(seed in 0u64..1000, depth in 0usize..=1) {
            let hidden = [3usize][..depth].to_vec();
            let m = Model::xavier(&Layout::new(2, &hidden, Link::Identity).unwrap(), seed).unwrap();
            let envs = random_envs(seed, 3, 8);
            for form in DirmForm::ALL {
                prop_assert!(dirm_penalty_with(&m, &envs, form).unwrap() >= 0.0);
                prop_assert!(dirm_penalty_grid(&m, &envs, form).unwrap() >= 0.0);
            }
            prop_assert!(irm_penalty(&m, &envs).unwrap() >= 0.0);
            prop_assert!(rex_penalty(&m, &envs).unwrap() >= 0.0);
        }

        #[test]
        fn sup_identity(losses in prop::collection::vec(-50.0f64..50.0, 2..=4), eta in prop::sample::select(vec![0.0, 0.5, 1.0, 5.0])) {
            let s = affine_sup(&losses, eta).unwrap();
            let v = vertex_sup(&losses, eta).unwrap();
            let n = losses.len() as f64;
            let scale = (1.0 + n * eta) * losses.iter().fold(0.0f64, |a, l| a.max(l.abs())) + 1e-300;
            prop_assert!((s - v).abs() / scale < 1e-10);
            let m = mean(&losses);
            let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(((s - m) - (1.0 + n * eta) * (max - m)).abs() / scale < 1e-10);
        }

        #[test]
        fn sup_is_monotone_in_eta(losses in prop::collection::vec(-5.0f64..5.0, 1..=4), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(affine_sup(&losses, lo).unwrap() <= affine_sup(&losses, hi).unwrap() + 1e-12);
        }

        #[test]
        fn dro_stays_on_simplex(l in prop::collection::vec(0.0f64..20.0, 1..6), step in 1e-3f64..100.0) {
            let w0 = vec![1.0 / l.len() as f64; l.len()];
            let w = dro_reweight(&w0, &l, step).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
        }
    }
}
