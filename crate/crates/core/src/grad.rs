//! Exact first-order gradients and mixed second-order terms.
//!
//! For one environment with scores `s_i = z_i·w + b`, `z_i = φ(x_i)`:
//!
//! ```text
//! L   = (1/n) Σ ℓ(s_i, y_i)
//! g   = ∇_β L = (1/n) Σ ℓ'_i (z_i, 1)
//! ```
//!
//! Every penalty used here is a smooth function `P(g_1, …, g_E)` (or of the
//! losses). Its parameter gradient is `Σ_e ∇_θ (v_e · g_e)` with
//! `v_e = ∂P/∂g_e` held fixed, and
//!
//! ```text
//! ∇_θ (v·g) = backprop( ds_i = ℓ''_i (v_w·z_i + v_b) / n,
//!                       dz_i = ℓ'_i v_w / n )
//! ```
//!
//! where `backprop` pushes a score cotangent `ds` and an extra cotangent on
//! the representation `dz` through the head and the ELU layers. The
//! second-order content sits entirely in `ℓ''` and in the `dz` term, both
//! closed form for the supported family.

use ndarray::{Array1, Array2, Axis};

use crate::data::EnvironmentData;
use rand::Rng as _;

use crate::model::{elu_prime, sigmoid, Layout, Link, Model, ModelError, Pass};
use crate::objectives::{DirmForm, NormMode, Penalty};
use crate::rng;

/// Forward state of one environment plus per-sample loss derivatives.
#[derive(Debug)]
pub(crate) struct EnvEval<'a> {
    pub env: &'a EnvironmentData,
    pub pass: Pass,
    /// `ℓ'(s_i, y_i)`
    pub d1: Array1<f64>,
    /// `ℓ''(s_i, y_i)`
    pub d2: Array1<f64>,
    pub loss: f64,
}

impl<'a> EnvEval<'a> {
    pub fn new(model: &Model, env: &'a EnvironmentData) -> Result<Self, ModelError> {
        if env.n_samples() == 0 {
            return Err(ModelError::EmptyEnvironment(env.env_id.clone()));
        }
        if model.link == Link::Logistic {
            if let Some(&bad) = env.y.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(ModelError::LabelDomain(bad));
            }
        }
        let pass = model.pass(&env.x)?;
        let n = env.n_samples() as f64;
        let s = &pass.scores;
        let (loss, d1, d2) = match model.link {
            Link::Identity => {
                let r = s - &env.y;
                let loss = r.dot(&r) / n;
                (loss, r * 2.0, Array1::from_elem(s.len(), 2.0))
            }
            Link::Logistic => {
                let mut total = 0.0;
                let mut d1 = Array1::zeros(s.len());
                let mut d2 = Array1::zeros(s.len());
                for i in 0..s.len() {
                    let (si, yi) = (s[i], env.y[i]);
                    total += softplus(si) - yi * si;
                    let p = sigmoid(si);
                    d1[i] = p - yi;
                    d2[i] = p * (1.0 - p);
                }
                (total / n, d1, d2)
            }
        };
        if !loss.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { env, pass, d1, d2, loss })
    }

    pub fn n(&self) -> f64 {
        self.env.n_samples() as f64
    }

    pub fn z(&self) -> &Array2<f64> {
        self.pass.representation(&self.env.x)
    }

    /// `∇_β L` over the β block.
    pub fn grad_beta(&self, model: &Model) -> Array1<f64> {
        let n = self.n();
        let gw = self.z().t().dot(&self.d1) / n;
        if model.head_bias_trainable {
            let mut g = Array1::zeros(gw.len() + 1);
            g.slice_mut(ndarray::s![..gw.len()]).assign(&gw);
            g[gw.len()] = self.d1.sum() / n;
            g
        } else {
            gw
        }
    }

    /// Full flat gradient of `L`.
    pub fn grad_loss(&self, model: &Model) -> Vec<f64> {
        let ds = &self.d1 / self.n();
        backprop(model, self, &ds, None)
    }

    /// Full flat gradient of `v · ∇_β L` for a fixed β-block vector `v`.
    pub fn grad_directional(&self, model: &Model, v: &[f64]) -> Vec<f64> {
        let d = model.head_weight.len();
        let vw = Array1::from(v[..d].to_vec());
        let vb = if model.head_bias_trainable { v[d] } else { 0.0 };
        let n = self.n();
        let u = self.z().dot(&vw) + vb;
        let ds = &self.d2 * &u / n;
        if !model.has_phi_params() {
            return backprop(model, self, &ds, None);
        }
        let scale = &self.d1 / n;
        let dz = scale.insert_axis(Axis(1)).dot(&vw.insert_axis(Axis(0)));
        backprop(model, self, &ds, Some(dz))
    }
}

/// Pushes score and representation cotangents back to every parameter.
/// The frozen head bias slot, when present, receives zero.
pub(crate) fn backprop(model: &Model, ev: &EnvEval<'_>, ds: &Array1<f64>, dz_extra: Option<Array2<f64>>) -> Vec<f64> {
    let layout_len = model.layout().len();
    let z = ev.z();
    let mut out = vec![0.0; layout_len];
    let head_w = z.t().dot(ds);
    let n_layers = model.layers.len();
    let mut sizes = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for l in &model.layers {
        sizes.push(offset);
        offset += l.weight.len() + l.bias.len();
    }
    let head_off = offset;
    for (j, v) in head_w.iter().enumerate() {
        out[head_off + j] = *v;
    }
    if model.head_bias_trainable {
        out[layout_len - 1] = ds.sum();
    }
    if n_layers == 0 {
        return out;
    }
    let mut dz = ds.view().insert_axis(Axis(1)).dot(&model.head_weight.view().insert_axis(Axis(0)));
    if let Some(extra) = dz_extra {
        dz += &extra;
    }
    for k in (0..n_layers).rev() {
        let pre = &ev.pass.pre[k];
        let mut da = dz;
        da.zip_mut_with(pre, |g, &a| *g *= elu_prime(a));
        let input = if k == 0 { &ev.env.x } else { &ev.pass.post[k - 1] };
        let dw = da.t().dot(input);
        let db = da.sum_axis(Axis(0));
        let off = sizes[k];
        for (j, v) in dw.iter().enumerate() {
            out[off + j] = *v;
        }
        let boff = off + dw.len();
        for (j, v) in db.iter().enumerate() {
            out[boff + j] = *v;
        }
        dz = if k > 0 { da.dot(&model.layers[k].weight) } else { Array2::zeros((0, 0)) };
    }
    out
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Mean loss: squared error (identity link) or binary cross-entropy on
/// logits (logistic link).
pub fn loss(model: &Model, env: &EnvironmentData) -> Result<f64, ModelError> {
    Ok(EnvEval::new(model, env)?.loss)
}

/// Exact `∇_β` of the environment loss. Independent of any penalty.
pub fn grad_beta_env(model: &Model, env: &EnvironmentData) -> Result<Array1<f64>, ModelError> {
    Ok(EnvEval::new(model, env)?.grad_beta(model))
}

/// Loss and its full flat gradient (`ParamVector` order).
pub fn loss_and_grad(model: &Model, env: &EnvironmentData) -> Result<(f64, Vec<f64>), ModelError> {
    let ev = EnvEval::new(model, env)?;
    Ok((ev.loss, ev.grad_loss(model)))
}

/// Exact gradient of a penalty over the φ block. Empty when `φ` has no
/// parameters.
pub fn grad_phi_of_penalty(model: &Model, envs: &[EnvironmentData], penalty: &Penalty) -> Result<Vec<f64>, ModelError> {
    model.validate()?;
    let (_, grad) = penalty.value_and_grad(model, envs)?;
    Ok(grad[model.layout().phi_range()].to_vec())
}

/// Quantity checked by [`fd_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdTarget {
    /// β block of the mean environment loss.
    Beta,
    /// φ block of a penalty.
    PhiPenalty(Penalty),
}

/// Max over coordinates of `|analytic − central difference| / (|analytic| + 1e-12)`.
/// Returns 0 when the checked block is empty.
pub fn fd_check(model: &Model, envs: &[EnvironmentData], which: FdTarget, step: f64) -> Result<f64, ModelError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(ModelError::InvalidStep(step));
    }
    if envs.is_empty() {
        return Err(ModelError::NoEnvironments);
    }
    model.validate()?;
    let layout = model.layout();
    let (range, objective): (std::ops::Range<usize>, Box<dyn Fn(&Model) -> Result<(f64, Vec<f64>), ModelError>>) =
        match which {
            FdTarget::Beta => (layout.beta_range(), Box::new(|m: &Model| mean_loss_and_grad(m, envs))),
            FdTarget::PhiPenalty(p) => (layout.phi_range(), Box::new(move |m: &Model| p.value_and_grad(m, envs))),
        };
    let (_, analytic) = objective(model)?;
    let base = model.to_params().values;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in range {
        let mut shifted = base.clone();
        shifted[k] = base[k] + step;
        probe.set_flat(&shifted);
        let up = objective(&probe)?.0;
        shifted[k] = base[k] - step;
        probe.set_flat(&shifted);
        let down = objective(&probe)?.0;
        let fd = (up - down) / (2.0 * step);
        let err = (analytic[k] - fd).abs() / (analytic[k].abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst [`fd_check`] errors for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct FdBatteryRow {
    pub hidden_layers: usize,
    pub link: Link,
    pub cases: usize,
    pub beta: f64,
    /// 0 without hidden layers (empty φ block).
    pub phi: f64,
}

/// Penalties whose φ-gradients the battery checks.
pub const FD_PENALTIES: [Penalty; 6] = [
    Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::Point },
    Penalty::Dirm { form: DirmForm::Norm, mode: NormMode::Point },
    Penalty::Dirm { form: DirmForm::Gradient, mode: NormMode::Point },
    Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::ScaledGrid },
    Penalty::Irm,
    Penalty::Rex,
];

fn battery_env(r: &mut rng::Rng, n: usize, d: usize, link: Link) -> EnvironmentData {
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(-1.5..1.5));
    let slope: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = Array1::from_shape_fn(n, |i| match link {
        Link::Identity => (0..d).map(|j| slope[j] * x[[i, j]]).sum::<f64>() + r.random_range(-0.5..0.5),
        Link::Logistic => f64::from(u8::from(r.random_bool(0.5))),
    });
    EnvironmentData::new(x, y, "fd", (0..d).map(|j| format!("x{j}")).collect()).expect("finite draws")
}

/// Random models (0–2 ELU layers, both links) on two random environments;
/// `cases` draws per architecture.
pub fn fd_battery(cases: usize, seed: u64, step: f64) -> Result<Vec<FdBatteryRow>, ModelError> {
    let mut rows = Vec::new();
    for depth in 0..=crate::model::MAX_HIDDEN_LAYERS {
        for link in [Link::Identity, Link::Logistic] {
            let hidden = [4usize, 3][..depth].to_vec();
            let mut row = FdBatteryRow { hidden_layers: depth, link, cases, beta: 0.0, phi: 0.0 };
            let arch = (depth as u64) << 1 | u64::from(link == Link::Logistic);
            for case in 0..cases as u64 {
                let case_seed = rng::derive_seed(rng::derive_seed(seed, arch), case);
                let mut r = rng::rng(case_seed);
                let d = r.random_range(1..=3);
                let model = Model::xavier(&Layout::new(d, &hidden, link)?, case_seed)?;
                let envs = [battery_env(&mut r, 12, d, link), battery_env(&mut r, 12, d, link)];
                row.beta = row.beta.max(fd_check(&model, &envs, FdTarget::Beta, step)?);
                if depth > 0 {
                    for p in FD_PENALTIES {
                        row.phi = row.phi.max(fd_check(&model, &envs, FdTarget::PhiPenalty(p), step)?);
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean of environment losses and its full gradient, summed in env order.
pub fn mean_loss_and_grad(model: &Model, envs: &[EnvironmentData]) -> Result<(f64, Vec<f64>), ModelError> {
    if envs.is_empty() {
        return Err(ModelError::NoEnvironments);
    }
    let e = envs.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; model.layout().len()];
    for env in envs {
        let (l, g) = loss_and_grad(model, env)?;
        value += l / e;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / e;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;
    use crate::objectives::{DirmForm, NormMode};
    use ndarray::array;
    use proptest::prelude::*;

    fn env(x: Array2<f64>, y: Array1<f64>) -> EnvironmentData {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        EnvironmentData::new(x, y, "e", names).unwrap()
    }

    fn random_env(seed: u64, n: usize, d: usize, link: Link) -> EnvironmentData {
        let mut r = crate::rng::rng(seed);
        let x = Array2::from_shape_fn((n, d), |_| r.random_range(-1.5..1.5));
        let y = Array1::from_shape_fn(n, |i| match link {
            Link::Identity => x.row(i).sum() * 0.7 + r.random_range(-0.5..0.5),
            Link::Logistic => f64::from(u8::from(r.random_bool(0.5))),
        });
        env(x, y)
    }

    #[test]
    fn loss_examples() {
        let m = Model::linear(&[0.0, 1.0], 0.0, Link::Identity);
        let e = env(array![[5.0, 2.0], [1.0, -1.0]], array![2.0, -1.0]);
        assert_eq!(loss(&m, &e).unwrap(), 0.0);
        let zero = Model::linear(&[0.0], 0.0, Link::Identity);
        assert_eq!(loss(&zero, &env(array![[3.0]], array![1.0])).unwrap(), 1.0);
        let lz = Model::linear(&[0.0], 0.0, Link::Logistic);
        let l = loss(&lz, &env(array![[3.0], [1.0]], array![1.0, 0.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_rejects_non_binary_labels() {
        let m = Model::linear(&[0.0], 0.0, Link::Logistic);
        assert_eq!(loss(&m, &env(array![[1.0]], array![0.5])), Err(ModelError::LabelDomain(0.5)));
    }

    #[test]
    fn beta_gradient_single_sample() {
        let m = Model::linear(&[0.0, 0.0], 0.0, Link::Identity).with_frozen_head_bias();
        let g = grad_beta_env(&m, &env(array![[1.0, 0.0]], array![1.0])).unwrap();
        assert_eq!(g, array![-2.0, 0.0]);
    }

    #[test]
    fn beta_gradient_vanishes_at_ols() {
        let e = random_env(3, 50, 2, Link::Identity);
        let mut xa = Array2::ones((50, 3));
        xa.slice_mut(ndarray::s![.., ..2]).assign(&e.x);
        let gram = xa.t().dot(&xa);
        let rhs = xa.t().dot(&e.y);
        let a = nalgebra::DMatrix::from_fn(3, 3, |i, j| gram[[i, j]]);
        let b = nalgebra::DVector::from_fn(3, |i, _| rhs[i]);
        let sol = crate::linalg::solve_spd(&a, &b).unwrap();
        let m = Model::linear(&[sol[0], sol[1]], sol[2], Link::Identity);
        let g = grad_beta_env(&m, &e).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g}");
    }

    #[test]
    fn logistic_head_gradient_is_p_minus_y() {
        let e = random_env(4, 20, 3, Link::Logistic);
        let m = Model::linear(&[0.3, -0.2, 0.5], 0.1, Link::Logistic);
        let p = m.forward(&e.x).unwrap();
        let r = &p - &e.y;
        let g = grad_beta_env(&m, &e).unwrap();
        let expect_w = e.x.t().dot(&r) / 20.0;
        for j in 0..3 {
            assert!((g[j] - expect_w[j]).abs() < 1e-14);
        }
        assert!((g[3] - r.sum() / 20.0).abs() < 1e-14);
    }

    #[test]
    fn identical_envs_give_zero_phi_gradient() {
        let layout = Layout::new(2, &[3], Link::Identity).unwrap();
        let m = Model::xavier(&layout, 1).unwrap();
        let e = random_env(5, 30, 2, Link::Identity);
        let envs = [e.clone(), e];
        for form in DirmForm::ALL {
            let p = Penalty::Dirm { form, mode: NormMode::Point };
            let g = grad_phi_of_penalty(&m, &envs, &p).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_phi_has_empty_phi_gradient() {
        let m = Model::linear(&[0.1, 0.2], 0.0, Link::Identity);
        let envs = [random_env(1, 10, 2, Link::Identity), random_env(2, 10, 2, Link::Identity)];
        let p = Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::Point };
        assert!(grad_phi_of_penalty(&m, &envs, &p).unwrap().is_empty());
    }

    #[test]
    fn fd_check_examples() {
        let envs = [random_env(1, 15, 2, Link::Identity), random_env(2, 15, 2, Link::Identity)];
        let lin = Model::linear(&[0.4, -0.3], 0.2, Link::Identity);
        assert!(fd_check(&lin, &envs, FdTarget::Beta, 1e-5).unwrap() < 1e-6);
        let deep = Model::xavier(&Layout::new(2, &[4, 3], Link::Identity).unwrap(), 8).unwrap();
        let p = Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::Point };
        assert!(fd_check(&deep, &envs, FdTarget::Beta, 1e-5).unwrap() < 1e-4);
        assert!(fd_check(&deep, &envs, FdTarget::PhiPenalty(p), 1e-5).unwrap() < 1e-4);
        assert_eq!(fd_check(&lin, &envs, FdTarget::Beta, 0.0), Err(ModelError::InvalidStep(0.0)));
    }

    #[test]
    fn block_separation() {
        let m = Model::xavier(&Layout::new(2, &[3], Link::Logistic).unwrap(), 2).unwrap();
        let e = random_env(9, 12, 2, Link::Logistic);
        let a = grad_beta_env(&m, &e).unwrap();
        let _ = Penalty::Irm.value_and_grad(&m, std::slice::from_ref(&e)).unwrap();
        assert_eq!(grad_beta_env(&m, &e).unwrap(), a);
    }

    #[test]
    fn battery_covers_every_architecture() {
        let rows = fd_battery(3, 1, 1e-5).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.beta < 1e-4 && r.phi < 1e-4));
        assert!(rows.iter().filter(|r| r.hidden_layers == 0).all(|r| r.phi == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(seed in 0u64..10_000, depth in 0usize..=2, logistic in any::<bool>()) {
            let link = if logistic { Link::Logistic } else { Link::Identity };
            let hidden = [3usize, 2][..depth].to_vec();
            let m = Model::xavier(&Layout::new(2, &hidden, link).unwrap(), seed).unwrap();
            let envs = [random_env(seed * 2 + 1, 10, 2, link), random_env(seed * 2 + 2, 10, 2, link)];
            prop_assert!(fd_check(&m, &envs, FdTarget::Beta, 1e-5).unwrap() < 1e-4);
            if depth > 0 {
                for p in [Penalty::Dirm { form: DirmForm::SquaredNorm, mode: NormMode::Point }, Penalty::Irm, Penalty::Rex] {
                    let err = fd_check(&m, &envs, FdTarget::PhiPenalty(p), 1e-5).unwrap();
                    prop_assert!(err < 1e-4, "{p:?}: {err}");
                }
            }
        }
    }
}
