//! Shallow network family `f(φ(x); β)`.
//!
//! The representation `φ` is zero, one or two affine layers, each followed
//! by an ELU. The head `f` is affine in `β = (w, b)` with an identity link
//! (regression) or a logistic link (binary classification). With no hidden
//! layers `φ` is the identity map and has no parameters.
//!
//! Flat parameter layout (`ParamVector`):
//!
//! ```text
//! [ layer_0.weight (row-major, out × in), layer_0.bias,
//!   layer_1.weight, layer_1.bias,            <- φ block
//!   head.weight, head.bias ]                 <- β block
//! ```
//!
//! The head bias always occupies the last slot. When it is frozen it is
//! still stored there but is not part of the β block used for gradients.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Deepest supported representation.
pub const MAX_HIDDEN_LAYERS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("logistic link needs labels in {{0, 1}}, found {0}")]
    LabelDomain(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite parameter")]
    NonFinite,
    #[error("environment list is empty")]
    NoEnvironments,
    #[error("environment `{0}` has no rows")]
    EmptyEnvironment(String),
    #[error("finite-difference step must be > 0, got {0}")]
    InvalidStep(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Shape of a model: everything except the parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub link: Link,
    #[serde(default = "yes")]
    pub head_bias_trainable: bool,
}

fn yes() -> bool {
    true
}

impl Layout {
    pub fn new(input_dim: usize, hidden: &[usize], link: Link) -> Result<Self, ModelError> {
        let layout = Self { input_dim, hidden: hidden.to_vec(), link, head_bias_trainable: true };
        layout.check()?;
        Ok(layout)
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.hidden.len() > MAX_HIDDEN_LAYERS {
            return Err(ModelError::Unsupported(format!(
                "{} hidden layers (at most {MAX_HIDDEN_LAYERS})",
                self.hidden.len()
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Unsupported("zero-width layer".into()));
        }
        Ok(())
    }

    /// Width of `φ(x)`.
    pub fn representation_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn phi_len(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut len = 0;
        for &h in &self.hidden {
            len += h * fan_in + h;
            fan_in = h;
        }
        len
    }

    /// Length of the β block (head weights, plus the bias when trainable).
    pub fn beta_len(&self) -> usize {
        self.representation_dim() + usize::from(self.head_bias_trainable)
    }

    /// Total stored length (the head bias slot is always present).
    pub fn len(&self) -> usize {
        self.phi_len() + self.representation_dim() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Range of the β block inside a flat gradient or parameter vector.
    pub fn beta_range(&self) -> std::ops::Range<usize> {
        self.phi_len()..self.phi_len() + self.beta_len()
    }

    pub fn phi_range(&self) -> std::ops::Range<usize> {
        0..self.phi_len()
    }
}

/// Flat parameters plus the layout needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn phi(&self) -> &[f64] {
        &self.values[self.layout.phi_range()]
    }

    pub fn beta(&self) -> &[f64] {
        &self.values[self.layout.beta_range()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Dense>,
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
    pub link: Link,
    pub head_bias_trainable: bool,
}

impl Model {
    /// Linear model on the raw features (`φ` = identity).
    pub fn linear(weights: &[f64], bias: f64, link: Link) -> Self {
        Self {
            layers: Vec::new(),
            head_weight: Array1::from(weights.to_vec()),
            head_bias: bias,
            link,
            head_bias_trainable: true,
        }
    }

    /// Xavier-uniform weights (`U(±√(6/(fan_in+fan_out)))`) and zero biases.
    pub fn xavier(layout: &Layout, seed: u64) -> Result<Self, ModelError> {
        layout.check()?;
        let mut r = rng::sub_rng(seed, 0x1417);
        let mut uniform = |fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            r.random_range(-a..=a)
        };
        let mut layers = Vec::new();
        let mut fan_in = layout.input_dim;
        for &h in &layout.hidden {
            let weight = Array2::from_shape_fn((h, fan_in), |_| uniform(fan_in, h));
            layers.push(Dense { weight, bias: Array1::zeros(h) });
            fan_in = h;
        }
        let head_weight = Array1::from_shape_fn(fan_in, |_| uniform(fan_in, 1));
        Ok(Self {
            layers,
            head_weight,
            head_bias: 0.0,
            link: layout.link,
            head_bias_trainable: layout.head_bias_trainable,
        })
    }

    pub fn with_frozen_head_bias(mut self) -> Self {
        self.head_bias_trainable = false;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout {
            input_dim: self.input_dim(),
            hidden: self.layers.iter().map(Dense::out_dim).collect(),
            link: self.link,
            head_bias_trainable: self.head_bias_trainable,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(Dense::in_dim).unwrap_or(self.head_weight.len())
    }

    pub fn has_phi_params(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Checks the layer chain and parameter finiteness.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.layout().check()?;
        let mut width = self.input_dim();
        for l in &self.layers {
            if l.in_dim() != width {
                return Err(ModelError::DimensionMismatch { expected: width, got: l.in_dim() });
            }
            if l.bias.len() != l.out_dim() {
                return Err(ModelError::DimensionMismatch { expected: l.out_dim(), got: l.bias.len() });
            }
            width = l.out_dim();
        }
        if self.head_weight.len() != width {
            return Err(ModelError::DimensionMismatch { expected: width, got: self.head_weight.len() });
        }
        if !self.to_params().values.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }

    pub fn to_params(&self) -> ParamVector {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.len());
        for l in &self.layers {
            values.extend(l.weight.iter());
            values.extend(l.bias.iter());
        }
        values.extend(self.head_weight.iter());
        values.push(self.head_bias);
        ParamVector { layout, values }
    }

    pub fn from_params(params: &ParamVector) -> Result<Self, ModelError> {
        let layout = &params.layout;
        layout.check()?;
        if params.values.len() != layout.len() {
            return Err(ModelError::DimensionMismatch { expected: layout.len(), got: params.values.len() });
        }
        let mut it = params.values.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let mut layers = Vec::new();
        let mut fan_in = layout.input_dim;
        for &h in &layout.hidden {
            let weight = Array2::from_shape_vec((h, fan_in), take(h * fan_in)).expect("sized");
            let bias = Array1::from(take(h));
            layers.push(Dense { weight, bias });
            fan_in = h;
        }
        let head_weight = Array1::from(take(fan_in));
        let head_bias = take(1)[0];
        Ok(Self { layers, head_weight, head_bias, link: layout.link, head_bias_trainable: layout.head_bias_trainable })
    }

    /// Overwrites parameters from a flat vector with the same layout.
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().expect("layout length");
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("layout length");
            }
        }
        for w in self.head_weight.iter_mut() {
            *w = it.next().expect("layout length");
        }
        self.head_bias = it.next().expect("layout length");
    }

    /// Copy with the β block multiplied by `c` (a frozen head bias is left
    /// untouched).
    pub fn with_scaled_beta(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.head_weight.mapv_inplace(|w| w * c);
        if m.head_bias_trainable {
            m.head_bias *= c;
        }
        m
    }

    /// `φ(x)`, the head scores `s = φ(x)·w + b` and the layer caches.
    pub(crate) fn pass(&self, x: &Array2<f64>) -> Result<Pass, ModelError> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let input = post.last().unwrap_or(x);
            let a = input.dot(&l.weight.t()) + &l.bias;
            post.push(a.mapv(elu));
            pre.push(a);
        }
        let z = post.last().unwrap_or(x);
        let scores = z.dot(&self.head_weight) + self.head_bias;
        Ok(Pass { pre, post, scores })
    }

    /// Predictions: raw scores for the identity link, probabilities for the
    /// logistic link.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array1<f64>, ModelError> {
        let s = self.pass(x)?.scores;
        Ok(match self.link {
            Link::Identity => s,
            Link::Logistic => s.mapv(sigmoid),
        })
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, params: self.to_params() };
        serde_json::to_string_pretty(&ck).expect("serializable")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let m = Self::from_params(&ck.params)?;
        m.validate()?;
        Ok(m)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dirm-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: layout descriptor plus the flat parameter array in the
/// `ParamVector` order. Numbers are written in shortest round-trip decimal
/// form, so there is no byte-order dependence and reloading is bit-exact.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ParamVector,
}

/// Forward caches for one batch.
#[derive(Debug)]
pub(crate) struct Pass {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
    pub scores: Array1<f64>,
}

impl Pass {
    pub fn representation<'a>(&'a self, x: &'a Array2<f64>) -> &'a Array2<f64> {
        self.post.last().unwrap_or(x)
    }
}

pub fn elu(a: f64) -> f64 {
    if a > 0.0 { a } else { a.exp_m1() }
}

pub fn elu_prime(a: f64) -> f64 {
    if a > 0.0 { 1.0 } else { a.exp() }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_model_outputs_bias() {
        let m = Model::linear(&[0.0, 0.0], 1.5, Link::Identity);
        let out = m.forward(&array![[3.0, -2.0], [0.1, 7.0]]).unwrap();
        assert_eq!(out, array![1.5, 1.5]);
    }

    #[test]
    fn identity_phi_is_a_dot_product() {
        let m = Model::linear(&[0.0, 1.0], 0.0, Link::Identity);
        assert_eq!(m.forward(&array![[5.0, 2.0]]).unwrap(), array![2.0]);
    }

    #[test]
    fn logistic_of_zero_is_half() {
        let m = Model::linear(&[0.0], 0.0, Link::Logistic);
        assert_eq!(m.forward(&array![[4.0]]).unwrap(), array![0.5]);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = Model::linear(&[0.0, 1.0], 0.0, Link::Identity);
        assert_eq!(
            m.forward(&array![[1.0, 2.0, 3.0]]),
            Err(ModelError::DimensionMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn too_deep_is_unsupported() {
        assert!(matches!(Layout::new(3, &[2, 2, 2], Link::Identity), Err(ModelError::Unsupported(_))));
    }

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let layout = Layout::new(3, &[4], Link::Logistic).unwrap();
        let a = Model::xavier(&layout, 5).unwrap();
        assert_eq!(a, Model::xavier(&layout, 5).unwrap());
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.layers[0].bias.iter().all(|b| *b == 0.0));
        assert_eq!(a.head_bias, 0.0);
        a.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let layout = Layout::new(2, &[3, 2], Link::Identity).unwrap();
        let m = Model::xavier(&layout, 9).unwrap();
        let back = Model::from_checkpoint_json(&m.to_checkpoint_json()).unwrap();
        assert_eq!(back, m);
        assert!(Model::from_checkpoint_json("{}").is_err());
    }

    #[test]
    fn layout_blocks() {
        let l = Layout::new(3, &[4, 2], Link::Identity).unwrap();
        assert_eq!(l.phi_len(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(l.beta_len(), 3);
        assert_eq!(l.len(), l.phi_len() + 3);
        let frozen = Layout { head_bias_trainable: false, ..l };
        assert_eq!(frozen.beta_len(), 2);
        assert_eq!(frozen.len(), frozen.phi_len() + 3);
    }

    proptest! {
        #[test]
        fn params_round_trip_bitwise(
            seed in any::<u64>(),
            depth in 0usize..=2,
            scale in -1e3f64..1e3,
            frozen in any::<bool>(),
        ) {
            let hidden = [3usize, 2][..depth].to_vec();
            let layout = Layout::new(2, &hidden, Link::Logistic).unwrap();
            let mut m = Model::xavier(&layout, seed).unwrap();
            m.head_bias = scale;
            if frozen {
                m = m.with_frozen_head_bias();
            }
            let p = m.to_params();
            let back = Model::from_params(&p).unwrap();
            prop_assert_eq!(&back, &m);
            let bits: Vec<u64> = back.to_params().values.iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = p.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }
}
