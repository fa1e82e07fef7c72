//! Declarative layer stacks with cached forward passes and exact backward
//! passes.

use std::hash::{Hash, Hasher};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, conv2d_backward};
use super::optim::ParamMut;
use super::pool::{maxpool, maxpool_backward};
use super::upsample::{bilinear_upsample, bilinear_upsample_backward};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Dropout,
    BilinearUpsample,
    /// Final classifier convolution producing the two class scores.
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "one_f32")]
    pub lr_multiplier: f32,
    #[serde(default)]
    pub dropout_ratio: f32,
    /// Upsampling factor (bilinear_upsample only).
    #[serde(default = "one")]
    pub factor: usize,
}

fn one() -> usize {
    1
}

fn one_f32() -> f32 {
    1.0
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel: 0,
            stride: 1,
            pad: 0,
            out_channels: 0,
            lr_multiplier: 1.0,
            dropout_ratio: 0.0,
            factor: 1,
        }
    }

    pub fn conv(name: &str, kernel: usize, out_channels: usize, pad: usize) -> Self {
        Self {
            kernel,
            out_channels,
            pad,
            ..Self::base(name, LayerKind::Conv)
        }
    }

    pub fn relu(name: &str) -> Self {
        Self::base(name, LayerKind::Relu)
    }

    pub fn maxpool(name: &str, kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            ..Self::base(name, LayerKind::Maxpool)
        }
    }

    pub fn dropout(name: &str, ratio: f32) -> Self {
        Self {
            dropout_ratio: ratio,
            ..Self::base(name, LayerKind::Dropout)
        }
    }

    pub fn score(name: &str) -> Self {
        Self {
            kernel: 1,
            out_channels: 2,
            ..Self::base(name, LayerKind::Score)
        }
    }

    pub fn upsample(name: &str, factor: usize) -> Self {
        Self {
            factor,
            ..Self::base(name, LayerKind::BilinearUpsample)
        }
    }

    pub fn with_lr_multiplier(mut self, m: f32) -> Self {
        self.lr_multiplier = m;
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Score)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("layer `{}`: {msg}", self.name)));
        if !(self.lr_multiplier >= 0.0) {
            return bad(format!("lr_multiplier {} must be >= 0", self.lr_multiplier));
        }
        if self.kind != LayerKind::Dropout && self.dropout_ratio != 0.0 {
            return bad("dropout_ratio is only meaningful on dropout layers".into());
        }
        match self.kind {
            LayerKind::Conv | LayerKind::Score => {
                if self.kernel == 0 || self.out_channels == 0 || self.stride == 0 {
                    return bad("conv layers need kernel >= 1, stride >= 1 and out_channels >= 1".into());
                }
            }
            LayerKind::Maxpool => {
                if self.kernel == 0 || self.stride == 0 {
                    return bad("maxpool needs kernel >= 1 and stride >= 1".into());
                }
            }
            LayerKind::Dropout => {
                if !(0.0..1.0).contains(&self.dropout_ratio) {
                    return bad(format!("dropout_ratio {} outside [0, 1)", self.dropout_ratio));
                }
            }
            LayerKind::BilinearUpsample => {
                if self.factor == 0 {
                    return bad("upsample factor must be >= 1".into());
                }
            }
            LayerKind::Relu => {}
        }
        Ok(())
    }
}

/// Parameter initialisation for freshly created layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal for convolutions, N(0, 0.01²) for score layers, zero bias.
    Default,
    /// N(0, sigma²) weights, zero bias.
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    pub fn init(&mut self, init: Init, rng: &mut Rng) {
        let Some(weight) = self.weight.as_mut() else {
            return;
        };
        let fan_in = (self.in_channels * self.spec.kernel * self.spec.kernel) as f64;
        let sigma = match (init, self.spec.kind) {
            (Init::Gaussian(s), _) => s,
            (Init::Default, LayerKind::Score) => 0.01,
            (Init::Default, _) => (2.0 / fan_in).sqrt(),
        };
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for w in weight.data_mut() {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        if let Some(b) = self.bias.as_mut() {
            b.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            weight: self.weight.as_ref().map(Tensor::cast),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }
}

/// How dropout layers behave during a forward pass.
pub enum DropoutMode<'a, T> {
    /// Identity (inference).
    Eval,
    /// Draw fresh inverted-dropout masks.
    Sample(&'a mut Rng),
    /// Reuse masks recorded by an earlier pass, one per dropout layer in
    /// stack order.
    Fixed(&'a [Vec<T>]),
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Relu,
    Pool(Vec<usize>),
    Dropout(Vec<T>),
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Real> StackTrace<T> {
    /// Dropout masks drawn during the pass, in stack order.
    pub fn dropout_masks(&self) -> Vec<Vec<T>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::Dropout(m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    }

    /// Hash of every discrete branch taken (relu activity, pooling argmax).
    /// Two passes with equal signatures are on the same smooth piece of the
    /// network function.
    pub fn branch_signature(&self, state: &mut impl Hasher) {
        for (x, c) in self.inputs.iter().zip(&self.caches) {
            match c {
                Cache::Relu => {
                    for v in x.data() {
                        (*v > T::zero()).hash(state);
                    }
                }
                Cache::Pool(am) => am.hash(state),
                _ => {}
            }
        }
    }
}

/// Gradient of one parameterised layer: `(weight, bias)`.
pub type LayerGrad<T> = Option<(Tensor<T>, Tensor<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub in_channels: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Stack<T> {
    /// Builds a stack with zeroed parameters. Call [`Stack::init`] or copy
    /// weights in before use.
    pub fn new(specs: &[LayerSpec], in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::InvalidSpec("stack input must have >= 1 channel".into()));
        }
        let mut channels = in_channels;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let (weight, bias) = if spec.has_params() {
                (
                    Some(Tensor::zeros(&[spec.out_channels, channels, spec.kernel, spec.kernel])),
                    Some(Tensor::zeros(&[spec.out_channels])),
                )
            } else {
                (None, None)
            };
            layers.push(Layer {
                spec: spec.clone(),
                in_channels: channels,
                weight,
                bias,
            });
            if spec.has_params() {
                channels = spec.out_channels;
            }
        }
        Ok(Self { in_channels, layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find(|l| l.spec.has_params())
            .map_or(self.in_channels, |l| l.spec.out_channels)
    }

    pub fn init(&mut self, init: Init, rng: &mut Rng) {
        for layer in &mut self.layers {
            layer.init(init, rng);
        }
    }

    pub fn cast<U: Real>(&self) -> Stack<U> {
        Stack {
            in_channels: self.in_channels,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.spec.name == name)
    }

    /// Inference pass without caching (dropout is the identity).
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer.spec.kind {
                LayerKind::Conv | LayerKind::Score => conv_forward(layer, &cur)?,
                LayerKind::Relu => cur.map(|v| v.max(T::zero())),
                LayerKind::Maxpool => maxpool(&cur, layer.spec.kernel, layer.spec.stride)?.0,
                LayerKind::Dropout => cur,
                LayerKind::BilinearUpsample => bilinear_upsample(&cur, layer.spec.factor)?,
            };
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor<T>, mut mode: DropoutMode<'_, T>) -> Result<(Tensor<T>, StackTrace<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut dropout_idx = 0;
        for layer in &self.layers {
            let (next, cache) = match layer.spec.kind {
                LayerKind::Conv | LayerKind::Score => (conv_forward(layer, &cur)?, Cache::None),
                LayerKind::Relu => (cur.map(|v| v.max(T::zero())), Cache::Relu),
                LayerKind::Maxpool => {
                    let (y, am) = maxpool(&cur, layer.spec.kernel, layer.spec.stride)?;
                    (y, Cache::Pool(am))
                }
                LayerKind::Dropout => {
                    let mask = match &mut mode {
                        DropoutMode::Eval => vec![T::one(); cur.len()],
                        DropoutMode::Sample(rng) => {
                            let p = layer.spec.dropout_ratio as f64;
                            let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                            (0..cur.len())
                                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                                .collect()
                        }
                        DropoutMode::Fixed(masks) => {
                            let m = masks.get(dropout_idx).ok_or_else(|| {
                                Error::InvalidArgument(format!("no frozen mask for dropout `{}`", layer.spec.name))
                            })?;
                            if m.len() != cur.len() {
                                return Err(Error::Shape(format!(
                                    "frozen dropout mask has {} entries for activation {:?}",
                                    m.len(),
                                    cur.shape()
                                )));
                            }
                            m.clone()
                        }
                    };
                    dropout_idx += 1;
                    let mut y = cur.clone();
                    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                        *v = *v * m;
                    }
                    (y, Cache::Dropout(mask))
                }
                LayerKind::BilinearUpsample => (bilinear_upsample(&cur, layer.spec.factor)?, Cache::None),
            };
            inputs.push(cur);
            caches.push(cache);
            cur = next;
        }
        Ok((cur, StackTrace { inputs, caches }))
    }

    /// Returns the input gradient and one entry per layer (Some for
    /// parameterised layers).
    pub fn backward(&self, trace: &StackTrace<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerGrad<T>>)> {
        let mut grads: Vec<LayerGrad<T>> = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[idx];
            g = match (&trace.caches[idx], layer.spec.kind) {
                (_, LayerKind::Conv | LayerKind::Score) => {
                    let w = layer.weight.as_ref().expect("conv weight");
                    let cg = conv2d_backward(x, w, &g, layer.spec.stride, layer.spec.pad)?;
                    grads[idx] = Some((cg.weights, cg.bias));
                    cg.input
                }
                (Cache::Relu, _) => {
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    d
                }
                (Cache::Pool(am), _) => maxpool_backward(x.shape(), am, &g)?,
                (Cache::Dropout(mask), _) => {
                    let mut d = g;
                    for (dv, &m) in d.data_mut().iter_mut().zip(mask) {
                        *dv = *dv * m;
                    }
                    d
                }
                (_, LayerKind::BilinearUpsample) => bilinear_upsample_backward(&g, layer.spec.factor)?,
                (c, k) => unreachable!("cache {c:?} for layer kind {k:?}"),
            };
        }
        Ok((g, grads))
    }

    /// Mutable parameter views, weight then bias per layer, names prefixed.
    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let lr = layer.spec.lr_multiplier;
            let name = format!("{prefix}{}", layer.spec.name);
            if let Some(w) = layer.weight.as_mut() {
                out.push(ParamMut {
                    name: format!("{name}.weight"),
                    value: w,
                    is_bias: false,
                    lr_multiplier: lr,
                });
            }
            if let Some(b) = layer.bias.as_mut() {
                out.push(ParamMut {
                    name: format!("{name}.bias"),
                    value: b,
                    is_bias: true,
                    lr_multiplier: lr,
                });
            }
        }
        out
    }

    /// Named parameters in the same order as [`Stack::params_mut`].
    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let (Some(w), Some(b)) = (&layer.weight, &layer.bias) {
                out.push((format!("{prefix}{}.weight", layer.spec.name), w));
                out.push((format!("{prefix}{}.bias", layer.spec.name), b));
            }
        }
        out
    }
}

/// Flattens per-layer gradients into the order of [`Stack::params_mut`].
pub fn flatten_grads<T>(grads: Vec<LayerGrad<T>>) -> Vec<Tensor<T>> {
    grads
        .into_iter()
        .flatten()
        .flat_map(|(w, b)| [w, b])
        .collect()
}

fn conv_forward<T: Real>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = layer.weight.as_ref().expect("conv weight");
    let b = layer.bias.as_ref().expect("conv bias");
    conv2d(x, w, b.data(), layer.spec.stride, layer.spec.pad).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!("layer `{}`: {msg}", layer.spec.name)),
        other => other,
    })
}

/// Channel widths of the desk-scale fully convolutional network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyFcnWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub fc: usize,
}

impl Default for ToyFcnWidths {
    fn default() -> Self {
        Self {
            conv1: 16,
            conv2: 32,
            fc: 32,
        }
    }
}

/// Layers up to and including the final pooling layer.
pub fn toyfcn_trunk(w: ToyFcnWidths) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv("conv1", 3, w.conv1, 1),
        LayerSpec::relu("relu1"),
        LayerSpec::maxpool("pool1", 2, 2),
        LayerSpec::conv("conv2", 3, w.conv2, 1),
        LayerSpec::relu("relu2"),
        LayerSpec::maxpool("pool2", 2, 2),
    ]
}

/// The final two convolutions (fc-analog and score) plus upsampling back to
/// input resolution.
pub fn toyfcn_head(w: ToyFcnWidths, dropout_ratio: f32) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv("fc", 3, w.fc, 1),
        LayerSpec::relu("relu_fc"),
        LayerSpec::dropout("drop", dropout_ratio),
        LayerSpec::score("score"),
        LayerSpec::upsample("upscore", 4),
    ]
}

pub fn toyfcn(w: ToyFcnWidths, dropout_ratio: f32) -> Vec<LayerSpec> {
    let mut v = toyfcn_trunk(w);
    v.extend(toyfcn_head(w, dropout_ratio));
    v
}

/// Spatial downsampling of the trunk; inputs must be divisible by it.
pub const TOYFCN_STRIDE: usize = 4;
