//! Runtime networks for every fusion topology.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::late::{late_overlay, late_proportional, mixture_nll, PredictionMap};
use super::spec::{FusionKind, FusionSpec, Modality};
use crate::error::{Error, Result};
use crate::nn::gradcheck::Objective;
use crate::nn::layer::LayerGrad;
use crate::nn::{flatten_grads, softmax_xent_sum, DropoutMode, Init, ParamMut, Stack, StackTrace, TOYFCN_STRIDE};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Network inputs for one frame: one `3 x H x W` tensor per modality, in the
/// spec's modality order, plus the depth validity mask used by late overlay.
#[derive(Debug, Clone)]
pub struct NetInputs<T> {
    pub modalities: Vec<Tensor<T>>,
    pub depth_valid: Option<Vec<bool>>,
}

impl<T: Real> NetInputs<T> {
    pub fn cast<U: Real>(&self) -> NetInputs<U> {
        NetInputs {
            modalities: self.modalities.iter().map(Tensor::cast).collect(),
            depth_valid: self.depth_valid.clone(),
        }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .modalities
            .first()
            .ok_or_else(|| Error::MissingModality("no input modalities".into()))?;
        let (_, h, w) = first.chw()?;
        Ok((h, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body<T> {
    /// Non-fusion and early fusion: one stack end to end.
    Single(Stack<T>),
    /// Two trunks concatenated after their final pooling, then shared head.
    Mid { arms: [Stack<T>; 2], shared: Stack<T> },
    /// Two complete networks whose score maps are summed where depth is valid.
    Overlay { arms: [Stack<T>; 2] },
    /// Two complete networks mixed by relative confidence.
    Proportional { arms: [Stack<T>; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet<T> {
    pub spec: FusionSpec,
    pub body: Body<T>,
}

/// Dropout behaviour for a whole network; `Fixed` holds per-stack masks in
/// parameter order.
pub enum NetDropout<'a, T> {
    Eval,
    Sample(&'a mut Rng),
    Fixed(&'a [Vec<Vec<T>>]),
}

pub struct NetTrace<T> {
    stacks: Vec<StackTrace<T>>,
    mixture_argmax: Option<[Vec<usize>; 2]>,
}

impl<T: Real> NetTrace<T> {
    pub fn dropout_masks(&self) -> Vec<Vec<Vec<T>>> {
        self.stacks.iter().map(StackTrace::dropout_masks).collect()
    }

    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.stacks {
            s.branch_signature(&mut h);
        }
        if let Some(am) = &self.mixture_argmax {
            am.hash(&mut h);
        }
        h.finish()
    }
}

/// Loss, gradients in parameter order, and the trace of the pass.
pub struct LossAndGrad<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub trace: NetTrace<T>,
}

/// Builds the runtime network for `spec` with zeroed parameters.
pub fn build_network<T: Real>(spec: &FusionSpec) -> Result<FusionNet<T>> {
    spec.validate()?;
    let chans = spec.arm_input_channels();
    let body = match spec.fusion {
        FusionKind::None | FusionKind::Early => Body::Single(Stack::new(&spec.arms[0], chans[0])?),
        FusionKind::Mid => {
            let a = Stack::new(&spec.arms[0], chans[0])?;
            let b = Stack::new(&spec.arms[1], chans[1])?;
            let concat = a.out_channels() + b.out_channels();
            let shared = Stack::new(&spec.shared, concat)?;
            Body::Mid { arms: [a, b], shared }
        }
        FusionKind::LateOverlay => Body::Overlay {
            arms: [Stack::new(&spec.arms[0], chans[0])?, Stack::new(&spec.arms[1], chans[1])?],
        },
        FusionKind::LateProportional => Body::Proportional {
            arms: [Stack::new(&spec.arms[0], chans[0])?, Stack::new(&spec.arms[1], chans[1])?],
        },
    };
    Ok(FusionNet { spec: spec.clone(), body })
}

impl<T: Real> FusionNet<T> {
    pub fn id(&self) -> String {
        self.spec.id()
    }

    /// Input channel count of the first layer of each arm.
    pub fn input_channels(&self) -> Vec<usize> {
        self.stacks().iter().take(self.arm_count()).map(|s| s.in_channels).collect()
    }

    fn arm_count(&self) -> usize {
        match self.body {
            Body::Single(_) => 1,
            _ => 2,
        }
    }

    /// Stacks in parameter order.
    pub fn stacks(&self) -> Vec<&Stack<T>> {
        match &self.body {
            Body::Single(s) => vec![s],
            Body::Mid { arms, shared } => vec![&arms[0], &arms[1], shared],
            Body::Overlay { arms } | Body::Proportional { arms } => vec![&arms[0], &arms[1]],
        }
    }

    pub fn stacks_mut(&mut self) -> Vec<&mut Stack<T>> {
        match &mut self.body {
            Body::Single(s) => vec![s],
            Body::Mid { arms, shared } => {
                let [a, b] = arms;
                vec![a, b, shared]
            }
            Body::Overlay { arms } | Body::Proportional { arms } => {
                let [a, b] = arms;
                vec![a, b]
            }
        }
    }

    /// Parameter-name prefix of each stack, in parameter order.
    pub fn stack_prefixes(&self) -> Vec<String> {
        let m = &self.spec.modalities;
        match self.body {
            Body::Single(_) => vec![String::new()],
            Body::Mid { .. } => vec![format!("{}.", m[0]), format!("{}.", m[1]), "shared.".into()],
            _ => vec![format!("{}.", m[0]), format!("{}.", m[1])],
        }
    }

    /// Fresh initialisation of every parameterised layer.
    pub fn init_fresh(&mut self, rng: &mut Rng) {
        for s in self.stacks_mut() {
            s.init(Init::Default, rng);
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let prefixes = self.stack_prefixes();
        self.stacks_mut()
            .into_iter()
            .zip(prefixes)
            .flat_map(|(s, p)| s.params_mut(&p))
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let prefixes = self.stack_prefixes();
        self.stacks()
            .into_iter()
            .zip(prefixes)
            .flat_map(|(s, p)| s.params(&p))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> FusionNet<U> {
        let body = match &self.body {
            Body::Single(s) => Body::Single(s.cast()),
            Body::Mid { arms, shared } => Body::Mid {
                arms: [arms[0].cast(), arms[1].cast()],
                shared: shared.cast(),
            },
            Body::Overlay { arms } => Body::Overlay {
                arms: [arms[0].cast(), arms[1].cast()],
            },
            Body::Proportional { arms } => Body::Proportional {
                arms: [arms[0].cast(), arms[1].cast()],
            },
        };
        FusionNet {
            spec: self.spec.clone(),
            body,
        }
    }

    fn check_inputs(&self, inputs: &NetInputs<T>) -> Result<()> {
        if inputs.modalities.len() != self.spec.modalities.len() {
            return Err(Error::MissingModality(format!(
                "{} expects modalities {:?}, got {} input tensors",
                self.id(),
                self.spec.modalities,
                inputs.modalities.len()
            )));
        }
        let (h, w) = inputs.dims()?;
        for t in &inputs.modalities {
            let (c, th, tw) = t.chw()?;
            if (th, tw) != (h, w) || c != 3 {
                return Err(Error::Shape(format!(
                    "modality tensors must all be 3 x {h} x {w}, got {:?}",
                    t.shape()
                )));
            }
        }
        if h % TOYFCN_STRIDE != 0 || w % TOYFCN_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by the network stride {TOYFCN_STRIDE}"
            )));
        }
        Ok(())
    }

    fn stack_mode<'a>(mode: &'a mut NetDropout<'_, T>, idx: usize) -> DropoutMode<'a, T> {
        match mode {
            NetDropout::Eval => DropoutMode::Eval,
            NetDropout::Sample(rng) => DropoutMode::Sample(rng),
            NetDropout::Fixed(m) => DropoutMode::Fixed(&m[idx]),
        }
    }

    /// Score maps: one for single/mid networks, two for late fusion.
    fn forward_scores(&self, inputs: &NetInputs<T>, mut mode: NetDropout<'_, T>) -> Result<(Vec<Tensor<T>>, Vec<StackTrace<T>>)> {
        self.check_inputs(inputs)?;
        let m = &inputs.modalities;
        match &self.body {
            Body::Single(s) => {
                let x = if m.len() == 1 {
                    m[0].clone()
                } else {
                    Tensor::concat_channels(&m.iter().collect::<Vec<_>>())?
                };
                let (y, t) = s.forward(&x, Self::stack_mode(&mut mode, 0))?;
                Ok((vec![y], vec![t]))
            }
            Body::Mid { arms, shared } => {
                let (a, ta) = arms[0].forward(&m[0], Self::stack_mode(&mut mode, 0))?;
                let (b, tb) = arms[1].forward(&m[1], Self::stack_mode(&mut mode, 1))?;
                let cat = Tensor::concat_channels(&[&a, &b])?;
                let (y, ts) = shared.forward(&cat, Self::stack_mode(&mut mode, 2))?;
                Ok((vec![y], vec![ta, tb, ts]))
            }
            Body::Overlay { arms } | Body::Proportional { arms } => {
                let (a, ta) = arms[0].forward(&m[0], Self::stack_mode(&mut mode, 0))?;
                let (b, tb) = arms[1].forward(&m[1], Self::stack_mode(&mut mode, 1))?;
                Ok((vec![a, b], vec![ta, tb]))
            }
        }
    }

    /// Training loss (summed over pixels) and gradients for one frame.
    /// `target[i]` is true where pixel `i` is a trip hazard.
    pub fn loss_and_grad(&self, inputs: &NetInputs<T>, target: &[bool], mode: NetDropout<'_, T>) -> Result<LossAndGrad<T>> {
        if matches!(self.body, Body::Overlay { .. }) {
            return Err(Error::InvalidArgument(
                "late overlay has no joint training; train its single-modality arms instead".into(),
            ));
        }
        let (scores, traces) = self.forward_scores(inputs, mode)?;
        let (loss, dscores, mixture_argmax) = if let [a, b] = &scores[..] {
            let ml = mixture_nll(a, b, target, self.spec.proportional_mode)?;
            let [ga, gb] = ml.grads;
            (ml.loss, vec![ga, gb], Some(ml.argmax))
        } else {
            let out = softmax_xent_sum(&scores[0], target, None)?;
            (out.loss, vec![out.grad], None)
        };
        let grads = self.backward(&traces, dscores)?;
        Ok(LossAndGrad {
            loss,
            grads,
            trace: NetTrace {
                stacks: traces,
                mixture_argmax,
            },
        })
    }

    /// Loss only, for validation and finite differences.
    pub fn loss(&self, inputs: &NetInputs<T>, target: &[bool], mode: NetDropout<'_, T>) -> Result<(T, NetTrace<T>)> {
        let (scores, traces) = self.forward_scores(inputs, mode)?;
        let (loss, mixture_argmax) = if let [a, b] = &scores[..] {
            let ml = mixture_nll(a, b, target, self.spec.proportional_mode)?;
            (ml.loss, Some(ml.argmax))
        } else {
            (softmax_xent_sum(&scores[0], target, None)?.loss, None)
        };
        Ok((
            loss,
            NetTrace {
                stacks: traces,
                mixture_argmax,
            },
        ))
    }

    fn backward(&self, traces: &[StackTrace<T>], dscores: Vec<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        let per_stack: Vec<Vec<LayerGrad<T>>> = match &self.body {
            Body::Single(s) => vec![s.backward(&traces[0], &dscores[0])?.1],
            Body::Mid { arms, shared } => {
                let (dcat, gs) = shared.backward(&traces[2], &dscores[0])?;
                let parts = dcat.split_channels(&[arms[0].out_channels(), arms[1].out_channels()])?;
                let ga = arms[0].backward(&traces[0], &parts[0])?.1;
                let gb = arms[1].backward(&traces[1], &parts[1])?.1;
                vec![ga, gb, gs]
            }
            Body::Overlay { arms } | Body::Proportional { arms } => vec![
                arms[0].backward(&traces[0], &dscores[0])?.1,
                arms[1].backward(&traces[1], &dscores[1])?.1,
            ],
        };
        Ok(per_stack.into_iter().flat_map(flatten_grads).collect())
    }
}

impl FusionNet<f32> {
    /// Deterministic inference (dropout disabled).
    pub fn predict(&self, inputs: &NetInputs<f32>, frame_id: &str) -> Result<PredictionMap> {
        let (scores, _) = self.forward_scores(inputs, NetDropout::Eval)?;
        let id = self.id();
        match &self.body {
            Body::Single(_) | Body::Mid { .. } => PredictionMap::from_scores(scores.into_iter().next().expect("scores"), &id, frame_id),
            Body::Proportional { .. } => {
                let a = PredictionMap::from_scores(scores[0].clone(), &id, frame_id)?;
                let b = PredictionMap::from_scores(scores[1].clone(), &id, frame_id)?;
                let mut out = late_proportional([&a, &b], self.spec.proportional_mode)?;
                out.source = id;
                Ok(out)
            }
            Body::Overlay { .. } => {
                let valid = inputs
                    .depth_valid
                    .as_ref()
                    .ok_or_else(|| Error::MissingModality("depth validity mask for late overlay".into()))?;
                let a = PredictionMap::from_scores(scores[0].clone(), &id, frame_id)?;
                let b = PredictionMap::from_scores(scores[1].clone(), &id, frame_id)?;
                let mut out = late_overlay(&a, &b, valid, self.spec.overlay_mode)?;
                out.source = id;
                Ok(out)
            }
        }
    }
}

/// Binds a network, one frame and frozen dropout masks into a
/// finite-difference objective.
pub struct NetObjective {
    pub net: FusionNet<f64>,
    pub inputs: NetInputs<f64>,
    pub target: Vec<bool>,
    masks: Vec<Vec<Vec<f64>>>,
}

impl NetObjective {
    /// Draws dropout masks once from `rng`; they stay frozen afterwards.
    pub fn new(net: FusionNet<f64>, inputs: NetInputs<f64>, target: Vec<bool>, rng: &mut Rng) -> Result<Self> {
        let (_, trace) = net.loss(&inputs, &target, NetDropout::Sample(rng))?;
        let masks = trace.dropout_masks();
        Ok(Self {
            net,
            inputs,
            target,
            masks,
        })
    }

    fn with_param<R>(&mut self, param: usize, f: impl FnOnce(&mut Tensor<f64>) -> R) -> R {
        let mut params = self.net.params_mut();
        f(params[param].value)
    }
}

impl Objective for NetObjective {
    fn param_sizes(&self) -> Vec<usize> {
        self.net.params().iter().map(|(_, t)| t.len()).collect()
    }

    fn param_name(&self, index: usize) -> String {
        self.net.params()[index].0.clone()
    }

    fn get(&self, param: usize, elem: usize) -> f64 {
        self.net.params()[param].1.data()[elem]
    }

    fn set(&mut self, param: usize, elem: usize, value: f64) {
        self.with_param(param, |t| t.data_mut()[elem] = value);
    }

    fn loss(&self) -> Result<(f64, u64)> {
        let (l, trace) = self.net.loss(&self.inputs, &self.target, NetDropout::Fixed(&self.masks))?;
        Ok((l, trace.branch_signature()))
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<Tensor<f64>>)> {
        let out = self.net.loss_and_grad(&self.inputs, &self.target, NetDropout::Fixed(&self.masks))?;
        Ok((out.loss, out.grads))
    }
}

/// Modalities a network needs, in input order.
pub fn required_modalities(spec: &FusionSpec) -> &[Modality] {
    &spec.modalities
}
