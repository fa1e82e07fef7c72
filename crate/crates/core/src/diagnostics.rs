//! Gradient verification over every layer kind and every trainable fusion
//! topology.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{build_network, FusionKind, FusionSpec, Hyperparams, Modality, NetInputs, NetObjective, ProportionalMode};
use crate::nn::{gradcheck, softmax_xent_sum, DropoutMode, GradcheckReport, Init, LayerKind, LayerSpec, Objective, Stack};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const GRADCHECK_EPSILON: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// One stack, one input and frozen dropout masks.
pub struct StackObjective {
    pub stack: Stack<f64>,
    pub input: Tensor<f64>,
    pub target: Vec<bool>,
    masks: Vec<Vec<f64>>,
}

impl StackObjective {
    pub fn new(stack: Stack<f64>, input: Tensor<f64>, target: Vec<bool>, rng: &mut Rng) -> Result<Self> {
        let (_, trace) = stack.forward(&input, DropoutMode::Sample(rng))?;
        let masks = trace.dropout_masks();
        Ok(Self {
            stack,
            input,
            target,
            masks,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor<f64>)> {
        self.stack.params("")
    }
}

impl Objective for StackObjective {
    fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|(_, t)| t.len()).collect()
    }

    fn param_name(&self, index: usize) -> String {
        self.params()[index].0.clone()
    }

    fn get(&self, param: usize, elem: usize) -> f64 {
        self.params()[param].1.data()[elem]
    }

    fn set(&mut self, param: usize, elem: usize, value: f64) {
        let mut p = self.stack.params_mut("");
        p[param].value.data_mut()[elem] = value;
    }

    fn loss(&self) -> Result<(f64, u64)> {
        let (y, trace) = self.stack.forward(&self.input, DropoutMode::Fixed(&self.masks))?;
        let mut h = DefaultHasher::new();
        trace.branch_signature(&mut h);
        Ok((softmax_xent_sum(&y, &self.target, None)?.loss, h.finish()))
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<Tensor<f64>>)> {
        let (y, trace) = self.stack.forward(&self.input, DropoutMode::Fixed(&self.masks))?;
        let out = softmax_xent_sum(&y, &self.target, None)?;
        let (_, grads) = self.stack.backward(&trace, &out.grad)?;
        Ok((out.loss, crate::nn::flatten_grads(grads)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
    pub passed: bool,
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_target(n: usize, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.3)).collect()
}

/// Stacks exercising each layer kind; every one starts with a 3x3 conv so
/// there are enough parameters to sample.
fn layer_cases() -> Vec<(&'static str, Vec<LayerSpec>)> {
    let conv = || LayerSpec::conv("conv", 3, 8, 1);
    vec![
        ("conv", vec![conv(), LayerSpec::conv("conv_b", 3, 4, 1), LayerSpec::score("score")]),
        ("relu", vec![conv(), LayerSpec::relu("relu"), LayerSpec::score("score")]),
        ("maxpool", vec![conv(), LayerSpec::maxpool("pool", 2, 2), LayerSpec::score("score"), LayerSpec::upsample("up", 2)]),
        ("dropout", vec![conv(), LayerSpec::dropout("drop", 0.5), LayerSpec::score("score")]),
        ("score", vec![conv(), LayerSpec::score("score")]),
        ("bilinear_upsample", vec![
            LayerSpec {
                stride: 2,
                ..conv()
            },
            LayerSpec::score("score"),
            LayerSpec::upsample("up", 2),
        ]),
    ]
}

fn topology_cases() -> Vec<(String, FusionKind, Vec<Modality>, ProportionalMode)> {
    use Modality::*;
    let pp = ProportionalMode::PerPixel;
    vec![
        ("none-rgb".into(), FusionKind::None, vec![Rgb], pp),
        ("early-rgb+hha".into(), FusionKind::Early, vec![Rgb, Hha], pp),
        ("mid-rgb+depth".into(), FusionKind::Mid, vec![Rgb, Depth], pp),
        ("late_proportional-rgb+hha".into(), FusionKind::LateProportional, vec![Rgb, Hha], pp),
        (
            "late_proportional-rgb+hha/per_image".into(),
            FusionKind::LateProportional,
            vec![Rgb, Hha],
            ProportionalMode::PerImage,
        ),
    ]
}

/// Checks `samples` parameters per layer kind and per topology.
pub fn gradcheck_suite(samples: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let entry = |name: String, report: GradcheckReport| SuiteEntry {
        passed: report.checked >= samples && report.max_relative_error <= GRADCHECK_TOLERANCE,
        name,
        report,
    };
    for (name, specs) in layer_cases() {
        let mut rng = stream(seed, &format!("gradcheck/layer/{name}"));
        let mut stack = Stack::<f64>::new(&specs, 3)?;
        stack.init(Init::Default, &mut rng);
        for l in stack.layers.iter_mut().filter(|l| l.spec.kind == LayerKind::Score) {
            l.init(Init::Gaussian(0.3), &mut rng);
        }
        let input = random_tensor(&[3, 8, 8], &mut rng);
        let target = random_target(64, &mut rng);
        let mut obj = StackObjective::new(stack, input, target, &mut rng)?;
        out.push(entry(format!("layer/{name}"), gradcheck(&mut obj, GRADCHECK_EPSILON, samples, &mut rng)?));
    }
    for (name, kind, mods, mode) in topology_cases() {
        let mut rng = stream(seed, &format!("gradcheck/net/{name}"));
        let mut spec = FusionSpec::standard(kind, &mods, Hyperparams::default())?;
        spec.proportional_mode = mode;
        let mut net = build_network::<f64>(&spec)?;
        net.init_fresh(&mut rng);
        for s in net.stacks_mut() {
            for l in s.layers.iter_mut().filter(|l| l.spec.kind == LayerKind::Score) {
                l.init(Init::Gaussian(0.3), &mut rng);
            }
        }
        let inputs = NetInputs {
            modalities: mods.iter().map(|_| random_tensor(&[3, 8, 8], &mut rng)).collect(),
            depth_valid: Some(vec![true; 64]),
        };
        let target = random_target(64, &mut rng);
        let mut obj = NetObjective::new(net, inputs, target, &mut rng)?;
        out.push(entry(format!("net/{name}"), gradcheck(&mut obj, GRADCHECK_EPSILON, samples, &mut rng)?));
    }
    Ok(out)
}
