//! Declarative descriptions of the fusion and single-modality networks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{toyfcn, toyfcn_head, toyfcn_trunk, LayerKind, LayerSpec, ToyFcnWidths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Depth,
    Hha,
}

impl Modality {
    pub const fn channels(self) -> usize {
        3
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Hha => "hha",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    Early,
    Mid,
    LateOverlay,
    LateProportional,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Early => "early",
            FusionKind::Mid => "mid",
            FusionKind::LateOverlay => "late_overlay",
            FusionKind::LateProportional => "late_proportional",
        }
    }
}

/// Granularity of the occupation weights in proportional fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProportionalMode {
    #[default]
    PerPixel,
    /// One weight per network per image, from the mean per-pixel confidence.
    PerImage,
}

/// What late overlay adds together where depth is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayMode {
    /// Pre-softmax score maps.
    #[default]
    Scores,
    /// Hard argmax masks (one-hot scores).
    HardMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub base_lr: f32,
    pub final_layer_mult: f32,
    #[serde(default = "one")]
    pub first_layer_mult: f32,
    #[serde(default = "one")]
    pub shared_layer_mult: f32,
    #[serde(default = "half")]
    pub dropout_ratio: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "two")]
    pub bias_lr_factor: f32,
    pub max_iterations: usize,
    /// Validation loss is measured every this many iterations.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    pub seed: u64,
}

fn one() -> f32 {
    1.0
}
fn two() -> f32 {
    2.0
}
fn half() -> f32 {
    0.5
}
fn default_momentum() -> f32 {
    crate::nn::optim::DEFAULT_MOMENTUM
}
fn default_val_every() -> usize {
    50
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            final_layer_mult: 5.0,
            first_layer_mult: 1.0,
            shared_layer_mult: 1.0,
            dropout_ratio: 0.5,
            momentum: default_momentum(),
            bias_lr_factor: 2.0,
            max_iterations: 1000,
            val_every: default_val_every(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let mults = [
            ("final_layer_mult", self.final_layer_mult),
            ("first_layer_mult", self.first_layer_mult),
            ("shared_layer_mult", self.shared_layer_mult),
        ];
        for (name, m) in mults {
            if !(m > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be > 0, got {m}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::InvalidSpec(format!(
                "dropout_ratio must lie in [0, 1), got {}",
                self.dropout_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::InvalidSpec(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidSpec("val_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub fusion: FusionKind,
    pub modalities: Vec<Modality>,
    /// One layer list per arm: a single arm for `none` and `early`, two for
    /// the other kinds. Mid-fusion arms stop at their final pooling layer.
    pub arms: Vec<Vec<LayerSpec>>,
    /// Layers after the mid-fusion concatenation; empty otherwise.
    #[serde(default)]
    pub shared: Vec<LayerSpec>,
    #[serde(default)]
    pub proportional_mode: ProportionalMode,
    #[serde(default)]
    pub overlay_mode: OverlayMode,
    pub hyperparams: Hyperparams,
}

impl FusionSpec {
    /// The desk-scale network for `fusion` over `modalities`, with layer
    /// multipliers taken from `hp`.
    pub fn standard(fusion: FusionKind, modalities: &[Modality], hp: Hyperparams) -> Result<Self> {
        let w = ToyFcnWidths::default();
        let (arms, shared) = match fusion {
            FusionKind::None | FusionKind::Early => (vec![toyfcn(w, 0.5)], vec![]),
            FusionKind::Mid => (vec![toyfcn_trunk(w), toyfcn_trunk(w)], toyfcn_head(w, hp.dropout_ratio)),
            FusionKind::LateOverlay | FusionKind::LateProportional => (vec![toyfcn(w, 0.5), toyfcn(w, 0.5)], vec![]),
        };
        let mut spec = Self {
            fusion,
            modalities: modalities.to_vec(),
            arms,
            shared,
            proportional_mode: ProportionalMode::default(),
            overlay_mode: OverlayMode::default(),
            hyperparams: hp,
        };
        spec.apply_hyperparams();
        spec.validate()?;
        Ok(spec)
    }

    /// Short identifier, e.g. `late_proportional-rgb+hha`.
    pub fn id(&self) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.as_str()).collect();
        format!("{}-{}", self.fusion.as_str(), mods.join("+"))
    }

    /// Input channel count of each arm (early fusion concatenates both
    /// modalities into one arm).
    pub fn arm_input_channels(&self) -> Vec<usize> {
        match self.fusion {
            FusionKind::Early => vec![self.modalities.iter().map(|m| m.channels()).sum()],
            _ => self.modalities.iter().map(|m| m.channels()).collect(),
        }
    }

    /// Pushes hyperparameter multipliers and dropout ratio into the layer
    /// specs: score layers get `final_layer_mult`, the first early-fusion
    /// convolution `first_layer_mult`, shared mid-fusion convolutions
    /// `shared_layer_mult` and the mid-fusion dropout `dropout_ratio`.
    pub fn apply_hyperparams(&mut self) {
        let hp = self.hyperparams.clone();
        let early = self.fusion == FusionKind::Early;
        for arm in &mut self.arms {
            let mut first = true;
            for l in arm.iter_mut() {
                match l.kind {
                    LayerKind::Score => l.lr_multiplier = hp.final_layer_mult,
                    LayerKind::Conv if first && early => l.lr_multiplier = hp.first_layer_mult,
                    _ => {}
                }
                if l.has_params() {
                    first = false;
                }
            }
        }
        for l in &mut self.shared {
            match l.kind {
                LayerKind::Score => l.lr_multiplier = hp.final_layer_mult,
                LayerKind::Conv => l.lr_multiplier = hp.shared_layer_mult,
                LayerKind::Dropout => l.dropout_ratio = hp.dropout_ratio,
                _ => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| Err(Error::InvalidSpec(format!("{}: {rule}", self.id())));
        self.hyperparams.validate()?;
        match self.fusion {
            FusionKind::None => {
                if self.modalities.len() != 1 {
                    return fail("non-fusion networks take exactly one modality");
                }
            }
            _ => {
                if self.modalities.len() != 2 {
                    return fail("fusion networks take exactly two modalities");
                }
                if self.modalities[0] != Modality::Rgb {
                    return fail("the first fused modality must be rgb");
                }
                if self.modalities[1] == Modality::Rgb {
                    return fail("the second fused modality must be depth or hha");
                }
            }
        }
        let want_arms = match self.fusion {
            FusionKind::None | FusionKind::Early => 1,
            _ => 2,
        };
        if self.arms.len() != want_arms {
            return fail(&format!("expected {want_arms} arm layer lists, got {}", self.arms.len()));
        }
        for layer in self.arms.iter().flatten().chain(&self.shared) {
            layer.validate()?;
        }
        let ends_in_score = |layers: &[LayerSpec]| {
            layers
                .iter()
                .rev()
                .find(|l| l.has_params())
                .is_some_and(|l| l.kind == LayerKind::Score)
        };
        match self.fusion {
            FusionKind::Mid => {
                if self.shared.is_empty() {
                    return fail("mid fusion needs shared layers");
                }
                if !ends_in_score(&self.shared) {
                    return fail("mid fusion shared layers must end in a score layer");
                }
                if self.arms.iter().any(|a| a.iter().any(|l| l.kind == LayerKind::Score)) {
                    return fail("mid fusion arms must stop before the score layer");
                }
            }
            _ => {
                if !self.shared.is_empty() {
                    return fail("only mid fusion has shared layers (late overlay has no trainable fusion parameters)");
                }
                if !self.arms.iter().all(|a| ends_in_score(a)) {
                    return fail("every arm must end in a score layer");
                }
            }
        }
        Ok(())
    }
}

/// The 11 approaches compared: three single-modality networks and four
/// fusion kinds over rgb+depth and rgb+hha.
pub fn table_approaches() -> Vec<(FusionKind, Vec<Modality>)> {
    use FusionKind::*;
    use Modality::*;
    let mut v = vec![(None, vec![Rgb]), (None, vec![Depth]), (None, vec![Hha])];
    for kind in [Early, Mid, LateOverlay, LateProportional] {
        v.push((kind, vec![Rgb, Depth]));
        v.push((kind, vec![Rgb, Hha]));
    }
    v
}
