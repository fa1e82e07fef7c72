//! Initialising fusion networks from single-modality parents.
//!
//! Colour arms come from the rgb parent; depth and hha arms come from the
//! hha parent.

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ParentRef};
use super::network::{build_network, Body, FusionNet};
use super::spec::{FusionKind, FusionSpec, Modality};
use crate::error::{Error, Result};
use crate::nn::{Init, Layer, LayerKind, Stack};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation of a replacement score layer.
pub const FRESH_SCORE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSource {
    Parent {
        role: String,
        parent_id: String,
        layer: String,
    },
    /// First-layer filters concatenated over input channels, colour parent
    /// first; the bias comes from the colour parent.
    FirstLayerConcat {
        parent_ids: [String; 2],
        layer: String,
    },
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOrigin {
    pub layer: String,
    pub source: LayerSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferAudit {
    pub layers: Vec<LayerOrigin>,
}

/// Pretrained single-modality parents.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parents<'a> {
    pub rgb: Option<&'a Checkpoint>,
    pub hha: Option<&'a Checkpoint>,
}

impl<'a> Parents<'a> {
    pub fn for_modality(&self, m: Modality) -> Result<(&'static str, &'a Checkpoint)> {
        let (role, ck) = match m {
            Modality::Rgb => ("rgb", self.rgb),
            Modality::Depth | Modality::Hha => ("hha", self.hha),
        };
        ck.map(|c| (role, c))
            .ok_or_else(|| Error::MissingCheckpoint(format!("{role} parent (needed for the {m} arm)")))
    }

    pub fn refs(&self) -> Vec<ParentRef> {
        [("rgb", self.rgb), ("hha", self.hha)]
            .into_iter()
            .filter_map(|(role, c)| {
                c.map(|c| ParentRef {
                    role: role.into(),
                    id: c.id().into(),
                })
            })
            .collect()
    }
}

fn single_stack(ck: &Checkpoint) -> Result<&Stack<f32>> {
    match (&ck.net.body, ck.net.spec.fusion) {
        (Body::Single(s), FusionKind::None) => Ok(s),
        _ => Err(Error::Transfer {
            layer: "*".into(),
            reason: format!("parent {} ({}) is not a single-modality network", ck.id(), ck.net.id()),
        }),
    }
}

fn parent_layer<'a>(stack: &'a Stack<f32>, name: &str, ck: &Checkpoint) -> Result<&'a Layer<f32>> {
    stack.layer(name).ok_or_else(|| Error::Transfer {
        layer: name.into(),
        reason: format!("parent {} has no such layer", ck.id()),
    })
}

fn copy_layer(dst: &mut Layer<f32>, src: &Layer<f32>, full_name: &str) -> Result<()> {
    let same = |a: &Option<Tensor<f32>>, b: &Option<Tensor<f32>>| a.as_ref().map(Tensor::shape) == b.as_ref().map(Tensor::shape);
    if !same(&dst.weight, &src.weight) || !same(&dst.bias, &src.bias) {
        return Err(Error::Transfer {
            layer: full_name.into(),
            reason: format!(
                "shape {:?} cannot take parent weights of shape {:?}",
                dst.weight.as_ref().map(Tensor::shape),
                src.weight.as_ref().map(Tensor::shape)
            ),
        });
    }
    dst.weight = src.weight.clone();
    dst.bias = src.bias.clone();
    Ok(())
}

fn from_parent(role: &str, ck: &Checkpoint, layer: &str) -> LayerSource {
    LayerSource::Parent {
        role: role.into(),
        parent_id: ck.id().into(),
        layer: layer.into(),
    }
}

/// Copies every parameterised layer of `dst` from the same-named layer of
/// `ck`, except score layers when `fresh_score` is set.
fn copy_stack(
    dst: &mut Stack<f32>,
    prefix: &str,
    role: &str,
    ck: &Checkpoint,
    fresh_score: bool,
    rng: &mut Rng,
    audit: &mut TransferAudit,
) -> Result<()> {
    let src = single_stack(ck)?;
    for layer in dst.layers.iter_mut().filter(|l| l.spec.has_params()) {
        let name = layer.spec.name.clone();
        let full = format!("{prefix}{name}");
        let source = if fresh_score && layer.spec.kind == LayerKind::Score {
            layer.init(Init::Gaussian(FRESH_SCORE_SIGMA), rng);
            LayerSource::Fresh
        } else {
            copy_layer(layer, parent_layer(src, &name, ck)?, &full)?;
            from_parent(role, ck, &name)
        };
        audit.layers.push(LayerOrigin { layer: full, source });
    }
    Ok(())
}

fn concat_in_channels(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("cannot concatenate filters {sa:?} and {sb:?}")));
    }
    let (o, ia, ib, k) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut out = Vec::with_capacity(o * (ia + ib) * k);
    for oc in 0..o {
        out.extend_from_slice(&a.data()[oc * ia * k..(oc + 1) * ia * k]);
        out.extend_from_slice(&b.data()[oc * ib * k..(oc + 1) * ib * k]);
    }
    Tensor::from_vec(&[o, ia + ib, sa[2], sa[3]], out)
}

fn init_early(stack: &mut Stack<f32>, spec: &FusionSpec, parents: &Parents, audit: &mut TransferAudit) -> Result<()> {
    let (role_a, ck_a) = parents.for_modality(spec.modalities[0])?;
    let (_, ck_b) = parents.for_modality(spec.modalities[1])?;
    let (src_a, src_b) = (single_stack(ck_a)?, single_stack(ck_b)?);
    let first = stack
        .layers
        .iter()
        .position(|l| l.spec.has_params())
        .ok_or_else(|| Error::InvalidSpec("early fusion network has no parameterised layer".into()))?;
    for (idx, layer) in stack.layers.iter_mut().enumerate().filter(|(_, l)| l.spec.has_params()) {
        let name = layer.spec.name.clone();
        let la = parent_layer(src_a, &name, ck_a)?;
        if idx == first {
            let lb = parent_layer(src_b, &name, ck_b)?;
            let (wa, wb) = (la.weight.as_ref(), lb.weight.as_ref());
            let w = match (wa, wb) {
                (Some(wa), Some(wb)) => concat_in_channels(wa, wb).map_err(|e| Error::Transfer {
                    layer: name.clone(),
                    reason: e.to_string(),
                })?,
                _ => {
                    return Err(Error::Transfer {
                        layer: name,
                        reason: "parent layer has no weights".into(),
                    })
                }
            };
            if layer.weight.as_ref().map(Tensor::shape) != Some(w.shape()) {
                return Err(Error::Transfer {
                    layer: name,
                    reason: format!("concatenated filters {:?} do not fit", w.shape()),
                });
            }
            layer.weight = Some(w);
            layer.bias = la.bias.clone();
            audit.layers.push(LayerOrigin {
                layer: name.clone(),
                source: LayerSource::FirstLayerConcat {
                    parent_ids: [ck_a.id().into(), ck_b.id().into()],
                    layer: name,
                },
            });
        } else {
            copy_layer(layer, la, &name)?;
            audit.layers.push(LayerOrigin {
                layer: name.clone(),
                source: from_parent(role_a, ck_a, &name),
            });
        }
    }
    Ok(())
}

/// Initialises `net` from its parents:
///
/// * non-fusion: the parent's layers with a fresh score layer;
/// * early: first-layer filters of both parents side by side, every other
///   layer from the colour parent;
/// * mid: each arm from its parent, shared layers freshly initialised;
/// * late fusion: both arms copied whole.
pub fn init_transfer(net: &mut FusionNet<f32>, parents: &Parents, rng: &mut Rng) -> Result<TransferAudit> {
    let spec = net.spec.clone();
    let prefixes = net.stack_prefixes();
    let mut audit = TransferAudit::default();
    match &mut net.body {
        Body::Single(stack) if spec.fusion == FusionKind::Early => init_early(stack, &spec, parents, &mut audit)?,
        Body::Single(stack) => {
            let (role, ck) = parents.for_modality(spec.modalities[0])?;
            copy_stack(stack, &prefixes[0], role, ck, true, rng, &mut audit)?;
        }
        Body::Mid { arms, shared } => {
            for (k, arm) in arms.iter_mut().enumerate() {
                let (role, ck) = parents.for_modality(spec.modalities[k])?;
                copy_stack(arm, &prefixes[k], role, ck, false, rng, &mut audit)?;
            }
            shared.init(Init::Default, rng);
            for l in shared.layers.iter().filter(|l| l.spec.has_params()) {
                audit.layers.push(LayerOrigin {
                    layer: format!("{}{}", prefixes[2], l.spec.name),
                    source: LayerSource::Fresh,
                });
            }
        }
        Body::Overlay { arms } | Body::Proportional { arms } => {
            for (k, arm) in arms.iter_mut().enumerate() {
                let (role, ck) = parents.for_modality(spec.modalities[k])?;
                copy_stack(arm, &prefixes[k], role, ck, false, rng, &mut audit)?;
            }
        }
    }
    Ok(audit)
}

/// Late overlay built from two independently trained single-modality
/// networks (colour first).
pub fn compose_late_overlay(spec: &FusionSpec, rgb: Option<&Checkpoint>, other: Option<&Checkpoint>) -> Result<(FusionNet<f32>, TransferAudit)> {
    if spec.fusion != FusionKind::LateOverlay {
        return Err(Error::InvalidSpec(format!("{} is not a late overlay spec", spec.id())));
    }
    let mut net = build_network::<f32>(spec)?;
    let prefixes = net.stack_prefixes();
    let mut audit = TransferAudit::default();
    let cks = [rgb, other];
    let Body::Overlay { arms } = &mut net.body else {
        unreachable!("late overlay spec builds an overlay body")
    };
    for (k, arm) in arms.iter_mut().enumerate() {
        let m = spec.modalities[k];
        let ck = cks[k].ok_or_else(|| {
            Error::MissingCheckpoint(format!(
                "trained single-modality {m} network for {}: train the non-fusion {m} network first",
                spec.id()
            ))
        })?;
        if ck.net.spec.modalities != [m] {
            return Err(Error::Transfer {
                layer: prefixes[k].clone(),
                reason: format!("checkpoint {} is a {} network, expected {m}", ck.id(), ck.net.id()),
            });
        }
        let mut rng = crate::rng::seeded(0);
        copy_stack(arm, &prefixes[k], m.as_str(), ck, false, &mut rng, &mut audit)?;
    }
    Ok((net, audit))
}

/// Checks that every layer attributed to a parent is byte-identical to it.
pub fn verify_audit(net: &FusionNet<f32>, audit: &TransferAudit, checkpoints: &[&Checkpoint]) -> Result<()> {
    let find = |id: &str| {
        checkpoints
            .iter()
            .find(|c| c.id() == id)
            .ok_or_else(|| Error::MissingCheckpoint(format!("audited parent {id}")))
    };
    let params = net.params();
    let param = |name: String| {
        params
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Transfer {
                layer: name.clone(),
                reason: "not in network".into(),
            })
    };
    let prefixed_param_count = audit.layers.len();
    if prefixed_param_count * 2 != params.len() {
        return Err(Error::Transfer {
            layer: "*".into(),
            reason: format!("audit lists {prefixed_param_count} layers for {} parameters", params.len()),
        });
    }
    for origin in &audit.layers {
        let w = param(format!("{}.weight", origin.layer))?;
        let b = param(format!("{}.bias", origin.layer))?;
        let mismatch = |what: &str| Error::Transfer {
            layer: origin.layer.clone(),
            reason: format!("{what} differs from its recorded source"),
        };
        match &origin.source {
            LayerSource::Fresh => {}
            LayerSource::Parent { parent_id, layer, .. } => {
                let ck = find(parent_id)?;
                let src = parent_layer(single_stack(ck)?, layer, ck)?;
                if src.weight.as_ref() != Some(w) {
                    return Err(mismatch("weight"));
                }
                if src.bias.as_ref() != Some(b) {
                    return Err(mismatch("bias"));
                }
            }
            LayerSource::FirstLayerConcat { parent_ids, layer } => {
                let (ca, cb) = (find(&parent_ids[0])?, find(&parent_ids[1])?);
                let la = parent_layer(single_stack(ca)?, layer, ca)?;
                let lb = parent_layer(single_stack(cb)?, layer, cb)?;
                let (Some(wa), Some(wb)) = (&la.weight, &lb.weight) else {
                    return Err(mismatch("weight"));
                };
                if &concat_in_channels(wa, wb)? != w {
                    return Err(mismatch("weight"));
                }
                if la.bias.as_ref() != Some(b) {
                    return Err(mismatch("bias"));
                }
            }
        }
    }
    Ok(())
}
