//! SGD fine-tuning with batch size 1.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{FusionNet, NetDropout, NetInputs};
use super::spec::Modality;
use crate::dataset::LabeledFrame;
use crate::error::{Error, Result};
use crate::nn::{sgd_momentum_step, OptimState};
use crate::rng::stream;

/// A frame converted to network inputs and a per-pixel trip target.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub frame_id: String,
    pub inputs: NetInputs<f32>,
    pub target: Vec<bool>,
}

impl TrainFrame {
    pub fn new(frame: &LabeledFrame, modalities: &[Modality]) -> Result<Self> {
        Ok(Self {
            frame_id: frame.frame_id.clone(),
            inputs: frame.net_inputs(modalities)?,
            target: frame.trip_mask(),
        })
    }
}

pub fn prepare_frames(frames: &[&LabeledFrame], modalities: &[Modality]) -> Result<Vec<TrainFrame>> {
    frames.iter().map(|f| TrainFrame::new(f, modalities)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    /// Stopped at `iteration` (1-based) on a non-finite loss or gradient.
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    #[serde(flatten)]
    pub status: TrainStatus,
    pub iterations_run: usize,
    /// Iteration whose weights were kept (0 = the initial weights).
    pub best_iteration: usize,
    /// Selection criterion at `best_iteration`: mean validation loss per
    /// frame, or the mean training loss of the preceding window when no
    /// validation frames are given.
    pub best_loss: Option<f64>,
    pub train_loss: Vec<f32>,
    pub val_loss: Vec<(usize, f64)>,
    pub train_frames: Vec<String>,
    pub val_frames: Vec<String>,
}

impl TrainingSummary {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: FusionNet<f32>,
    pub summary: TrainingSummary,
}

/// Mean per-frame summed loss with dropout disabled.
pub fn mean_loss(net: &FusionNet<f32>, frames: &[TrainFrame]) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        total += f64::from(net.loss(&f.inputs, &f.target, NetDropout::Eval)?.0);
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Trains `net` with the hyperparameters in its spec. Every `val_every`
/// iterations (and after the last one) the selection loss is measured and
/// the best weights so far are kept. Divergence stops training early and is
/// reported in the summary together with the loss trace.
pub fn train(mut net: FusionNet<f32>, train: &[TrainFrame], val: &[TrainFrame]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training frames".into()));
    }
    let hp = net.spec.hyperparams.clone();
    hp.validate()?;
    let mut opt = OptimState::new(hp.base_lr, hp.momentum, hp.bias_lr_factor)?;
    let mut rng = stream(hp.seed, &format!("train/{}", net.id()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut summary = TrainingSummary {
        status: TrainStatus::Completed,
        iterations_run: 0,
        best_iteration: 0,
        best_loss: None,
        train_loss: Vec::with_capacity(hp.max_iterations),
        val_loss: Vec::new(),
        train_frames: train.iter().map(|f| f.frame_id.clone()).collect(),
        val_frames: val.iter().map(|f| f.frame_id.clone()).collect(),
    };
    let mut best = net.clone();
    for it in 1..=hp.max_iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let frame = &train[order[cursor]];
        cursor += 1;
        let out = net.loss_and_grad(&frame.inputs, &frame.target, NetDropout::Sample(&mut rng))?;
        summary.train_loss.push(out.loss);
        summary.iterations_run = it;
        let stepped = if out.loss.is_finite() {
            let mut params = net.params_mut();
            sgd_momentum_step(&mut params, &out.grads, &mut opt)
        } else {
            Err(Error::Diverged {
                iteration: it,
                loss: f64::from(out.loss),
            })
        };
        if let Err(e) = stepped {
            match e {
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } => {
                    info!("{}: diverged at iteration {it}: {e}", net.id());
                    summary.status = TrainStatus::Diverged { iteration: it };
                    break;
                }
                other => return Err(other),
            }
        }
        if it % hp.val_every == 0 || it == hp.max_iterations {
            let loss = if val.is_empty() {
                let window = &summary.train_loss[summary.train_loss.len().saturating_sub(hp.val_every)..];
                window.iter().map(|&l| f64::from(l)).sum::<f64>() / window.len() as f64
            } else {
                mean_loss(&net, val)?
            };
            if !loss.is_finite() {
                summary.status = TrainStatus::Diverged { iteration: it };
                break;
            }
            summary.val_loss.push((it, loss));
            debug!("{}: iteration {it} selection loss {loss:.4}", net.id());
            if summary.best_loss.is_none_or(|b| loss < b) {
                summary.best_loss = Some(loss);
                summary.best_iteration = it;
                best = net.clone();
            }
        }
    }
    Ok(TrainOutcome { net: best, summary })
}
