//! Hyperparameter grid search ranked by validation loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::FusionNet;
use super::spec::{FusionKind, Hyperparams};
use super::train::{train, TrainFrame, TrainOutcome};
use crate::error::{Error, Result};

/// Candidate values per hyperparameter; the grid is their Cartesian
/// product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDefinition {
    pub base_lr: Vec<f32>,
    pub final_layer_mult: Vec<f32>,
    #[serde(default)]
    pub first_layer_mult: Vec<f32>,
    #[serde(default)]
    pub shared_layer_mult: Vec<f32>,
    #[serde(default)]
    pub dropout_ratio: Vec<f32>,
}

impl GridDefinition {
    /// The search for each network kind: two learning rates crossed with
    /// final-layer multipliers {5, 10}; early fusion instead crosses the
    /// rates with first-layer multipliers {4, 10} at a final multiplier of
    /// 5; mid fusion also crosses shared-layer multipliers {2, 5} and
    /// dropout {0.5, 0.75}.
    pub fn standard(kind: FusionKind, lr: [f32; 2]) -> Result<Self> {
        let base = Self {
            base_lr: lr.to_vec(),
            final_layer_mult: vec![5.0, 10.0],
            first_layer_mult: vec![],
            shared_layer_mult: vec![],
            dropout_ratio: vec![],
        };
        Ok(match kind {
            FusionKind::None | FusionKind::LateProportional => base,
            FusionKind::Early => Self {
                final_layer_mult: vec![5.0],
                first_layer_mult: vec![4.0, 10.0],
                ..base
            },
            FusionKind::Mid => Self {
                shared_layer_mult: vec![2.0, 5.0],
                dropout_ratio: vec![0.5, 0.75],
                ..base
            },
            FusionKind::LateOverlay => {
                return Err(Error::InvalidArgument(
                    "late overlay has no trainable parameters of its own to search".into(),
                ))
            }
        })
    }

    pub fn single(hp: &Hyperparams) -> Self {
        Self {
            base_lr: vec![hp.base_lr],
            final_layer_mult: vec![hp.final_layer_mult],
            first_layer_mult: vec![hp.first_layer_mult],
            shared_layer_mult: vec![hp.shared_layer_mult],
            dropout_ratio: vec![hp.dropout_ratio],
        }
    }

    /// Every combination, with unlisted fields taken from `base`.
    pub fn combos(&self, base: &Hyperparams) -> Vec<Hyperparams> {
        let or_base = |v: &[f32], b: f32| if v.is_empty() { vec![b] } else { v.to_vec() };
        let mut out = Vec::new();
        for &lr in &or_base(&self.base_lr, base.base_lr) {
            for &fin in &or_base(&self.final_layer_mult, base.final_layer_mult) {
                for &first in &or_base(&self.first_layer_mult, base.first_layer_mult) {
                    for &shared in &or_base(&self.shared_layer_mult, base.shared_layer_mult) {
                        for &drop in &or_base(&self.dropout_ratio, base.dropout_ratio) {
                            out.push(Hyperparams {
                                base_lr: lr,
                                final_layer_mult: fin,
                                first_layer_mult: first,
                                shared_layer_mult: shared,
                                dropout_ratio: drop,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub index: usize,
    pub hyperparams: Hyperparams,
    pub outcome: TrainOutcome,
}

impl GridCell {
    /// Ranking key: diverged runs and runs without a finite loss last.
    fn key(&self) -> (bool, f64, usize) {
        let loss = self.outcome.summary.best_loss.filter(|l| l.is_finite());
        let failed = self.outcome.summary.diverged() || loss.is_none();
        (failed, loss.unwrap_or(f64::INFINITY), self.index)
    }
}

/// Trains every combination (in parallel) and ranks them by lowest
/// validation loss. `make_net` builds the initialised network for a
/// combination.
pub fn grid_search<F>(grid: &GridDefinition, base: &Hyperparams, make_net: F, train_frames: &[TrainFrame], val_frames: &[TrainFrame]) -> Result<Vec<GridCell>>
where
    F: Fn(&Hyperparams) -> Result<FusionNet<f32>> + Sync,
{
    let combos = grid.combos(base);
    if combos.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let mut cells = combos
        .into_par_iter()
        .enumerate()
        .map(|(index, hp)| {
            let net = make_net(&hp)?;
            let outcome = train(net, train_frames, val_frames)?;
            Ok(GridCell {
                index,
                hyperparams: hp,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by(|a, b| {
        let (ka, kb) = (a.key(), b.key());
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
    });
    Ok(cells)
}
