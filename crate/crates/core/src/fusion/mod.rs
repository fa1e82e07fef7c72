//! Single-modality and colour/depth fusion networks: construction, weight
//! transfer, training, hyperparameter search, inference and late fusion.

pub mod checkpoint;
pub mod grid;
pub mod late;
pub mod network;
pub mod spec;
pub mod train;
pub mod transfer;

pub use checkpoint::{Checkpoint, CheckpointManifest, ParentRef, TensorEntry, CHECKPOINT_SCHEMA_VERSION};
pub use grid::{grid_search, GridCell, GridDefinition};
pub use late::{late_overlay, late_proportional, mixture_nll, PredictionMap, Proportional};
pub use network::{build_network, required_modalities, Body, FusionNet, NetDropout, NetInputs, NetObjective};
pub use spec::{table_approaches, FusionKind, FusionSpec, Hyperparams, Modality, OverlayMode, ProportionalMode};
pub use train::{mean_loss, prepare_frames, train, TrainFrame, TrainOutcome, TrainStatus, TrainingSummary};
pub use transfer::{
    compose_late_overlay, init_transfer, verify_audit, LayerOrigin, LayerSource, Parents, TransferAudit,
    FRESH_SCORE_SIGMA,
};

#[cfg(test)]
mod tests;
