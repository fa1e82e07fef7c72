//! Cross-validated experiments: parent pretraining, per-fold training and
//! grid search for every requested approach, prediction, threshold sweeps
//! and fold aggregation.
//!
//! Output layout under the run directory:
//!
//! ```text
//! config.json                      resolved RunConfig + tool version
//! parents/{rgb,hha}.{bin,json}     pretrained parents
//! folds/<floor>/<approach>/        model.{bin,json}, grid.json, report.json, curve.csv
//! approaches/<approach>.json       averaged report
//! table.csv                        one row per approach
//! crossval.json                    everything above in one document
//! status.json                      running / completed / failed
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_corpus, make_folds, synth_generate, validation_split, LabeledFrame, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{crossval_aggregate, default_thresholds, write_curve_csv, AggregateReport, EvalFrame, EvalReport, MetricsReport, DEFAULT_THETA_DET};
use crate::fusion::{
    build_network, compose_late_overlay, grid_search, init_transfer, prepare_frames, required_modalities, train, Checkpoint,
    FusionKind, FusionNet, FusionSpec, GridDefinition, Hyperparams, Modality, OverlayMode, Parents, PredictionMap,
    ProportionalMode, TrainFrame, TrainStatus, TransferAudit,
};
use crate::json::write_json;
use crate::rng::{derive_seed, stream};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// A corpus directory as written by `save_corpus`.
    Directory { path: PathBuf },
    Synthetic {
        seed: u64,
        frames: usize,
        #[serde(default)]
        config: SynthConfig,
    },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<LabeledFrame>> {
        match self {
            Self::Directory { path } => {
                let corpus = load_corpus(path)?;
                for issue in &corpus.issues {
                    log::warn!("skipped frame {}: {}", issue.frame_id, issue.message);
                }
                Ok(corpus.frames)
            }
            Self::Synthetic { seed, frames, config } => {
                Ok(synth_generate(*seed, *frames, config)?.into_iter().map(|r| r.frame).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub fusion: FusionKind,
    pub modalities: Vec<Modality>,
}

impl Approach {
    pub fn new(fusion: FusionKind, modalities: &[Modality]) -> Self {
        Self {
            fusion,
            modalities: modalities.to_vec(),
        }
    }

    pub fn id(&self) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.as_str()).collect();
        format!("{}-{}", self.fusion.as_str(), mods.join("+"))
    }

    /// Training order: late overlay reuses the non-fusion networks, so it
    /// runs last.
    fn rank(&self) -> u8 {
        match self.fusion {
            FusionKind::None => 0,
            FusionKind::Early => 1,
            FusionKind::Mid => 2,
            FusionKind::LateProportional => 3,
            FusionKind::LateOverlay => 4,
        }
    }
}

/// All 11 approaches in table order.
pub fn all_approaches() -> Vec<Approach> {
    crate::fusion::table_approaches()
        .into_iter()
        .map(|(k, m)| Approach::new(k, &m))
        .collect()
}

/// Synthetic corpus and training budget for the pretrained parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub frames: usize,
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            hyperparams: Hyperparams {
                final_layer_mult: 1.0,
                max_iterations: 400,
                ..Hyperparams::default()
            },
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub corpus: CorpusSource,
    pub approaches: Vec<Approach>,
    /// Base hyperparameters; grid values override individual fields. The
    /// seed is replaced by one derived per fold and approach.
    pub hyperparams: Hyperparams,
    /// The two learning rates of the standard grids. Without them every
    /// approach trains once with `hyperparams`.
    #[serde(default)]
    pub grid_lr: Option<[f32; 2]>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Every `val_stride`-th training frame is held out for validation.
    pub val_stride: usize,
    /// Test floors to run; all floors when absent.
    #[serde(default)]
    pub folds: Option<Vec<String>>,
    pub theta_det: f64,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub proportional_mode: ProportionalMode,
    #[serde(default)]
    pub overlay_mode: OverlayMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            seed: 7,
            corpus: CorpusSource::Synthetic {
                seed: 7,
                frames: 40,
                config: SynthConfig::default(),
            },
            approaches: all_approaches(),
            hyperparams: Hyperparams {
                max_iterations: 500,
                ..Hyperparams::default()
            },
            grid_lr: Some([1e-5, 5e-6]),
            pretrain: PretrainConfig::default(),
            val_stride: 5,
            folds: None,
            theta_det: DEFAULT_THETA_DET,
            thresholds: default_thresholds(),
            proportional_mode: ProportionalMode::default(),
            overlay_mode: OverlayMode::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.schema_version != RUN_SCHEMA_VERSION {
            return bad(&format!("unsupported run config schema version {}", self.schema_version));
        }
        if self.approaches.is_empty() {
            return bad("no approaches requested");
        }
        if !(0.0..=1.0).contains(&self.theta_det) {
            return bad("theta_det must lie in [0, 1]");
        }
        if self.thresholds.is_empty() {
            return bad("empty threshold grid");
        }
        self.hyperparams.validate()?;
        self.pretrain.hyperparams.validate()?;
        for a in &self.approaches {
            self.spec_for(a, self.hyperparams.clone())?;
        }
        Ok(())
    }

    fn spec_for(&self, a: &Approach, hp: Hyperparams) -> Result<FusionSpec> {
        let mut spec = FusionSpec::standard(a.fusion, &a.modalities, hp)?;
        spec.proportional_mode = self.proportional_mode;
        spec.overlay_mode = self.overlay_mode;
        spec.validate()?;
        Ok(spec)
    }

    fn grid_for(&self, a: &Approach) -> Result<GridDefinition> {
        match self.grid_lr {
            Some(lr) => GridDefinition::standard(a.fusion, lr),
            None => Ok(GridDefinition::single(&self.hyperparams)),
        }
    }
}

/// Frozen copy of the config written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenConfig {
    pub tool_version: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub rank: usize,
    pub index: usize,
    pub hyperparams: Hyperparams,
    pub status: TrainStatus,
    pub best_loss: Option<f64>,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_floor: String,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    pub checkpoint: String,
    pub hyperparams: Hyperparams,
    pub operating_point: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachResult {
    pub approach: String,
    pub folds: Vec<FoldResult>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub parents: BTreeMap<String, String>,
    pub approaches: Vec<ApproachResult>,
}

impl CrossvalReport {
    pub fn approach(&self, id: &str) -> Option<&ApproachResult> {
        self.approaches.iter().find(|a| a.approach == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { stage: String, error: String },
}

pub const TABLE_HEADER: &str = "approach,precision,recall,f1,trip_iou,trip_obj_detection,threshold";

pub fn table_csv(report: &CrossvalReport) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for a in &report.approaches {
        let g = &a.aggregate;
        let obj = g.trip_obj_detection.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            a.approach, g.precision, g.recall, g.f1, g.trip_iou, obj, g.threshold
        );
    }
    s
}

/// Trains a single-modality parent from scratch on its own synthetic corpus.
pub fn pretrain_parent(modality: Modality, frames: &[LabeledFrame], hp: &Hyperparams) -> Result<Checkpoint> {
    let spec = FusionSpec::standard(FusionKind::None, &[modality], hp.clone())?;
    let mut net = build_network::<f32>(&spec)?;
    net.init_fresh(&mut stream(hp.seed, &format!("pretrain/init/{modality}")));
    let refs: Vec<&LabeledFrame> = frames.iter().collect();
    let data = prepare_frames(&refs, &[modality])?;
    let out = train(net, &data, &[])?;
    if out.summary.diverged() {
        return Err(Error::InvalidArgument(format!(
            "{modality} parent diverged during pretraining; lower pretrain.hyperparams.base_lr"
        )));
    }
    Ok(Checkpoint::new(out.net, vec![], Some(out.summary), None))
}

/// Predicts every frame (in parallel, ordered as given).
pub fn predict_frames(net: &FusionNet<f32>, frames: &[&LabeledFrame]) -> Result<Vec<PredictionMap>> {
    let mods = required_modalities(&net.spec).to_vec();
    frames
        .par_iter()
        .map(|f| net.predict(&f.net_inputs(&mods)?, &f.frame_id))
        .collect()
}

pub fn evaluate(net: &FusionNet<f32>, frames: &[&LabeledFrame], thresholds: &[f64], theta_det: f64) -> Result<EvalReport> {
    let maps = predict_frames(net, frames)?;
    let eval: Vec<EvalFrame> = frames
        .iter()
        .zip(&maps)
        .map(|(f, m)| EvalFrame::from_prediction(f, m))
        .collect::<Result<_>>()?;
    EvalReport::new(&eval, thresholds, theta_det)
}

struct FoldData<'a> {
    fit: Vec<&'a LabeledFrame>,
    val: Vec<&'a LabeledFrame>,
    test: Vec<&'a LabeledFrame>,
    prepared: BTreeMap<Vec<Modality>, (Vec<TrainFrame>, Vec<TrainFrame>)>,
}

impl FoldData<'_> {
    fn frames(&mut self, mods: &[Modality]) -> Result<&(Vec<TrainFrame>, Vec<TrainFrame>)> {
        if !self.prepared.contains_key(mods) {
            let pair = (prepare_frames(&self.fit, mods)?, prepare_frames(&self.val, mods)?);
            self.prepared.insert(mods.to_vec(), pair);
        }
        Ok(&self.prepared[mods])
    }
}

pub struct Experiment {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: RunConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.to_path_buf(),
        })
    }

    fn set_status(&self, status: &RunStatus) -> Result<()> {
        write_json(&self.out.join("status.json"), status)
    }

    /// Runs the whole cross-validation. On failure `status.json` names the
    /// failing stage and finished artifacts are left in place.
    pub fn run(&self) -> Result<CrossvalReport> {
        write_json(
            &self.out.join("config.json"),
            &FrozenConfig {
                tool_version: crate::VERSION.to_string(),
                config: self.config.clone(),
            },
        )?;
        self.set_status(&RunStatus::Running)?;
        let mut stage = String::from("setup");
        match self.run_inner(&mut stage) {
            Ok(report) => {
                self.set_status(&RunStatus::Completed)?;
                Ok(report)
            }
            Err(e) => {
                self.set_status(&RunStatus::Failed {
                    stage,
                    error: e.to_string(),
                })?;
                Err(e)
            }
        }
    }

    fn run_inner(&self, stage: &mut String) -> Result<CrossvalReport> {
        let cfg = &self.config;
        *stage = "corpus".into();
        let frames = cfg.corpus.load()?;
        let plan = make_folds(&frames)?;
        let folds: Vec<_> = match &cfg.folds {
            None => plan.folds.clone(),
            Some(sel) => {
                for f in sel {
                    if !plan.folds.iter().any(|p| &p.test_floor == f) {
                        return Err(Error::InvalidArgument(format!("no floor named `{f}` in the corpus")));
                    }
                }
                plan.folds.iter().filter(|p| sel.contains(&p.test_floor)).cloned().collect()
            }
        };

        let mut approaches = cfg.approaches.clone();
        approaches.sort_by_key(Approach::rank);
        let needs_parents = approaches.iter().any(|a| a.fusion != FusionKind::LateOverlay);
        let mut parents: BTreeMap<String, Checkpoint> = BTreeMap::new();
        if needs_parents {
            *stage = "pretrain".into();
            let roles = parent_roles(&approaches);
            let seed = derive_seed(cfg.seed, "pretrain");
            let synth = synth_generate(seed, cfg.pretrain.frames, &cfg.pretrain.synth)?;
            let pre: Vec<LabeledFrame> = synth.into_iter().map(|r| r.frame).collect();
            for (role, m) in roles {
                info!("pretraining {role} parent");
                let hp = Hyperparams {
                    seed: derive_seed(cfg.seed, &format!("pretrain/{role}")),
                    ..cfg.pretrain.hyperparams.clone()
                };
                let ck = pretrain_parent(m, &pre, &hp)?;
                ck.save(&self.out.join("parents").join(role))?;
                parents.insert(role.to_string(), ck);
            }
        }
        let parent_view = Parents {
            rgb: parents.get("rgb"),
            hha: parents.get("hha"),
        };

        let mut results: BTreeMap<String, Vec<FoldResult>> = BTreeMap::new();
        for fold in &folds {
            let floor = &fold.test_floor;
            let (train_all, test) = fold.split(&frames);
            let (fit, val) = validation_split(&train_all, cfg.val_stride);
            info!("fold {floor}: {} fit, {} val, {} test frames", fit.len(), val.len(), test.len());
            let mut data = FoldData {
                fit,
                val,
                test,
                prepared: BTreeMap::new(),
            };
            let mut trained: BTreeMap<String, Checkpoint> = BTreeMap::new();
            for a in &approaches {
                *stage = format!("fold {floor} / {}", a.id());
                let dir = self.out.join("folds").join(floor).join(a.id());
                let ck = if a.fusion == FusionKind::LateOverlay {
                    self.overlay(a, floor, &trained)?
                } else {
                    self.train_approach(a, floor, &parent_view, &mut data, &dir)?
                };
                ck.save(&dir.join("model"))?;
                let report = evaluate(&ck.net, &data.test, &cfg.thresholds, cfg.theta_det)?;
                write_json(&dir.join("report.json"), &report)?;
                write_curve_csv(&dir.join("curve.csv"), &report.curve)?;
                info!("fold {floor} {}: F1 {:.4}", a.id(), report.operating_point.f1);
                results.entry(a.id()).or_default().push(FoldResult {
                    test_floor: floor.clone(),
                    train_frames: data.fit.len(),
                    val_frames: data.val.len(),
                    test_frames: data.test.len(),
                    checkpoint: ck.id().to_string(),
                    hyperparams: ck.manifest.hyperparams.clone(),
                    operating_point: report.operating_point,
                });
                trained.insert(a.id(), ck);
            }
        }

        *stage = "aggregate".into();
        let mut out = Vec::new();
        for a in &cfg.approaches {
            let folds = results.remove(&a.id()).unwrap_or_default();
            let points: Vec<MetricsReport> = folds.iter().map(|f| f.operating_point.clone()).collect();
            let aggregate = crossval_aggregate(&points)?;
            let r = ApproachResult {
                approach: a.id(),
                folds,
                aggregate,
            };
            write_json(&self.out.join("approaches").join(format!("{}.json", r.approach)), &r)?;
            out.push(r);
        }
        let report = CrossvalReport {
            schema_version: RUN_SCHEMA_VERSION,
            tool_version: crate::VERSION.to_string(),
            seed: cfg.seed,
            parents: parents.iter().map(|(k, v)| (k.clone(), v.id().to_string())).collect(),
            approaches: out,
        };
        let table = self.out.join("table.csv");
        fs::write(&table, table_csv(&report)).map_err(|e| Error::io(&table, e))?;
        write_json(&self.out.join("crossval.json"), &report)?;
        Ok(report)
    }

    fn train_approach(&self, a: &Approach, floor: &str, parents: &Parents, data: &mut FoldData, dir: &Path) -> Result<Checkpoint> {
        let cfg = &self.config;
        let base = Hyperparams {
            seed: derive_seed(cfg.seed, &format!("fold/{floor}/{}", a.id())),
            ..cfg.hyperparams.clone()
        };
        let make = |hp: &Hyperparams| -> Result<(FusionNet<f32>, TransferAudit)> {
            let spec = cfg.spec_for(a, hp.clone())?;
            let mut net = build_network::<f32>(&spec)?;
            let audit = init_transfer(&mut net, parents, &mut stream(hp.seed, &format!("init/{}", a.id())))?;
            Ok((net, audit))
        };
        let grid = cfg.grid_for(a)?;
        let mods = required_modalities(&cfg.spec_for(a, base.clone())?).to_vec();
        let (fit, val) = data.frames(&mods)?;
        let cells = grid_search(&grid, &base, |hp| make(hp).map(|(n, _)| n), fit, val)?;
        let ranking: Vec<GridEntry> = cells
            .iter()
            .enumerate()
            .map(|(rank, c)| GridEntry {
                rank,
                index: c.index,
                hyperparams: c.hyperparams.clone(),
                status: c.outcome.summary.status,
                best_loss: c.outcome.summary.best_loss,
                best_iteration: c.outcome.summary.best_iteration,
            })
            .collect();
        write_json(&dir.join("grid.json"), &ranking)?;
        let best = cells.into_iter().next().expect("grid is nonempty");
        if best.outcome.summary.diverged() {
            return Err(Error::InvalidArgument(format!(
                "every grid combination for {} diverged on fold {floor}",
                a.id()
            )));
        }
        let (_, audit) = make(&best.hyperparams)?;
        Ok(Checkpoint::new(best.outcome.net, parents.refs(), Some(best.outcome.summary), Some(audit)))
    }

    /// Late overlay from this fold's non-fusion networks, or from ones a
    /// previous run left in the output directory.
    fn overlay(&self, a: &Approach, floor: &str, trained: &BTreeMap<String, Checkpoint>) -> Result<Checkpoint> {
        let spec = self.config.spec_for(a, self.config.hyperparams.clone())?;
        let find = |m: Modality| -> Result<Option<Checkpoint>> {
            let id = Approach::new(FusionKind::None, &[m]).id();
            if let Some(ck) = trained.get(&id) {
                return Ok(Some(ck.clone()));
            }
            let stem = self.out.join("folds").join(floor).join(&id).join("model");
            if Checkpoint::exists(&stem) {
                Checkpoint::load(&stem).map(Some)
            } else {
                Ok(None)
            }
        };
        let rgb = find(a.modalities[0])?;
        let other = find(a.modalities[1])?;
        let (net, audit) = compose_late_overlay(&spec, rgb.as_ref(), other.as_ref())?;
        let parents = [rgb, other]
            .iter()
            .flatten()
            .zip(&a.modalities)
            .map(|(c, m)| crate::fusion::ParentRef {
                role: m.as_str().to_string(),
                id: c.id().to_string(),
            })
            .collect();
        Ok(Checkpoint::new(net, parents, None, Some(audit)))
    }
}

fn parent_roles(approaches: &[Approach]) -> Vec<(&'static str, Modality)> {
    let mut rgb = false;
    let mut hha = false;
    for a in approaches.iter().filter(|a| a.fusion != FusionKind::LateOverlay) {
        for m in &a.modalities {
            match m {
                Modality::Rgb => rgb = true,
                Modality::Depth | Modality::Hha => hha = true,
            }
        }
    }
    let mut v = Vec::new();
    if rgb {
        v.push(("rgb", Modality::Rgb));
    }
    if hha {
        v.push(("hha", Modality::Hha));
    }
    v
}

/// Convenience for callers that already hold a config.
pub fn run_crossval(config: RunConfig, out: &Path) -> Result<CrossvalReport> {
    Experiment::new(config, out)?.run()
}
