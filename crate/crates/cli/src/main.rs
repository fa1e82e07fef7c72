//! `hazardfuse`: command-line front end for the trip-hazard fusion pipeline.
//!
//! Every subcommand prints one JSON summary on stdout. The exit status is 0
//! exactly when that summary reports `"status": "ok"`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use hazardfuse::dataset::{load_corpus, save_corpus, synth_generate, CorpusManifest, FrameEntry, LabeledFrame, SynthConfig, CORPUS_SCHEMA_VERSION};
use hazardfuse::diagnostics::gradcheck_suite;
use hazardfuse::evaluation::{default_thresholds, write_curve_csv, EvalFrame, EvalReport, DEFAULT_THETA_DET};
use hazardfuse::experiment::{run_crossval, Approach, CorpusSource, RunConfig};
use hazardfuse::fusion::{
    build_network, compose_late_overlay, grid_search, init_transfer, late_overlay, late_proportional, prepare_frames, train, Checkpoint,
    FusionKind, FusionSpec, GridDefinition, Hyperparams, Modality, OverlayMode, Parents, PredictionMap, ProportionalMode,
};
use hazardfuse::hha::{encode_frame, HhaConfig};
use hazardfuse::rng::stream;

const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "hazardfuse", version, about = "Trip-hazard segmentation with colour/depth fusion networks")]
struct Cli {
    /// JSON config for the subcommand (RunConfig for crossval, SynthConfig
    /// for synth, HhaConfig for encode-hha, Hyperparams for train and
    /// grid-search).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write HHA images and sidecars for every frame with depth.
    EncodeHha {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 40)]
        frames: usize,
    },
    /// Train one network.
    Train(TrainArgs),
    /// Train every combination of a hyperparameter grid and keep the best.
    GridSearch {
        #[command(flatten)]
        train: TrainArgs,
        /// The two learning rates of the standard grid.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [1e-5f32, 5e-6])]
        lr: Vec<f32>,
        /// A full GridDefinition JSON instead of the standard grid.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Predict every frame of a corpus.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Only frames of this floor.
        #[arg(long)]
        floor: Option<String>,
    },
    /// Fuse two prediction maps.
    Fuse {
        #[arg(long, value_enum)]
        mode: FuseMode,
        /// Colour network map (stem without extension).
        #[arg(long)]
        a: PathBuf,
        /// Depth or HHA network map.
        #[arg(long)]
        b: PathBuf,
        /// Corpus providing the depth validity mask (late overlay).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Granularity::PerPixel)]
        granularity: Granularity,
    },
    /// Evaluate prediction maps against corpus labels.
    Eval {
        /// Directory of prediction maps.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THETA_DET)]
        theta_det: f64,
    },
    /// Leave-one-floor-out cross-validation.
    Crossval {
        /// Restrict to these approaches, e.g. `none-rgb,late_proportional-rgb+hha`.
        #[arg(long, value_delimiter = ',')]
        approaches: Option<Vec<String>>,
        /// Corpus directory instead of the synthetic corpus in the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Central-difference gradient check of every layer kind and topology.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    fusion: FusionKind,
    #[arg(long, value_delimiter = ',', value_parser = parse_modality, required = true)]
    modalities: Vec<Modality>,
    /// Hold this floor out entirely.
    #[arg(long)]
    test_floor: Option<String>,
    /// Colour parent checkpoint stem (for late overlay: the trained colour network).
    #[arg(long)]
    rgb_parent: Option<PathBuf>,
    /// Depth/HHA parent checkpoint stem (for late overlay: the trained depth or HHA network).
    #[arg(long)]
    hha_parent: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    val_stride: usize,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FuseMode {
    LateOverlay,
    LateProportional,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Granularity {
    PerPixel,
    PerImage,
}

fn parse_kind(s: &str) -> std::result::Result<FusionKind, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown fusion kind `{s}`"))
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown modality `{s}`"))
}

fn read_config<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>> {
    path.as_ref()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        })
        .transpose()
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn corpus_frames(path: &Path) -> Result<(Vec<LabeledFrame>, usize)> {
    let corpus = load_corpus(path)?;
    Ok((corpus.frames, corpus.issues.len()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cli: &Cli, frames: usize) -> Result<Value> {
    let cfg: SynthConfig = read_config(&cli.config)?.unwrap_or_default();
    let seed = cli.seed.unwrap_or(7);
    let out = out_dir(cli, "corpus");
    let rendered = synth_generate(seed, frames, &cfg)?;
    let frames: Vec<LabeledFrame> = rendered.into_iter().map(|r| r.frame).collect();
    let manifest = CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        source: "synthetic".into(),
        seed: Some(seed),
        config: Some(serde_json::to_value(&cfg)?),
        frames: frames
            .iter()
            .map(|f| FrameEntry {
                frame_id: f.frame_id.clone(),
                floor: f.floor.clone(),
            })
            .collect(),
        tool_version: hazardfuse::VERSION.into(),
    };
    save_corpus(&out, &frames, &manifest)?;
    let floors: std::collections::BTreeSet<&str> = frames.iter().map(|f| f.floor.as_str()).collect();
    Ok(json!({ "frames": frames.len(), "floors": floors, "seed": seed, "out": out }))
}

fn cmd_encode_hha(cli: &Cli, corpus: &Path) -> Result<Value> {
    let cfg: HhaConfig = read_config(&cli.config)?.unwrap_or_default();
    let out = cli.out.clone().unwrap_or_else(|| corpus.to_path_buf());
    let (frames, issues) = corpus_frames(corpus)?;
    let mut encoded = 0;
    let mut skipped = Vec::new();
    for f in &frames {
        let Some(depth) = &f.depth else {
            skipped.push(f.frame_id.clone());
            continue;
        };
        let (img, sidecar) = encode_frame(depth, &cfg).with_context(|| format!("frame {}", f.frame_id))?;
        let dir = out.join(&f.floor).join("hha");
        std::fs::create_dir_all(&dir)?;
        img.save_png(&dir.join(format!("{}.png", f.frame_id)))?;
        sidecar.save(&dir.join(format!("{}.json", f.frame_id)))?;
        encoded += 1;
    }
    Ok(json!({ "encoded": encoded, "skipped_without_depth": skipped.len(), "skipped": skipped, "unreadable_frames": issues, "out": out }))
}

struct TrainSetup {
    spec: FusionSpec,
    parents: Vec<Checkpoint>,
    fit: Vec<hazardfuse::fusion::TrainFrame>,
    val: Vec<hazardfuse::fusion::TrainFrame>,
}

fn load_parent(stem: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    stem.as_ref().map(|p| Checkpoint::load(p).map_err(Into::into)).transpose()
}

fn train_setup(cli: &Cli, a: &TrainArgs) -> Result<TrainSetup> {
    let mut hp: Hyperparams = read_config(&cli.config)?.unwrap_or_default();
    if let Some(s) = cli.seed {
        hp.seed = s;
    }
    let spec = FusionSpec::standard(a.fusion, &a.modalities, hp)?;
    let parents: Vec<Checkpoint> = [load_parent(&a.rgb_parent)?, load_parent(&a.hha_parent)?].into_iter().flatten().collect();
    let (frames, _) = corpus_frames(&a.corpus)?;
    let train_frames: Vec<&LabeledFrame> = frames.iter().filter(|f| Some(&f.floor) != a.test_floor.as_ref()).collect();
    if train_frames.is_empty() {
        bail!("no training frames left after holding out the test floor");
    }
    let (fit, val) = hazardfuse::dataset::validation_split(&train_frames, a.val_stride);
    Ok(TrainSetup {
        fit: prepare_frames(&fit, &spec.modalities)?,
        val: prepare_frames(&val, &spec.modalities)?,
        spec,
        parents,
    })
}

fn parents_view<'a>(a: &TrainArgs, parents: &'a [Checkpoint]) -> Parents<'a> {
    let mut it = parents.iter();
    Parents {
        rgb: a.rgb_parent.as_ref().and_then(|_| it.next()),
        hha: a.hha_parent.as_ref().and_then(|_| it.next()),
    }
}

/// Network for one set of hyperparameters: transferred from the parents
/// when any are given, otherwise freshly initialised.
fn initial_net(spec: &FusionSpec, parents: &Parents) -> hazardfuse::Result<(hazardfuse::fusion::FusionNet<f32>, Option<hazardfuse::fusion::TransferAudit>)> {
    let mut net = build_network::<f32>(spec)?;
    let mut rng = stream(spec.hyperparams.seed, &format!("init/{}", spec.id()));
    if parents.rgb.is_none() && parents.hha.is_none() {
        net.init_fresh(&mut rng);
        Ok((net, None))
    } else {
        let audit = init_transfer(&mut net, parents, &mut rng)?;
        Ok((net, Some(audit)))
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<Value> {
    let s = train_setup(cli, a)?;
    let parents = parents_view(a, &s.parents);
    let out = out_dir(cli, "model");
    let ck = if s.spec.fusion == FusionKind::LateOverlay {
        let (net, audit) = compose_late_overlay(&s.spec, parents.rgb, parents.hha)?;
        Checkpoint::new(net, parents.refs(), None, Some(audit))
    } else {
        let (net, audit) = initial_net(&s.spec, &parents)?;
        let outcome = train(net, &s.fit, &s.val)?;
        Checkpoint::new(outcome.net, parents.refs(), Some(outcome.summary), audit)
    };
    ck.save(&out.join("model"))?;
    let summary = ck.manifest.training.as_ref();
    Ok(json!({
        "checkpoint": ck.id(),
        "network": ck.manifest.network_id,
        "model": out.join("model"),
        "training": summary.map(|t| json!({
            "status": t.status,
            "iterations_run": t.iterations_run,
            "best_iteration": t.best_iteration,
            "best_loss": t.best_loss,
        })),
    }))
}

fn cmd_grid_search(cli: &Cli, a: &TrainArgs, lr: &[f32], grid: &Option<PathBuf>) -> Result<Value> {
    let s = train_setup(cli, a)?;
    let parents = parents_view(a, &s.parents);
    let grid: GridDefinition = match read_config(grid)? {
        Some(g) => g,
        None => GridDefinition::standard(s.spec.fusion, [lr[0], lr[1]])?,
    };
    let base = s.spec.hyperparams.clone();
    let spec = s.spec.clone();
    let make = |hp: &Hyperparams| -> hazardfuse::Result<_> {
        let mut sp = FusionSpec::standard(spec.fusion, &spec.modalities, hp.clone())?;
        sp.proportional_mode = spec.proportional_mode;
        initial_net(&sp, &parents).map(|(n, _)| n)
    };
    let cells = grid_search(&grid, &base, make, &s.fit, &s.val)?;
    let ranking: Vec<Value> = cells
        .iter()
        .map(|c| json!({
            "index": c.index,
            "hyperparams": c.hyperparams,
            "status": c.outcome.summary.status,
            "best_loss": c.outcome.summary.best_loss,
        }))
        .collect();
    let out = out_dir(cli, "grid");
    write_text(&out.join("grid.json"), &serde_json::to_string_pretty(&ranking)?)?;
    let best = cells.into_iter().next().expect("nonempty grid");
    let sp = best.outcome.net.spec.clone();
    let (_, audit) = initial_net(&sp, &parents)?;
    let ck = Checkpoint::new(best.outcome.net, parents.refs(), Some(best.outcome.summary), audit);
    ck.save(&out.join("model"))?;
    Ok(json!({ "combos": ranking.len(), "best": ranking[0], "checkpoint": ck.id(), "model": out.join("model") }))
}

fn cmd_predict(cli: &Cli, model: &Path, corpus: &Path, floor: &Option<String>) -> Result<Value> {
    let ck = Checkpoint::load(model)?;
    let (frames, _) = corpus_frames(corpus)?;
    let chosen: Vec<&LabeledFrame> = frames.iter().filter(|f| floor.as_ref().is_none_or(|fl| &f.floor == fl)).collect();
    if chosen.is_empty() {
        bail!("no frames to predict");
    }
    let maps = hazardfuse::experiment::predict_frames(&ck.net, &chosen)?;
    let out = out_dir(cli, "predictions");
    for m in &maps {
        m.save(&out.join(&m.frame_id))?;
    }
    Ok(json!({ "predicted": maps.len(), "network": ck.manifest.network_id, "checkpoint": ck.id(), "out": out }))
}

fn cmd_fuse(cli: &Cli, mode: FuseMode, a: &Path, b: &Path, corpus: &Option<PathBuf>, granularity: Granularity) -> Result<Value> {
    let (ma, mb) = (PredictionMap::load(a)?, PredictionMap::load(b)?);
    let fused = match mode {
        FuseMode::LateProportional => {
            let g = match granularity {
                Granularity::PerPixel => ProportionalMode::PerPixel,
                Granularity::PerImage => ProportionalMode::PerImage,
            };
            late_proportional([&ma, &mb], g)?
        }
        FuseMode::LateOverlay => {
            let corpus = corpus.as_ref().ok_or_else(|| anyhow!("late overlay needs --corpus for the depth validity mask"))?;
            let (frames, _) = corpus_frames(corpus)?;
            let frame = frames
                .iter()
                .find(|f| f.frame_id == ma.frame_id)
                .ok_or_else(|| anyhow!("frame {} not in corpus", ma.frame_id))?;
            late_overlay(&ma, &mb, &frame.depth_valid(), OverlayMode::Scores)?
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fused")).join(&fused.frame_id);
    fused.save(&out)?;
    Ok(json!({ "frame_id": fused.frame_id, "source": fused.source, "out": out }))
}

fn cmd_eval(cli: &Cli, predictions: &Path, corpus: &Path, theta_det: f64) -> Result<Value> {
    let (frames, _) = corpus_frames(corpus)?;
    let mut stems: Vec<PathBuf> = std::fs::read_dir(predictions)
        .with_context(|| format!("reading {}", predictions.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    let mut eval = Vec::new();
    for stem in &stems {
        let map = PredictionMap::load(stem)?;
        let frame = frames
            .iter()
            .find(|f| f.frame_id == map.frame_id)
            .ok_or_else(|| anyhow!("prediction for unknown frame {}", map.frame_id))?;
        eval.push(EvalFrame::from_prediction(frame, &map)?);
    }
    if eval.is_empty() {
        bail!("no prediction maps in {}", predictions.display());
    }
    let report = EvalReport::new(&eval, &default_thresholds(), theta_det)?;
    let out = out_dir(cli, "eval");
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_curve_csv(&out.join("curve.csv"), &report.curve)?;
    Ok(json!({ "frames": eval.len(), "operating_point": report.operating_point, "out": out }))
}

fn cmd_crossval(cli: &Cli, approaches: &Option<Vec<String>>, corpus: &Option<PathBuf>) -> Result<Value> {
    let mut cfg: RunConfig = read_config(&cli.config)?.unwrap_or_default();
    if let Some(s) = cli.seed {
        cfg.seed = s;
        if let CorpusSource::Synthetic { seed, .. } = &mut cfg.corpus {
            *seed = s;
        }
    }
    if let Some(path) = corpus {
        cfg.corpus = CorpusSource::Directory { path: path.clone() };
    }
    if let Some(ids) = approaches {
        let all = hazardfuse::experiment::all_approaches();
        cfg.approaches = ids
            .iter()
            .map(|id| all.iter().find(|a| &a.id() == id).cloned().ok_or_else(|| anyhow!("unknown approach `{id}`")))
            .collect::<Result<Vec<Approach>>>()?;
    }
    let out = out_dir(cli, "crossval");
    let report = run_crossval(cfg, &out)?;
    let rows: Vec<Value> = report
        .approaches
        .iter()
        .map(|a| json!({ "approach": a.approach, "folds": a.folds.len(), "f1": a.aggregate.f1, "precision": a.aggregate.precision, "recall": a.aggregate.recall }))
        .collect();
    Ok(json!({ "approaches": rows, "table": out.join("table.csv"), "out": out }))
}

fn cmd_gradcheck(cli: &Cli, samples: usize) -> Result<(Value, bool)> {
    let suite = gradcheck_suite(samples, cli.seed.unwrap_or(0))?;
    let ok = suite.iter().all(|e| e.passed);
    Ok((json!({ "passed": ok, "checks": suite }), ok))
}

fn run(cli: &Cli) -> Result<(&'static str, Value, bool)> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    Ok(match &cli.command {
        Command::EncodeHha { corpus } => ("encode-hha", cmd_encode_hha(cli, corpus)?, true),
        Command::Synth { frames } => ("synth", cmd_synth(cli, *frames)?, true),
        Command::Train(a) => ("train", cmd_train(cli, a)?, true),
        Command::GridSearch { train, lr, grid } => ("grid-search", cmd_grid_search(cli, train, lr, grid)?, true),
        Command::Predict { model, corpus, floor } => ("predict", cmd_predict(cli, model, corpus, floor)?, true),
        Command::Fuse {
            mode,
            a,
            b,
            corpus,
            granularity,
        } => ("fuse", cmd_fuse(cli, *mode, a, b, corpus, *granularity)?, true),
        Command::Eval {
            predictions,
            corpus,
            theta_det,
        } => ("eval", cmd_eval(cli, predictions, corpus, *theta_det)?, true),
        Command::Crossval { approaches, corpus } => ("crossval", cmd_crossval(cli, approaches, corpus)?, true),
        Command::Gradcheck { samples } => {
            let (v, ok) = cmd_gradcheck(cli, *samples)?;
            ("gradcheck", v, ok)
        }
    })
}

/// The error and its causes, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HAZARDFUSE_LOG", "warn")).init();
    let cli = Cli::parse();
    let (summary, ok) = match run(&cli) {
        Ok((command, details, ok)) => (
            json!({
                "schema_version": SUMMARY_SCHEMA_VERSION,
                "command": command,
                "status": if ok { "ok" } else { "failed" },
                "tool_version": hazardfuse::VERSION,
                "result": details,
            }),
            ok,
        ),
        Err(e) => (
            json!({
                "schema_version": SUMMARY_SCHEMA_VERSION,
                "status": "error",
                "tool_version": hazardfuse::VERSION,
                "error": error_chain(&e),
            }),
            false,
        ),
    };
    // a closed stdout must not turn success into a panic
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
