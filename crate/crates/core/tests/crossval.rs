use std::collections::BTreeSet;
use std::path::Path;

use hazardfuse::dataset::SynthConfig;
use hazardfuse::evaluation::EvalReport;
use hazardfuse::experiment::{run_crossval, Approach, CorpusSource, FrozenConfig, PretrainConfig, RunConfig, RunStatus, TABLE_HEADER};
use hazardfuse::fusion::{Checkpoint, FusionKind, Hyperparams, Modality};
use hazardfuse::Error;

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny(approaches: Vec<Approach>) -> RunConfig {
    let hp = Hyperparams {
        max_iterations: 6,
        val_every: 3,
        ..Hyperparams::default()
    };
    RunConfig {
        corpus: CorpusSource::Synthetic {
            seed: 3,
            frames: 12,
            config: SynthConfig::default(),
        },
        approaches,
        hyperparams: hp.clone(),
        grid_lr: None,
        pretrain: PretrainConfig {
            frames: 4,
            hyperparams: hp,
            synth: SynthConfig::default(),
        },
        val_stride: 3,
        thresholds: (0..=10).map(|i| i as f64 / 10.0).collect(),
        ..RunConfig::default()
    }
}

fn singles_and_overlay() -> Vec<Approach> {
    vec![
        Approach::new(FusionKind::LateOverlay, &[Modality::Rgb, Modality::Hha]),
        Approach::new(FusionKind::None, &[Modality::Rgb]),
        Approach::new(FusionKind::None, &[Modality::Hha]),
    ]
}

#[test]
fn one_fold_per_floor_with_disjoint_frames() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_crossval(tiny(singles_and_overlay()), dir.path()).unwrap();
    assert_eq!(report.approaches.len(), 3);
    assert_eq!(report.approaches[0].approach, "late_overlay-rgb+hha");
    for a in &report.approaches {
        let floors: Vec<&str> = a.folds.iter().map(|f| f.test_floor.as_str()).collect();
        assert_eq!(floors, ["scene0", "scene1", "scene2", "scene3"]);
        assert_eq!(a.aggregate.folds, 4);
        for f in &a.folds {
            assert_eq!(f.test_frames, 3);
            assert_eq!(f.train_frames + f.val_frames, 9);
        }
    }
    for floor in ["scene0", "scene1", "scene2", "scene3"] {
        let fold = dir.path().join("folds").join(floor);
        let ck = Checkpoint::load(&fold.join("none-rgb/model")).unwrap();
        let t = ck.manifest.training.clone().unwrap();
        let seen: BTreeSet<String> = t.train_frames.iter().chain(&t.val_frames).cloned().collect();
        let test_ids: BTreeSet<String> = (0..12).filter(|i| format!("scene{}", i % 4) == floor).map(|i| format!("f{i:04}")).collect();
        assert!(seen.is_disjoint(&test_ids));
        assert_eq!(seen.len() + test_ids.len(), 12);
        let rep: EvalReport = read(&fold.join("none-rgb/report.json"));
        assert_eq!(rep.curve.len(), 11);
        assert!(fold.join("late_overlay-rgb+hha/curve.csv").exists());
        let overlay = Checkpoint::load(&fold.join("late_overlay-rgb+hha/model")).unwrap();
        let parents: Vec<&str> = overlay.manifest.parents.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(parents[0], ck.id());
    }
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], TABLE_HEADER);
    assert_eq!(lines.len(), 4);
    let frozen: FrozenConfig = read(&dir.path().join("config.json"));
    assert_eq!(frozen.tool_version, hazardfuse::VERSION);
    assert_eq!(frozen.config, tiny(singles_and_overlay()));
    assert_eq!(read::<RunStatus>(&dir.path().join("status.json")), RunStatus::Completed);
    assert!(dir.path().join("parents/rgb.bin").exists());
}

#[test]
fn standard_grids_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        grid_lr: Some([1e-5, 5e-6]),
        folds: Some(vec!["scene2".into()]),
        ..tiny(vec![
            Approach::new(FusionKind::None, &[Modality::Depth]),
            Approach::new(FusionKind::Early, &[Modality::Rgb, Modality::Depth]),
        ])
    };
    let report = run_crossval(cfg, dir.path()).unwrap();
    assert_eq!(report.approaches[0].folds.len(), 1);
    let fold = dir.path().join("folds/scene2");
    let grid: Vec<serde_json::Value> = read(&fold.join("none-depth/grid.json"));
    assert_eq!(grid.len(), 4);
    let grid: Vec<serde_json::Value> = read(&fold.join("early-rgb+depth/grid.json"));
    assert_eq!(grid.len(), 4);
    assert!(!dir.path().join("folds/scene0").exists());
}

#[test]
fn overlay_without_its_arms_fails_and_is_marked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(vec![Approach::new(FusionKind::LateOverlay, &[Modality::Rgb, Modality::Depth])]);
    match run_crossval(cfg, dir.path()) {
        Err(Error::MissingCheckpoint(m)) => assert!(m.contains("train the non-fusion"), "{m}"),
        other => panic!("{other:?}"),
    }
    match read::<RunStatus>(&dir.path().join("status.json")) {
        RunStatus::Failed { stage, .. } => assert!(stage.contains("late_overlay-rgb+depth"), "{stage}"),
        other => panic!("{other:?}"),
    }
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn overlay_reuses_arms_left_by_an_earlier_run() {
    let dir = tempfile::tempdir().unwrap();
    let singles = vec![
        Approach::new(FusionKind::None, &[Modality::Rgb]),
        Approach::new(FusionKind::None, &[Modality::Depth]),
    ];
    run_crossval(RunConfig { folds: Some(vec!["scene1".into()]), ..tiny(singles) }, dir.path()).unwrap();
    let overlay = vec![Approach::new(FusionKind::LateOverlay, &[Modality::Rgb, Modality::Depth])];
    let r = run_crossval(RunConfig { folds: Some(vec!["scene1".into()]), ..tiny(overlay) }, dir.path()).unwrap();
    assert_eq!(r.approaches[0].folds.len(), 1);
    assert!(r.parents.is_empty());
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_crossval(RunConfig { folds: Some(vec!["nowhere".into()]), ..tiny(singles_and_overlay()) }, dir.path()).is_err());
    assert!(run_crossval(tiny(vec![]), dir.path()).is_err());
    let mut bad = tiny(singles_and_overlay());
    bad.approaches.push(Approach::new(FusionKind::Mid, &[Modality::Hha, Modality::Rgb]));
    assert!(matches!(run_crossval(bad, dir.path()), Err(Error::InvalidSpec(_))));
    let text = serde_json::to_string(&RunConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::default().approaches.len(), 11);
}
