use std::fs;
use std::path::Path;

use tinydense_core::augment::AugmentMode;
use tinydense_core::train::{parse_curriculum, read_metrics, Checkpoint, Dataset, Network, ScheduleMode, TrainConfig, Trainer};
use tinydense_core::{Error, WidthPlan};

fn tiny_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::network2();
    cfg.widths = WidthPlan::network2().scaled_down(16);
    cfg.curriculum = parse_curriculum("16:6:8").unwrap();
    cfg.schedule = ScheduleMode::Constant;
    cfg.lr = 3e-3;
    cfg.augment = AugmentMode::None;
    cfg.seed = 5;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn tiny_data(res: usize) -> (Dataset, Dataset) {
    Dataset::synthetic(2, 12, res, 9).unwrap().split(0.25, 1).unwrap()
}

fn deterministic(path: &Path) -> Vec<String> {
    read_metrics(path).unwrap().iter().map(|r| r.deterministic_fields()).collect()
}

#[test]
fn loss_falls_on_a_tiny_set() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = tiny_data(16);
    let mut t = Trainer::new(tiny_config(dir.path()), train, val).unwrap();
    let out = t.run().unwrap();
    assert_eq!(out.rows.len(), 6);
    let (first, last) = (&out.rows[0], out.rows.last().unwrap());
    assert!(last.train_loss < first.train_loss, "{first:?} -> {last:?}");
    assert!(out.epochs.iter().all(|e| e.batch_sizes.iter().all(|&b| b <= 8)));
    assert_eq!(out.epochs[0].batch_sizes, vec![8, 8, 2]);
    let best = Checkpoint::load(&out.best_checkpoint, Some(t.graph())).unwrap();
    let max = out.rows.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert_eq!(best.best_val_acc, max as f32);
}

#[test]
fn runs_repeat_and_resume_exactly() {
    let (train, val) = tiny_data(16);
    let configure = |dir: &Path| {
        let mut cfg = tiny_config(dir);
        cfg.schedule = ScheduleMode::ClrAdaptive;
        cfg.clr_base = 1e-3;
        cfg.clr_max = 6e-3;
        cfg.clr_step = 1;
        cfg.escalation.phase_cycles = 1;
        cfg.escalation.escalation_cycles = 1;
        cfg.oversample = true;
        cfg.class_weights = true;
        cfg.augment = AugmentMode::Net2;
        cfg
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Trainer::new(configure(a.path()), train.clone(), val.clone()).unwrap().run().unwrap();
    Trainer::new(configure(b.path()), train.clone(), val.clone()).unwrap().run().unwrap();
    let full = deterministic(&a.path().join("metrics.csv"));
    assert_eq!(full.len(), 6);
    assert_eq!(full, deterministic(&b.path().join("metrics.csv")));
    assert_eq!(fs::read(a.path().join("last.ckpt")).unwrap(), fs::read(b.path().join("last.ckpt")).unwrap());

    let mut cfg = configure(c.path());
    cfg.stop_after = Some(3);
    Trainer::new(cfg, train.clone(), val.clone()).unwrap().run().unwrap();
    assert_eq!(deterministic(&c.path().join("metrics.csv")), full[..3]);
    let mut resumed = Trainer::new(configure(c.path()), train, val).unwrap();
    let ck = Checkpoint::load(c.path().join("last.ckpt"), Some(resumed.graph())).unwrap();
    assert_eq!(ck.epoch, 3);
    resumed.resume(ck).unwrap();
    resumed.run().unwrap();
    assert_eq!(deterministic(&c.path().join("metrics.csv")), full);
    assert_eq!(fs::read(a.path().join("last.ckpt")).unwrap(), fs::read(c.path().join("last.ckpt")).unwrap());
}

#[test]
fn curriculum_segments_use_their_resolution_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = Dataset::synthetic(2, 10, 32, 3).unwrap().split(0.2, 2).unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.curriculum = parse_curriculum("32:1:4,16:2:16,32:1:6").unwrap();
    let out = Trainer::new(cfg, train, val).unwrap().run().unwrap();
    let seen: Vec<(usize, usize, Vec<usize>)> =
        out.epochs.iter().map(|e| (e.segment, e.resolution, e.batch_sizes.clone())).collect();
    assert_eq!(
        seen,
        vec![(0, 32, vec![4, 4, 4, 4]), (1, 16, vec![16]), (1, 16, vec![16]), (2, 32, vec![6, 6, 4])]
    );
}

#[test]
fn saturation_detector_advances_segments() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = tiny_data(16);
    let mut cfg = tiny_config(dir.path());
    cfg.lr = 1e-9;
    cfg.curriculum = parse_curriculum("16:40:8,32:1:8").unwrap();
    cfg.saturation_detector = true;
    let out = Trainer::new(cfg, train, val).unwrap().run().unwrap();
    let first: Vec<f64> = out.epochs.iter().filter(|e| e.segment == 0).map(|e| e.row.val_acc).collect();
    assert!(first.len() >= 6 && first.len() < 40, "{}", first.len());
    let best = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (before, recent) = first.split_at(first.len() - 5);
    assert!(best(recent) - best(before) < 0.005);
    assert_eq!(out.epochs.last().unwrap().resolution, 32);
}

#[test]
fn huge_learning_rate_diverges_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = tiny_data(16);
    let mut cfg = tiny_config(dir.path());
    cfg.lr = 1e30;
    match Trainer::new(cfg, train, val).unwrap().run().unwrap_err() {
        Error::Diverged { epoch, batch } => assert!(epoch < 6 && batch < 3),
        e => panic!("expected divergence, got {e}"),
    }
}

#[test]
fn train_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.tinb");
    Dataset::synthetic(3, 6, 16, 4).unwrap().save(&data).unwrap();
    let text = format!(
        "network = net2\nwidth_divisor = 16\ncurriculum = 16:2:6\nschedule = plateau\naugment = none\ntrain_data = {}\nout_dir = {}\n",
        data.display(),
        dir.path().join("run").display()
    );
    let cfg = TrainConfig::parse(&text).unwrap();
    assert_eq!(cfg.network, Network::Net2);
    let out = tinydense_core::train::train(cfg, None).unwrap();
    assert_eq!(out.rows.len(), 2);
    let saved = TrainConfig::load(dir.path().join("run/config.txt")).unwrap();
    assert_eq!(saved.curriculum, parse_curriculum("16:2:6").unwrap());
    let resumed = tinydense_core::train::train(saved, Some(&dir.path().join("run/last.ckpt"))).unwrap();
    assert!(resumed.epochs.is_empty());
    assert_eq!(resumed.rows.len(), 2);
}
