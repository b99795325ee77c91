use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::{ScheduleMode, Segment, TrainConfig};
use super::dataset::Dataset;
use super::eval::{argmax, batch_tensor, class_soft_weights, evaluate, oversample_weights, EvalReport};
use crate::augment::{apply_plan, plan_for_sample, AugmentMode, Image};
use crate::error::{Error, Result};
use crate::graph::{backward, forward, init_params, GraphSpec, Mode, Params};
use crate::optim::{replay_schedule, Adam, EscalationController, Plateau};
use crate::rng::{chacha, stream_seed};
use crate::tensor::softmax_cross_entropy_weighted;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds";

/// One line of the metrics CSV. `epoch` counts from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    /// Every field except the wall-clock time, which is the only one that varies
    /// between identical runs.
    pub fn deterministic_fields(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc)
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.3}", self.deterministic_fields(), self.wall_seconds)
    }
}

impl FromStr for MetricsRow {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid(format!("metrics row `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: x(1)?,
            train_loss: x(2)?,
            train_acc: x(3)?,
            val_loss: x(4)?,
            val_acc: x(5)?,
            wall_seconds: x(6)?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::invalid(format!("metrics file does not start with `{METRICS_HEADER}`")));
    }
    lines.filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

/// What happened in one epoch beyond its metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub row: MetricsRow,
    pub segment: usize,
    pub resolution: usize,
    /// Sizes of the batches actually run.
    pub batch_sizes: Vec<usize>,
    pub augmented: bool,
    /// Best validation accuracy after this epoch, as stored in `best.ckpt`.
    pub best_val_acc: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub best_val_acc: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Loads the configured training data and either the validation file or a seeded
/// split of the training data.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let path = cfg.train_data.as_ref().ok_or_else(|| Error::Config { line: 0, msg: "train_data is not set".into() })?;
    let train = Dataset::load(path)?;
    match &cfg.val_data {
        Some(v) => Ok((train, Dataset::load(v)?)),
        None => train.split(cfg.val_fraction, cfg.seed),
    }
}

/// Curriculum-driven training loop with validation, schedules, checkpointing and the
/// optional resampling and class-weighting procedures.
pub struct Trainer {
    cfg: TrainConfig,
    graph: GraphSpec,
    params: Params,
    adam: Adam,
    train: Dataset,
    val: Dataset,
    lr: f64,
    plateau: Plateau,
    escalation: Option<EscalationController>,
    epoch: u32,
    segment: usize,
    segment_epoch: u32,
    segment_history: Vec<f64>,
    best_val_acc: f64,
    train_predictions: Option<Vec<usize>>,
    class_weights: Option<Vec<f32>>,
    last_resolution: Option<usize>,
    rows: Vec<MetricsRow>,
}

const SATURATION_WINDOW: usize = 5;
const SATURATION_GAIN: f64 = 0.005;

impl Trainer {
    pub fn new(cfg: TrainConfig, train: Dataset, val: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(format!("need non-empty train and validation sets, got {} and {}", train.len(), val.len())));
        }
        if train.num_classes() != val.num_classes() {
            return Err(Error::invalid(format!("train has {} classes, validation {}", train.num_classes(), val.num_classes())));
        }
        let max_res = cfg.curriculum.iter().map(|s| s.resolution).max().unwrap_or(0);
        if train.height().min(train.width()) < max_res {
            warn!("dataset is {}x{}, curriculum reaches {max_res}: images will be upsampled", train.height(), train.width());
        }
        let graph = cfg.build_graph(train.num_classes())?;
        let params = init_params(&graph, cfg.init, cfg.seed);
        let mut adam = Adam::new(cfg.lr as f32).with_epsilon(cfg.epsilon as f32).with_weight_decay(cfg.weight_decay as f32);
        adam.beta1 = cfg.beta1 as f32;
        adam.beta2 = cfg.beta2 as f32;
        let escalation = match cfg.schedule {
            ScheduleMode::ClrAdaptive => Some(EscalationController::new(cfg.first_clr_phase()?, cfg.escalation)?),
            _ => None,
        };
        Ok(Trainer {
            lr: cfg.lr,
            plateau: cfg.plateau.clone(),
            escalation,
            graph,
            params,
            adam,
            train,
            val,
            epoch: 0,
            segment: 0,
            segment_epoch: 0,
            segment_history: Vec::new(),
            best_val_acc: f64::NEG_INFINITY,
            train_predictions: None,
            class_weights: None,
            last_resolution: None,
            rows: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn best_val_acc(&self) -> f64 {
        self.best_val_acc
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.cfg.out_dir.join("metrics.csv")
    }

    pub fn best_path(&self) -> PathBuf {
        self.cfg.out_dir.join("best.ckpt")
    }

    pub fn last_path(&self) -> PathBuf {
        self.cfg.out_dir.join("last.ckpt")
    }

    pub fn is_finished(&self) -> bool {
        self.segment >= self.cfg.curriculum.len() || self.epoch >= self.cfg.total_epochs()
    }

    /// The learning rate at fractional epoch `t`.
    pub fn lr_at(&self, t: f64) -> Result<f64> {
        match self.cfg.schedule {
            ScheduleMode::Constant | ScheduleMode::Plateau => Ok(self.lr),
            ScheduleMode::ClrReplay => replay_schedule(t),
            ScheduleMode::ClrAdaptive => Ok(self.escalation.as_ref().expect("adaptive schedule has a controller").lr_at(t)),
        }
    }

    fn augment_active(&self, epoch: u32) -> bool {
        self.cfg.augment != AugmentMode::None && epoch >= self.cfg.augment_start_epoch
    }

    /// Sample indices for `epoch`: a seeded permutation, or weighted draws with
    /// replacement once training-set predictions exist and oversampling is on.
    pub fn epoch_order(&self, epoch: u32) -> Result<Vec<usize>> {
        let n = self.train.len();
        if self.cfg.oversample {
            if let Some(preds) = &self.train_predictions {
                let labels: Vec<usize> = self.train.labels().collect();
                let dist = WeightedIndex::new(oversample_weights(preds, &labels)?)
                    .map_err(|e| Error::invalid(format!("oversampling weights: {e}")))?;
                let mut rng = chacha(stream_seed(self.cfg.seed, "oversample", epoch as u64));
                return Ok((0..n).map(|_| dist.sample(&mut rng)).collect());
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut chacha(stream_seed(self.cfg.seed, "shuffle", epoch as u64)));
        Ok(order)
    }

    /// The training image for dataset index `i` at `epoch`, before resizing.
    pub fn training_image(&self, epoch: u32, i: usize) -> Image {
        let img = self.train.image(i);
        if !self.augment_active(epoch) {
            return img;
        }
        let plan = plan_for_sample(self.cfg.augment, &self.cfg.aug_ranges, self.cfg.seed, epoch as u64, i as u64);
        apply_plan(&plan, &img)
    }

    fn segment_spec(&self) -> Segment {
        self.cfg.curriculum[self.segment]
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let started = Instant::now();
        let e = self.epoch;
        let seg_index = self.segment;
        let seg = self.segment_spec();
        let order = self.epoch_order(e)?;
        let num_batches = order.len().div_ceil(seg.batch);
        let augmented = self.augment_active(e);
        let epoch_lr = self.lr_at(e as f64)?;
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        let mut batch_sizes = Vec::with_capacity(num_batches);
        let diverged = |err: Error, b: usize| match err {
            Error::NonFinite { .. } => Error::Diverged { epoch: e as usize, batch: b },
            other => other,
        };
        for (b, chunk) in order.chunks(seg.batch).enumerate() {
            let lr = self.lr_at(e as f64 + b as f64 / num_batches as f64)?;
            self.adam.lr = lr as f32;
            let images: Vec<Image> = chunk.iter().map(|&i| self.training_image(e, i)).collect();
            let x = batch_tensor(&images, seg.resolution)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| self.train.label(i)).collect();
            let (logits, cache) = forward(&self.graph, &mut self.params, &x, Mode::Train).map_err(|err| diverged(err, b))?;
            let (loss, dlogits) =
                softmax_cross_entropy_weighted(&logits, &labels, self.class_weights.as_deref()).map_err(|err| diverged(err, b))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: e as usize, batch: b });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += labels.iter().enumerate().filter(|&(n, &l)| argmax(logits.sample(n)) == l).count();
            self.params.zero_grad();
            backward(&self.graph, &mut self.params, cache, &dlogits)?;
            self.adam.step(self.params.trainable_mut()).map_err(|err| diverged(err, b))?;
            batch_sizes.push(chunk.len());
        }

        let report = evaluate(&self.graph, &mut self.params, &self.val, seg.resolution, seg.batch)?;
        self.after_epoch(&report, seg)?;

        let row = MetricsRow {
            epoch: e,
            lr: epoch_lr,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss: report.loss,
            val_acc: report.top1,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {e} res {} lr {:.3e} loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            seg.resolution, row.lr, row.train_loss, row.train_acc, row.val_loss, row.val_acc
        );
        self.epoch += 1;
        self.last_resolution = Some(seg.resolution);
        let improved = report.top1 > self.best_val_acc;
        if improved {
            self.best_val_acc = report.top1;
        }
        self.rows.push(row.clone());
        self.persist(improved)?;
        Ok(EpochSummary {
            row,
            segment: seg_index,
            resolution: seg.resolution,
            batch_sizes,
            augmented,
            best_val_acc: self.best_val_acc,
            improved,
        })
    }

    fn after_epoch(&mut self, report: &EvalReport, seg: Segment) -> Result<()> {
        match self.cfg.schedule {
            ScheduleMode::Plateau => {
                let next = self.plateau.step(report.loss, self.lr);
                if next != self.lr {
                    info!("validation loss plateaued: lr {:.3e} -> {next:.3e}", self.lr);
                }
                self.lr = next;
            }
            ScheduleMode::ClrAdaptive => {
                let ctl = self.escalation.as_mut().expect("adaptive schedule has a controller");
                if let Some((phase, tag)) = ctl.end_epoch(self.epoch, report.top1)? {
                    info!("next {tag} phase: {:e}..{:e} over epochs {}..{}", phase.base_lr, phase.max_lr, phase.start_epoch, phase.end_epoch);
                }
            }
            ScheduleMode::Constant | ScheduleMode::ClrReplay => {}
        }
        if self.cfg.oversample {
            let train_report = evaluate(&self.graph, &mut self.params, &self.train, seg.resolution, seg.batch)?;
            self.train_predictions = Some(train_report.predictions);
        }
        if self.cfg.class_weights {
            self.class_weights = Some(class_soft_weights(&report.precisions())?);
        }

        self.segment_epoch += 1;
        self.segment_history.push(report.top1);
        let last_segment = self.segment + 1 == self.cfg.curriculum.len();
        let saturated = self.cfg.saturation_detector && !last_segment && {
            let h = &self.segment_history;
            h.len() > SATURATION_WINDOW && {
                let (before, recent) = h.split_at(h.len() - SATURATION_WINDOW);
                let best = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                best(recent) - best(before) < SATURATION_GAIN
            }
        };
        if saturated {
            info!("validation accuracy saturated; moving to the next curriculum segment");
        }
        if saturated || self.segment_epoch >= seg.epochs {
            self.segment += 1;
            self.segment_epoch = 0;
            self.segment_history.clear();
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.adam.moments();
        let list = |xs: Vec<String>| xs.join(",");
        let mut state = vec![
            ("lr".to_string(), self.lr.to_string()),
            ("plateau".to_string(), format!("{},{}", self.plateau.best(), self.plateau.wait())),
            ("segment".to_string(), format!("{},{}", self.segment, self.segment_epoch)),
            ("segment_history".to_string(), list(self.segment_history.iter().map(f64::to_string).collect())),
            ("best_val_acc".to_string(), self.best_val_acc.to_string()),
        ];
        if let Some(r) = self.last_resolution {
            state.push(("resolution".into(), r.to_string()));
        }
        if let Some(p) = &self.train_predictions {
            state.push(("train_predictions".into(), list(p.iter().map(usize::to_string).collect())));
        }
        if let Some(w) = &self.class_weights {
            state.push(("class_weights".into(), list(w.iter().map(f32::to_string).collect())));
        }
        if let Some(ctl) = &self.escalation {
            for line in ctl.state_lines() {
                let (k, v) = line.split_once(" = ").expect("state lines are `key = value`");
                state.push((k.to_string(), v.to_string()));
            }
        }
        Checkpoint {
            graph: self.graph.clone(),
            params: self.params.clone(),
            adam_t: self.adam.t(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            epoch: self.epoch,
            best_val_acc: self.best_val_acc.max(0.0) as f32,
            state,
        }
    }

    fn persist(&self, improved: bool) -> Result<()> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        let ck = self.checkpoint();
        if improved {
            ck.save(self.best_path())?;
        }
        ck.save(self.last_path())?;
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        for r in &self.rows {
            csv.push_str(&r.to_string());
            csv.push('\n');
        }
        fs::write(self.metrics_path(), csv)?;
        Ok(())
    }

    /// Restores the state saved in `ck` and the metrics rows before it.
    pub fn resume(&mut self, ck: Checkpoint) -> Result<()> {
        if ck.graph.hash() != self.graph.hash() {
            return Err(Error::Checkpoint(format!(
                "graph hash mismatch: checkpoint {:016x}, config {:016x}",
                ck.graph.hash(),
                self.graph.hash()
            )));
        }
        let bad = |k: &str| Error::Checkpoint(format!("state `{k}` missing or malformed"));
        let get = |k: &str| ck.state_value(k).ok_or_else(|| bad(k));
        let list = |k: &str| -> Result<Vec<String>> {
            let v = get(k)?;
            Ok(if v.is_empty() { Vec::new() } else { v.split(',').map(str::to_string).collect() })
        };
        fn parse_all<T: FromStr>(xs: Vec<String>, k: &str) -> Result<Vec<T>> {
            xs.iter().map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("state `{k}` malformed")))).collect()
        }
        self.lr = get("lr")?.parse().map_err(|_| bad("lr"))?;
        let pl: Vec<f64> = parse_all(list("plateau")?, "plateau")?;
        let seg: Vec<u32> = parse_all(list("segment")?, "segment")?;
        if pl.len() != 2 || seg.len() != 2 {
            return Err(bad("plateau/segment"));
        }
        self.plateau.restore(pl[0], pl[1] as u32);
        self.segment = seg[0] as usize;
        self.segment_epoch = seg[1];
        self.segment_history = parse_all(list("segment_history")?, "segment_history")?;
        self.best_val_acc = get("best_val_acc")?.parse().map_err(|_| bad("best_val_acc"))?;
        self.train_predictions = ck.state_value("train_predictions").map(|_| list("train_predictions")).transpose()?.map(|v| parse_all(v, "train_predictions")).transpose()?;
        self.class_weights = ck.state_value("class_weights").map(|_| list("class_weights")).transpose()?.map(|v| parse_all(v, "class_weights")).transpose()?;
        self.last_resolution = ck.state_value("resolution").and_then(|v| v.parse().ok());
        if self.escalation.is_some() {
            let pairs: Vec<(String, String)> = ck.state.iter().filter(|(k, _)| k.starts_with("esc.")).cloned().collect();
            self.escalation = Some(EscalationController::from_state(self.cfg.escalation, &pairs)?);
        }
        self.adam.restore(ck.adam_t, ck.adam_m, ck.adam_v)?;
        self.params = ck.params;
        self.epoch = ck.epoch;
        self.rows = if self.metrics_path().exists() {
            read_metrics(self.metrics_path())?.into_iter().filter(|r| r.epoch < self.epoch).collect()
        } else {
            Vec::new()
        };
        if self.rows.len() != self.epoch as usize {
            warn!("metrics file has {} rows before epoch {}", self.rows.len(), self.epoch);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        fs::write(self.cfg.out_dir.join("config.txt"), self.cfg.to_text())?;
        let mut epochs = Vec::new();
        while !self.is_finished() {
            epochs.push(self.run_epoch()?);
        }
        Ok(TrainOutcome {
            rows: self.rows.clone(),
            epochs,
            best_val_acc: self.best_val_acc,
            best_checkpoint: self.best_path(),
            last_checkpoint: self.last_path(),
        })
    }
}

/// Runs `cfg` from scratch, or from `resume` if given.
pub fn train(cfg: TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let (train, val) = load_datasets(&cfg)?;
    let mut t = Trainer::new(cfg, train, val)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path, Some(t.graph()))?;
        t.resume(ck)?;
        info!("resumed at epoch {}", t.epoch());
    }
    t.run()
}
