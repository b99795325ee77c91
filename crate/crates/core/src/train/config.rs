use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugmentMode, AugmentRanges};
use crate::error::{Error, Result};
use crate::graph::{build_network1, build_network2, GraphSpec, InitScheme, WidthPlan};
use crate::optim::{ClrPhase, EscalationConfig, Plateau, PhaseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Net1,
    Net2,
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net1" => Ok(Network::Net1),
            "net2" => Ok(Network::Net2),
            _ => Err(Error::invalid(format!("network `{s}` is not net1|net2"))),
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Network::Net1 => "net1",
            Network::Net2 => "net2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Constant,
    Plateau,
    ClrReplay,
    ClrAdaptive,
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleMode::Constant),
            "plateau" => Ok(ScheduleMode::Plateau),
            "clr_replay" => Ok(ScheduleMode::ClrReplay),
            "clr_adaptive" => Ok(ScheduleMode::ClrAdaptive),
            _ => Err(Error::invalid(format!("schedule `{s}` is not constant|plateau|clr_replay|clr_adaptive"))),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Constant => "constant",
            ScheduleMode::Plateau => "plateau",
            ScheduleMode::ClrReplay => "clr_replay",
            ScheduleMode::ClrAdaptive => "clr_adaptive",
        })
    }
}

/// One curriculum stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub resolution: usize,
    pub epochs: u32,
    pub batch: usize,
}

pub const RESOLUTIONS: [usize; 3] = [16, 32, 64];

/// Parses `res:epochs:batch,...`.
pub fn parse_curriculum(s: &str) -> Result<Vec<Segment>> {
    let segs = s
        .split(',')
        .map(|part| {
            let f: Vec<&str> = part.trim().split(':').collect();
            let num = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::invalid(format!("curriculum `{part}`: {e}")));
            if f.len() != 3 {
                return Err(Error::invalid(format!("curriculum segment `{part}` is not res:epochs:batch")));
            }
            Ok(Segment { resolution: num(f[0])?, epochs: num(f[1])? as u32, batch: num(f[2])? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(segs)
}

pub fn format_curriculum(segs: &[Segment]) -> String {
    segs.iter().map(|s| format!("{}:{}:{}", s.resolution, s.epochs, s.batch)).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: Network,
    pub widths: WidthPlan,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub val_fraction: f64,
    pub curriculum: Vec<Segment>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub plateau: Plateau,
    pub clr_base: f64,
    pub clr_max: f64,
    pub clr_step: u32,
    pub escalation: EscalationConfig,
    pub augment: AugmentMode,
    pub augment_start_epoch: u32,
    pub aug_ranges: AugmentRanges,
    pub oversample: bool,
    pub class_weights: bool,
    pub saturation_detector: bool,
    pub out_dir: PathBuf,
    /// Stop after this many epochs in total, counting epochs run before a resume.
    pub stop_after: Option<u32>,
}

impl TrainConfig {
    pub fn network1() -> Self {
        TrainConfig {
            network: Network::Net1,
            widths: WidthPlan::network1(),
            train_data: None,
            val_data: None,
            val_fraction: 0.2,
            curriculum: parse_curriculum("32:15:256,64:30:64,16:10:256,64:180:64").expect("valid"),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            weight_decay: 0.0,
            init: InitScheme::UniformSmall,
            seed: 0,
            schedule: ScheduleMode::Plateau,
            plateau: Plateau::default(),
            clr_base: 1e-4,
            clr_max: 6e-4,
            clr_step: 6,
            escalation: EscalationConfig::default(),
            augment: AugmentMode::Net1,
            augment_start_epoch: 85,
            aug_ranges: AugmentRanges::default(),
            oversample: false,
            class_weights: false,
            saturation_detector: false,
            out_dir: PathBuf::from("runs/net1"),
            stop_after: None,
        }
    }

    pub fn network2() -> Self {
        TrainConfig {
            network: Network::Net2,
            widths: WidthPlan::network2(),
            curriculum: vec![Segment { resolution: 64, epochs: 108, batch: 128 }],
            lr: 1e-4,
            epsilon: 1e-8,
            weight_decay: 2e-4,
            init: InitScheme::VarianceScaling,
            schedule: ScheduleMode::ClrReplay,
            augment: AugmentMode::Net2,
            augment_start_epoch: 0,
            out_dir: PathBuf::from("runs/net2"),
            ..TrainConfig::network1()
        }
    }

    pub fn defaults_for(network: Network) -> Self {
        match network {
            Network::Net1 => TrainConfig::network1(),
            Network::Net2 => TrainConfig::network2(),
        }
    }

    pub fn total_epochs(&self) -> u32 {
        let planned: u32 = self.curriculum.iter().map(|s| s.epochs).sum();
        self.stop_after.map_or(planned, |s| s.min(planned))
    }

    pub fn build_graph(&self, num_classes: usize) -> Result<GraphSpec> {
        match self.network {
            Network::Net1 => build_network1(&self.widths, num_classes),
            Network::Net2 => build_network2(&self.widths, num_classes),
        }
    }

    pub fn first_clr_phase(&self) -> Result<ClrPhase> {
        let end = 2 * self.clr_step * self.escalation.phase_cycles.max(1);
        ClrPhase::new(self.clr_base, self.clr_max, self.clr_step, 0, end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.curriculum.is_empty() {
            return bad("curriculum is empty".into());
        }
        for s in &self.curriculum {
            if !RESOLUTIONS.contains(&s.resolution) {
                return bad(format!("curriculum resolution {} not in {RESOLUTIONS:?}", s.resolution));
            }
            if s.epochs == 0 || s.batch == 0 {
                return bad(format!("curriculum segment {}:{}:{} needs epochs and batch > 0", s.resolution, s.epochs, s.batch));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("need lr > 0, beta1/beta2 in [0, 1), epsilon > 0".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        match self.schedule {
            ScheduleMode::ClrReplay => {
                let end = PhaseSchedule::replay().end_epoch();
                if self.total_epochs() > end {
                    return bad(format!("clr_replay covers {end} epochs, curriculum runs {}", self.total_epochs()));
                }
            }
            ScheduleMode::ClrAdaptive => {
                self.first_clr_phase()?;
                if !(self.escalation.factor > 1.0 && self.escalation.decay > 1.0) {
                    return bad("esc_factor and esc_decay must exceed 1".into());
                }
            }
            ScheduleMode::Constant | ScheduleMode::Plateau => {}
        }
        self.widths_check()
    }

    fn widths_check(&self) -> Result<()> {
        self.build_graph(2).map(|_| ()).map_err(|e| Error::Config { line: 0, msg: e.to_string() })
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let err = |e: String| Error::invalid(format!("`{key}` = `{v}`: {e}"));
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        let flag = |v: &str| match v {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            _ => Err(format!("`{v}` is not a boolean")),
        };
        let path = |v: &str| if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) };
        match key {
            "network" => {
                let net: Network = v.parse()?;
                if net != self.network {
                    *self = TrainConfig { train_data: self.train_data.take(), val_data: self.val_data.take(), seed: self.seed, ..TrainConfig::defaults_for(net) };
                }
            }
            "widths" => self.widths.blocks = WidthPlan::parse_blocks(v)?,
            "stem" => self.widths.stem = if v == "none" { None } else { Some(num(v).map_err(err)?) },
            "width_divisor" => self.widths = self.widths.scaled_down(num(v).map_err(err)?),
            "train_data" => self.train_data = path(v),
            "val_data" => self.val_data = path(v),
            "val_fraction" => self.val_fraction = num(v).map_err(err)?,
            "curriculum" => self.curriculum = parse_curriculum(v)?,
            "lr" => self.lr = num(v).map_err(err)?,
            "beta1" => self.beta1 = num(v).map_err(err)?,
            "beta2" => self.beta2 = num(v).map_err(err)?,
            "epsilon" => self.epsilon = num(v).map_err(err)?,
            "weight_decay" => self.weight_decay = num(v).map_err(err)?,
            "init" => self.init = v.parse().map_err(err)?,
            "seed" => self.seed = num(v).map_err(err)?,
            "schedule" => self.schedule = v.parse()?,
            "plateau_patience" => self.plateau.patience = num(v).map_err(err)?,
            "plateau_factor" => self.plateau.factor = num(v).map_err(err)?,
            "plateau_min_delta" => self.plateau.min_delta = num(v).map_err(err)?,
            "plateau_min_lr" => self.plateau.min_lr = num(v).map_err(err)?,
            "clr_base" => self.clr_base = num(v).map_err(err)?,
            "clr_max" => self.clr_max = num(v).map_err(err)?,
            "clr_step" => self.clr_step = num(v).map_err(err)?,
            "clr_phase_cycles" => self.escalation.phase_cycles = num(v).map_err(err)?,
            "esc_factor" => self.escalation.factor = num(v).map_err(err)?,
            "esc_decay" => self.escalation.decay = num(v).map_err(err)?,
            "esc_cycles" => self.escalation.escalation_cycles = num(v).map_err(err)?,
            "augment" => self.augment = v.parse()?,
            "augment_start_epoch" => self.augment_start_epoch = num(v).map_err(err)?,
            "oversample" => self.oversample = flag(v).map_err(err)?,
            "class_weights" => self.class_weights = flag(v).map_err(err)?,
            "saturation_detector" => self.saturation_detector = flag(v).map_err(err)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "stop_after" | "max_epochs" => self.stop_after = if v == "none" { None } else { Some(num(v).map_err(err)?) },
            _ => match key.strip_prefix("aug.") {
                Some(k) => self.aug_ranges.set(k, v).map_err(err)?,
                None => return Err(Error::invalid(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Parses config text. A `network` line, wherever it appears, selects the defaults
    /// the remaining lines override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = TrainConfig::network1();
        if let Some((line, _, v)) = pairs.iter().find(|(_, k, _)| k == "network") {
            let net = v.parse().map_err(|e: Error| Error::Config { line: *line, msg: e.to_string() })?;
            cfg = TrainConfig::defaults_for(net);
        }
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k != "network") {
            cfg.set(k, v).map_err(|e| Error::Config { line: *line, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::parse(&fs::read_to_string(path)?)
    }

    /// Text that [`TrainConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut lines = vec![
            format!("network = {}", self.network),
            format!("widths = {}", self.widths.format_blocks()),
            format!("stem = {}", self.widths.stem.map_or("none".into(), |s| s.to_string())),
            format!("train_data = {}", opt(&self.train_data)),
            format!("val_data = {}", opt(&self.val_data)),
            format!("val_fraction = {}", self.val_fraction),
            format!("curriculum = {}", format_curriculum(&self.curriculum)),
            format!("lr = {:e}", self.lr),
            format!("beta1 = {}", self.beta1),
            format!("beta2 = {}", self.beta2),
            format!("epsilon = {:e}", self.epsilon),
            format!("weight_decay = {:e}", self.weight_decay),
            format!("init = {}", self.init),
            format!("seed = {}", self.seed),
            format!("schedule = {}", self.schedule),
            format!("plateau_patience = {}", self.plateau.patience),
            format!("plateau_factor = {}", self.plateau.factor),
            format!("plateau_min_delta = {:e}", self.plateau.min_delta),
            format!("plateau_min_lr = {:e}", self.plateau.min_lr),
            format!("clr_base = {:e}", self.clr_base),
            format!("clr_max = {:e}", self.clr_max),
            format!("clr_step = {}", self.clr_step),
            format!("clr_phase_cycles = {}", self.escalation.phase_cycles),
            format!("esc_factor = {}", self.escalation.factor),
            format!("esc_decay = {}", self.escalation.decay),
            format!("esc_cycles = {}", self.escalation.escalation_cycles),
            format!("augment = {}", self.augment),
            format!("augment_start_epoch = {}", self.augment_start_epoch),
        ];
        for key in AugmentRanges::KEYS {
            lines.push(format!("aug.{key} = {}", self.aug_ranges.get(key).expect("listed key")));
        }
        lines.extend([
            format!("oversample = {}", self.oversample),
            format!("class_weights = {}", self.class_weights),
            format!("saturation_detector = {}", self.saturation_detector),
            format!("out_dir = {}", self.out_dir.display()),
            format!("stop_after = {}", self.stop_after.map_or("none".into(), |s| s.to_string())),
        ]);
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recorded_runs() {
        let n1 = TrainConfig::network1();
        assert_eq!(n1.total_epochs(), 235);
        assert_eq!(n1.curriculum.iter().map(|s| s.batch).collect::<Vec<_>>(), vec![256, 64, 256, 64]);
        let n2 = TrainConfig::network2();
        assert_eq!(n2.total_epochs(), 108);
        assert_eq!((n2.lr, n2.epsilon, n2.weight_decay), (1e-4, 1e-8, 2e-4));
        n1.validate().unwrap();
        n2.validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let text = "# comment\nlr = 5e-4  # trailing\nnetwork = net2\nwidths = 16,16,16,16/32,32,32,32\nstem = 4\naug.rotate = -10,10\ncurriculum = 32:3:8\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.network, Network::Net2);
        assert_eq!(cfg.lr, 5e-4);
        assert_eq!(cfg.schedule, ScheduleMode::ClrReplay);
        assert_eq!(cfg.widths.stem, Some(4));
        assert_eq!(cfg.aug_ranges.get("rotate").unwrap(), TrainConfig::parse("aug.rotate = -10,10").unwrap().aug_ranges.get("rotate").unwrap());
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&TrainConfig::network1().to_text()).unwrap(), TrainConfig::network1());
    }

    #[test]
    fn errors_name_the_line() {
        match TrainConfig::parse("lr = 1e-3\nbogus = 1\n").unwrap_err() {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            e => panic!("{e}"),
        }
        assert!(matches!(TrainConfig::parse("no equals").unwrap_err(), Error::Config { line: 1, .. }));
    }

    #[test]
    fn validation_rules() {
        let mut c = TrainConfig::network2();
        c.curriculum = vec![Segment { resolution: 64, epochs: 109, batch: 8 }];
        assert!(c.validate().is_err());
        c.stop_after = Some(50);
        c.validate().unwrap();
        c.curriculum[0].resolution = 48;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::network1();
        c.curriculum[0].epochs = 0;
        assert!(c.validate().is_err());
    }
}
