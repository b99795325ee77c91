use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::ops::{apply, AugmentOp, OpKind};
use super::Image;
use crate::error::{Error, Result};
use crate::rng::{chacha, sample_seed, stream_seed};

/// The five ops drawn from for Network 1, in list order.
pub const NET1_OPS: [OpKind; 5] = [
    OpKind::Scale,
    OpKind::CoarseDropout,
    OpKind::Rotate,
    OpKind::AdditiveGaussianNoise,
    OpKind::CropAndPad,
];

/// The eleven ops permuted for Network 2.
pub const NET2_OPS: [OpKind; 11] = [
    OpKind::HFlip,
    OpKind::VFlip,
    OpKind::GaussianBlur,
    OpKind::CropAndPad,
    OpKind::Scale,
    OpKind::Translate,
    OpKind::Rotate,
    OpKind::Shear,
    OpKind::CoarseDropout,
    OpKind::Multiply,
    OpKind::ContrastNormalization,
];

/// Closed interval a parameter is drawn uniformly from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f32,
    pub max: f32,
}

impl Range {
    pub const fn new(min: f32, max: f32) -> Self {
        Range { min, max }
    }

    pub fn contains(&self, v: f32) -> bool {
        (self.min..=self.max).contains(&v)
    }

    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.min, self.max)
    }
}

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `min,max`, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<f32>().map_err(|e| format!("`{v}`: {e}"));
        let r = Range::new(parse(a)?, parse(b)?);
        if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
            return Err(format!("invalid range `{s}`"));
        }
        Ok(r)
    }
}

/// Parameter ranges for every op.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub rotate: Range,
    pub scale: Range,
    /// Applied independently to both axes, as a fraction of the side.
    pub translate: Range,
    pub shear: Range,
    pub crop_and_pad: Range,
    pub blur_sigma: Range,
    pub noise_sigma: Range,
    pub dropout_p: Range,
    /// Patch side as a fraction of the shorter image side.
    pub dropout_size: Range,
    pub multiply: Range,
    pub contrast: Range,
    /// Chance a sampled flip actually mirrors.
    pub flip_prob: f32,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotate: Range::new(-20.0, 20.0),
            scale: Range::new(0.8, 1.2),
            translate: Range::new(-0.125, 0.125),
            shear: Range::new(-15.0, 15.0),
            crop_and_pad: Range::new(-0.125, 0.125),
            blur_sigma: Range::new(0.0, 1.5),
            noise_sigma: Range::new(0.0, 0.05),
            dropout_p: Range::new(0.0, 0.15),
            dropout_size: Range::new(0.10, 0.25),
            multiply: Range::new(0.8, 1.2),
            contrast: Range::new(0.75, 1.25),
            flip_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    /// Config keys accepted by [`AugmentRanges::set`].
    pub const KEYS: [&'static str; 12] = [
        "rotate",
        "scale",
        "translate",
        "shear",
        "crop_and_pad",
        "blur_sigma",
        "noise_sigma",
        "dropout_p",
        "dropout_size",
        "multiply",
        "contrast",
        "flip_prob",
    ];

    fn range_mut(&mut self, key: &str) -> Option<&mut Range> {
        Some(match key {
            "rotate" => &mut self.rotate,
            "scale" => &mut self.scale,
            "translate" => &mut self.translate,
            "shear" => &mut self.shear,
            "crop_and_pad" => &mut self.crop_and_pad,
            "blur_sigma" => &mut self.blur_sigma,
            "noise_sigma" => &mut self.noise_sigma,
            "dropout_p" => &mut self.dropout_p,
            "dropout_size" => &mut self.dropout_size,
            "multiply" => &mut self.multiply,
            "contrast" => &mut self.contrast,
            _ => return None,
        })
    }

    /// Sets one range from `min,max` (or the flip probability from a single number).
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if key == "flip_prob" {
            let p: f32 = value.trim().parse().map_err(|e| format!("flip_prob: {e}"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("flip_prob {p} outside [0, 1]"));
            }
            self.flip_prob = p;
            return Ok(());
        }
        let range: Range = value.parse()?;
        let lower_bound = match key {
            "scale" => Some(f32::MIN_POSITIVE),
            "blur_sigma" | "noise_sigma" | "dropout_p" | "dropout_size" | "multiply" => Some(0.0),
            _ => None,
        };
        if lower_bound.is_some_and(|lo| range.min < lo) {
            return Err(format!("{key} range {range} must not go below {}", lower_bound.unwrap_or(0.0)));
        }
        let slot = self.range_mut(key).ok_or_else(|| format!("unknown augmentation range `{key}`"))?;
        *slot = range;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key == "flip_prob" {
            return Some(self.flip_prob.to_string());
        }
        self.clone().range_mut(key).map(|r| r.to_string())
    }

    /// Draws parameters for `kind` uniformly within range.
    pub fn sample(&self, kind: OpKind, rng: &mut impl Rng) -> AugmentOp {
        match kind {
            OpKind::HFlip => AugmentOp::HFlip { apply: rng.random_bool(self.flip_prob as f64) },
            OpKind::VFlip => AugmentOp::VFlip { apply: rng.random_bool(self.flip_prob as f64) },
            OpKind::GaussianBlur => AugmentOp::GaussianBlur { sigma: self.blur_sigma.sample(rng) },
            OpKind::CropAndPad => AugmentOp::CropAndPad { percent: self.crop_and_pad.sample(rng) },
            OpKind::Scale => AugmentOp::Scale { factor: self.scale.sample(rng) },
            OpKind::Translate => AugmentOp::Translate { dx: self.translate.sample(rng), dy: self.translate.sample(rng) },
            OpKind::Rotate => AugmentOp::Rotate { degrees: self.rotate.sample(rng) },
            OpKind::Shear => AugmentOp::Shear { degrees: self.shear.sample(rng) },
            OpKind::CoarseDropout => AugmentOp::CoarseDropout {
                p: self.dropout_p.sample(rng),
                size: self.dropout_size.sample(rng),
                seed: rng.random(),
            },
            OpKind::Multiply => AugmentOp::Multiply { factor: self.multiply.sample(rng) },
            OpKind::ContrastNormalization => AugmentOp::ContrastNormalization { alpha: self.contrast.sample(rng) },
            OpKind::AdditiveGaussianNoise => AugmentOp::AdditiveGaussianNoise {
                sigma: self.noise_sigma.sample(rng),
                seed: rng.random(),
            },
        }
    }

    /// Whether every parameter of `op` lies inside its range.
    pub fn contains(&self, op: &AugmentOp) -> bool {
        match *op {
            AugmentOp::HFlip { .. } | AugmentOp::VFlip { .. } => true,
            AugmentOp::GaussianBlur { sigma } => self.blur_sigma.contains(sigma),
            AugmentOp::CropAndPad { percent } => self.crop_and_pad.contains(percent),
            AugmentOp::Scale { factor } => self.scale.contains(factor),
            AugmentOp::Translate { dx, dy } => self.translate.contains(dx) && self.translate.contains(dy),
            AugmentOp::Rotate { degrees } => self.rotate.contains(degrees),
            AugmentOp::Shear { degrees } => self.shear.contains(degrees),
            AugmentOp::CoarseDropout { p, size, .. } => self.dropout_p.contains(p) && self.dropout_size.contains(size),
            AugmentOp::Multiply { factor } => self.multiply.contains(factor),
            AugmentOp::ContrastNormalization { alpha } => self.contrast.contains(alpha),
            AugmentOp::AdditiveGaussianNoise { sigma, .. } => self.noise_sigma.contains(sigma),
        }
    }
}

/// Ops applied in order to one sample.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelinePlan {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
}

impl PipelinePlan {
    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }
}

impl fmt::Display for PipelinePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return f.write_str("identity");
        }
        let parts: Vec<String> = self.ops.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" -> "))
    }
}

pub fn apply_plan(plan: &PipelinePlan, img: &Image) -> Image {
    plan.ops.iter().fold(img.clone(), |acc, op| apply(op, &acc))
}

/// `k` uniform in `0..=5`, then `k` distinct ops from [`NET1_OPS`] applied in the
/// order they were picked.
pub fn sample_plan_net1(ranges: &AugmentRanges, seed: u64) -> PipelinePlan {
    let mut rng = chacha(seed);
    let k = rng.random_range(0..=NET1_OPS.len());
    let mut kinds = NET1_OPS;
    let (picked, _) = kinds.partial_shuffle(&mut rng, k);
    let picked = picked.to_vec();
    PipelinePlan { ops: picked.into_iter().map(|kind| ranges.sample(kind, &mut rng)).collect(), seed }
}

/// Whether a sample belongs to the augmented half for Network 2. Depends on the sample
/// index only, so the same half is augmented every epoch.
pub fn net2_selected(global_seed: u64, sample_index: u64) -> bool {
    chacha(stream_seed(global_seed, "net2-half", sample_index)).random_bool(0.5)
}

/// Identity for the unselected half; otherwise all of [`NET2_OPS`] in a random order
/// with fresh parameters drawn from `seed`.
pub fn sample_plan_net2(ranges: &AugmentRanges, global_seed: u64, seed: u64, sample_index: u64) -> PipelinePlan {
    if !net2_selected(global_seed, sample_index) {
        return PipelinePlan { ops: Vec::new(), seed };
    }
    let mut rng = chacha(seed);
    let mut kinds = NET2_OPS;
    kinds.shuffle(&mut rng);
    PipelinePlan { ops: kinds.into_iter().map(|kind| ranges.sample(kind, &mut rng)).collect(), seed }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AugmentMode {
    #[default]
    None,
    Net1,
    Net2,
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "off" => Ok(AugmentMode::None),
            "net1" => Ok(AugmentMode::Net1),
            "net2" => Ok(AugmentMode::Net2),
            _ => Err(Error::invalid(format!("augment mode `{s}` is not none|net1|net2"))),
        }
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::None => "none",
            AugmentMode::Net1 => "net1",
            AugmentMode::Net2 => "net2",
        })
    }
}

/// The plan for one sample at one epoch; a pure function of its arguments.
pub fn plan_for_sample(
    mode: AugmentMode,
    ranges: &AugmentRanges,
    global_seed: u64,
    epoch: u64,
    sample_index: u64,
) -> PipelinePlan {
    let seed = sample_seed(global_seed, epoch, sample_index);
    match mode {
        AugmentMode::None => PipelinePlan { ops: Vec::new(), seed },
        AugmentMode::Net1 => sample_plan_net1(ranges, seed),
        AugmentMode::Net2 => sample_plan_net2(ranges, global_seed, seed, sample_index),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn net1_plan_lengths_are_uniform() {
        let ranges = AugmentRanges::default();
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for i in 0..draws {
            let plan = plan_for_sample(AugmentMode::Net1, &ranges, 17, 0, i);
            counts[plan.ops.len()] += 1;
            let kinds: HashSet<OpKind> = plan.ops.iter().map(AugmentOp::kind).collect();
            assert_eq!(kinds.len(), plan.ops.len());
            assert!(kinds.iter().all(|k| NET1_OPS.contains(k)));
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn net1_plans_are_reproducible() {
        let ranges = AugmentRanges::default();
        assert_eq!(sample_plan_net1(&ranges, 5), sample_plan_net1(&ranges, 5));
        let empty = (0..100).map(|s| sample_plan_net1(&ranges, s)).find(|p| p.ops.is_empty()).unwrap();
        let img = Image::filled(4, 4, 0.3);
        assert_eq!(apply_plan(&empty, &img), img);
    }

    #[test]
    fn net2_half_and_permutation() {
        let ranges = AugmentRanges::default();
        let draws = 10_000u64;
        let mut augmented = 0;
        let mut distinct = HashSet::new();
        for i in 0..draws {
            let plan = plan_for_sample(AugmentMode::Net2, &ranges, 99, 3, i);
            assert_eq!(plan.is_identity(), !net2_selected(99, i));
            if !plan.is_identity() {
                augmented += 1;
                let mut kinds: Vec<OpKind> = plan.ops.iter().map(AugmentOp::kind).collect();
                kinds.sort();
                let mut all = NET2_OPS.to_vec();
                all.sort();
                assert_eq!(kinds, all);
                distinct.insert(format!("{plan}"));
            }
        }
        assert!((augmented as f64 / draws as f64 - 0.5).abs() < 0.02);
        assert_eq!(distinct.len(), augmented);
        // Selection is stable across epochs.
        for i in 0..50 {
            let a = plan_for_sample(AugmentMode::Net2, &ranges, 99, 0, i).is_identity();
            let b = plan_for_sample(AugmentMode::Net2, &ranges, 99, 7, i).is_identity();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let mut ranges = AugmentRanges::default();
        ranges.set("rotate", "-5,30").unwrap();
        let mut rng = chacha(1);
        for kind in OpKind::ALL {
            for _ in 0..1000 {
                let op = ranges.sample(kind, &mut rng);
                assert_eq!(op.kind(), kind);
                assert!(ranges.contains(&op), "{op}");
            }
        }
    }

    #[test]
    fn range_config() {
        let mut r = AugmentRanges::default();
        r.set("scale", "0.9, 1.1").unwrap();
        assert_eq!(r.scale, Range::new(0.9, 1.1));
        assert_eq!(r.get("scale").unwrap(), "0.9,1.1");
        assert!(r.set("scale", "1.2,0.9").is_err());
        assert!(r.set("scale", "-1,2").is_err());
        assert!(r.set("warp", "0,1").is_err());
        r.set("flip_prob", "0.25").unwrap();
        assert_eq!(r.flip_prob, 0.25);
        assert!(AugmentRanges::KEYS.iter().all(|k| r.get(k).is_some()));
    }
}
