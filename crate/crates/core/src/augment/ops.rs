use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{resize_to, Image};
use crate::rng::chacha;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    HFlip,
    VFlip,
    GaussianBlur,
    CropAndPad,
    Scale,
    Translate,
    Rotate,
    Shear,
    CoarseDropout,
    Multiply,
    ContrastNormalization,
    AdditiveGaussianNoise,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
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
        OpKind::AdditiveGaussianNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::HFlip => "hflip",
            OpKind::VFlip => "vflip",
            OpKind::GaussianBlur => "gaussian_blur",
            OpKind::CropAndPad => "crop_and_pad",
            OpKind::Scale => "scale",
            OpKind::Translate => "translate",
            OpKind::Rotate => "rotate",
            OpKind::Shear => "shear",
            OpKind::CoarseDropout => "coarse_dropout",
            OpKind::Multiply => "multiply",
            OpKind::ContrastNormalization => "contrast_normalization",
            OpKind::AdditiveGaussianNoise => "additive_gaussian_noise",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown augmentation `{s}`"))
    }
}

/// One transformation with its sampled parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip { apply: bool },
    VFlip { apply: bool },
    GaussianBlur { sigma: f32 },
    /// Positive removes that fraction of each side, negative adds a black border;
    /// the result is resized back.
    CropAndPad { percent: f32 },
    Scale { factor: f32 },
    /// Shifts as fractions of width and height.
    Translate { dx: f32, dy: f32 },
    Rotate { degrees: f32 },
    /// Horizontal shear.
    Shear { degrees: f32 },
    /// About `p·h·w` pixels are zeroed in square patches of side `size·min(h, w)`.
    CoarseDropout { p: f32, size: f32, seed: u64 },
    Multiply { factor: f32 },
    ContrastNormalization { alpha: f32 },
    AdditiveGaussianNoise { sigma: f32, seed: u64 },
}

impl AugmentOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugmentOp::HFlip { .. } => OpKind::HFlip,
            AugmentOp::VFlip { .. } => OpKind::VFlip,
            AugmentOp::GaussianBlur { .. } => OpKind::GaussianBlur,
            AugmentOp::CropAndPad { .. } => OpKind::CropAndPad,
            AugmentOp::Scale { .. } => OpKind::Scale,
            AugmentOp::Translate { .. } => OpKind::Translate,
            AugmentOp::Rotate { .. } => OpKind::Rotate,
            AugmentOp::Shear { .. } => OpKind::Shear,
            AugmentOp::CoarseDropout { .. } => OpKind::CoarseDropout,
            AugmentOp::Multiply { .. } => OpKind::Multiply,
            AugmentOp::ContrastNormalization { .. } => OpKind::ContrastNormalization,
            AugmentOp::AdditiveGaussianNoise { .. } => OpKind::AdditiveGaussianNoise,
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AugmentOp::HFlip { apply } | AugmentOp::VFlip { apply } => write!(f, "{}({apply})", self.kind()),
            AugmentOp::GaussianBlur { sigma } | AugmentOp::AdditiveGaussianNoise { sigma, .. } => {
                write!(f, "{}(sigma={sigma:.4})", self.kind())
            }
            AugmentOp::CropAndPad { percent } => write!(f, "crop_and_pad({percent:.4})"),
            AugmentOp::Scale { factor } | AugmentOp::Multiply { factor } => write!(f, "{}({factor:.4})", self.kind()),
            AugmentOp::Translate { dx, dy } => write!(f, "translate({dx:.4}, {dy:.4})"),
            AugmentOp::Rotate { degrees } | AugmentOp::Shear { degrees } => write!(f, "{}({degrees:.3}deg)", self.kind()),
            AugmentOp::CoarseDropout { p, size, .. } => write!(f, "coarse_dropout(p={p:.4}, size={size:.4})"),
            AugmentOp::ContrastNormalization { alpha } => write!(f, "contrast_normalization({alpha:.4})"),
        }
    }
}

/// Inverse-mapped affine warp: `src(y, x)` gives the source coordinates (pixel centres
/// at integers) for each output pixel.
fn warp(img: &Image, src: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f32, x as f32);
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, img.sample_zero(c, sy, sx));
            }
        }
    }
    out
}

fn centre(img: &Image) -> (f32, f32) {
    ((img.height() as f32 - 1.0) / 2.0, (img.width() as f32 - 1.0) / 2.0)
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as usize;
    if sigma <= 0.0 || radius == 0 {
        return img.clone();
    }
    let mut kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height(), img.width());
    // Separable passes with edge clamping.
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::filled(h, w, 0.0);
        for c in 0..Image::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, &k) in kernel.iter().enumerate() {
                        let off = i as i64 - radius as i64;
                        let (yy, xx) = if horizontal {
                            (y, (x as i64 + off).clamp(0, w as i64 - 1) as usize)
                        } else {
                            ((y as i64 + off).clamp(0, h as i64 - 1) as usize, x)
                        };
                        acc += k * src.get(c, yy, xx);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn crop_and_pad(img: &Image, percent: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let dy = (percent.abs() * h as f32).round() as usize;
    let dx = (percent.abs() * w as f32).round() as usize;
    if dy == 0 && dx == 0 {
        return img.clone();
    }
    let staged = if percent > 0.0 {
        let (dy, dx) = (dy.min((h - 1) / 2), dx.min((w - 1) / 2));
        let (ch, cw) = (h - 2 * dy, w - 2 * dx);
        let mut crop = Image::filled(ch, cw, 0.0);
        for c in 0..Image::CHANNELS {
            for y in 0..ch {
                for x in 0..cw {
                    crop.set(c, y, x, img.get(c, y + dy, x + dx));
                }
            }
        }
        crop
    } else {
        let (ph, pw) = (h + 2 * dy, w + 2 * dx);
        let mut pad = Image::filled(ph, pw, 0.0);
        for c in 0..Image::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    pad.set(c, y + dy, x + dx, img.get(c, y, x));
                }
            }
        }
        pad
    };
    resize_to(&staged, h, w)
}

fn coarse_dropout(img: &Image, p: f32, size: f32, seed: u64) -> Image {
    let (h, w) = (img.height(), img.width());
    let side = ((size * h.min(w) as f32).round() as usize).clamp(1, h.min(w));
    let count = (p * (h * w) as f32 / (side * side) as f32).round() as usize;
    let mut out = img.clone();
    let mut rng = chacha(seed);
    for _ in 0..count {
        let top = rng.random_range(0..=h - side);
        let left = rng.random_range(0..=w - side);
        for c in 0..Image::CHANNELS {
            for y in top..top + side {
                for x in left..left + side {
                    out.set(c, y, x, 0.0);
                }
            }
        }
    }
    out
}

/// Applies one op; the result has the input's shape and is clamped to `[0, 1]`.
pub fn apply(op: &AugmentOp, img: &Image) -> Image {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let (cy, cx) = centre(img);
    let mut out = match *op {
        AugmentOp::HFlip { apply: false } | AugmentOp::VFlip { apply: false } => img.clone(),
        AugmentOp::HFlip { apply: true } => warp(img, |y, x| (y, w - 1.0 - x)),
        AugmentOp::VFlip { apply: true } => warp(img, |y, x| (h - 1.0 - y, x)),
        AugmentOp::GaussianBlur { sigma } => gaussian_blur(img, sigma),
        AugmentOp::CropAndPad { percent } => crop_and_pad(img, percent),
        AugmentOp::Scale { factor } => {
            if factor <= 0.0 {
                img.clone()
            } else {
                warp(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
            }
        }
        AugmentOp::Translate { dx, dy } => warp(img, |y, x| (y - dy * h, x - dx * w)),
        AugmentOp::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            warp(img, |y, x| {
                let (ry, rx) = (y - cy, x - cx);
                (cy - s * rx + c * ry, cx + c * rx + s * ry)
            })
        }
        AugmentOp::Shear { degrees } => {
            let t = degrees.to_radians().tan();
            warp(img, |y, x| (y, x - t * (y - cy)))
        }
        AugmentOp::CoarseDropout { p, size, seed } => coarse_dropout(img, p, size, seed),
        AugmentOp::Multiply { factor } => {
            let mut out = img.clone();
            out.data_mut().iter_mut().for_each(|v| *v *= factor);
            out
        }
        AugmentOp::ContrastNormalization { alpha } => {
            let mut out = img.clone();
            out.data_mut().iter_mut().for_each(|v| *v = 0.5 + alpha * (*v - 0.5));
            out
        }
        AugmentOp::AdditiveGaussianNoise { sigma, seed } => {
            let mut out = img.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0f32, sigma).expect("positive finite sigma");
                let mut rng = chacha(seed);
                out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            out
        }
    };
    out.clamp();
    out
}
