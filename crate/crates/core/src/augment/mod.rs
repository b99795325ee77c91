//! Seeded image augmentation, the two plan-sampling regimes and curriculum resizing.

mod ops;
mod plan;

use std::io::Write;

use crate::error::{Error, Result};

pub use ops::{apply, AugmentOp, OpKind};
pub use plan::{
    apply_plan, net2_selected, plan_for_sample, sample_plan_net1, sample_plan_net2, AugmentMode, AugmentRanges,
    PipelinePlan, Range, NET1_OPS, NET2_OPS,
};

/// A 3-channel float image, planar (`c, h, w`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != Self::CHANNELS * h * w {
            return Err(Error::shape(format!(
                "image {h}x{w} needs {} values, got {}",
                Self::CHANNELS * h * w,
                data.len()
            )));
        }
        let mut img = Image { h, w, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Image { h, w, data: vec![value.clamp(0.0, 1.0); Self::CHANNELS * h * w] }
    }

    /// From interleaved 8-bit RGB rows.
    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * h * w {
            return Err(Error::shape(format!("{h}x{w} RGB needs {} bytes, got {}", 3 * h * w, rgb.len())));
        }
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Image::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.h * self.w;
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| (c, i)))
            .map(|(c, i)| (self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.w, self.h)?;
        out.write_all(&self.to_rgb8())?;
        Ok(())
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at integers),
    /// zero outside the image.
    fn sample_zero(&self, c: usize, y: f32, x: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        let at = |yy: i64, xx: i64| {
            if yy < 0 || xx < 0 || yy >= self.h as i64 || xx >= self.w as i64 {
                0.0
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Bilinear resampling to `h × w` with half-pixel centres and edge clamping.
pub(crate) fn resize_to(img: &Image, h: usize, w: usize) -> Image {
    if (h, w) == (img.h, img.w) {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f32)
            })
            .collect()
    };
    let ys = axis(h, img.h);
    let xs = axis(w, img.w);
    let mut data = Vec::with_capacity(Image::CHANNELS * h * w);
    for c in 0..Image::CHANNELS {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let mut out = Image { h, w, data };
    out.clamp();
    out
}

/// Square bilinear resize for the resolution curriculum.
pub fn resize(img: &Image, target: usize) -> Result<Image> {
    if img.h != img.w {
        return Err(Error::shape(format!("resize expects a square image, got {}x{}", img.h, img.w)));
    }
    if target == 0 {
        return Err(Error::invalid("resize target must be >= 1"));
    }
    Ok(resize_to(img, target, target))
}
