use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::{chacha, stream_seed};

pub const MAGIC: &[u8; 4] = b"TINB";
pub const VERSION: u16 = 1;
/// Magic, version, class count, record count, height, width.
pub const HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 2 + 2;

/// Labelled 8-bit RGB images of one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    h: usize,
    w: usize,
    labels: Vec<u16>,
    /// Row-major RGB, `h·w·3` bytes per record.
    pixels: Vec<u8>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(num_classes: usize, h: usize, w: usize, labels: Vec<u16>, pixels: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > u16::MAX as usize || h == 0 || w == 0 {
            return Err(Error::invalid(format!("dataset needs classes in 1..=65535 and positive size, got {num_classes} classes at {h}x{w}")));
        }
        if pixels.len() != labels.len() * h * w * 3 {
            return Err(Error::invalid(format!(
                "{} records at {h}x{w} need {} pixel bytes, got {}",
                labels.len(),
                labels.len() * h * w * 3,
                pixels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::invalid(format!("record {i} has label {l} >= {num_classes} classes")));
        }
        let class_names = (0..num_classes).map(|c| format!("class_{c}")).collect();
        Ok(Dataset { num_classes, h, w, labels, pixels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let n = self.h * self.w * 3;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        Image::from_rgb8(self.h, self.w, self.record(i)).expect("record size checked at construction")
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.num_classes {
            return Err(Error::invalid(format!("{} class names for {} classes", names.len(), self.num_classes)));
        }
        self.class_names = names;
        Ok(())
    }

    /// Records per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for l in self.labels() {
            h[l] += 1;
        }
        h
    }

    /// The records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.h * self.w * 3;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.record(i));
        }
        Dataset {
            num_classes: self.num_classes,
            h: self.h,
            w: self.w,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
            class_names: self.class_names.clone(),
        }
    }

    /// Seeded split into `(train, val)` with `round(val_fraction·len)` validation records.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid(format!("val fraction {val_fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut chacha(stream_seed(seed, "split", 0)));
        let n_val = (val_fraction * self.len() as f64).round() as usize;
        let (val, train) = order.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * (2 + self.h * self.w * 3));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(self.record(i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Dataset { path: path.to_path_buf(), msg };
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated { expected: HEADER_BYTES as u64, actual: bytes.len() as u64 });
        }
        if &bytes[..4] != MAGIC {
            return Err(err(format!("bad magic {:?}, expected \"TINB\"", String::from_utf8_lossy(&bytes[..4]))));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let classes = u16_at(6) as usize;
        let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let (h, w) = (u16_at(12) as usize, u16_at(14) as usize);
        let record = 2 + h * w * 3;
        let expected = (HEADER_BYTES + count * record) as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated { expected, actual: bytes.len() as u64 });
        }
        if bytes.len() as u64 > expected {
            return Err(err(format!("{} trailing bytes after {count} records", bytes.len() as u64 - expected)));
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * (record - 2));
        for r in bytes[HEADER_BYTES..].chunks_exact(record) {
            labels.push(u16::from_le_bytes([r[0], r[1]]));
            pixels.extend_from_slice(&r[2..]);
        }
        Dataset::new(classes, h, w, labels, pixels).map_err(|e| err(e.to_string()))
    }

    /// Reads a dataset file and, when present, its `<path>.names` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Dataset { path: path.to_path_buf(), msg: e.to_string() })?;
        let mut ds = Dataset::from_bytes(&bytes, path)?;
        let names_path = names_path(path);
        if names_path.exists() {
            let text = fs::read_to_string(&names_path)?;
            let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            ds.set_class_names(names).map_err(|e| Error::Dataset { path: names_path, msg: e.to_string() })?;
        }
        Ok(ds)
    }

    /// Writes the dataset file and its class-name sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        let mut names = self.class_names.join("\n");
        names.push('\n');
        fs::write(names_path(path), names)?;
        Ok(())
    }

    /// Class-separable images. Every class uses the same four blob colours on a grey
    /// background, so colour statistics carry no label; classes differ in where the
    /// blobs sit. Samples jitter the layout, brightness and pixels.
    pub fn synthetic(num_classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if resolution < 4 {
            return Err(Error::invalid(format!("synthetic resolution {resolution} is below 4")));
        }
        const PALETTE: [[f32; 3]; 4] = [[0.9, 0.15, 0.1], [0.1, 0.75, 0.2], [0.15, 0.3, 0.95], [0.95, 0.85, 0.1]];
        let r = resolution as f32;
        let noise = Normal::new(0.0f32, 0.05).expect("valid sigma");
        let mut labels = Vec::with_capacity(num_classes * per_class);
        let mut pixels = Vec::with_capacity(num_classes * per_class * resolution * resolution * 3);
        for c in 0..num_classes {
            let mut layout_rng = chacha(stream_seed(seed, "synthetic-layout", c as u64));
            let centres: Vec<(f32, f32)> = (0..PALETTE.len())
                .map(|_| (layout_rng.random_range(0.2..0.8) * r, layout_rng.random_range(0.2..0.8) * r))
                .collect();
            for k in 0..per_class {
                let mut rng = chacha(stream_seed(seed, "synthetic", (c * per_class + k) as u64));
                let shift = 0.08 * r;
                let (dx, dy) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
                let radius = rng.random_range(0.14..0.2) * r;
                let gain: f32 = rng.random_range(0.85..1.15);
                labels.push(c as u16);
                for y in 0..resolution {
                    for x in 0..resolution {
                        let (px, py) = (x as f32 + 0.5 - dx, y as f32 + 0.5 - dy);
                        let mut colour = [0.5f32; 3];
                        for (centre, rgb) in centres.iter().zip(PALETTE) {
                            let d = ((px - centre.0).powi(2) + (py - centre.1).powi(2)).sqrt();
                            let cover = (radius - d + 0.5).clamp(0.0, 1.0);
                            for ch in 0..3 {
                                colour[ch] += cover * (rgb[ch] - colour[ch]);
                            }
                        }
                        for v in colour {
                            let v = v * gain + noise.sample(&mut rng);
                            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
            }
        }
        let mut ds = Dataset::new(num_classes, resolution, resolution, labels, pixels)?;
        ds.class_names = (0..num_classes).map(|c| format!("synthetic_{c}")).collect();
        Ok(ds)
    }
}

fn names_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handwritten_round_trip() {
        let pixels: Vec<u8> = (0..24).collect();
        let ds = Dataset::new(3, 2, 2, vec![2, 0], pixels).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + 2 * (2 + 12));
        assert_eq!(&bytes[..4], b"TINB");
        assert_eq!(&bytes[16..18], &[2, 0]);
        let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn structured_errors() {
        let ds = Dataset::new(2, 2, 2, vec![1, 0], vec![7; 24]).unwrap();
        let bytes = ds.to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 44, actual: 41 }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad, Path::new("x")).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[16] = 5;
        assert!(Dataset::from_bytes(&bad, Path::new("x")).unwrap_err().to_string().contains("label 5"));
    }

    #[test]
    fn file_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tinb");
        let mut ds = Dataset::synthetic(3, 4, 8, 1).unwrap();
        ds.set_class_names(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert_eq!(fs::read_to_string(dir.path().join("d.tinb.names")).unwrap(), "a\nb\nc\n");
    }

    #[test]
    fn synthetic_is_balanced_deterministic_and_separable() {
        let ds = Dataset::synthetic(10, 100, 32, 7).unwrap();
        assert_eq!(ds.histogram(), vec![100; 10]);
        assert_eq!(ds, Dataset::synthetic(10, 100, 32, 7).unwrap());
        assert_ne!(ds, Dataset::synthetic(10, 100, 32, 8).unwrap());
        // Nearest centroid in pixel space, centroids from even records, scored on odd.
        let n = ds.record(0).len();
        let mut centroids = vec![vec![0.0f64; n]; 10];
        for i in (0..ds.len()).step_by(2) {
            for (acc, &p) in centroids[ds.label(i)].iter_mut().zip(ds.record(i)) {
                *acc += p as f64 / 50.0;
            }
        }
        let odd: Vec<usize> = (1..ds.len()).step_by(2).collect();
        let correct = odd
            .iter()
            .filter(|&&i| {
                let dist = |c: &Vec<f64>| c.iter().zip(ds.record(i)).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
                (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap() == ds.label(i)
            })
            .count();
        assert!(correct as f64 / odd.len() as f64 > 0.9, "{correct} of {}", odd.len());
        // Colour alone says nothing: per-class mean colours stay close together.
        let mean_rgb = |c: usize| -> [f64; 3] {
            let mut m = [0.0; 3];
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == c).collect();
            for &i in &idx {
                for px in ds.record(i).chunks_exact(3) {
                    for ch in 0..3 {
                        m[ch] += px[ch] as f64 / (idx.len() * 1024 * 255) as f64;
                    }
                }
            }
            m
        };
        let (a, b) = (mean_rgb(0), mean_rgb(1));
        assert!((0..3).all(|ch| (a[ch] - b[ch]).abs() < 0.03), "{a:?} {b:?}");
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let ds = Dataset::synthetic(2, 50, 4, 3).unwrap();
        let (train, val) = ds.split(0.2, 11).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert_eq!(ds.split(0.2, 11).unwrap().1, val);
        assert_ne!(ds.split(0.2, 12).unwrap().1, val);
    }
}
