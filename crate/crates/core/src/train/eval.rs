use std::fmt::Write as _;

use super::dataset::Dataset;
use crate::augment::{resize, Image};
use crate::error::{Error, Result};
use crate::graph::{forward, GraphSpec, Mode, Params};
use crate::tensor::{softmax_cross_entropy, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    /// `correct / count`, 0 for an absent class.
    pub accuracy: f64,
    /// Correct over times predicted, 0 for a class never predicted.
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub per_class: Vec<ClassStats>,
    /// `(true, predicted, count)` for every off-diagonal pair, by count descending then
    /// by pair.
    pub confusion: Vec<(usize, usize, usize)>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    /// Statistics of `predictions` against `labels`; `loss` is left at 0.
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        if let Some(&c) = labels.iter().chain(predictions).find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!("class {c} out of range for {num_classes} classes")));
        }
        let mut matrix = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            matrix[t][p] += 1;
        }
        let per_class = (0..num_classes)
            .map(|c| {
                let count: usize = matrix[c].iter().sum();
                let predicted: usize = matrix.iter().map(|row| row[c]).sum();
                let correct = matrix[c][c];
                let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
                ClassStats { class: c, count, correct, accuracy: ratio(correct, count), precision: ratio(correct, predicted) }
            })
            .collect();
        let mut confusion: Vec<(usize, usize, usize)> = (0..num_classes)
            .flat_map(|t| (0..num_classes).map(move |p| (t, p)))
            .filter(|&(t, p)| t != p && matrix[t][p] > 0)
            .map(|(t, p)| (t, p, matrix[t][p]))
            .collect();
        confusion.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        let correct = labels.iter().zip(predictions).filter(|(t, p)| t == p).count();
        let top1 = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
        Ok(EvalReport { top1, loss: 0.0, per_class, confusion, predictions: predictions.to_vec() })
    }

    /// The `k` present classes with the lowest accuracy, ascending (ties by class id).
    pub fn worst(&self, k: usize) -> Vec<&ClassStats> {
        let mut v: Vec<&ClassStats> = self.per_class.iter().filter(|c| c.count > 0).collect();
        v.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.class.cmp(&b.class)));
        v.truncate(k);
        v
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.precision).collect()
    }

    /// Plain-text summary naming classes via `names`.
    pub fn render(&self, names: &[String], worst_k: usize, pairs: usize) -> String {
        let name = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "top-1 accuracy: {:.4} ({} samples, loss {:.4})", self.top1, self.predictions.len(), self.loss);
        let _ = writeln!(s, "worst classes:");
        for c in self.worst(worst_k) {
            let _ = writeln!(s, "  {:<24} {:>6.2}%  ({}/{}, precision {:.3})", name(c.class), 100.0 * c.accuracy, c.correct, c.count, c.precision);
        }
        if !self.confusion.is_empty() {
            let _ = writeln!(s, "most confused (true -> predicted):");
            for &(t, p, n) in self.confusion.iter().take(pairs) {
                let _ = writeln!(s, "  {} -> {}: {n}", name(t), name(p));
            }
        }
        s
    }
}

/// A batch tensor of `indices`, each image resized to `resolution`.
pub fn batch_tensor(images: &[Image], resolution: usize) -> Result<Tensor> {
    let plane = 3 * resolution * resolution;
    let mut data = Vec::with_capacity(images.len() * plane);
    for img in images {
        if img.height() == resolution && img.width() == resolution {
            data.extend_from_slice(img.data());
        } else {
            data.extend_from_slice(resize(img, resolution)?.data());
        }
    }
    Tensor::from_vec(Shape::new(images.len(), 3, resolution, resolution), data)
}

/// Infer-mode pass over `ds` at `resolution`.
pub fn evaluate(g: &GraphSpec, params: &mut Params, ds: &Dataset, resolution: usize, batch: usize) -> Result<EvalReport> {
    if ds.num_classes() != g.num_classes() {
        return Err(Error::invalid(format!("dataset has {} classes, model {}", ds.num_classes(), g.num_classes())));
    }
    let labels: Vec<usize> = ds.labels().collect();
    let mut predictions = Vec::with_capacity(ds.len());
    let mut loss_sum = 0.0f64;
    for start in (0..ds.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(ds.len())).collect();
        let images: Vec<Image> = idx.iter().map(|&i| ds.image(i)).collect();
        let x = batch_tensor(&images, resolution)?;
        let (logits, _) = forward(g, params, &x, Mode::Infer)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels[start..start + idx.len()])?;
        loss_sum += loss as f64 * idx.len() as f64;
        predictions.extend((0..idx.len()).map(|n| argmax(logits.sample(n))));
    }
    let mut report = EvalReport::from_predictions(&labels, &predictions, ds.num_classes())?;
    report.loss = if ds.is_empty() { 0.0 } else { loss_sum / ds.len() as f64 };
    Ok(report)
}

/// Index of the largest value; the first on ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// 3 for a misclassified sample, 1 for a correct one.
pub fn oversample_weights(predictions: &[usize], labels: &[usize]) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    Ok(predictions.iter().zip(labels).map(|(p, l)| if p == l { 1.0 } else { 3.0 }).collect())
}

/// `2 − precision` per class, scaled to mean 1. All-zero precision gives uniform
/// weights.
pub fn class_soft_weights(precision: &[f64]) -> Result<Vec<f32>> {
    if precision.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    if let Some(p) = precision.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("precision {p} outside [0, 1]")));
    }
    if precision.iter().all(|&p| p == 0.0) {
        return Ok(vec![1.0; precision.len()]);
    }
    let raw: Vec<f64> = precision.iter().map(|p| 2.0 - p).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| (w / mean) as f32).collect())
}
