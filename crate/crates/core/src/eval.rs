//! Confusion-matrix metrics and stage latency measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloud::SemanticClass;
use crate::error::{Error, Result};

/// `counts[truth][pred]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Validation(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add_pair(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.classes);
        for t in 0..self.classes {
            for p in 0..self.classes {
                out.counts[p * self.classes + t] = self.get(t, p);
            }
        }
        out
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Validation("cannot merge matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Zeroes every row whose ground-truth class is not in `include`, so
    /// points of excluded classes drop out of all derived metrics.
    pub fn restrict_truth(&self, include: &[usize]) -> Self {
        let mut out = self.clone();
        for t in 0..self.classes {
            if !include.contains(&t) {
                for p in 0..self.classes {
                    out.counts[t * self.classes + p] = 0;
                }
            }
        }
        out
    }
}

pub fn confusion(pred: &[u8], truth: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= classes || t as usize >= classes {
            return Err(Error::Validation(format!("label out of range for {classes} classes")));
        }
        m.add_pair(t as usize, p as usize);
    }
    Ok(m)
}

/// TP / (TP + FP + FN) per class; `None` when the class never occurs in
/// either truth or prediction.
pub fn iou_per_class(m: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..m.classes())
        .map(|c| {
            let tp = m.get(c, c);
            let fp = m.col_sum(c) - tp;
            let fn_ = m.row_sum(c) - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean of the given per-class IoUs over `include`, skipping absent classes.
pub fn mean_iou(ious: &[Option<f64>], include: &[usize]) -> Result<f64> {
    let present: Vec<f64> = include
        .iter()
        .filter_map(|&c| ious.get(c).copied().flatten())
        .collect();
    if present.is_empty() {
        return Err(Error::Validation("no evaluated class is present".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn miou(m: &ConfusionMatrix, include: &[usize]) -> Result<f64> {
    mean_iou(&iou_per_class(m), include)
}

/// Overall accuracy and mean per-class recall over classes present in truth.
pub fn accuracies(m: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = m.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix has no counts"));
    }
    let overall = m.trace() as f64 / total as f64;
    let recalls: Vec<f64> = (0..m.classes())
        .filter_map(|c| {
            let row = m.row_sum(c);
            (row > 0).then(|| m.get(c, c) as f64 / row as f64)
        })
        .collect();
    let per_class = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((overall, per_class))
}

/// Every reported metric for one class subset. Serialized with fixed keys:
/// `overall_accuracy`, `per_class_accuracy`, `per_class_iou` (class name →
/// IoU or null when absent), `miou`, `evaluated_classes`, `points`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_class_accuracy: f64,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub miou: f64,
    pub evaluated_classes: Vec<String>,
    pub points: u64,
}

/// Class codes of the seven named classes (everything except Unlabeled).
pub fn named_classes() -> Vec<usize> {
    (1..SemanticClass::COUNT).collect()
}

pub fn all_classes() -> Vec<usize> {
    (0..SemanticClass::COUNT).collect()
}

fn class_name(c: usize) -> String {
    SemanticClass::from_id(c as u8)
        .map(|s| s.name().to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

impl MetricsReport {
    /// Restricts to ground-truth classes in `include`, then derives metrics.
    pub fn from_matrix(m: &ConfusionMatrix, include: &[usize]) -> Result<Self> {
        let restricted = m.restrict_truth(include);
        let (overall, per_class) = accuracies(&restricted)?;
        let ious = iou_per_class(&restricted);
        let miou = mean_iou(&ious, include)?;
        let mut per_class_iou = BTreeMap::new();
        let mut evaluated = Vec::new();
        for &c in include {
            per_class_iou.insert(class_name(c), ious[c]);
            if ious[c].is_some() {
                evaluated.push(class_name(c));
            }
        }
        Ok(Self {
            overall_accuracy: overall,
            per_class_accuracy: per_class,
            per_class_iou,
            miou,
            evaluated_classes: evaluated,
            points: restricted.total(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "points evaluated   {}", self.points);
        let _ = writeln!(s, "overall accuracy   {:.4}", self.overall_accuracy);
        let _ = writeln!(s, "per-class accuracy {:.4}", self.per_class_accuracy);
        let _ = writeln!(s, "mIoU               {:.4}", self.miou);
        for (name, iou) in &self.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "  IoU {name:<13} {v:.4}");
                }
                None => {
                    let _ = writeln!(s, "  IoU {name:<13} absent");
                }
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return Self { count: 0, mean_ms: 0.0, median_ms: 0.0, p95_ms: 0.0 };
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Nearest-rank percentile.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            count: n,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: sorted[rank - 1],
        }
    }
}

/// A named step of a per-frame pipeline.
pub struct Stage<'a, F> {
    pub name: String,
    pub run: Box<dyn FnMut(&F) + 'a>,
}

impl<'a, F> Stage<'a, F> {
    pub fn new(name: impl Into<String>, run: impl FnMut(&F) + 'a) -> Self {
        Self { name: name.into(), run: Box::new(run) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyReport {
    pub stages: BTreeMap<String, LatencyStats>,
    pub end_to_end: LatencyStats,
    /// Raw per-frame samples, `[stage][frame]`, in stage order.
    pub samples_ms: Vec<(String, Vec<f64>)>,
    pub end_to_end_ms: Vec<f64>,
}

/// Runs every stage on every frame in order, timing each with a monotonic
/// clock.
pub fn measure_latency<F>(stages: &mut [Stage<'_, F>], frames: &[F]) -> Result<LatencyReport> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("measure_latency needs at least one frame"));
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(frames.len()); stages.len()];
    let mut totals = Vec::with_capacity(frames.len());
    for frame in frames {
        let start = Instant::now();
        let mut mark = start;
        for (stage, out) in stages.iter_mut().zip(samples.iter_mut()) {
            (stage.run)(frame);
            let now = Instant::now();
            out.push((now - mark).as_secs_f64() * 1e3);
            mark = now;
        }
        totals.push((mark - start).as_secs_f64() * 1e3);
    }
    let named: Vec<(String, Vec<f64>)> = stages.iter().map(|s| s.name.clone()).zip(samples).collect();
    Ok(LatencyReport {
        stages: named
            .iter()
            .map(|(n, s)| (n.clone(), LatencyStats::from_samples(s)))
            .collect(),
        end_to_end: LatencyStats::from_samples(&totals),
        samples_ms: named,
        end_to_end_ms: totals,
    })
}
