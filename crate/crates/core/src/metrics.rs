//! Segmentation scores.
//!
//! Both the foreground-only mask IoU and the foreground/background mean IoU
//! are computed for every binary prediction. Average precision ranks pixels
//! by soft score; equal scores form one group and precision is taken at group
//! boundaries only, so a constant mask scores the foreground prevalence.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

pub const DEFAULT_BETA_SQ: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        ensure_dims!(
            pred.dim() == gt.dim(),
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        );
        let mut c = ConfusionCounts::default();
        Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        });
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Foreground IoU; 1 when both masks are empty.
    pub fn mask_iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_).unwrap_or(1.0)
    }

    /// Background IoU; 1 when both masks are full.
    pub fn background_iou(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_).unwrap_or(1.0)
    }

    pub fn mean_iou(&self) -> f64 {
        (self.mask_iou() + self.background_iou()) / 2.0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp).unwrap_or(0.0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_).unwrap_or(0.0)
    }

    /// Weighted F-measure. Two empty masks agree vacuously and score 1.
    pub fn f_score(&self, beta_sq: f64) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        let den = beta_sq * p + r;
        if den == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * p * r / den
        }
    }
}

pub fn mask_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.mask_iou())
}

pub fn mean_iou_binary(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.mean_iou())
}

pub fn f_score(pred: &Array2<bool>, gt: &Array2<bool>, beta_sq: f64) -> Result<f64> {
    if !(beta_sq.is_finite() && beta_sq > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta_sq must be positive, got {beta_sq}"
        )));
    }
    Ok(ConfusionCounts::from_masks(pred, gt)?.f_score(beta_sq))
}

/// All-points average precision of a soft ranking. `None` when the ground
/// truth has no positive pixel.
pub fn average_precision(scores: &Array2<f64>, gt: &Array2<bool>) -> Result<Option<f64>> {
    ensure_dims!(
        scores.dim() == gt.dim(),
        "scores {:?} vs ground truth {:?}",
        scores.dim(),
        gt.dim()
    );
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut ranked: Vec<(f64, bool)> = scores.iter().copied().zip(gt.iter().copied()).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < ranked.len() {
        let score = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == score {
            tp += usize::from(ranked[i].1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(Some(ap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub counts: ConfusionCounts,
    pub mask_iou: f64,
    pub mean_iou: f64,
    pub f_score: f64,
    /// Absent when the ground truth is empty.
    pub ap: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(
        sample_id: impl Into<String>,
        soft: &Array2<f64>,
        pred: &Array2<bool>,
        gt: &Array2<bool>,
        beta_sq: f64,
    ) -> Result<Self> {
        let counts = ConfusionCounts::from_masks(pred, gt)?;
        Ok(SampleMetrics {
            sample_id: sample_id.into(),
            counts,
            mask_iou: counts.mask_iou(),
            mean_iou: counts.mean_iou(),
            f_score: f_score(pred, gt, beta_sq)?,
            ap: average_precision(soft, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub intersection: u64,
    pub union: u64,
    /// Absent when the class appears in neither prediction nor ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub per_class: Vec<ClassIou>,
    pub mean_iou: Option<f64>,
}

/// Per-class intersection and union, accumulated over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAccumulator {
    classes: Vec<String>,
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl SemanticAccumulator {
    pub fn new(class_set: &[String]) -> Self {
        SemanticAccumulator {
            classes: class_set.to_vec(),
            intersection: vec![0; class_set.len()],
            union: vec![0; class_set.len()],
        }
    }

    fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::InvalidInput(format!("label {label:?} not in class set")))
    }

    /// The prediction counts toward `pred_label` only, the ground truth toward
    /// `gt_label` only.
    pub fn add(
        &mut self,
        pred: &Array2<bool>,
        pred_label: &str,
        gt: &Array2<bool>,
        gt_label: &str,
    ) -> Result<()> {
        ensure_dims!(
            pred.dim() == gt.dim(),
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        );
        let p = self.class_index(pred_label)?;
        let g = self.class_index(gt_label)?;
        let n_pred = pred.iter().filter(|&&v| v).count() as u64;
        let n_gt = gt.iter().filter(|&&v| v).count() as u64;
        if p == g {
            let inter = Zip::from(pred)
                .and(gt)
                .fold(0u64, |acc, &a, &b| acc + u64::from(a && b));
            self.intersection[p] += inter;
            self.union[p] += n_pred + n_gt - inter;
        } else {
            self.union[p] += n_pred;
            self.union[g] += n_gt;
        }
        Ok(())
    }

    pub fn report(&self) -> SemanticReport {
        let per_class: Vec<ClassIou> = self
            .classes
            .iter()
            .enumerate()
            .map(|(c, class)| ClassIou {
                class: class.clone(),
                intersection: self.intersection[c],
                union: self.union[c],
                iou: ratio(self.intersection[c], self.union[c]),
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let mean_iou =
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        SemanticReport {
            per_class,
            mean_iou,
        }
    }
}

pub fn semantic_report(
    pred: &Array2<bool>,
    pred_label: &str,
    gt: &Array2<bool>,
    gt_label: &str,
    class_set: &[String],
) -> Result<SemanticReport> {
    let mut acc = SemanticAccumulator::new(class_set);
    acc.add(pred, pred_label, gt, gt_label)?;
    Ok(acc.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

/// Dataset-level scores: per-sample means, with mAP averaged over samples
/// whose ground truth is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mask_iou: f64,
    pub mean_iou: f64,
    pub f_score: f64,
    pub m_ap: Option<f64>,
    pub per_sample: Vec<SampleMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticReport>,
}

impl MetricReport {
    pub fn from_samples(
        per_sample: Vec<SampleMetrics>,
        semantic: Option<SemanticReport>,
    ) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidInput("no samples to aggregate".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        let aps: Vec<f64> = per_sample.iter().filter_map(|s| s.ap).collect();
        Ok(MetricReport {
            mask_iou: mean(|s| s.mask_iou),
            mean_iou: mean(|s| s.mean_iou),
            f_score: mean(|s| s.f_score),
            m_ap: Summary::of(&aps).map(|s| s.mean),
            per_sample,
            semantic,
        })
    }
}
