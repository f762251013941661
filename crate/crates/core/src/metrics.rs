//! Pixel-level evaluation: confusion matrices, mIoU, guide precision/recall,
//! threshold sweeps and the mP summary.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{ensure_same_dims, ImageLabels, LabelMask, ScoreMap, IGNORE};
use crate::seeder::{check_descending, seeds_at_thresholds};

/// Recall at which foreground precision enters mP.
pub const FG_TARGET_RECALL: f64 = 0.20;
/// Recall at which background precision enters mP.
pub const BG_TARGET_RECALL: f64 = 0.80;

/// Counts over `0..=C` with rows for ground truth and columns for predictions.
///
/// Predictions of the ignore label are kept in a separate per-row tally so
/// guide masks can be scored; they count as misses for their ground-truth
/// class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        let k = num_classes + 1;
        Self {
            num_classes,
            counts: vec![0; k * k],
            ignored: vec![0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn size(&self) -> usize {
        self.num_classes + 1
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size() + pred]
    }

    /// Pixels of ground-truth class `gt` that were predicted as ignore.
    pub fn ignored(&self, gt: usize) -> u64 {
        self.ignored[gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored.iter().sum::<u64>()
    }

    /// Ground-truth pixels of class `c`, including those predicted as ignore.
    pub fn actual(&self, c: usize) -> u64 {
        let k = self.size();
        self.counts[c * k..(c + 1) * k].iter().sum::<u64>() + self.ignored[c]
    }

    /// Pixels predicted as class `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.size()).map(|g| self.get(g, c)).sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMask, pred: &LabelMask, allow_pred_ignore: bool) -> Result<()> {
        ensure_same_dims(gt, pred)?;
        gt.validate(self.num_classes)?;
        pred.validate(self.num_classes)?;
        let k = self.size();
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                if !allow_pred_ignore {
                    return Err(Error::Usage(
                        "predictions may not contain ignore pixels".into(),
                    ));
                }
                self.ignored[g as usize] += 1;
            } else {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Usage("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.ignored.iter_mut().zip(&other.ignored) {
            *a += b;
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        self.merge(rhs).expect("matching class counts");
    }
}

/// Confusion of a prediction against ground truth. Ground-truth ignore
/// pixels are skipped; predictions must not contain ignore.
pub fn confusion(gt: &LabelMask, pred: &LabelMask, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(gt, pred, false)?;
    Ok(cm)
}

/// Like [`confusion`], but accepts ignore pixels in `guide`.
pub fn confusion_with_ignore(
    gt: &LabelMask,
    guide: &LabelMask,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(gt, guide, true)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// IoU for background (index 0) and each class; `None` when the class
    /// never appears in ground truth or prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined entries.
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = (0..cm.size())
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_ = cm.actual(c) - tp;
            let fp = cm.predicted(c) - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined(
            "no class appears in ground truth or prediction".into(),
        ));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Foreground/background precision and recall of a guide mask. Absent
/// values mean the denominator was zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GuideQuality {
    pub fg_precision: Option<f64>,
    pub fg_recall: Option<f64>,
    pub bg_precision: Option<f64>,
    pub bg_recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Guide quality from accumulated counts. Ignore predictions are excluded
/// from precision denominators and count as misses in recall. Foreground
/// scores are averaged over classes present in ground truth.
pub fn quality_from_confusion(cm: &ConfusionMatrix) -> GuideQuality {
    let present: Vec<usize> = (1..cm.size()).filter(|&c| cm.actual(c) > 0).collect();
    GuideQuality {
        fg_precision: mean(
            present
                .iter()
                .filter_map(|&c| ratio(cm.get(c, c), cm.predicted(c))),
        ),
        fg_recall: mean(present.iter().filter_map(|&c| ratio(cm.get(c, c), cm.actual(c)))),
        bg_precision: ratio(cm.get(0, 0), cm.predicted(0)),
        bg_recall: ratio(cm.get(0, 0), cm.actual(0)),
    }
}

pub fn guide_quality(gt: &LabelMask, guide: &LabelMask, num_classes: usize) -> Result<GuideQuality> {
    Ok(quality_from_confusion(&confusion_with_ignore(
        gt,
        guide,
        num_classes,
    )?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Class(u8),
    Background,
    ForegroundMean,
}

impl std::fmt::Display for CurveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveKind::Class(c) => write!(f, "{c}"),
            CurveKind::Background => f.write_str("background"),
            CurveKind::ForegroundMean => f.write_str("foreground_mean"),
        }
    }
}

/// Precision/recall samples in threshold order (tau strictly descending).
/// Thresholds where precision is undefined are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub kind: CurveKind,
    pub points: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrSweep {
    pub taus: Vec<f32>,
    /// Curves of the classes that occur in the ground truth.
    pub classes: Vec<PrCurve>,
    pub foreground: PrCurve,
    pub background: PrCurve,
}

impl PrSweep {
    pub fn mp(&self) -> Result<f64> {
        mp(&self.foreground, &self.background)
    }

    /// All curves as `tau,precision,recall,class` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,precision,recall,class\n");
        for curve in self
            .classes
            .iter()
            .chain([&self.foreground, &self.background])
        {
            for p in &curve.points {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    p.tau, p.precision, p.recall, curve.kind
                ));
            }
        }
        out
    }
}

/// Dataset-level counts for a threshold sweep. Images are added one at a time
/// and counts are micro-aggregated per class.
#[derive(Clone, Debug)]
pub struct PrAccumulator {
    num_classes: usize,
    taus: Vec<f32>,
    per_tau: Vec<ConfusionMatrix>,
    images: usize,
}

impl PrAccumulator {
    pub fn new(num_classes: usize, taus: &[f32]) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Usage("threshold sweep needs at least one tau".into()));
        }
        check_descending(taus)?;
        Ok(Self {
            num_classes,
            taus: taus.to_vec(),
            per_tau: taus.iter().map(|_| ConfusionMatrix::new(num_classes)).collect(),
            images: 0,
        })
    }

    /// Add one image. Seeds are extracted over all channels (no restriction
    /// to image labels).
    pub fn add(&mut self, scores: &ScoreMap, labels: &ImageLabels, gt: &LabelMask) -> Result<()> {
        if scores.channels() != self.num_classes {
            return Err(Error::Usage(format!(
                "score map has {} channels, expected {}",
                scores.channels(),
                self.num_classes
            )));
        }
        let masks = seeds_at_thresholds(scores, labels, &self.taus, false)?;
        for (cm, mask) in self.per_tau.iter_mut().zip(&masks) {
            cm.accumulate(gt, mask, false)?;
        }
        self.images += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<PrSweep> {
        if self.images == 0 {
            return Err(Error::Usage("threshold sweep over an empty dataset".into()));
        }
        let present: Vec<usize> = (1..=self.num_classes)
            .filter(|&c| self.per_tau[0].actual(c) > 0)
            .collect();
        let point = |i: usize, c: usize| -> Option<PrPoint> {
            let cm = &self.per_tau[i];
            Some(PrPoint {
                tau: self.taus[i] as f64,
                precision: ratio(cm.get(c, c), cm.predicted(c))?,
                recall: ratio(cm.get(c, c), cm.actual(c))?,
            })
        };
        let curve = |kind: CurveKind, c: usize| PrCurve {
            kind,
            points: (0..self.taus.len()).filter_map(|i| point(i, c)).collect(),
        };
        let classes: Vec<PrCurve> = present
            .iter()
            .map(|&c| curve(CurveKind::Class(c as u8), c))
            .collect();
        let foreground = PrCurve {
            kind: CurveKind::ForegroundMean,
            points: (0..self.taus.len())
                .filter_map(|i| {
                    let cm = &self.per_tau[i];
                    let precision = mean(
                        present
                            .iter()
                            .filter_map(|&c| ratio(cm.get(c, c), cm.predicted(c))),
                    )?;
                    let recall = mean(
                        present
                            .iter()
                            .filter_map(|&c| ratio(cm.get(c, c), cm.actual(c))),
                    )?;
                    Some(PrPoint {
                        tau: self.taus[i] as f64,
                        precision,
                        recall,
                    })
                })
                .collect(),
        };
        Ok(PrSweep {
            taus: self.taus.clone(),
            classes,
            foreground,
            background: curve(CurveKind::Background, 0),
        })
    }
}

/// Threshold sweep over a dataset of (scores, labels, ground truth).
pub fn pr_sweep<'a>(
    dataset: impl IntoIterator<Item = (&'a ScoreMap, &'a ImageLabels, &'a LabelMask)>,
    taus: &[f32],
    num_classes: usize,
) -> Result<PrSweep> {
    let mut acc = PrAccumulator::new(num_classes, taus)?;
    for (scores, labels, gt) in dataset {
        acc.add(scores, labels, gt)?;
    }
    acc.finish()
}

/// `steps + 1` evenly spaced thresholds from 1 down to 0.
pub fn default_taus(steps: usize) -> Vec<f32> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|k| ((steps - k) as f64 / steps as f64) as f32)
        .collect()
}

/// Precision at `target` recall, linearly interpolated between the two
/// samples that bracket it and clamped to the end samples outside the
/// sampled recall range.
pub fn precision_at_recall(curve: &PrCurve, target: f64) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::Undefined(format!(
            "{} curve has no defined points",
            curve.kind
        )));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Usage(format!("target recall {target} outside [0, 1]")));
    }
    let mut pts: Vec<&PrPoint> = curve.points.iter().collect();
    pts.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if target <= first.recall {
        return Ok(first.precision);
    }
    if target >= last.recall {
        // equal to the maximum: take the first sample at that recall
        let k = pts.partition_point(|p| p.recall < target);
        return Ok(pts[k.min(pts.len() - 1)].precision);
    }
    let k = pts.partition_point(|p| p.recall < target);
    let (hi, lo) = (pts[k], pts[k - 1]);
    if hi.recall == target {
        return Ok(hi.precision);
    }
    let t = (target - lo.recall) / (hi.recall - lo.recall);
    Ok(lo.precision + t * (hi.precision - lo.precision))
}

/// Mean of foreground precision at 20% recall and background precision at
/// 80% recall.
pub fn mp(fg_mean_curve: &PrCurve, bg_curve: &PrCurve) -> Result<f64> {
    Ok(0.5
        * (precision_at_recall(fg_mean_curve, FG_TARGET_RECALL)?
            + precision_at_recall(bg_curve, BG_TARGET_RECALL)?))
}
