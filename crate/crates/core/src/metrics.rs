//! Instance-segmentation metrics.
//!
//! Conventions:
//! - IoU, dice and accuracy are pixel-level on the binarized foreground
//!   (any positive label is foreground).
//! - Precision and recall are instance-level, counting a ground-truth /
//!   predicted instance pair as a true positive when their IoU exceeds 0.5.
//! - PQ = (sum of matched IoUs) / (TP + FP/2 + FN/2).
//! - Two empty masks score 1.0 everywhere; a prediction on an empty ground
//!   truth scores 0 for IoU and dice.
//! - The `std` column is the population standard deviation (divisor n).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, LabelMask};

pub const MATCH_IOU_THRESHOLD: f64 = 0.5;
pub const CSV_HEADER: &str = "image,iou,dice,precision,recall,accuracy,pq";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

/// One-to-one pairing of ground-truth and predicted instances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by ground-truth label.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_gt.len()
    }
}

fn check_shapes(gt: &LabelMask, pred: &LabelMask) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            gt: gt.shape(),
            pred: pred.shape(),
        });
    }
    Ok(())
}

fn areas(mask: &LabelMask) -> HashMap<u32, u64> {
    let mut out = HashMap::new();
    for &l in mask.labels.iter().filter(|&&l| l > 0) {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}

fn sorted_keys(map: &HashMap<u32, u64>) -> Vec<u32> {
    let mut keys: Vec<u32> = map.keys().copied().collect();
    keys.sort_unstable();
    keys
}

/// Pair every ground-truth and predicted instance whose IoU exceeds 0.5.
///
/// Two predictions cannot both cover more than half of the union with the
/// same ground-truth instance (their intersections would overlap), so
/// thresholding alone yields a valid one-to-one matching.
pub fn match_instances(gt: &LabelMask, pred: &LabelMask) -> Result<MatchResult> {
    check_shapes(gt, pred)?;
    let gt_area = areas(gt);
    let pred_area = areas(pred);
    let mut overlap: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g > 0 && p > 0 {
            *overlap.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<MatchedPair> = overlap
        .into_iter()
        .filter_map(|((g, p), inter)| {
            let union = gt_area[&g] + pred_area[&p] - inter;
            let iou = inter as f64 / union as f64;
            (iou > MATCH_IOU_THRESHOLD).then_some(MatchedPair { gt: g, pred: p, iou })
        })
        .collect();
    pairs.sort_unstable_by_key(|m| (m.gt, m.pred));
    let unmatched_gt = sorted_keys(&gt_area)
        .into_iter()
        .filter(|g| !pairs.iter().any(|m| m.gt == *g))
        .collect();
    let unmatched_pred = sorted_keys(&pred_area)
        .into_iter()
        .filter(|p| !pairs.iter().any(|m| m.pred == *p))
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_gt,
        unmatched_pred,
    })
}

/// Segmentation quality times recognition quality. 1.0 when there is nothing
/// to find and nothing was predicted.
pub fn panoptic_quality(m: &MatchResult) -> f64 {
    let tp = m.true_positives() as f64;
    let fp = m.false_positives() as f64;
    let fn_ = m.false_negatives() as f64;
    if tp + fp + fn_ == 0.0 {
        return 1.0;
    }
    let iou_sum: f64 = m.pairs.iter().map(|p| p.iou).sum();
    iou_sum / (tp + 0.5 * fp + 0.5 * fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

fn ratio_or(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn pairwise_from(gt: &LabelMask, pred: &LabelMask, matches: &MatchResult) -> PairwiseMetrics {
    let (mut inter, mut gt_fg, mut pred_fg, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        let (g, p) = (g > 0, p > 0);
        inter += usize::from(g && p);
        gt_fg += usize::from(g);
        pred_fg += usize::from(p);
        agree += usize::from(g == p);
    }
    let union = gt_fg + pred_fg - inter;
    let tp = matches.true_positives();
    let gt_instances = tp + matches.false_negatives();
    let pred_instances = tp + matches.false_positives();
    PairwiseMetrics {
        iou: ratio_or(inter, union, 1.0),
        dice: ratio_or(2 * inter, gt_fg + pred_fg, 1.0),
        precision: ratio_or(tp, pred_instances, if gt_instances == 0 { 1.0 } else { 0.0 }),
        recall: ratio_or(tp, gt_instances, if pred_instances == 0 { 1.0 } else { 0.0 }),
        accuracy: ratio_or(agree, gt.labels.len(), 1.0),
    }
}

pub fn pairwise_metrics(gt: &LabelMask, pred: &LabelMask) -> Result<PairwiseMetrics> {
    let matches = match_instances(gt, pred)?;
    Ok(pairwise_from(gt, pred, &matches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub pq: f64,
}

impl ImageMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.iou, self.dice, self.precision, self.recall, self.accuracy, self.pq]
    }
}

/// All six metrics for one image.
pub fn image_metrics(image: impl Into<String>, gt: &LabelMask, pred: &LabelMask) -> Result<ImageMetrics> {
    let matches = match_instances(gt, pred)?;
    let p = pairwise_from(gt, pred, &matches);
    Ok(ImageMetrics {
        image: image.into(),
        iou: p.iou,
        dice: p.dice,
        precision: p.precision,
        recall: p.recall,
        accuracy: p.accuracy,
        pq: panoptic_quality(&matches),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iou: MeanStd,
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub accuracy: MeanStd,
    pub pq: MeanStd,
}

impl Aggregate {
    pub fn values(&self) -> [MeanStd; 6] {
        [self.iou, self.dice, self.precision, self.recall, self.accuracy, self.pq]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Mean and population standard deviation of every metric, summed in input
/// order.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero images".into()));
    }
    let col = |k: usize| mean_std(per_image.iter().map(move |m| m.values()[k]));
    let aggregate = Aggregate {
        iou: col(0),
        dice: col(1),
        precision: col(2),
        recall: col(3),
        accuracy: col(4),
        pq: col(5),
    };
    Ok(MetricsReport {
        per_image,
        aggregate,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    /// CSV with one row per image followed by `MEAN` and `STD` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |name: &str, values: [f64; 6]| {
            out.push_str(&csv_field(name));
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for m in &self.per_image {
            row(&m.image, m.values());
        }
        let agg = self.aggregate.values();
        row("MEAN", agg.map(|a| a.mean));
        row("STD", agg.map(|a| a.std));
        out
    }
}

/// Score every ground-truth mask in `gt_dir` against the prediction for the
/// same image in `pred_dir`. A ground-truth `name_masks.png` pairs with a
/// prediction `name.png` (or `name_masks.png`). Images are reported in
/// file-name order.
pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path) -> Result<MetricsReport> {
    let gts = raster::list_rasters(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no ground-truth masks in {}",
            gt_dir.display()
        )));
    }
    let preds = raster::list_rasters(pred_dir)?;
    let by_stem: HashMap<String, &Path> = preds
        .iter()
        .map(|p| (raster::file_stem(p), p.as_path()))
        .collect();
    let per_image = gts
        .par_iter()
        .map(|gt_path| {
            let name = raster::mask_image_name(gt_path);
            let pred_path = by_stem
                .get(&name)
                .or_else(|| by_stem.get(&raster::file_stem(gt_path)))
                .ok_or_else(|| Error::MissingPrediction(name.clone()))?;
            let gt = raster::read_mask(gt_path)?;
            let pred = raster::read_mask(pred_path)?;
            image_metrics(name, &gt, &pred)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_image)
}
