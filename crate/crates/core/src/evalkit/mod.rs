//! Average precision, frequency buckets, counting error and sweeps.

mod experiment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataengine::{Annotation, Bucket};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub use experiment::{
    detector_outputs, evaluate_model, evaluate_outputs, run_sweep, write_detections, EvalOutcome,
    EvalSettings, ExperimentConfig, SweepAxis, SweepReport, SweepRow,
};

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Per image and category.
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: coco_thresholds(),
            max_dets: 100,
        }
    }
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// One scored box; also the row format of the detections file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    /// AP of every category with ground truth.
    pub per_category: BTreeMap<u32, f64>,
}

impl EvalResult {
    /// Fills the bucket columns.
    pub fn with_buckets(mut self, buckets: &BTreeMap<u32, Bucket>) -> Self {
        let b = bucketed_ap(&self, buckets);
        self.ap_r = b.rare;
        self.ap_c = b.common;
        self.ap_f = b.frequent;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BucketAp {
    pub rare: Option<f64>,
    pub common: Option<f64>,
    pub frequent: Option<f64>,
}

/// Mean per-category AP inside each bucket; a bucket without evaluated categories is `None`.
pub fn bucketed_ap(result: &EvalResult, buckets: &BTreeMap<u32, Bucket>) -> BucketAp {
    let mean_of = |which: Bucket| {
        let vals: Vec<f64> = result
            .per_category
            .iter()
            .filter(|(c, _)| buckets.get(c) == Some(&which))
            .map(|(_, ap)| *ap)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    BucketAp {
        rare: mean_of(Bucket::Rare),
        common: mean_of(Bucket::Common),
        frequent: mean_of(Bucket::Frequent),
    }
}

/// Detections of one category, best first, capped per image.
fn ranked(dets: &[DetectionRecord], category: u32, max_dets: usize) -> Vec<DetectionRecord> {
    let mut per_image: BTreeMap<u64, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.category_id == category) {
        per_image.entry(d.image_id).or_default().push(*d);
    }
    let mut out = Vec::new();
    for (_, mut v) in per_image {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(max_dets);
        out.extend(v);
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
    });
    out
}

/// True-positive flags for score-ordered detections; each detection takes the
/// unmatched ground truth of highest IoU at or above `threshold`.
fn match_flags(
    dets: &[DetectionRecord],
    gts: &BTreeMap<u64, Vec<BBox>>,
    threshold: f64,
) -> Vec<bool> {
    let mut used: BTreeMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    dets.iter()
        .map(|d| {
            let Some(boxes) = gts.get(&d.image_id) else {
                return false;
            };
            let taken = used.get_mut(&d.image_id).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in boxes.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, b);
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated precision over the recall axis.
fn interpolated_ap(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            total += precision[i];
        }
    }
    total / RECALL_POINTS as f64
}

/// Mean AP over IoU thresholds and over categories that have ground truth.
pub fn compute_ap(dets: &[DetectionRecord], gts: &[Annotation], cfg: &EvalConfig) -> EvalResult {
    let mut by_cat: BTreeMap<u32, BTreeMap<u64, Vec<BBox>>> = BTreeMap::new();
    for g in gts {
        by_cat
            .entry(g.category_id)
            .or_default()
            .entry(g.image_id)
            .or_default()
            .push(g.bbox);
    }
    let mut per_category = BTreeMap::new();
    for (cat, images) in &by_cat {
        let num_gt = images.values().map(Vec::len).sum();
        let ranked = ranked(dets, *cat, cfg.max_dets);
        let sum: f64 = cfg
            .iou_thresholds
            .iter()
            .map(|&t| interpolated_ap(&match_flags(&ranked, images, t), num_gt))
            .sum();
        per_category.insert(*cat, sum / cfg.iou_thresholds.len().max(1) as f64);
    }
    let ap = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    EvalResult {
        ap,
        per_category,
        ..EvalResult::default()
    }
}

pub fn counting_mae(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted counts for {} images",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let total: usize = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| p.abs_diff(*t))
        .sum();
    Ok(total as f64 / predicted.len() as f64)
}

/// Detections at or above `min_score` that miss every ground truth of their
/// own category but cover (IoU ≥ `min_iou`) one of the confusable partner.
pub fn confusable_false_positives(
    dets: &[DetectionRecord],
    gts: &[Annotation],
    pairs: &[(u32, u32)],
    min_score: f64,
    min_iou: f64,
) -> usize {
    let partner = |c: u32| {
        pairs.iter().find_map(|&(a, b)| {
            if a == c {
                Some(b)
            } else if b == c {
                Some(a)
            } else {
                None
            }
        })
    };
    dets.iter()
        .filter(|d| d.score >= min_score)
        .filter(|d| {
            let Some(p) = partner(d.category_id) else {
                return false;
            };
            let same = gts.iter().any(|g| {
                g.image_id == d.image_id
                    && g.category_id == d.category_id
                    && iou(&g.bbox, &d.bbox) >= min_iou
            });
            let other = gts.iter().any(|g| {
                g.image_id == d.image_id && g.category_id == p && iou(&g.bbox, &d.bbox) >= min_iou
            });
            !same && other
        })
        .count()
}
