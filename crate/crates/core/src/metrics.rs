//! Localization and classification metrics: IoU, class-aware IoU, AUC,
//! NMI, multi-label precision/recall, mAP and the cluster → category map.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};
use crate::numerics::{BinaryMask, SimilarityMap};
use crate::world::GridBox;

/// Category id given to clusters that own no samples.
pub const UNKNOWN_CATEGORY: usize = usize::MAX;

/// Relative binarization ratio for predicted maps.
pub const BINARIZE_RATIO: f64 = 0.5;

/// Cells above `ratio · max(map)`; empty when the maximum is not positive.
pub fn binarize_prediction_with(map: &SimilarityMap, ratio: f64) -> BinaryMask {
    let max = map.max();
    if !(max > 0.0) {
        return BinaryMask {
            height: map.height,
            width: map.width,
            data: vec![false; map.data.len()],
        };
    }
    BinaryMask::above(map, ratio * max)
}

pub fn binarize_prediction(map: &SimilarityMap) -> BinaryMask {
    binarize_prediction_with(map, BINARIZE_RATIO)
}

/// Mask of the union of `boxes` on an `height × width` grid.
pub fn boxes_mask(boxes: &[GridBox], height: usize, width: usize) -> BinaryMask {
    let mut data = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            data[y * width + x] = boxes.iter().any(|b| b.contains(y, x));
        }
    }
    BinaryMask { height, width, data }
}

/// `|a ∩ b| / |a ∪ b|`, with `0/0 = 1`.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(IerError::domain("IoU of masks with different shapes"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU between a predicted mask and the ground-truth boxes of one class.
pub fn iou_boxes(pred: &BinaryMask, boxes: &[GridBox]) -> Result<f64> {
    iou(pred, &boxes_mask(boxes, pred.height, pred.width))
}

/// Mean IoU over present classes.
pub fn ciou(per_class_iou: &[f64], presence: &[bool]) -> Result<f64> {
    if per_class_iou.len() != presence.len() {
        return Err(IerError::domain("IoU and presence vectors differ in length"));
    }
    let present: Vec<f64> = per_class_iou
        .iter()
        .zip(presence)
        .filter(|(_, &p)| p)
        .map(|(&v, _)| v)
        .collect();
    if present.is_empty() {
        return Err(IerError::domain("class-aware IoU needs at least one present class"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub const AUC_STEPS: usize = 20;

/// Trapezoidal area under the success-rate curve over τ ∈ {0, 0.05, …, 1}.
pub fn auc(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(IerError::domain("AUC of an empty score list"));
    }
    let hits = |i: usize| {
        let tau = i as f64 / AUC_STEPS as f64;
        scores.iter().filter(|&&s| s >= tau - 1e-12).count()
    };
    // Trapezoid sum in integer counts, divided once so the result stays in [0, 1].
    let total: usize = (0..AUC_STEPS).map(|i| hits(i) + hits(i + 1)).sum();
    Ok(total as f64 / (2 * AUC_STEPS * scores.len()) as f64)
}

/// Fraction of scores at or above `threshold`.
pub fn success_rate(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with geometric-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(IerError::domain("partitions have different lengths"));
    }
    if pred.is_empty() {
        return Err(IerError::domain("NMI of empty partitions"));
    }
    let n = pred.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pu: HashMap<usize, usize> = HashMap::new();
    let mut pv: HashMap<usize, usize> = HashMap::new();
    for (&u, &v) in pred.iter().zip(truth) {
        *joint.entry((u, v)).or_default() += 1;
        *pu.entry(u).or_default() += 1;
        *pv.entry(v).or_default() += 1;
    }
    let hu = entropy(pu.values().copied(), n);
    let hv = entropy(pv.values().copied(), n);
    if hu == 0.0 || hv == 0.0 {
        return Ok(if hu == 0.0 && hv == 0.0 { 1.0 } else { 0.0 });
    }
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .iter()
        .map(|&(u, v)| {
            let c = joint[&(u, v)] as f64;
            (c / n) * (c * n / (pu[&u] as f64 * pv[&v] as f64)).ln()
        })
        .sum();
    Ok((mi / (hu * hv).sqrt()).clamp(0.0, 1.0))
}

/// Precision and recall of `{k : score_k > ζ}` against `truth`. An empty
/// prediction has precision 0 unless the truth is empty too.
pub fn multilabel_pr(scores: &[f64], truth: &[bool], zeta: f64) -> Result<(f64, f64)> {
    if scores.len() != truth.len() {
        return Err(IerError::domain("scores and truth differ in length"));
    }
    let (mut tp, mut predicted, mut actual) = (0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        let p = s > zeta;
        tp += (p && t) as usize;
        predicted += p as usize;
        actual += t as usize;
    }
    let precision = match (predicted, actual) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => tp as f64 / predicted as f64,
    };
    let recall = if actual == 0 { 1.0 } else { tp as f64 / actual as f64 };
    Ok((precision, recall))
}

/// All-points average precision of one class.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut tp, mut ap) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

/// Mean AP over classes with at least one positive; classes without
/// positives are skipped with a warning.
pub fn map_metric(scores: &[Vec<f64>], truths: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != truths.len() || scores.is_empty() {
        return Err(IerError::domain("mAP needs equal, nonempty score and truth lists"));
    }
    let k = scores[0].len();
    if scores.iter().any(|s| s.len() != k) || truths.iter().any(|t| t.len() != k)
    {
        return Err(IerError::domain("ragged score or truth vectors"));
    }
    let mut aps = Vec::new();
    let mut skipped = 0;
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let tcol: Vec<bool> = truths.iter().map(|t| t[c]).collect();
        match average_precision(&col, &tcol) {
            Some(ap) => aps.push(ap),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} classes without positives skipped in mAP");
    }
    if aps.is_empty() {
        return Err(IerError::domain("no class has a positive sample"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Majority true category of each cluster; ties go to the smallest id and
/// empty clusters map to [`UNKNOWN_CATEGORY`].
pub fn cluster_to_category(assignments: &[usize], labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if assignments.len() != labels.len() {
        return Err(IerError::domain("assignments and labels differ in length"));
    }
    let mut votes: Vec<HashMap<usize, usize>> = vec![HashMap::new(); k];
    for (&a, &l) in assignments.iter().zip(labels) {
        if a >= k {
            return Err(IerError::domain(format!("cluster {a} out of range for K = {k}")));
        }
        *votes[a].entry(l).or_default() += 1;
    }
    Ok(votes
        .iter()
        .map(|v| {
            v.iter()
                .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
                .map_or(UNKNOWN_CATEGORY, |(&c, _)| c)
        })
        .collect())
}

/// Headline metrics; every field is in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_05: f64,
    pub auc: f64,
    pub ciou_03: f64,
    pub nmi: f64,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("iou_05", self.iou_05),
            ("auc", self.auc),
            ("ciou_03", self.ciou_03),
            ("nmi", self.nmi),
            ("precision", self.precision),
            ("recall", self.recall),
            ("map", self.map),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if !(0.0..=1.0).contains(&v) {
                return Err(IerError::Numeric(format!("metric {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
