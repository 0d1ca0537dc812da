//! Mask IoU and AP^r.
//!
//! Predictions of one class are ranked by score across the whole dataset.
//! Each one, in turn, is matched to the still-unmatched ground-truth
//! instance of the same class in its image with the highest mask IoU; it is
//! a true positive when that IoU reaches the threshold. AP is the area
//! under the monotone precision envelope, sampled at every recall step.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The thresholds averaged by AP^r_vol: 0.1, 0.2, ..., 0.9.
pub fn volume_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// `|a and b| / |a or b|`. Errors when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mask length", a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::EmptyMasks);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub class: usize,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub class: usize,
    pub mask: Vec<bool>,
    pub score: f64,
}

/// Ground-truth instances per image. Masks of one image are non-empty,
/// disjoint and of equal length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthInstances {
    images: Vec<Vec<GtInstance>>,
}

impl GroundTruthInstances {
    pub fn new(images: Vec<Vec<GtInstance>>) -> Result<Self> {
        for (im, inst) in images.iter().enumerate() {
            let Some(first) = inst.first() else { continue };
            let n = first.mask.len();
            let mut taken = vec![false; n];
            for (k, g) in inst.iter().enumerate() {
                if g.mask.len() != n {
                    return Err(Error::shape("ground-truth mask length", n, g.mask.len()));
                }
                if !g.mask.iter().any(|&v| v) {
                    return Err(Error::Invalid(format!(
                        "image {im}: ground-truth instance {k} has an empty mask"
                    )));
                }
                for (t, &v) in taken.iter_mut().zip(&g.mask) {
                    if v && *t {
                        return Err(Error::Invalid(format!(
                            "image {im}: ground-truth instance {k} overlaps an earlier one"
                        )));
                    }
                    *t |= v;
                }
            }
        }
        Ok(GroundTruthInstances { images })
    }

    pub fn images(&self) -> &[Vec<GtInstance>] {
        &self.images
    }

    /// Classes with at least one instance, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.images.iter().flatten().map(|g| g.class).collect();
        set.into_iter().collect()
    }
}

/// Predicted instances per image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    images: Vec<Vec<PredInstance>>,
}

impl PredictionSet {
    pub fn new(images: Vec<Vec<PredInstance>>) -> Result<Self> {
        for (im, inst) in images.iter().enumerate() {
            if let Some(k) = inst
                .iter()
                .position(|p| !(p.score.is_finite() && (0.0..=1.0).contains(&p.score)))
            {
                return Err(Error::Invalid(format!(
                    "image {im}: prediction {k} score {} outside [0, 1]",
                    inst[k].score
                )));
            }
        }
        Ok(PredictionSet { images })
    }

    /// `n` images without predictions.
    pub fn empty(n: usize) -> Self {
        PredictionSet {
            images: vec![Vec::new(); n],
        }
    }

    pub fn images(&self) -> &[Vec<PredInstance>] {
        &self.images
    }
}

/// Match outcome of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub image: usize,
    pub prediction: usize,
    pub score: f64,
    /// Index of the matched ground truth in its image.
    pub matched: Option<usize>,
}

/// Greedy matching of the predictions of `class`, in ranking order.
/// Equal scores keep image order, then prediction order.
pub fn match_class(
    preds: &PredictionSet,
    gts: &GroundTruthInstances,
    iou_threshold: f64,
    class: usize,
) -> Result<Vec<Ranked>> {
    check_pair(preds, gts)?;
    let mut ranked: Vec<Ranked> = preds
        .images
        .iter()
        .enumerate()
        .flat_map(|(image, ps)| {
            ps.iter()
                .enumerate()
                .filter(|(_, p)| p.class == class)
                .map(move |(prediction, p)| Ranked {
                    image,
                    prediction,
                    score: p.score,
                    matched: None,
                })
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut used: Vec<Vec<bool>> = gts.images.iter().map(|g| vec![false; g.len()]).collect();
    for r in &mut ranked {
        let pred = &preds.images[r.image][r.prediction];
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts.images[r.image].iter().enumerate() {
            if g.class != class || used[r.image][k] {
                continue;
            }
            let iou = mask_iou(&pred.mask, &g.mask)?;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, iou)) = best {
            if iou >= iou_threshold {
                used[r.image][k] = true;
                r.matched = Some(k);
            }
        }
    }
    Ok(ranked)
}

/// Area under the precision envelope for a ranked list of hits.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP^r of one class, `None` when the class has no ground truth.
pub fn apr_at(
    preds: &PredictionSet,
    gts: &GroundTruthInstances,
    iou_threshold: f64,
    class: usize,
) -> Result<Option<f64>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Invalid(format!(
            "IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let num_gt = gts.images.iter().flatten().filter(|g| g.class == class).count();
    if num_gt == 0 {
        return Ok(None);
    }
    let ranked = match_class(preds, gts, iou_threshold, class)?;
    let hits: Vec<bool> = ranked.iter().map(|r| r.matched.is_some()).collect();
    Ok(Some(average_precision(&hits, num_gt)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// `(class, AP)` for every class with ground truth.
    pub per_class: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprSummary {
    pub classes: Vec<usize>,
    pub rows: Vec<ThresholdRow>,
    /// Mean of the class-mean AP^r over thresholds 0.1 to 0.9.
    pub ap_vol: f64,
}

/// Class-mean AP^r at each threshold, plus AP^r_vol.
pub fn apr_summary(
    preds: &PredictionSet,
    gts: &GroundTruthInstances,
    thresholds: &[f64],
) -> Result<AprSummary> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("at least one IoU threshold is required".into()));
    }
    let classes = gts.classes();
    if classes.is_empty() {
        return Err(Error::Invalid("ground truth contains no instances".into()));
    }
    let row = |t: f64| -> Result<ThresholdRow> {
        let mut per_class = Vec::with_capacity(classes.len());
        for &c in &classes {
            let ap = apr_at(preds, gts, t, c)?.expect("class has ground truth");
            per_class.push((c, ap));
        }
        let mean = per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64;
        Ok(ThresholdRow {
            threshold: t,
            per_class,
            mean,
        })
    };
    let rows = thresholds.iter().map(|&t| row(t)).collect::<Result<Vec<_>>>()?;
    let vol = volume_thresholds();
    let ap_vol = vol
        .iter()
        .map(|&t| row(t).map(|r| r.mean))
        .sum::<Result<f64>>()?
        / vol.len() as f64;
    Ok(AprSummary {
        classes,
        rows,
        ap_vol,
    })
}

impl AprSummary {
    /// Aligned plain-text table, one row per threshold.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>9}", "threshold");
        for c in &self.classes {
            let _ = write!(s, " {:>9}", format!("class {c}"));
        }
        let _ = writeln!(s, " {:>9}", "mean");
        for r in &self.rows {
            let _ = write!(s, "{:>9.2}", r.threshold);
            for (_, ap) in &r.per_class {
                let _ = write!(s, " {ap:>9.4}");
            }
            let _ = writeln!(s, " {:>9.4}", r.mean);
        }
        let _ = writeln!(s, "AP^r_vol {:.4}", self.ap_vol);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn check_pair(preds: &PredictionSet, gts: &GroundTruthInstances) -> Result<()> {
    if preds.images.len() != gts.images.len() {
        return Err(Error::shape(
            "prediction images",
            gts.images.len(),
            preds.images.len(),
        ));
    }
    for (im, (p, g)) in preds.images.iter().zip(&gts.images).enumerate() {
        if let Some(n) = g.first().map(|g| g.mask.len()) {
            if let Some(bad) = p.iter().find(|p| p.mask.len() != n) {
                return Err(Error::Invalid(format!(
                    "image {im}: prediction mask has {} pixels, ground truth has {n}",
                    bad.mask.len()
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_counts() {
        let a = [true, true, true, true, false, false];
        let b = [false, false, true, true, true, true];
        assert!((mask_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(matches!(mask_iou(&[false], &[false]), Err(Error::EmptyMasks)));
    }

    #[test]
    fn envelope_example() {
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true, true], 2), 1.0);
    }
}
