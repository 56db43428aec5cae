//! Instance-level evaluation: IoU, one-to-one matching, AP over IoU
//! thresholds and the Aggregated Jaccard Index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// `|a ∩ b| / |a ∪ b|`; 0 for an empty union.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}

fn iou_matrix(pred: &[Mask], gt: &[Mask]) -> Result<Vec<Vec<f64>>> {
    gt.iter().map(|g| pred.iter().map(|p| iou(g, p)).collect()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Accepted `(gt, pred)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

fn match_from_ious(ious: &[Vec<f64>], n_pred: usize, t: f64) -> Matching {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (g, row) in ious.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            if v > t {
                cands.push((v, g, p));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; ious.len()];
    let mut pred_used = vec![false; n_pred];
    let mut pairs = Vec::new();
    for (_, g, p) in cands {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            pairs.push((g, p));
        }
    }
    Matching {
        tp: pairs.len(),
        fp: n_pred - pairs.len(),
        fn_: ious.len() - pairs.len(),
        pairs,
    }
}

/// Greedy one-to-one matching of pairs with IoU strictly above `t`,
/// highest IoU first (ties: lower gt index, then lower pred index).
pub fn match_instances(pred: &[Mask], gt: &[Mask], t: f64) -> Result<Matching> {
    Ok(match_from_ious(&iou_matrix(pred, gt)?, pred.len(), t))
}

/// `TP / (TP + FP + FN)`, or 1 when all counts are zero.
pub fn average_precision(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = tp + fp + fn_;
    if d == 0 {
        1.0
    } else {
        tp as f64 / d as f64
    }
}

/// Aggregated Jaccard Index. Ground truths are visited in index order and
/// each claims the unused prediction with the highest IoU; every
/// prediction is used at most once.
pub fn aji(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.is_empty() && gt.is_empty() {
        return Ok(1.0);
    }
    let mut used = vec![false; pred.len()];
    let (mut c, mut u) = (0usize, 0usize);
    for g in gt {
        let mut best: Option<(usize, f64)> = None;
        for (j, p) in pred.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = iou(g, p)?;
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                c += g.intersection_count(&pred[j])?;
                u += g.union_count(&pred[j])?;
            }
            None => u += g.count(),
        }
    }
    for (j, p) in pred.iter().enumerate() {
        if !used[j] {
            u += p.count();
        }
    }
    Ok(if u == 0 { 0.0 } else { c as f64 / u as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub t: f64,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "AP")]
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub per_threshold: Vec<ThresholdReport>,
    #[serde(rename = "mean_AP")]
    pub mean_ap: f64,
    #[serde(rename = "AJI")]
    pub aji: f64,
}

impl MatchReport {
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.per_threshold.iter().find(|r| r.t == t).map(|r| r.ap)
    }
}

/// Counts at every threshold for one scene.
fn scene_counts(pred: &[Mask], gt: &[Mask]) -> Result<Vec<(usize, usize, usize)>> {
    let ious = iou_matrix(pred, gt)?;
    Ok(THRESHOLDS
        .iter()
        .map(|&t| {
            let m = match_from_ious(&ious, pred.len(), t);
            (m.tp, m.fp, m.fn_)
        })
        .collect())
}

/// Pools TP/FP/FN over all scenes before computing AP; averages AJI per
/// scene.
pub fn evaluate_dataset(predictions: &[Vec<Mask>], ground_truths: &[Vec<Mask>]) -> Result<MatchReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} ground-truth scenes",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let mut totals = vec![(0, 0, 0); THRESHOLDS.len()];
    let mut aji_sum = 0.0;
    for (pred, gt) in predictions.iter().zip(ground_truths) {
        for (acc, c) in totals.iter_mut().zip(scene_counts(pred, gt)?) {
            acc.0 += c.0;
            acc.1 += c.1;
            acc.2 += c.2;
        }
        aji_sum += aji(pred, gt)?;
    }
    let per_threshold: Vec<ThresholdReport> = THRESHOLDS
        .iter()
        .zip(totals)
        .map(|(&t, (tp, fp, fn_))| ThresholdReport {
            t,
            tp,
            fp,
            fn_,
            ap: average_precision(tp, fp, fn_),
        })
        .collect();
    let mean_ap = per_threshold.iter().map(|r| r.ap).sum::<f64>() / THRESHOLDS.len() as f64;
    let aji = if predictions.is_empty() {
        1.0
    } else {
        aji_sum / predictions.len() as f64
    };
    Ok(MatchReport {
        per_threshold,
        mean_ap,
        aji,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: usize) -> Mask {
        Mask::rect(20, 30, 5, x0, 15, x0 + 10)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&square(0), &square(0)).unwrap(), 1.0);
        assert_eq!(iou(&square(0), &square(15)).unwrap(), 0.0);
        assert_eq!(iou(&square(0), &square(5)).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 0.0);
        assert!(iou(&Mask::new(3, 3), &Mask::new(3, 4)).is_err());
    }

    #[test]
    fn matching_examples() {
        let gt = vec![square(0), square(15)];
        for t in THRESHOLDS {
            let m = match_instances(&gt, &gt, t).unwrap();
            assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        }
        let m = match_instances(&[], &gt, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
        let m = match_instances(&[square(5)], &[square(0)], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn matching_is_strict_and_one_to_one() {
        // IoU exactly 0.5 is not a match
        let a = Mask::rect(4, 4, 0, 0, 2, 2);
        let b = Mask::rect(4, 4, 0, 0, 1, 2);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        assert_eq!(match_instances(&[b.clone()], &[a.clone()], 0.5).unwrap().tp, 0);
        let m = match_instances(&[a.clone(), a.clone()], &[a.clone()], 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(3, 1, 1), 0.6);
        assert_eq!(average_precision(0, 0, 0), 1.0);
        assert_eq!(average_precision(0, 0, 4), 0.0);
    }

    #[test]
    fn aji_examples() {
        let gt = vec![square(0), square(15)];
        assert_eq!(aji(&gt, &gt).unwrap(), 1.0);
        assert_eq!(aji(&[], &gt).unwrap(), 0.0);
        assert_eq!(aji(&[], &[]).unwrap(), 1.0);
        assert_eq!(aji(&[square(5)], &[square(0)]).unwrap(), 1.0 / 3.0);
        // an unmatched prediction only grows the union
        assert_eq!(aji(&[square(0), square(15)], &[square(0)]).unwrap(), 0.5);
    }

    #[test]
    fn dataset_pools_counts() {
        let gt = vec![square(0), square(15)];
        let pred = vec![square(0), square(16)];
        let one = evaluate_dataset(&[pred.clone()], &[gt.clone()]).unwrap();
        let two = evaluate_dataset(&[pred.clone(), pred], &[gt.clone(), gt]).unwrap();
        assert_eq!(one.mean_ap, two.mean_ap);
        assert_eq!(one.aji, two.aji);
        assert_eq!(two.per_threshold[0].tp, 4);
        assert!(evaluate_dataset(&[vec![]], &[]).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let r = evaluate_dataset(&[vec![square(0)]], &[vec![square(0)]]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["mean_AP"], 1.0);
        assert_eq!(v["AJI"], 1.0);
        assert_eq!(v["per_threshold"][0]["TP"], 1);
        assert_eq!(v["per_threshold"][4]["t"], 0.9);
    }
}
