//! Three-granularity evaluation protocol: example-based multi-label
//! precision/recall/F1, group matching by member-set IoU above one half, and
//! the overall score as the mean of the three F1 values.

use crate::error::{Error, Result};
use crate::grouping::Partition;
use crate::heads::LabelSet;

/// Precision, recall, F1 in `[0,1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// F1 from a precision/recall pair: `2PR/(P+R)`, zero when both vanish.
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// All nine granularity scores plus the overall F1.
#[derive(Clone, Copy, Debug, Default)]
pub struct PanoramicScore {
    pub individual: Prf,
    pub social: Prf,
    pub global: Prf,
    pub overall_f1: f64,
}

fn intersection(a: &LabelSet, b: &LabelSet) -> usize {
    a.intersection(b).count()
}

/// Example-based multi-label scores: per instance `P = |I|/|pred|`
/// (zero when the prediction is empty), `R = |I|/|gt|`, `F = 2PR/(P+R)`;
/// each averaged over instances.
pub fn multilabel_prf(preds: &[LabelSet], gts: &[LabelSet]) -> Result<Prf> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok(Prf::default());
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (pred, gt) in preds.iter().zip(gts) {
        if gt.is_empty() {
            return Err(Error::InvalidInput("empty ground-truth label set".into()));
        }
        let inter = intersection(pred, gt) as f64;
        let p = if pred.is_empty() {
            0.0
        } else {
            inter / pred.len() as f64
        };
        let r = inter / gt.len() as f64;
        let f = Prf::from_pr(p, r).f1;
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = preds.len() as f64;
    Ok(Prf {
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
    })
}

/// Member-set IoU of two groups.
fn group_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.iter().cloned().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().cloned().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Pairs `(pred_index, gt_index)` with member IoU strictly above one half.
/// IoU > 0.5 makes the match one-to-one in both directions; that uniqueness
/// is asserted.
pub fn half_match(pred: &Partition, gt: &Partition) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    for (pi, pg) in pred.groups().iter().enumerate() {
        for (gi, gg) in gt.groups().iter().enumerate() {
            if group_iou(pg, gg) > 0.5 {
                assert!(
                    !pred_used[pi] && !gt_used[gi],
                    "IoU > 0.5 matches must be unique"
                );
                pred_used[pi] = true;
                gt_used[gi] = true;
                pairs.push((pi, gi));
            }
        }
    }
    pairs
}

/// One clip's social-granularity outputs: detected and ground-truth groups,
/// each with their label sets (aligned with the partition's group order).
#[derive(Clone, Debug)]
pub struct SocialClipEval {
    pub pred: Partition,
    pub pred_labels: Vec<LabelSet>,
    pub gt: Partition,
    pub gt_labels: Vec<LabelSet>,
}

/// Social-group activity scores, pooled over clips.
///
/// Every detected group contributes a precision term: the example-based
/// precision of its labels against its Half-matched ground-truth group, zero
/// if unmatched. Recall mirrors this over the ground-truth groups. F1 comes
/// from the pooled pair.
pub fn social_prf(clips: &[SocialClipEval]) -> Result<Prf> {
    let mut p_sum = 0.0;
    let mut pred_count = 0usize;
    let mut r_sum = 0.0;
    let mut gt_count = 0usize;
    for clip in clips {
        if clip.pred_labels.len() != clip.pred.len() || clip.gt_labels.len() != clip.gt.len() {
            return Err(Error::InvalidInput(
                "labels must align with partition groups".into(),
            ));
        }
        let matches = half_match(&clip.pred, &clip.gt);
        for &(pi, gi) in &matches {
            let pred_set = &clip.pred_labels[pi];
            let gt_set = &clip.gt_labels[gi];
            let inter = intersection(pred_set, gt_set) as f64;
            if !pred_set.is_empty() {
                p_sum += inter / pred_set.len() as f64;
            }
            if !gt_set.is_empty() {
                r_sum += inter / gt_set.len() as f64;
            }
        }
        pred_count += clip.pred.len();
        gt_count += clip.gt.len();
    }
    let precision = if pred_count > 0 {
        p_sum / pred_count as f64
    } else {
        0.0
    };
    let recall = if gt_count > 0 {
        r_sum / gt_count as f64
    } else {
        0.0
    };
    Ok(Prf::from_pr(precision, recall))
}

/// Overall score: the arithmetic mean of the three F1 values.
pub fn overall_score(individual: Prf, social: Prf, global: Prf) -> PanoramicScore {
    PanoramicScore {
        individual,
        social,
        global,
        overall_f1: (individual.f1 + social.f1 + global.f1) / 3.0,
    }
}

/// Percent with one decimal, round-half-even.
pub fn percent_1dp(fraction: f64) -> f64 {
    round_half_even(fraction * 1000.0) / 10.0
}

fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    let diff = x - floor;
    if (diff - 0.5).abs() < 1e-9 {
        if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        x.round()
    }
}
