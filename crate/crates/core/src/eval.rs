//! COCO-protocol average precision, overall and by ground-truth area.
//!
//! Per image and class, at most [`MAX_DETS`] highest-scoring detections are
//! matched greedily in score order to the best still-unmatched ground truth
//! with IoU at or above the threshold. Ground truths outside the area range
//! under evaluation are ignored: they may absorb a detection, which is then
//! ignored too, but only after every in-range candidate has been considered.
//! Unmatched detections whose own area falls outside the range are ignored.
//! Per class, detections from all images are ranked by score, the precision
//! envelope is sampled at 101 recall points, and the mean is that class's AP.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

pub const MAX_DETS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Pyramid level that produced the detection.
    #[serde(default)]
    pub level: usize,
}

/// `0.50, 0.55, ..., 0.95`, each the double nearest its decimal value so that
/// ratios such as an IoU of 17/20 compare exactly.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// `0.00, 0.01, ..., 1.00`, rounded the same way as [`iou_thresholds`].
pub fn recall_thresholds() -> [f64; RECALL_POINTS] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const STRATA: [AreaRange; 3] = [AreaRange::Small, AreaRange::Medium, AreaRange::Large];

    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..=LARGE_AREA).contains(&area),
            AreaRange::Large => area > LARGE_AREA,
        }
    }

    pub fn of(area: f64) -> AreaRange {
        Self::STRATA
            .into_iter()
            .find(|r| r.contains(area))
            .unwrap_or(AreaRange::Large)
    }
}

/// Metrics in `[0, 1]`; `None` where no ground truth falls in the stratum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// AP at each IoU threshold over all areas.
    pub per_threshold: Vec<Option<f64>>,
}

/// Indices of `dets` by descending score, ties keeping input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy matching of one image and class without area ignores. Returns a
/// true-positive flag per detection, in input order.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> Vec<bool> {
    let order = score_order(dets.iter().map(|d| d.score));
    let ignore = vec![false; gts.len()];
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let sorted: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let matched = greedy_match(&sorted, &gt_boxes, &ignore, iou_thresh);
    let mut flags = vec![false; dets.len()];
    for (k, &i) in order.iter().enumerate() {
        flags[i] = matched[k].is_some();
    }
    flags
}

/// `dets` already in score order, `gts` with non-ignored entries first.
/// Returns the matched ground-truth index per detection.
fn greedy_match(dets: &[BBox], gts: &[BBox], gt_ignore: &[bool], thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if let Some((m, _)) = best {
                    if !gt_ignore[m] && gt_ignore[g] {
                        break;
                    }
                }
                let iou = d.iou(gb);
                let better = match best {
                    None => iou >= thresh,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((g, iou));
                }
            }
            let m = best.map(|(g, _)| g);
            if let Some(g) = m {
                taken[g] = true;
            }
            m
        })
        .collect()
}

/// AP from `(score, true positive)` pairs already in ranking order.
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Matching outcome of one image and class at one threshold and area range.
struct ImageClassEval {
    scores: Vec<f64>,
    matched: Vec<bool>,
    ignored: Vec<bool>,
    num_gt: usize,
}

fn evaluate_image_class(dets: &[&Detection], gts: &[&GroundTruthBox], range: AreaRange, thresh: f64) -> ImageClassEval {
    let mut order = score_order(dets.iter().map(|d| d.score));
    order.truncate(MAX_DETS);
    let gt_ign: Vec<bool> = gts.iter().map(|g| !range.contains(g.bbox.area())).collect();
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| gt_ign[g]);
    let gt_boxes: Vec<BBox> = gt_order.iter().map(|&g| gts[g].bbox).collect();
    let sorted_ign: Vec<bool> = gt_order.iter().map(|&g| gt_ign[g]).collect();
    let det_boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let m = greedy_match(&det_boxes, &gt_boxes, &sorted_ign, thresh);
    let ignored = m
        .iter()
        .zip(&det_boxes)
        .map(|(mg, b)| match mg {
            Some(g) => sorted_ign[*g],
            None => !range.contains(b.area()),
        })
        .collect();
    ImageClassEval {
        scores: order.iter().map(|&i| dets[i].score).collect(),
        matched: m.iter().map(Option::is_some).collect(),
        ignored,
        num_gt: gt_ign.iter().filter(|&&i| !i).count(),
    }
}

/// Mean over classes with ground truth of the per-class AP, `None` if no
/// class has any.
fn threshold_ap(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    classes: &[usize],
    images: &[usize],
    range: AreaRange,
    thresh: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &c in classes {
        let mut scores = Vec::new();
        let mut hits = Vec::new();
        let mut num_gt = 0;
        for &img in images {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.image_id == img && d.class_id == c).collect();
            let g: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.image_id == img && g.class_id == c).collect();
            let e = evaluate_image_class(&d, &g, range, thresh);
            num_gt += e.num_gt;
            for k in 0..e.scores.len() {
                if !e.ignored[k] {
                    scores.push(e.scores[k]);
                    hits.push(e.matched[k]);
                }
            }
        }
        let order = score_order(scores.iter().copied());
        let ranked: Vec<(f64, bool)> = order.iter().map(|&i| (scores[i], hits[i])).collect();
        if let Some(ap) = average_precision(&ranked, num_gt) {
            sum += ap;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn sorted_unique(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn mean_over_thresholds(per: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = per.iter().copied().collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox]) -> EvalResult {
    let classes = sorted_unique(gts.iter().map(|g| g.class_id).chain(dets.iter().map(|d| d.class_id)));
    let images = sorted_unique(gts.iter().map(|g| g.image_id).chain(dets.iter().map(|d| d.image_id)));
    let thresholds = iou_thresholds();
    let per = |range: AreaRange| -> Vec<Option<f64>> {
        thresholds
            .iter()
            .map(|&t| threshold_ap(dets, gts, &classes, &images, range, t))
            .collect()
    };
    let all = per(AreaRange::All);
    let strata: Vec<Option<f64>> = AreaRange::STRATA
        .iter()
        .map(|&r| mean_over_thresholds(&per(r)))
        .collect();
    EvalResult {
        ap: mean_over_thresholds(&all),
        ap50: all[0],
        ap75: all[5],
        ap_s: strata[0],
        ap_m: strata[1],
        ap_l: strata[2],
        per_threshold: all,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: usize, x: f64, y: f64, w: f64, h: f64, c: usize) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img,
            bbox: BBox::new(x, y, w, h),
            class_id: c,
        }
    }

    fn det(img: usize, b: BBox, c: usize, score: f64) -> Detection {
        Detection {
            image_id: img,
            bbox: b,
            class_id: c,
            score,
            level: 0,
        }
    }

    #[test]
    fn thresholds_hit_exact_values() {
        let t = iou_thresholds();
        assert_eq!(t, [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]);
        assert_eq!(recall_thresholds()[50], 0.5);
        assert_eq!(recall_thresholds()[30], 3.0 / 10.0);
    }

    #[test]
    fn hand_checked_ap_values() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // precision 1 up to recall 0.5 covers recall points 0.00..=0.50
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 2), Some(51.0 / 101.0));
    }

    #[test]
    fn two_detections_on_one_gt() {
        let g = [gt(0, 0.0, 0.0, 10.0, 10.0, 0)];
        let d = [
            det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.4),
            det(0, BBox::new(1.0, 0.0, 10.0, 10.0), 0, 0.9),
        ];
        assert_eq!(match_detections(&d, &g, 0.5), vec![false, true]);
    }

    #[test]
    fn equal_iou_prefers_lower_gt_index() {
        let g = [gt(0, 0.0, 0.0, 4.0, 4.0, 0), gt(0, 4.0, 0.0, 4.0, 4.0, 0)];
        let d = [
            det(0, BBox::new(2.0, 0.0, 4.0, 4.0), 0, 0.9),
            det(0, BBox::new(2.0, 0.0, 4.0, 4.0), 0, 0.8),
        ];
        // both gts have IoU 1/3 with the detection
        assert_eq!(match_detections(&d, &g, 0.3), vec![true, true]);
        let ign = [false, false];
        let m = greedy_match(&[d[0].bbox], &[g[0].bbox, g[1].bbox], &ign, 0.3);
        assert_eq!(m, vec![Some(0)]);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            gt(0, 0.0, 0.0, 10.0, 10.0, 0),
            gt(0, 20.0, 20.0, 40.0, 40.0, 1),
            gt(1, 5.0, 5.0, 120.0, 100.0, 0),
        ];
        let dets: Vec<_> = gts.iter().map(|g| det(g.image_id, g.bbox, g.class_id, 1.0)).collect();
        let r = evaluate(&dets, &gts);
        for v in [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l] {
            assert_eq!(v, Some(1.0));
        }
        let e = evaluate(&[], &gts);
        for v in [e.ap, e.ap50, e.ap75, e.ap_s, e.ap_m, e.ap_l] {
            assert_eq!(v, Some(0.0));
        }
    }

    #[test]
    fn undefined_strata() {
        let gts = vec![gt(0, 0.0, 0.0, 10.0, 10.0, 0)];
        let r = evaluate(&[], &gts);
        assert_eq!((r.ap_s, r.ap_m, r.ap_l), (Some(0.0), None, None));
        assert_eq!(evaluate(&[], &[]).ap, None);
    }

    #[test]
    fn area_boundaries() {
        assert_eq!(AreaRange::of(1023.0), AreaRange::Small);
        assert_eq!(AreaRange::of(1024.0), AreaRange::Medium);
        assert_eq!(AreaRange::of(9216.0), AreaRange::Medium);
        assert_eq!(AreaRange::of(9216.5), AreaRange::Large);
    }

    #[test]
    fn out_of_stratum_match_is_ignored() {
        // a large GT matched by a large detection must not count as a false
        // positive for the small stratum
        let gts = vec![gt(0, 0.0, 0.0, 10.0, 10.0, 0), gt(0, 50.0, 50.0, 100.0, 100.0, 0)];
        let dets = vec![
            det(0, BBox::new(50.0, 50.0, 100.0, 100.0), 0, 0.95),
            det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.9),
        ];
        let r = evaluate(&dets, &gts);
        assert_eq!(r.ap_s, Some(1.0));
        assert_eq!(r.ap_l, Some(1.0));
    }
}
