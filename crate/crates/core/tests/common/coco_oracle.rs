//! A deliberately plain re-implementation of COCO box AP, written from the
//! protocol description without reusing any library code. Quadratic loops are
//! fine at the sizes the tests use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sodm::boxes::BBox;
use sodm::eval::{Detection, GroundTruthBox};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_threshold: Vec<Option<f64>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Area {
    All,
    Small,
    Medium,
    Large,
}

fn in_area(area: f64, range: Area) -> bool {
    match range {
        Area::All => true,
        Area::Small => area < 1024.0,
        Area::Medium => (1024.0..=9216.0).contains(&area),
        Area::Large => area > 9216.0,
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let inter = (x2 - x1) * (y2 - y1);
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Indices sorted by descending score; equal scores keep their input order.
fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort is stable and obviously so
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// Greedy matching of one image and class. Each detection, highest score
/// first, takes the unmatched ground truth of highest IoU (at least `thresh`),
/// preferring non-ignored ground truth and the lower index on ties.
/// Returns the matched ground-truth index per detection in score order.
fn greedy(dets: &[BBox], gts: &[BBox], gt_ignored: &[bool], thresh: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let mut pick = None;
        for want_ignored in [false, true] {
            let mut best_iou = -1.0;
            for g in 0..gts.len() {
                if used[g] || gt_ignored[g] != want_ignored {
                    continue;
                }
                let iou = box_iou(d, &gts[g]);
                if iou >= thresh && iou > best_iou {
                    best_iou = iou;
                    pick = Some(g);
                }
            }
            if pick.is_some() {
                break;
            }
        }
        if let Some(g) = pick {
            used[g] = true;
        }
        out.push(pick);
    }
    out
}

/// Per-detection TP flags in input order for one image and class.
pub fn match_flags(dets: &[Detection], gts: &[GroundTruthBox], thresh: f64) -> Vec<bool> {
    let order = by_score(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let m = greedy(&boxes, &gt_boxes, &vec![false; gts.len()], thresh);
    let mut flags = vec![false; dets.len()];
    for (k, &i) in order.iter().enumerate() {
        flags[i] = m[k].is_some();
    }
    flags
}

/// 101-point interpolated AP with precision taken as the maximum over every
/// later rank, not via a running envelope.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        if let Some(first) = (0..recall.len()).find(|&k| recall[k] >= r) {
            let best = precision[first..].iter().cloned().fold(f64::MIN, f64::max);
            total += best;
        }
    }
    Some(total / 101.0)
}

fn ap_for(dets: &[Detection], gts: &[GroundTruthBox], range: Area, thresh: f64) -> Option<f64> {
    let mut classes: Vec<usize> = gts
        .iter()
        .map(|g| g.class_id)
        .chain(dets.iter().map(|d| d.class_id))
        .collect();
    classes.sort();
    classes.dedup();
    let mut images: Vec<usize> = gts
        .iter()
        .map(|g| g.image_id)
        .chain(dets.iter().map(|d| d.image_id))
        .collect();
    images.sort();
    images.dedup();

    let mut per_class = Vec::new();
    for &c in &classes {
        let mut scores = Vec::new();
        let mut hits = Vec::new();
        let mut num_gt = 0;
        for &img in &images {
            let mine: Vec<&Detection> = dets.iter().filter(|d| d.image_id == img && d.class_id == c).collect();
            let truth: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.image_id == img && g.class_id == c).collect();
            let mut order = by_score(&mine.iter().map(|d| d.score).collect::<Vec<_>>());
            order.truncate(100);
            let boxes: Vec<BBox> = order.iter().map(|&i| mine[i].bbox).collect();
            let gt_boxes: Vec<BBox> = truth.iter().map(|g| g.bbox).collect();
            let gt_ignored: Vec<bool> = truth.iter().map(|g| !in_area(g.bbox.w * g.bbox.h, range)).collect();
            num_gt += gt_ignored.iter().filter(|&&i| !i).count();
            let m = greedy(&boxes, &gt_boxes, &gt_ignored, thresh);
            for (k, &i) in order.iter().enumerate() {
                let ignored = match m[k] {
                    Some(g) => gt_ignored[g],
                    None => !in_area(boxes[k].w * boxes[k].h, range),
                };
                if !ignored {
                    scores.push(mine[i].score);
                    hits.push(m[k].is_some());
                }
            }
        }
        let ranked: Vec<bool> = by_score(&scores).into_iter().map(|i| hits[i]).collect();
        if let Some(ap) = interpolated_ap(&ranked, num_gt) {
            per_class.push(ap);
        }
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let mut sum = 0.0;
    for v in values {
        sum += (*v)?;
    }
    Some(sum / values.len() as f64)
}

pub fn oracle_evaluate(dets: &[Detection], gts: &[GroundTruthBox]) -> OracleResult {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let sweep = |range| {
        thresholds
            .iter()
            .map(|&t| ap_for(dets, gts, range, t))
            .collect::<Vec<_>>()
    };
    let all = sweep(Area::All);
    OracleResult {
        ap: mean(&all),
        ap50: all[0],
        ap75: all[5],
        ap_s: mean(&sweep(Area::Small)),
        ap_m: mean(&sweep(Area::Medium)),
        ap_l: mean(&sweep(Area::Large)),
        per_threshold: all,
    }
}

/// A tiny random evaluation problem: up to 5 images, up to 6 ground-truth
/// boxes and 6 detections per image, up to 3 classes. Coordinates sit on a
/// coarse grid and scores on tenths so IoU and score ties occur often.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let images = rng.random_range(1..=5);
    let classes = rng.random_range(1..=3);
    let sizes = [4.0, 8.0, 16.0, 24.0, 32.0, 40.0, 64.0, 96.0, 100.0, 128.0];
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..images {
        let n_gt = rng.random_range(0..=6);
        let mut mine = Vec::new();
        for _ in 0..n_gt {
            let w = sizes[rng.random_range(0..sizes.len())];
            let h = sizes[rng.random_range(0..sizes.len())];
            let b = BBox::new(
                rng.random_range(0..16) as f64 * 4.0,
                rng.random_range(0..16) as f64 * 4.0,
                w,
                h,
            );
            let g = GroundTruthBox {
                image_id,
                bbox: b,
                class_id: rng.random_range(0..classes),
            };
            mine.push(g);
            gts.push(g);
        }
        let n_det = rng.random_range(0..=6);
        for _ in 0..n_det {
            let score = rng.random_range(1..=10) as f64 / 10.0;
            let (bbox, class_id) = if !mine.is_empty() && rng.random_bool(0.7) {
                let g = mine[rng.random_range(0..mine.len())];
                let jitter = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-2..=2) as f64;
                let w = (g.bbox.w + rng.random_range(-2..=2) as f64).max(1.0);
                let h = (g.bbox.h + rng.random_range(-2..=2) as f64).max(1.0);
                let class_id = if rng.random_bool(0.85) {
                    g.class_id
                } else {
                    rng.random_range(0..classes)
                };
                (BBox::new(jitter(g.bbox.x, rng), jitter(g.bbox.y, rng), w, h), class_id)
            } else {
                let w = sizes[rng.random_range(0..sizes.len())];
                let h = sizes[rng.random_range(0..sizes.len())];
                let b = BBox::new(
                    rng.random_range(0..16) as f64 * 4.0,
                    rng.random_range(0..16) as f64 * 4.0,
                    w,
                    h,
                );
                (b, rng.random_range(0..classes))
            };
            dets.push(Detection {
                image_id,
                bbox,
                class_id,
                score,
                level: 0,
            });
        }
    }
    (dets, gts)
}
