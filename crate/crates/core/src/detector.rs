//! Dense anchor-free detection head, its training targets and loss, and
//! decoding with class-wise non-maximum suppression.
//!
//! Every cell of every pyramid level predicts one logit per class and four
//! box deltas relative to the cell centre: `(dx, dy)` is the offset of the box
//! centre in units of the level stride and `(lw, lh)` are log sizes in the
//! same units.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruthBox};
use crate::layers::Conv;
use crate::nn::activation::sigmoid;
use crate::nn::conv::ConvSpec;
use crate::params::{join, Bound, ConvInit, ParamInit};
use crate::scalar::Scalar;
use crate::tape::{CustomBackward, Tape, ValueId};
use crate::tensor::{Dims, Tensor4};

pub const BOX_CHANNELS: usize = 4;
pub const FINEST_STRIDE: usize = 4;
/// Boxes whose longer side is below `2 * BASE_SIZE` go to the finest level.
pub const BASE_SIZE: f64 = 8.0;
/// Upper bound on predicted log sizes when decoding.
const MAX_LOG_SIZE: f64 = 16.0;

pub fn level_stride(level: usize) -> usize {
    FINEST_STRIDE << level
}

/// Level `l` with `max(w, h)` in `[8 * 2^l, 8 * 2^(l+1))`, clamped to the
/// available levels.
pub fn assign_level(b: &BBox, levels: usize) -> usize {
    let side = b.w.max(b.h);
    let mut l = 0;
    while l + 1 < levels && side >= BASE_SIZE * (2u64 << l) as f64 {
        l += 1;
    }
    l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelOutput {
    pub class_logits: ValueId,
    pub box_deltas: ValueId,
}

/// Shared 3x3 trunk with 1x1 class and box predictors, applied to every level.
#[derive(Clone, Debug)]
pub struct Head {
    pub num_classes: usize,
    trunk: Conv,
    classify: Conv,
    regress: Conv,
}

impl Head {
    pub fn new(prefix: &str, width: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || width == 0 {
            return Err(Error::Config(
                "head needs at least one class and a positive width".into(),
            ));
        }
        Ok(Head {
            num_classes,
            trunk: Conv::new(
                join(prefix, "trunk"),
                ConvSpec::same(width, width, 3, 1),
                ConvInit::FanIn,
            ),
            classify: Conv::new(
                join(prefix, "cls"),
                ConvSpec::same(width, num_classes, 1, 1),
                ConvInit::Zero,
            ),
            regress: Conv::new(
                join(prefix, "box"),
                ConvSpec::same(width, BOX_CHANNELS, 1, 1),
                ConvInit::Zero,
            ),
        })
    }

    pub fn declare<T: Scalar>(&self, init: &mut ParamInit<'_, T>) -> Result<()> {
        self.trunk.declare(init)?;
        self.classify.declare(init)?;
        self.regress.declare(init)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        pyramid: &[ValueId],
    ) -> Result<Vec<LevelOutput>> {
        pyramid
            .iter()
            .map(|&p| {
                let h = self.trunk.forward(tape, bound, p)?;
                let h = tape.relu(h)?;
                Ok(LevelOutput {
                    class_logits: self.classify.forward(tape, bound, h)?,
                    box_deltas: self.regress.forward(tape, bound, h)?,
                })
            })
            .collect()
    }
}

/// Per-level training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    /// `(n, num_classes, h, w)` class logits shape.
    pub dims: Dims,
    /// Index of the owning ground-truth class per `(image, cell)`.
    pub owner_class: Vec<Option<usize>>,
    /// Box deltas per positive `(image, cell)`; zero elsewhere.
    pub deltas: Vec<[f64; 4]>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.owner_class.iter().flatten().count()
    }
}

/// Box deltas of `b` relative to the cell centred at `(cx, cy)`.
pub fn encode_box(b: &BBox, cx: f64, cy: f64, stride: f64) -> [f64; 4] {
    let (bx, by) = b.center();
    [
        (bx - cx) / stride,
        (by - cy) / stride,
        (b.w / stride).ln(),
        (b.h / stride).ln(),
    ]
}

pub fn decode_box(d: [f64; 4], cx: f64, cy: f64, stride: f64) -> BBox {
    let w = d[2].min(MAX_LOG_SIZE).exp() * stride;
    let h = d[3].min(MAX_LOG_SIZE).exp() * stride;
    let (bx, by) = (cx + d[0] * stride, cy + d[1] * stride);
    BBox::new(bx - w / 2.0, by - h / 2.0, w, h)
}

/// Assigns every ground-truth box to one level. Within it, cells whose centre
/// lies strictly inside the box, plus the cell containing the box centre,
/// become positives; where boxes compete for a cell the smaller one wins.
pub fn build_targets(
    gts: &[Vec<GroundTruthBox>],
    level_sizes: &[(usize, usize)],
    num_classes: usize,
) -> Result<Vec<LevelTargets>> {
    let n = gts.len();
    let mut out: Vec<LevelTargets> = level_sizes
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| LevelTargets {
            stride: level_stride(l),
            dims: Dims::new(n, num_classes, h, w),
            owner_class: vec![None; n * h * w],
            deltas: vec![[0.0; 4]; n * h * w],
        })
        .collect();
    for (img, boxes) in gts.iter().enumerate() {
        let mut owner_area: Vec<Vec<f64>> = level_sizes.iter().map(|&(h, w)| vec![f64::INFINITY; h * w]).collect();
        for gt in boxes {
            if gt.class_id >= num_classes {
                return Err(Error::Config(format!(
                    "class {} out of range for {num_classes} classes",
                    gt.class_id
                )));
            }
            if !(gt.bbox.w > 0.0 && gt.bbox.h > 0.0) {
                return Err(Error::Config(format!("degenerate ground-truth box {:?}", gt.bbox)));
            }
            let l = assign_level(&gt.bbox, level_sizes.len());
            let (h, w) = level_sizes[l];
            let s = level_stride(l) as f64;
            let (gx, gy) = gt.bbox.center();
            let centre_cell = (
                ((gy / s).floor().max(0.0) as usize).min(h - 1),
                ((gx / s).floor().max(0.0) as usize).min(w - 1),
            );
            let area = gt.bbox.area();
            let t = &mut out[l];
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    if !(gt.bbox.contains(cx, cy) || (y, x) == centre_cell) {
                        continue;
                    }
                    let cell = y * w + x;
                    if area < owner_area[l][cell] {
                        owner_area[l][cell] = area;
                        let i = img * h * w + cell;
                        t.owner_class[i] = Some(gt.class_id);
                        t.deltas[i] = encode_box(&gt.bbox, cx, cy, s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `log(1 + exp(z)) - t z`, evaluated without overflow.
fn bce(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub bbox: f64,
}

#[derive(Clone, Copy, Debug)]
struct Normalisers {
    negatives: usize,
    positives: usize,
}

fn normalisers(targets: &[LevelTargets]) -> Normalisers {
    let entries: usize = targets.iter().map(|t| t.dims.len()).sum();
    let positives: usize = targets.iter().map(|t| t.positives()).sum();
    Normalisers {
        negatives: entries - positives,
        positives,
    }
}

fn inverse(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        1.0 / count as f64
    }
}

fn check_outputs<T: Scalar>(outputs: &[(&Tensor4<T>, &Tensor4<T>)], targets: &[LevelTargets]) -> Result<()> {
    if outputs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} output levels for {} target levels",
            outputs.len(),
            targets.len()
        )));
    }
    for ((cls, reg), t) in outputs.iter().zip(targets) {
        let bd = Dims::new(t.dims.n, BOX_CHANNELS, t.dims.h, t.dims.w);
        if cls.dims() != t.dims || reg.dims() != bd {
            return Err(Error::shape(format!(
                "head outputs {} / {} do not match targets {}",
                cls.dims(),
                reg.dims(),
                t.dims
            )));
        }
        cls.ensure_finite("detection_loss")?;
        reg.ensure_finite("detection_loss")?;
    }
    Ok(())
}

/// Balanced binary cross-entropy (mean over negative entries plus mean over
/// positive entries) and mean L1 over positive box coordinates.
pub fn loss_values<T: Scalar>(
    outputs: &[(&Tensor4<T>, &Tensor4<T>)],
    targets: &[LevelTargets],
) -> Result<LossBreakdown> {
    check_outputs(outputs, targets)?;
    let norm = normalisers(targets);
    let (mut neg, mut pos, mut l1) = (0.0, 0.0, 0.0);
    for ((cls, reg), t) in outputs.iter().zip(targets) {
        let d = t.dims;
        let plane = d.plane();
        for b in 0..d.n {
            for cell in 0..plane {
                let i = b * plane + cell;
                let owner = t.owner_class[i];
                for c in 0..d.c {
                    let z = cls.data()[(b * d.c + c) * plane + cell].as_f64();
                    if owner == Some(c) {
                        pos += bce(z, 1.0);
                    } else {
                        neg += bce(z, 0.0);
                    }
                }
                if owner.is_some() {
                    for k in 0..BOX_CHANNELS {
                        let p = reg.data()[(b * BOX_CHANNELS + k) * plane + cell].as_f64();
                        l1 += (p - t.deltas[i][k]).abs();
                    }
                }
            }
        }
    }
    let class = neg * inverse(norm.negatives) + pos * inverse(norm.positives);
    let bbox = l1 * inverse(norm.positives * BOX_CHANNELS);
    Ok(LossBreakdown {
        total: class + bbox,
        class,
        bbox,
    })
}

struct LossRule {
    targets: Vec<LevelTargets>,
}

impl<T: Scalar> CustomBackward<T> for LossRule {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn backward(&self, inputs: &[&Tensor4<T>], grad_out: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        let g = grad_out.data()[0].as_f64();
        let norm = normalisers(&self.targets);
        let (wn, wp) = (g * inverse(norm.negatives), g * inverse(norm.positives));
        let wb = g * inverse(norm.positives * BOX_CHANNELS);
        let mut grads = Vec::with_capacity(inputs.len());
        for (pair, t) in inputs.chunks(2).zip(&self.targets) {
            let (cls, reg) = (pair[0], pair[1]);
            let d = t.dims;
            let plane = d.plane();
            let mut gc = vec![T::zero(); cls.len()];
            let mut gb = vec![T::zero(); reg.len()];
            for b in 0..d.n {
                for cell in 0..plane {
                    let i = b * plane + cell;
                    let owner = t.owner_class[i];
                    for c in 0..d.c {
                        let j = (b * d.c + c) * plane + cell;
                        let s = sigmoid(cls.data()[j].as_f64());
                        gc[j] = T::lit(if owner == Some(c) { (s - 1.0) * wp } else { s * wn });
                    }
                    if owner.is_some() {
                        for k in 0..BOX_CHANNELS {
                            let j = (b * BOX_CHANNELS + k) * plane + cell;
                            let diff = reg.data()[j].as_f64() - t.deltas[i][k];
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gb[j] = T::lit(sign * wb);
                        }
                    }
                }
            }
            grads.push(Tensor4::from_vec(cls.dims(), gc)?);
            grads.push(Tensor4::from_vec(reg.dims(), gb)?);
        }
        Ok(grads)
    }
}

/// Records the detection loss on `tape` and returns its id with the breakdown.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[LevelOutput],
    targets: Vec<LevelTargets>,
) -> Result<(ValueId, LossBreakdown)> {
    let values: Vec<(&Tensor4<T>, &Tensor4<T>)> = outputs
        .iter()
        .map(|o| Ok((tape.value(o.class_logits)?, tape.value(o.box_deltas)?)))
        .collect::<Result<_>>()?;
    let breakdown = loss_values(&values, &targets)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            op: "detection_loss",
            index: 0,
        });
    }
    let inputs: Vec<ValueId> = outputs.iter().flat_map(|o| [o.class_logits, o.box_deltas]).collect();
    let id = tape.custom(
        &inputs,
        Tensor4::scalar(T::lit(breakdown.total)),
        Box::new(LossRule { targets }),
    )?;
    Ok((id, breakdown))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_thresh: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thresh) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!(
                "score threshold must lie in [0, 1] and NMS IoU in (0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Greedy class-wise suppression; input order breaks score ties.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detections per image, each list sorted by descending score.
pub fn decode_detections<T: Scalar>(
    levels: &[(&Tensor4<T>, &Tensor4<T>)],
    params: &DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    params.validate()?;
    let n = levels.first().map_or(0, |(c, _)| c.dims().n);
    let mut per_image = vec![Vec::new(); n];
    for (l, (cls, reg)) in levels.iter().enumerate() {
        let d = cls.dims();
        if reg.dims() != Dims::new(d.n, BOX_CHANNELS, d.h, d.w) || d.n != n {
            return Err(Error::shape(format!("head outputs {d} / {} disagree", reg.dims())));
        }
        let s = level_stride(l) as f64;
        let plane = d.plane();
        for (b, dets) in per_image.iter_mut().enumerate() {
            for cell in 0..plane {
                let (y, x) = (cell / d.w, cell % d.w);
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                let mut decoded = None;
                for c in 0..d.c {
                    let score = sigmoid(cls.data()[(b * d.c + c) * plane + cell].as_f64());
                    if score <= params.score_thresh {
                        continue;
                    }
                    let bbox = *decoded.get_or_insert_with(|| {
                        let delta = std::array::from_fn(|k| reg.data()[(b * BOX_CHANNELS + k) * plane + cell].as_f64());
                        decode_box(delta, cx, cy, s)
                    });
                    dets.push(Detection {
                        image_id: b,
                        bbox,
                        class_id: c,
                        score,
                        level: l,
                    });
                }
            }
        }
    }
    Ok(per_image.into_iter().map(|d| nms(d, params.nms_iou)).collect())
}

/// Head outputs that realise `targets` exactly: logits `+-magnitude` and the
/// target deltas on positive cells.
pub fn ideal_outputs(targets: &[LevelTargets], magnitude: f64) -> Vec<(Tensor4<f64>, Tensor4<f64>)> {
    targets
        .iter()
        .map(|t| {
            let d = t.dims;
            let plane = d.plane();
            let cls = Tensor4::from_fn(d, |b, c, y, x| {
                if t.owner_class[b * plane + y * d.w + x] == Some(c) {
                    magnitude
                } else {
                    -magnitude
                }
            });
            let reg = Tensor4::from_fn(Dims::new(d.n, BOX_CHANNELS, d.h, d.w), |b, k, y, x| {
                t.deltas[b * plane + y * d.w + x][k]
            });
            (cls, reg)
        })
        .collect()
}
