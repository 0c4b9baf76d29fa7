//! Axis-aligned box and point-mask geometry: IoU, Dice and the conversions
//! between the two representations.
//!
//! Plain functions work on values. The `*_var` variants build the same
//! quantity on a [`Tape`] so it can be differentiated; boxes on a tape are
//! `[1 × 6]` rows laid out as `(min_x, min_y, min_z, max_x, max_y, max_z)`.

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Tape, Tensor, TensorError, Var};

/// Default sharpness of [`mask_from_box`].
pub const MASK_SHARPNESS: f64 = 20.0;
pub const MASK_THRESHOLD: f64 = 0.5;
pub const DICE_EPS: f64 = 1e-6;
/// Added to the union volume on the tape so degenerate boxes stay finite.
pub const UNION_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("no point has mask probability above {thresh}")]
    EmptyMask { thresh: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid box: min {min:?} exceeds max {max:?}")]
    InvalidBox { min: [f64; 3], max: [f64; 3] },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3D {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeomError> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(GeomError::InvalidBox { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeomError> {
        let min = std::array::from_fn(|i| center[i] - size[i] / 2.0);
        let max = std::array::from_fn(|i| center[i] + size[i] / 2.0);
        Self::new(min, max)
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn size(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.max[i] - self.min[i])
    }

    pub fn volume(&self) -> f64 {
        self.size().iter().product()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn intersection_volume(&self, other: &Box3D) -> f64 {
        (0..3)
            .map(|i| (self.max[i].min(other.max[i]) - self.min[i].max(other.min[i])).max(0.0))
            .product()
    }

    pub fn intersects(&self, other: &Box3D) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    /// `[1 × 6]` row in tape layout.
    pub fn to_tensor(&self) -> Tensor {
        let mut v = self.min.to_vec();
        v.extend_from_slice(&self.max);
        Tensor::new([1, 6], v).unwrap()
    }

    /// Reads a tape-layout row; min/max are swapped per axis if inverted.
    pub fn from_slice(v: &[f64]) -> Self {
        let mut b = Self {
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
        };
        for i in 0..3 {
            if b.min[i] > b.max[i] {
                std::mem::swap(&mut b.min[i], &mut b.max[i]);
            }
        }
        b
    }
}

/// Per-point probabilities with a binarization threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMask {
    pub probs: Vec<f64>,
    pub threshold: f64,
}

impl PointMask {
    pub fn new(probs: Vec<f64>) -> Self {
        Self {
            probs,
            threshold: MASK_THRESHOLD,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::new(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn binarize(&self) -> Vec<bool> {
        self.probs.iter().map(|&p| p > self.threshold).collect()
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_loss(a: &Box3D, b: &Box3D) -> f64 {
    1.0 - iou3d(a, b)
}

pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64, GeomError> {
    if pred.len() != target.len() {
        return Err(GeomError::LengthMismatch(pred.len(), target.len()));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = pred.iter().sum();
    let st: f64 = target.iter().sum();
    Ok(1.0 - (2.0 * inter + eps) / (sp + st + eps))
}

/// Bounding box of the points whose probability exceeds `thresh`.
pub fn box_from_mask(mask: &PointMask, points: &Tensor, thresh: f64) -> Result<Box3D, GeomError> {
    if points.rows() != mask.len() {
        return Err(GeomError::LengthMismatch(mask.len(), points.rows()));
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (i, &p) in mask.probs.iter().enumerate() {
        if p > thresh {
            any = true;
            let row = points.row(i);
            for a in 0..3 {
                min[a] = min[a].min(row[a]);
                max[a] = max[a].max(row[a]);
            }
        }
    }
    if !any {
        return Err(GeomError::EmptyMask { thresh });
    }
    Box3D::new(min, max)
}

/// `σ(k · m)` per point, where `m` is the signed distance to the nearest face
/// (positive inside).
pub fn mask_from_box(b: &Box3D, points: &Tensor, k: f64) -> PointMask {
    let probs = (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let margin = (0..3)
                .flat_map(|a| [p[a] - b.min[a], b.max[a] - p[a]])
                .fold(f64::INFINITY, f64::min);
            tensor::sigmoid_scalar(k * margin)
        })
        .collect();
    PointMask::new(probs)
}

fn axis_extents(tape: &mut Tape, bx: Var) -> tensor::Result<(Var, Var)> {
    let lo = tape.slice_cols(bx, 0, 3)?;
    let hi = tape.slice_cols(bx, 3, 6)?;
    Ok((lo, hi))
}

fn product3(tape: &mut Tape, v: Var) -> tensor::Result<Var> {
    let x = tape.slice_cols(v, 0, 1)?;
    let y = tape.slice_cols(v, 1, 2)?;
    let z = tape.slice_cols(v, 2, 3)?;
    let xy = tape.mul(x, y)?;
    tape.mul(xy, z)
}

fn check_box_var(tape: &Tape, bx: Var, op: &'static str) -> tensor::Result<()> {
    if tape.shape(bx) != [1, 6] {
        return Err(TensorError::InvalidShape {
            op,
            shape: tape.shape(bx).to_vec(),
            reason: "box rows are [1 × 6]".into(),
        });
    }
    Ok(())
}

/// `1 − IoU` of two tape boxes, shape `[1]`. Intersection extents are clamped at 0.
pub fn iou_loss_var(tape: &mut Tape, a: Var, b: Var) -> tensor::Result<Var> {
    check_box_var(tape, a, "iou_loss_var")?;
    check_box_var(tape, b, "iou_loss_var")?;
    let (alo, ahi) = axis_extents(tape, a)?;
    let (blo, bhi) = axis_extents(tape, b)?;
    let lo = tape.maximum(alo, blo)?;
    let hi = tape.minimum(ahi, bhi)?;
    let ext = tape.sub(hi, lo)?;
    let ext = tape.relu(ext)?;
    let inter = product3(tape, ext)?;
    let sa = tape.sub(ahi, alo)?;
    let va = product3(tape, sa)?;
    let sb = tape.sub(bhi, blo)?;
    let vb = product3(tape, sb)?;
    let union = tape.add(va, vb)?;
    let union = tape.sub(union, inter)?;
    let union = tape.add_scalar(union, UNION_EPS)?;
    let iou = tape.div(inter, union)?;
    let neg = tape.neg(iou)?;
    let loss = tape.add_scalar(neg, 1.0)?;
    tape.reshape(loss, &[1])
}

/// Dice loss of two equally shaped tape masks, shape `[1]`.
pub fn dice_loss_var(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> tensor::Result<Var> {
    let pt = tape.mul(pred, target)?;
    let inter = tape.sum(pt)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let sp = tape.sum(pred)?;
    let st = tape.sum(target)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_scalar(neg, 1.0)
}

/// Soft box membership `[n × 1]` of constant `points` `[n × 3]`, differentiable in the box.
pub fn mask_from_box_var(tape: &mut Tape, bx: Var, points: Var, k: f64) -> tensor::Result<Var> {
    check_box_var(tape, bx, "mask_from_box_var")?;
    let (lo, hi) = axis_extents(tape, bx)?;
    let neg_lo = tape.neg(lo)?;
    let d_lo = tape.add_row(points, neg_lo)?;
    let neg_p = tape.neg(points)?;
    let d_hi = tape.add_row(neg_p, hi)?;
    let all = tape.concat_cols(&[d_lo, d_hi])?;
    let margin = tape.min_last(all)?;
    let z = tape.scale(margin, k)?;
    tape.sigmoid(z)
}
