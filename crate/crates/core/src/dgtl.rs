//! Task-harmonized multi-task loss.
//!
//! ```text
//! L = Σ_det w_i·L_i + Σ_seg w_j·L_j + P + L_geom
//! w_i    = max(exp(−v_i), λ_i)
//! P      = η(t) · Σ_{i∈det, j∈seg} ρ_ij · 1[cos θ_ij < τ] · (τ − cos θ_ij)
//! L_geom = ζ(t) · [IoU(B_loc, box(M)) + Dice(M, mask(B_loc))]
//! ```
//!
//! Gradient snapshots enter `P` as constants, so `P` shifts the loss value but
//! contributes no gradient of its own.

use std::fmt;

use serde::Serialize;

use crate::geomloss::{
    box_from_mask, dice_loss_var, iou_loss_var, mask_from_box_var, Box3D, GeomError, PointMask,
    DICE_EPS,
};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

/// Norms below this make a cosine undefined; such pairs count as aligned.
pub const COS_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BoxL1,
    BoxIou,
    Class,
    MaskBce,
    MaskDice,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        Self::BoxL1,
        Self::BoxIou,
        Self::Class,
        Self::MaskBce,
        Self::MaskDice,
    ];
    pub const DET: [TaskKind; 3] = [Self::BoxL1, Self::BoxIou, Self::Class];
    pub const SEG: [TaskKind; 2] = [Self::MaskBce, Self::MaskDice];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_det(self) -> bool {
        matches!(self, Self::BoxL1 | Self::BoxIou | Self::Class)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BoxL1 => "box_l1",
            Self::BoxIou => "box_iou",
            Self::Class => "class",
            Self::MaskBce => "mask_bce",
            Self::MaskDice => "mask_dice",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear warm-up `ζ(t) = min(t/T_warm, 1)` and decay `η(t) = max(1 − t/T_decay, η_min)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub t_warm: f64,
    pub t_decay: f64,
    pub eta_min: f64,
}

impl Schedule {
    /// Lengths are rounded to whole steps.
    pub fn from_fractions(total_steps: u64, warm_frac: f64, decay_frac: f64, eta_min: f64) -> Self {
        Self {
            t_warm: (warm_frac * total_steps as f64).round(),
            t_decay: (decay_frac * total_steps as f64).round(),
            eta_min,
        }
    }

    pub fn zeta(&self, t: u64) -> f64 {
        if self.t_warm <= 0.0 {
            return 1.0;
        }
        (t as f64 / self.t_warm).clamp(0.0, 1.0)
    }

    pub fn eta(&self, t: u64) -> f64 {
        if self.t_decay <= 0.0 {
            return self.eta_min.clamp(0.0, 1.0);
        }
        (1.0 - t as f64 / self.t_decay)
            .max(self.eta_min)
            .clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgtlConfig {
    pub tau: f64,
    pub rho: f64,
    pub lambda_floor: f64,
    pub t_warm_frac: f64,
    pub t_decay_frac: f64,
    pub eta_min: f64,
    /// Sharpness of the box-derived soft mask.
    pub mask_k: f64,
}

impl Default for DgtlConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            rho: 1.0,
            lambda_floor: 0.1,
            t_warm_frac: 0.2,
            t_decay_frac: 1.0,
            eta_min: 0.0,
            mask_k: crate::geomloss::MASK_SHARPNESS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgtlState {
    /// Learnable, one per [`TaskKind::ALL`] entry.
    pub v: Vec<f64>,
    pub lambda_floor: Vec<f64>,
    pub tau: f64,
    /// `rho[i][j]` for det task `i` and seg task `j` in [`TaskKind::DET`]/[`TaskKind::SEG`] order.
    pub rho: Vec<Vec<f64>>,
    pub schedule: Schedule,
    pub mask_k: f64,
    pub step: u64,
}

impl DgtlState {
    pub fn new(cfg: &DgtlConfig, total_steps: u64) -> Self {
        let n = TaskKind::ALL.len();
        Self {
            v: vec![0.0; n],
            lambda_floor: vec![cfg.lambda_floor; n],
            tau: cfg.tau,
            rho: vec![vec![cfg.rho; TaskKind::SEG.len()]; TaskKind::DET.len()],
            schedule: Schedule::from_fractions(
                total_steps,
                cfg.t_warm_frac,
                cfg.t_decay_frac,
                cfg.eta_min,
            ),
            mask_k: cfg.mask_k,
            step: 0,
        }
    }

    pub fn zeta(&self) -> f64 {
        self.schedule.zeta(self.step)
    }

    pub fn eta(&self) -> f64 {
        self.schedule.eta(self.step)
    }

    pub fn weights(&self) -> Vec<f64> {
        TaskKind::ALL
            .iter()
            .map(|t| task_weight(self, t.index()))
            .collect()
    }
}

pub fn task_weight(state: &DgtlState, i: usize) -> f64 {
    (-state.v[i]).exp().max(state.lambda_floor[i])
}

pub fn grad_cosine(gi: &[f64], gj: &[f64]) -> f64 {
    assert_eq!(gi.len(), gj.len(), "snapshots must share one length");
    let dot: f64 = gi.iter().zip(gj).map(|(a, b)| a * b).sum();
    let ni = gi.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nj = gj.iter().map(|a| a * a).sum::<f64>().sqrt();
    if ni < COS_NORM_FLOOR || nj < COS_NORM_FLOOR {
        return 1.0;
    }
    (dot / (ni * nj)).clamp(-1.0, 1.0)
}

/// Flattened gradient of one task loss over the shared representation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSnapshot {
    pub task: TaskKind,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCosine {
    pub det: TaskKind,
    pub seg: TaskKind,
    pub cos: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub pairs: Vec<PairCosine>,
}

/// `τ − cos` below the threshold, zero above it.
pub fn hinge(tau: f64, cos: f64) -> f64 {
    if cos < tau {
        tau - cos
    } else {
        0.0
    }
}

/// Conflict penalty from per-task snapshots. Tasks without a snapshot are skipped.
pub fn conflict_penalty(state: &DgtlState, snaps: &[GradSnapshot]) -> Penalty {
    let find = |t: TaskKind| snaps.iter().find(|s| s.task == t);
    let mut pairs = Vec::new();
    let mut sum = 0.0;
    for (i, &det) in TaskKind::DET.iter().enumerate() {
        let Some(gi) = find(det) else { continue };
        for (j, &seg) in TaskKind::SEG.iter().enumerate() {
            let Some(gj) = find(seg) else { continue };
            let cos = grad_cosine(&gi.grad, &gj.grad);
            sum += state.rho[i][j] * hinge(state.tau, cos);
            pairs.push(PairCosine {
                det,
                seg,
                cos,
                active: cos < state.tau,
            });
        }
    }
    Penalty {
        value: state.eta() * sum,
        pairs,
    }
}

/// `P` from explicit cosines (row-major det × seg), for callers that already have them.
pub fn penalty_from_cosines(state: &DgtlState, cos: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for (i, row) in cos.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            sum += state.rho[i][j] * hinge(state.tau, c);
        }
    }
    state.eta() * sum
}

/// Geometry consistency on the tape, shape `[1]`.
///
/// `bx` is the predicted box row `[1 × 6]`, `mask` the predicted mask `[n × 1]`
/// and `points` the scene coordinates `[n × 3]`. The mask-derived box is a
/// hard threshold of the current mask and enters as a constant.
pub fn geom_consistency(
    tape: &mut Tape,
    state: &DgtlState,
    bx: Var,
    mask: Var,
    points: &Tensor,
) -> Result<Var, GeomError> {
    let b_mask = mask_box(tape, mask, points)?;
    geom_consistency_with(tape, state, bx, mask, points, &b_mask)
}

/// Hard box of the current mask value, the constant target of the IoU half.
pub fn mask_box(tape: &Tape, mask: Var, points: &Tensor) -> Result<Box3D, GeomError> {
    let m = PointMask::new(tape.value(mask).data().to_vec());
    box_from_mask(&m, points, m.threshold)
}

/// [`geom_consistency`] with the mask-derived box supplied by the caller.
pub fn geom_consistency_with(
    tape: &mut Tape,
    state: &DgtlState,
    bx: Var,
    mask: Var,
    points: &Tensor,
    b_mask: &Box3D,
) -> Result<Var, GeomError> {
    let b_mask = tape.constant(b_mask.to_tensor());
    let l_iou = iou_loss_var(tape, bx, b_mask)?;
    let pts = tape.constant(points.clone());
    let m_box = mask_from_box_var(tape, bx, pts, state.mask_k)?;
    let l_dice = dice_loss_var(tape, mask, m_box, DICE_EPS)?;
    let sum = tape.add(l_iou, l_dice)?;
    Ok(tape.scale(sum, state.zeta())?)
}

/// Per-task weights on the tape from the `[1 × n_tasks]` leaf `v`.
pub fn weight_vars(tape: &mut Tape, state: &DgtlState, v: Var) -> tensor::Result<Var> {
    let neg = tape.neg(v)?;
    let e = tape.exp(neg)?;
    let floor = tape.constant(Tensor::new(
        tape.shape(v).to_vec(),
        state.lambda_floor.clone(),
    )?);
    tape.maximum(e, floor)
}

#[derive(Debug, thiserror::Error)]
pub enum DgtlError {
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Assembles the total loss. `losses` holds `[1]`-shaped task losses; `v` is
/// the `[1 × n_tasks]` weight leaf (or `None` for an unweighted sum);
/// `penalty` is added as a constant.
pub fn dgtl_total(
    tape: &mut Tape,
    state: &DgtlState,
    v: Option<Var>,
    losses: &[(TaskKind, Var)],
    penalty: f64,
    geom: Option<Var>,
) -> Result<Var, DgtlError> {
    let bad: Vec<String> = losses
        .iter()
        .filter(|(_, l)| !tape.item(*l).is_finite())
        .map(|(t, l)| format!("{t}={}", tape.item(*l)))
        .collect();
    if !bad.is_empty() || !penalty.is_finite() {
        return Err(DgtlError::NonFinite(format!(
            "{} penalty={penalty}",
            bad.join(" ")
        )));
    }
    let w = match v {
        Some(v) => Some(weight_vars(tape, state, v)?),
        None => None,
    };
    let mut total: Option<Var> = None;
    for &(task, l) in losses {
        let term = match w {
            Some(w) => {
                let wi = tape.slice_cols(w, task.index(), task.index() + 1)?;
                tape.mul_scalar(l, wi)?
            }
            None => l,
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let mut total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    if let Some(g) = geom {
        total = tape.add(total, g)?;
    }
    Ok(tape.add_scalar(total, penalty)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> DgtlState {
        DgtlState::new(&DgtlConfig::default(), 100)
    }

    #[test]
    fn weight_examples() {
        let mut s = state();
        s.lambda_floor[0] = 0.5;
        assert_eq!(task_weight(&s, 0), 1.0);
        s.v[0] = 1e6;
        assert_eq!(task_weight(&s, 0), 0.5);
        s.v[1] = 1.0;
        assert!((task_weight(&s, 1) - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        assert!((grad_cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((grad_cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(grad_cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(grad_cosine(&[0.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn penalty_examples() {
        let mut s = state();
        s.rho = vec![vec![1.0]];
        assert_eq!(penalty_from_cosines(&s, &[vec![0.0]]), 0.5);
        assert_eq!(penalty_from_cosines(&s, &[vec![0.7]]), 0.0);
        s.rho = vec![vec![1.0, 1.0]];
        s.step = 50;
        assert_eq!(s.eta(), 0.5);
        assert_eq!(penalty_from_cosines(&s, &[vec![-1.0, 0.6]]), 0.75);

        let snaps = vec![
            GradSnapshot {
                task: TaskKind::BoxL1,
                grad: vec![1.0, 0.0],
            },
            GradSnapshot {
                task: TaskKind::MaskBce,
                grad: vec![0.0, 1.0],
            },
        ];
        let s = state();
        let p = conflict_penalty(&s, &snaps);
        assert_eq!(p.value, 0.5);
        assert_eq!(p.pairs.len(), 1);
        assert!(p.pairs[0].active);
    }

    #[test]
    fn schedules() {
        let s = Schedule::from_fractions(100, 0.2, 1.0, 0.0);
        assert_eq!(s.zeta(0), 0.0);
        assert_eq!(s.zeta(10), 0.5);
        assert_eq!(s.zeta(20), 1.0);
        assert_eq!(s.zeta(500), 1.0);
        assert_eq!(s.eta(0), 1.0);
        assert_eq!(s.eta(100), 0.0);
        assert_eq!(s.eta(1000), 0.0);
    }

    fn cube_scene() -> (Tensor, Box3D) {
        let mut pts = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    pts.push([i as f64 * 0.5, j as f64 * 0.5, k as f64 * 0.5]);
                }
            }
        }
        pts.push([3.0, 3.0, 3.0]);
        (
            Tensor::from_points(&pts).unwrap(),
            Box3D::new([0.0; 3], [1.0; 3]).unwrap(),
        )
    }

    #[test]
    fn geometry_term_is_zero_at_start_of_warmup() {
        let (pts, b) = cube_scene();
        let s = state();
        let mut tape = Tape::new();
        let bx = tape.leaf(b.to_tensor().with_grad());
        let m = tape.constant(Tensor::full([pts.rows(), 1], 0.9));
        let g = geom_consistency(&mut tape, &s, bx, m, &pts).unwrap();
        assert_eq!(tape.item(g), 0.0);
    }

    #[test]
    fn consistent_pair_has_small_geometry_term() {
        let (pts, _) = cube_scene();
        // box a little larger than the selected grid so every member sits inside
        let b = Box3D::new([-0.05; 3], [1.05; 3]).unwrap();
        let mut s = state();
        s.step = 100;
        s.mask_k = 2000.0;
        let hard: Vec<f64> = (0..pts.rows())
            .map(|i| if i < 27 { 1.0 } else { 0.0 })
            .collect();
        let mut tape = Tape::new();
        let bx = tape.constant(b.to_tensor());
        let m = tape.constant(Tensor::new([pts.rows(), 1], hard).unwrap());
        let g = geom_consistency(&mut tape, &s, bx, m, &pts).unwrap();
        // remaining IoU gap comes from the 0.05 padding
        let tight = Box3D::new([0.0; 3], [1.0; 3]).unwrap();
        let want = crate::geomloss::iou_loss(&b, &tight);
        assert!(
            (tape.item(g) - want).abs() < 1e-6,
            "{} vs {want}",
            tape.item(g)
        );
    }

    #[test]
    fn total_reduces_to_single_loss() {
        let s = state();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(2.5));
        let v = tape.leaf(Tensor::zeros([1, 5]).with_grad());
        let t = dgtl_total(&mut tape, &s, Some(v), &[(TaskKind::BoxL1, l)], 0.0, None).unwrap();
        assert_eq!(tape.item(t), 2.5);
        let z = tape.constant(Tensor::scalar(0.0));
        let t = dgtl_total(&mut tape, &s, Some(v), &[(TaskKind::BoxL1, z)], 0.3, None).unwrap();
        assert_eq!(tape.item(t), 0.3);
        let nan = tape.constant(Tensor::scalar(f64::INFINITY));
        assert!(dgtl_total(&mut tape, &s, Some(v), &[(TaskKind::Class, nan)], 0.0, None).is_err());
    }
}
