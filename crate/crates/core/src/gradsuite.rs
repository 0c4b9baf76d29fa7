//! Central-difference checks over the differentiable building blocks and
//! the full toy-model objective, each repeated over a range of seeds.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::clda::LdaParams;
use crate::dgtl::{geom_consistency_with, mask_box, DgtlConfig, DgtlState};
use crate::diffattn::{diff_attention, AttentionKind, DiffAttnConfig, DiffAttnParams};
use crate::geomloss::{dice_loss_var, iou_loss_var, Box3D, DICE_EPS};
use crate::model::{build_samples, GroundingModel, ModelConfig, ObjectiveOptions};
use crate::params::{normal, ParamError, ParamGroup, ParamStore};
use crate::rng::SplitMix64;
use crate::scenes::{Corpus, SceneConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradReport, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    DiffAttn,
    Lda,
    Dice,
    Iou,
    Geom,
    Model,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        Self::DiffAttn,
        Self::Lda,
        Self::Dice,
        Self::Iou,
        Self::Geom,
        Self::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DiffAttn => "diffattn",
            Self::Lda => "lda",
            Self::Dice => "dice",
            Self::Iou => "iou",
            Self::Geom => "geom",
            Self::Model => "model",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown gradcheck target {s:?} (expected one of diffattn, lda, dice, iou, geom, model)"))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    pub step: f64,
    pub seeds: u64,
    /// Coordinates sampled per parameter tensor for the full model.
    pub model_max_coords: usize,
    pub only: Option<GradTarget>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
            seeds: 20,
            model_max_coords: 6,
            only: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TargetResult {
    pub target: GradTarget,
    pub seeds: u64,
    pub max_rel_err: f64,
    /// Seed and parameter name of the largest error.
    pub worst: Option<(u64, String)>,
    pub passed: bool,
    pub elapsed: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("{target} seed {seed}: {source}")]
    Check {
        target: GradTarget,
        seed: u64,
        source: TensorError,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{0}")]
    Setup(String),
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<TargetResult>, SuiteError> {
    let targets: Vec<GradTarget> = match opts.only {
        Some(t) => vec![t],
        None => GradTarget::ALL.to_vec(),
    };
    targets.into_iter().map(|t| run_target(t, opts)).collect()
}

pub fn run_target(target: GradTarget, opts: &SuiteOptions) -> Result<TargetResult, SuiteError> {
    let start = Instant::now();
    let mut result = TargetResult {
        target,
        seeds: opts.seeds,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
        elapsed: Duration::ZERO,
    };
    let model_setup = if target == GradTarget::Model {
        Some(ModelSetup::new()?)
    } else {
        None
    };
    for seed in 0..opts.seeds {
        let gc = GradCheckOptions {
            step: opts.step,
            tol: opts.tol,
            seed,
            ..GradCheckOptions::default()
        };
        let rep = match target {
            GradTarget::DiffAttn => check_diffattn(seed, &gc),
            GradTarget::Lda => check_lda(seed, &gc),
            GradTarget::Dice => check_dice(seed, &gc),
            GradTarget::Iou => check_iou(seed, &gc),
            GradTarget::Geom => check_geom(seed, &gc),
            GradTarget::Model => {
                let gc = GradCheckOptions {
                    max_coords: Some(opts.model_max_coords),
                    ..gc
                };
                model_setup.as_ref().expect("model setup").check(seed, &gc)
            }
        }
        .map_err(|source| SuiteError::Check {
            target,
            seed,
            source,
        })?;
        result.passed &= rep.passed();
        if let Some(w) = rep.worst() {
            if w.max_rel_err > result.max_rel_err || result.worst.is_none() {
                result.max_rel_err = w.max_rel_err;
                result.worst = Some((seed, w.name.clone()));
            }
        }
    }
    result.elapsed = start.elapsed();
    Ok(result)
}

fn param_err(e: ParamError) -> TensorError {
    match e {
        ParamError::Tensor(t) => t,
        other => TensorError::InvalidShape {
            op: "gradsuite",
            shape: vec![],
            reason: other.to_string(),
        },
    }
}

/// Redraws the λ vectors with a wider spread so their gradients are not tiny.
fn widen_lambdas(
    store: &mut ParamStore,
    p: &DiffAttnParams,
    rng: &mut SplitMix64,
) -> Result<(), ParamError> {
    for id in p.lambda_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, normal(rng, &shape, 0.5))?;
    }
    Ok(())
}

fn check_diffattn(seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let mut cfg = DiffAttnConfig::new(8, 2);
    cfg.head_ln = seed.is_multiple_of(2);
    let p = DiffAttnParams::new(&mut store, "attn", cfg, ParamGroup::Rest, &mut rng)
        .map_err(param_err)?;
    widen_lambdas(&mut store, &p, &mut rng).map_err(param_err)?;
    let xq = normal(&mut rng, &[3, 8], 1.0);
    let xkv = normal(&mut rng, &[5, 8], 1.0);
    let w = normal(&mut rng, &[3, 8], 1.0);
    store
        .grad_check(
            None,
            |tape, bind| {
                let a = tape.constant(xq.clone());
                let b = tape.constant(xkv.clone());
                let o = diff_attention(tape, bind, a, b, &p)?;
                let w = tape.constant(w.clone());
                let y = tape.mul(o.out, w)?;
                tape.sum(y)
            },
            gc,
        )
        .map_err(param_err)
}

fn check_lda(seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
    let mut rng = SplitMix64::new(seed.wrapping_add(1000));
    let mut store = ParamStore::new();
    let p = LdaParams::new(
        &mut store,
        "lda",
        DiffAttnConfig::new(8, 2),
        seed.is_multiple_of(2),
        &mut rng,
    )
    .map_err(param_err)?;
    widen_lambdas(&mut store, &p.attn, &mut rng).map_err(param_err)?;
    let xq = normal(&mut rng, &[4, 8], 1.0);
    let xkv = normal(&mut rng, &[3, 8], 1.0);
    let w = normal(&mut rng, &[4, 8], 1.0);
    store
        .grad_check(
            None,
            |tape, bind| {
                let a = tape.constant(xq.clone());
                let b = tape.constant(xkv.clone());
                let o = crate::clda::lda_block(tape, bind, AttentionKind::Differential, a, b, &p)?;
                let w = tape.constant(w.clone());
                let y = tape.mul(o.out, w)?;
                tape.sum(y)
            },
            gc,
        )
        .map_err(param_err)
}

fn check_dice(seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
    let mut rng = SplitMix64::new(seed.wrapping_add(2000));
    let n = 6 + rng.below(10);
    let logits = normal(&mut rng, &[n, 1], 1.5);
    let target = Tensor::new(
        [n, 1],
        (0..n)
            .map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    grad_check(
        &[("logits".into(), logits)],
        |tape, v| {
            let p = tape.sigmoid(v[0])?;
            let t = tape.constant(target.clone());
            dice_loss_var(tape, p, t, DICE_EPS)
        },
        gc,
    )
}

/// Two boxes that overlap on every axis without sharing a face.
fn overlapping_pair(rng: &mut SplitMix64) -> (Box3D, Box3D) {
    loop {
        let draw = |rng: &mut SplitMix64| {
            let c = [
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
            ];
            let s = [
                rng.uniform(0.6, 1.6),
                rng.uniform(0.6, 1.6),
                rng.uniform(0.6, 1.6),
            ];
            Box3D::from_center_size(c, s).expect("positive size")
        };
        let (a, b) = (draw(rng), draw(rng));
        let separated = (0..3).all(|i| {
            [
                a.min[i] - b.min[i],
                a.max[i] - b.max[i],
                a.min[i] - b.max[i],
                a.max[i] - b.min[i],
            ]
            .iter()
            .all(|d| d.abs() > 1e-3)
        });
        if separated {
            return (a, b);
        }
    }
}

fn check_iou(seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
    let mut rng = SplitMix64::new(seed.wrapping_add(3000));
    let (a, b) = overlapping_pair(&mut rng);
    grad_check(
        &[("a".into(), a.to_tensor()), ("b".into(), b.to_tensor())],
        |tape, v| iou_loss_var(tape, v[0], v[1]),
        gc,
    )
}

fn check_geom(seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
    let mut rng = SplitMix64::new(seed.wrapping_add(4000));
    let n = 40;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ]
        })
        .collect();
    let points = Tensor::from_points(&pts)?;
    let (bx, _) = overlapping_pair(&mut rng);
    let logits = normal(&mut rng, &[n, 1], 2.0);
    let mut state = DgtlState::new(&DgtlConfig::default(), 10);
    state.step = 10;
    // The mask-derived box is a hard threshold, constant around the base point.
    let b_mask = {
        let mut tape = crate::tensor::Tape::new();
        let l = tape.constant(logits.clone());
        let m = tape.sigmoid(l)?;
        mask_box(&tape, m, &points).unwrap_or(bx)
    };
    grad_check(
        &[
            ("box".into(), bx.to_tensor()),
            ("mask_logits".into(), logits),
        ],
        |tape, v| {
            let m = tape.sigmoid(v[1])?;
            geom_consistency_with(tape, &state, v[0], m, &points, &b_mask).map_err(|e| {
                TensorError::InvalidShape {
                    op: "geom_consistency",
                    shape: vec![],
                    reason: e.to_string(),
                }
            })
        },
        gc,
    )
}

/// Tiny model configuration and samples shared across seeds.
struct ModelSetup {
    cfg: ModelConfig,
    samples: Vec<crate::model::GroundingSample>,
}

impl ModelSetup {
    fn new() -> Result<Self, SuiteError> {
        let cfg = ModelConfig {
            d_model: 8,
            n_sem: 4,
            group_k: 3,
            n_clust: 4,
            k_graph: 2,
            n_points: 64,
            ..ModelConfig::default()
        };
        let sc = SceneConfig {
            n_points: cfg.n_points,
            ..SceneConfig::default()
        };
        let corpus =
            Corpus::generate(5, 4, 1, &sc).map_err(|e| SuiteError::Setup(e.to_string()))?;
        let samples = build_samples(&corpus, &cfg).map_err(|e| SuiteError::Setup(e.to_string()))?;
        Ok(Self { cfg, samples })
    }

    fn check(&self, seed: u64, gc: &GradCheckOptions) -> Result<GradReport, TensorError> {
        let model_err = |e: crate::model::ModelError| TensorError::InvalidShape {
            op: "model objective",
            shape: vec![],
            reason: e.to_string(),
        };
        let mut model = GroundingModel::new(self.cfg.clone(), seed).map_err(model_err)?;
        let s = &self.samples[seed as usize % self.samples.len()];
        let mut rng = SplitMix64::new(seed.wrapping_add(5000));
        // Zero-initialized biases put the centroid rows (relative coordinate
        // zero) exactly on a ReLU kink; check at a nearby generic point.
        for e in model.store.entries_mut() {
            let noise = normal(&mut rng, e.value.shape(), 0.05);
            for (x, n) in e.value.data_mut().iter_mut().zip(noise.data()) {
                *x += n;
            }
        }
        let mut state = DgtlState::new(&DgtlConfig::default(), 10);
        state.step = 10;
        state.v = (0..state.v.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let fixed = {
            let mut tape = crate::tensor::Tape::new();
            let bind = model.store.bind_frozen(&mut tape);
            let f = model.forward(&mut tape, &bind, s).map_err(model_err)?;
            mask_box(&tape, f.mask, &s.xyz).unwrap_or(s.gt_box)
        };
        model
            .store
            .grad_check(
                None,
                |tape, bind| {
                    let o = model
                        .objective(
                            tape,
                            bind,
                            s,
                            &state,
                            None,
                            ObjectiveOptions {
                                snapshots: false,
                                fixed_mask_box: Some(&fixed),
                            },
                        )
                        .map_err(model_err)?;
                    Ok(o.total)
                },
                gc,
            )
            .map_err(param_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_parse_by_name() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!("attention".parse::<GradTarget>().is_err());
    }

    #[test]
    fn zero_tolerance_fails() {
        let opts = SuiteOptions {
            tol: 0.0,
            seeds: 1,
            only: Some(GradTarget::Iou),
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed);
    }
}
