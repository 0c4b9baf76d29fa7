//! The grounding model: toy point and text encoders, coarse and fine
//! cross-modal alignment, and box, mask and class heads.

mod checkpoint;
mod sample;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sample::{build_samples, GroundingSample, Hierarchy};
pub use train::{evaluate, Evaluation, Prediction, StepMetrics, TrainConfig, Trainer};

use crate::clda::{clda_forward, CldaConfig, CldaError, CldaOutput, CldaParams};
use crate::dgtl::{
    dgtl_total, geom_consistency_with, mask_box, DgtlError, DgtlState, GradSnapshot, TaskKind,
};
use crate::diffattn::{
    multi_head_attention, AttentionKind, DiffAttnConfig, DiffAttnOutput, MhaParams,
};
use crate::geomloss::{dice_loss_var, iou_loss_var, Box3D, GeomError, DICE_EPS};
use crate::params::{
    normal, Binding, LayerNormParams, Linear, Mlp, ParamError, ParamGroup, ParamId, ParamStore,
};
use crate::plda::{
    fuse_multiscale, max_pool_text, plda_forward, FusionParams, MaxBlockSource, PldaParams,
};
use crate::rng::SplitMix64;
use crate::scenes::{ObjectClass, Vocab};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Point features fed to the encoder: xyz then rgb.
pub const POINT_FEATURES: usize = 6;
/// Fine points per scale-3 token.
pub const SCALE3_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_sem: usize,
    pub group_k: usize,
    pub max_tokens: usize,
    pub decoder_layers: usize,
    pub attention: AttentionKind,
    pub plda_enabled: bool,
    pub plda_heads: usize,
    pub head_ln: bool,
    pub max_block_source: MaxBlockSource,
    pub clda_enabled: bool,
    pub clda_heads: usize,
    pub n_clust: usize,
    pub k_graph: usize,
    pub fps_random_start: bool,
    pub n_points: usize,
    pub dgtl_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_sem: 16,
            group_k: 8,
            max_tokens: 16,
            decoder_layers: 1,
            attention: AttentionKind::Differential,
            plda_enabled: true,
            plda_heads: 2,
            head_ln: true,
            max_block_source: MaxBlockSource::Kv2t,
            clda_enabled: true,
            clda_heads: 2,
            n_clust: 8,
            k_graph: 4,
            fps_random_start: false,
            n_points: 256,
            dgtl_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn n3(&self) -> usize {
        self.n_points / SCALE3_STRIDE
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let d = self.d_model;
        for (what, h) in [("plda", self.plda_heads), ("clda", self.clda_heads)] {
            if h == 0 || !d.is_multiple_of(2 * h) {
                return Err(format!(
                    "{what}: d_model {d} is not divisible by 2 * {h} heads"
                ));
            }
        }
        let n3 = self.n3();
        if n3 == 0 || self.n_sem == 0 || self.n_sem > n3 {
            return Err(format!(
                "need 0 < n_sem ({}) <= n_points / {SCALE3_STRIDE} ({n3})",
                self.n_sem
            ));
        }
        if self.group_k == 0 || self.group_k > n3 || self.group_k > self.n_points {
            return Err(format!("group_k {} exceeds a scale size", self.group_k));
        }
        if self.n_clust == 0 || !self.n_points.is_multiple_of(self.n_clust) {
            return Err(format!(
                "n_points {} is not divisible by n_clust {}",
                self.n_points, self.n_clust
            ));
        }
        if self.k_graph >= self.n_clust {
            return Err(format!(
                "k_graph {} must be below n_clust {}",
                self.k_graph, self.n_clust
            ));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Clda(#[from] CldaError),
    #[error(transparent)]
    Dgtl(#[from] DgtlError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid model input: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug)]
pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc2: Mlp,
    pub enc3: Linear,
    pub enc4: Linear,
    pub embed: ParamId,
    pub pos: ParamId,
    pub plda: PldaParams,
    pub fusion: FusionParams,
    pub text_proj: Linear,
    pub clda: CldaParams,
    /// Cross-attention and norm used when CLDA is disabled.
    pub cross: (MhaParams, LayerNormParams),
    pub decoder: Vec<Mlp>,
    pub query: Linear,
    pub mask_bias: ParamId,
    pub box_head: Mlp,
    pub cls_head: Linear,
}

/// Everything the heads produce plus the shared trunk representations.
pub struct Forward {
    /// `[n × 1]` mask logits.
    pub scores: Var,
    /// `[n × 1]` mask probabilities.
    pub mask: Var,
    /// `[1 × 6]` as min then max corner.
    pub bbox: Var,
    /// `[1 × n_classes]`
    pub logits: Var,
    pub visual: Var,
    pub text: Var,
    pub plda_v2t: Option<DiffAttnOutput>,
    pub plda_t2v: Option<DiffAttnOutput>,
    pub clda: Option<CldaOutput>,
}

/// Per-sample objective before the batch-level conflict penalty.
pub struct Objective {
    pub total: Var,
    pub losses: Vec<(TaskKind, Var)>,
    pub geom: Option<Var>,
    /// The mask had no point above threshold, so the geometry term was dropped.
    pub geom_skipped: bool,
    pub snapshots: Vec<GradSnapshot>,
    pub fwd: Forward,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveOptions<'a> {
    pub snapshots: bool,
    /// Use this box as the mask-derived geometry target instead of recomputing it.
    pub fixed_mask_box: Option<&'a Box3D>,
}

fn p(name: &str, part: &str) -> String {
    format!("{name}.{part}")
}

impl GroundingModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(ModelError::Invalid)?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let enc = ParamGroup::Encoder;
        let rest = ParamGroup::Rest;
        let n_vocab = Vocab::default().len();
        let n_classes = ObjectClass::ALL.len();

        let enc2 = Mlp::new(
            &mut store,
            "enc.point",
            [POINT_FEATURES, d, d],
            enc,
            &mut rng,
        )?;
        let enc3 = Linear::new(&mut store, "enc.scale3", d + 3, d, true, enc, &mut rng)?;
        let enc4 = Linear::new(&mut store, "enc.scale4", d + 3, d, true, enc, &mut rng)?;
        let embed = store.add("enc.embed", normal(&mut rng, &[n_vocab, d], 1.0), enc)?;
        let pos = store.add("enc.pos", normal(&mut rng, &[cfg.max_tokens, d], 0.1), enc)?;

        let mut pc = DiffAttnConfig::new(d, cfg.plda_heads);
        pc.head_ln = cfg.head_ln;
        let plda = PldaParams::new(&mut store, "plda", pc, &mut rng)?;
        let fusion = FusionParams::new(&mut store, "fusion", d, d, d, d, &mut rng)?;
        let text_proj = Linear::new(&mut store, "text_proj", d, d, true, rest, &mut rng)?;

        let mut cc = CldaConfig::new(d, cfg.clda_heads, cfg.n_clust, cfg.k_graph);
        cc.head_ln = cfg.head_ln;
        let clda = CldaParams::new(&mut store, "clda", cc, &mut rng)?;
        let cross = (
            MhaParams::new(&mut store, "cross.attn", d, cfg.clda_heads, rest, &mut rng)?,
            LayerNormParams::new(&mut store, "cross.ln", d, rest)?,
        );
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                Mlp::new(
                    &mut store,
                    &p("decoder", &i.to_string()),
                    [d, d, d],
                    rest,
                    &mut rng,
                )
            })
            .collect::<std::result::Result<_, _>>()?;

        let query = Linear::new(&mut store, "head.query", d, d, true, rest, &mut rng)?;
        let mask_bias = store.add("head.mask_bias", Tensor::zeros([1]), rest)?;
        let box_head = Mlp::new(&mut store, "head.box", [d, d, 6], rest, &mut rng)?;
        let cls_head = Linear::new(&mut store, "head.cls", d, n_classes, true, rest, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            enc2,
            enc3,
            enc4,
            embed,
            pos,
            plda,
            fusion,
            text_proj,
            clda,
            cross,
            decoder,
            query,
            mask_bias,
            box_head,
            cls_head,
        })
    }

    /// Scalar counts per top-level component.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in self.store.entries() {
            let top = e.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(n, _)| *n == top) {
                Some((_, c)) => *c += e.value.numel(),
                None => out.push((top, e.value.numel())),
            }
        }
        out
    }

    /// Encodes points at three scales and the tokens.
    fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        s: &GroundingSample,
    ) -> Result<(Var, Var, Var, Var)> {
        let h = &s.hierarchy;
        let feats = tape.constant(s.features.clone());
        let fv2 = self.enc2.forward(tape, bind, feats)?;
        let fv3 = pool_groups(tape, bind, fv2, &h.group3, &h.rel3, h.k, &self.enc3)?;
        let fv4 = pool_groups(tape, bind, fv3, &h.group4, &h.rel4, h.k, &self.enc4)?;
        let emb = tape.gather_rows(bind[self.embed], &s.tokens)?;
        let pos = tape.slice_rows(bind[self.pos], 0, s.tokens.len())?;
        let ft = tape.add(emb, pos)?;
        Ok((fv2, fv3, fv4, ft))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, s: &GroundingSample) -> Result<Forward> {
        let cfg = &self.cfg;
        let kind = cfg.attention;
        let (fv2, fv3, fv4, ft) = self.encode(tape, bind, s)?;
        let h = &s.hierarchy;

        let (k_v2t, text, plda_v2t, plda_t2v) = if cfg.plda_enabled {
            let out = plda_forward(tape, bind, kind, fv4, ft, &self.plda)?;
            let src = cfg.max_block_source.select(fv4, ft, &out);
            let pooled = max_pool_text(tape, bind, src, &self.fusion)?;
            let t = tape.add(ft, out.k_t2v)?;
            let t = self.text_proj.forward(tape, bind, t)?;
            let t = tape.add_row(t, pooled)?;
            (out.k_v2t, t, out.trace_v2t, out.trace_t2v)
        } else {
            (fv4, self.text_proj.forward(tape, bind, ft)?, None, None)
        };
        let fused = fuse_multiscale(
            tape,
            bind,
            k_v2t,
            fv3,
            fv2,
            &h.parent3,
            &h.parent2,
            &self.fusion,
        )?;

        let (mut visual, text, clda) = if cfg.clda_enabled {
            let out = clda_forward(
                tape,
                bind,
                kind,
                fused,
                text,
                &s.xyz,
                s.fps_start,
                &self.clda,
            )?;
            (out.visual, out.text, Some(out))
        } else {
            let a = multi_head_attention(tape, bind, fused, text, &self.cross.0)?;
            let x = tape.add(fused, a)?;
            (self.cross.1.forward(tape, bind, x)?, text, None)
        };
        for layer in &self.decoder {
            let r = layer.forward(tape, bind, visual)?;
            visual = tape.add(visual, r)?;
        }

        let pooled = tape.max_rows(text)?;
        let q = self.query.forward(tape, bind, pooled)?;
        let qt = tape.transpose(q)?;
        let scores = tape.matmul(visual, qt)?;
        let scores = tape.scale(scores, 1.0 / (cfg.d_model as f64).sqrt())?;
        let scores = tape.add_row(scores, bind[self.mask_bias])?;
        let mask = tape.sigmoid(scores)?;

        let st = tape.transpose(scores)?;
        let attn = tape.softmax_rows(st)?;
        let xyz = tape.constant(s.xyz.clone());
        let centre = tape.matmul(attn, xyz)?;
        let f = tape.matmul(attn, visual)?;
        let raw = self.box_head.forward(tape, bind, f)?;
        let off = tape.slice_cols(raw, 0, 3)?;
        let size = tape.slice_cols(raw, 3, 6)?;
        let size = tape.softplus(size)?;
        let half = tape.scale(size, 0.5)?;
        let c = tape.add(centre, off)?;
        let lo = tape.sub(c, half)?;
        let hi = tape.add(c, half)?;
        let bbox = tape.concat_cols(&[lo, hi])?;
        let logits = self.cls_head.forward(tape, bind, pooled)?;

        Ok(Forward {
            scores,
            mask,
            bbox,
            logits,
            visual,
            text,
            plda_v2t,
            plda_t2v,
            clda,
        })
    }

    /// Task losses, each `[1]`, in [`TaskKind::ALL`] order.
    pub fn task_losses(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        s: &GroundingSample,
    ) -> Result<Vec<(TaskKind, Var)>> {
        let gt_box = tape.constant(s.gt_box.to_tensor());
        let diff = tape.sub(fwd.bbox, gt_box)?;
        let diff = tape.abs(diff)?;
        let l1 = tape.mean(diff)?;
        let iou = iou_loss_var(tape, fwd.bbox, gt_box)?;

        let logp = tape.log_softmax_rows(fwd.logits)?;
        let picked = tape.slice_cols(logp, s.class, s.class + 1)?;
        let picked = tape.reshape(picked, &[1])?;
        let ce = tape.neg(picked)?;

        let y = tape.constant(Tensor::new([s.gt_mask.len(), 1], s.gt_mask.clone())?);
        let sp = tape.softplus(fwd.scores)?;
        let ys = tape.mul(y, fwd.scores)?;
        let bce = tape.sub(sp, ys)?;
        let bce = tape.mean(bce)?;
        let dice = dice_loss_var(tape, fwd.mask, y, DICE_EPS)?;
        Ok(vec![
            (TaskKind::BoxL1, l1),
            (TaskKind::BoxIou, iou),
            (TaskKind::Class, ce),
            (TaskKind::MaskBce, bce),
            (TaskKind::MaskDice, dice),
        ])
    }

    /// Forward, task losses and, when DGTL is on, weighting and the geometry
    /// term. `v` is the `[1 × 5]` weight leaf and is ignored when DGTL is off.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        s: &GroundingSample,
        state: &DgtlState,
        v: Option<Var>,
        opts: ObjectiveOptions<'_>,
    ) -> Result<Objective> {
        let fwd = self.forward(tape, bind, s)?;
        let losses = self.task_losses(tape, &fwd, s)?;
        let mut snapshots = Vec::new();
        if opts.snapshots {
            for &(task, l) in &losses {
                let gs = tape.grads_wrt(l, &[fwd.visual, fwd.text])?;
                let grad = gs.iter().flat_map(|g| g.data().iter().copied()).collect();
                snapshots.push(GradSnapshot { task, grad });
            }
        }
        let (total, geom, geom_skipped) = if self.cfg.dgtl_enabled {
            let target = match opts.fixed_mask_box {
                Some(b) => Ok(*b),
                None => mask_box(tape, fwd.mask, &s.xyz),
            };
            let (geom, skipped) = match target {
                Ok(b) => (
                    Some(geom_consistency_with(
                        tape, state, fwd.bbox, fwd.mask, &s.xyz, &b,
                    )?),
                    false,
                ),
                Err(GeomError::EmptyMask { .. }) => (None, true),
                Err(e) => return Err(e.into()),
            };
            (
                dgtl_total(tape, state, v, &losses, 0.0, geom)?,
                geom,
                skipped,
            )
        } else {
            (
                dgtl_total(tape, state, None, &losses, 0.0, None)?,
                None,
                false,
            )
        };
        Ok(Objective {
            total,
            losses,
            geom,
            geom_skipped,
            snapshots,
            fwd,
        })
    }
}

/// Gathers `k` neighbours per token, appends their offsets, projects, and max-pools.
fn pool_groups(
    tape: &mut Tape,
    bind: &Binding,
    feats: Var,
    group: &[usize],
    rel: &Tensor,
    k: usize,
    lin: &Linear,
) -> Result<Var> {
    let g = tape.gather_rows(feats, group)?;
    let r = tape.constant(rel.clone());
    let x = tape.concat_cols(&[g, r])?;
    let x = lin.forward(tape, bind, x)?;
    let x = tape.relu(x)?;
    Ok(tape.segment_max(x, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgtl::DgtlConfig;
    use crate::scenes::{Corpus, SceneConfig};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_sem: 4,
            group_k: 3,
            n_clust: 4,
            k_graph: 2,
            n_points: 64,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_samples(cfg: &ModelConfig, n: usize) -> Vec<GroundingSample> {
        let sc = SceneConfig {
            n_points: cfg.n_points,
            ..SceneConfig::default()
        };
        let corpus = Corpus::generate(11, n, 1, &sc).unwrap();
        build_samples(&corpus, cfg).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_cfg();
        let m = GroundingModel::new(cfg.clone(), 1).unwrap();
        let s = &tiny_samples(&cfg, 1)[0];
        let mut tape = Tape::new();
        let bind = m.store.bind(&mut tape);
        let f = m.forward(&mut tape, &bind, s).unwrap();
        assert_eq!(tape.shape(f.mask), &[64, 1]);
        assert_eq!(tape.shape(f.bbox), &[1, 6]);
        assert_eq!(tape.shape(f.logits), &[1, 8]);
        assert_eq!(tape.shape(f.visual), &[64, 8]);
        let b = tape.value(f.bbox).data();
        assert!((0..3).all(|i| b[i] < b[i + 3]));
    }

    #[test]
    fn zeroed_heads_give_half_mask() {
        let cfg = tiny_cfg();
        let mut m = GroundingModel::new(cfg.clone(), 2).unwrap();
        for id in [m.query.weight, m.query.bias.unwrap(), m.mask_bias] {
            let shape = m.store.get(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let s = &tiny_samples(&cfg, 1)[0];
        let mut tape = Tape::new();
        let bind = m.store.bind_frozen(&mut tape);
        let f = m.forward(&mut tape, &bind, s).unwrap();
        assert!(tape.value(f.mask).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn plda_count_matches_formula() {
        for (d, h) in [(32, 2), (16, 4), (8, 1)] {
            let cfg = ModelConfig {
                d_model: d,
                plda_heads: h,
                ..ModelConfig::default()
            };
            let m = GroundingModel::new(cfg, 0).unwrap();
            // per direction: four d x d projections, four lambda vectors of
            // width d/2h per head, and a 2 * d/2h wide norm per head
            let per_dir = 4 * d * d + 4 * h * (d / (2 * h)) + 2 * h * (d / h);
            assert_eq!(m.store.count_with_prefix("plda."), 2 * per_dir);
            assert_eq!(m.plda.num_params(), 2 * per_dir);
        }
    }

    #[test]
    fn ablation_switches_change_the_graph() {
        let base = tiny_cfg();
        let s = &tiny_samples(&base, 1)[0];
        let state = DgtlState::new(&DgtlConfig::default(), 10);
        let mut totals = Vec::new();
        for (plda, clda, dgtl) in [
            (true, true, true),
            (false, true, true),
            (true, false, true),
            (true, true, false),
        ] {
            let cfg = ModelConfig {
                plda_enabled: plda,
                clda_enabled: clda,
                dgtl_enabled: dgtl,
                ..base.clone()
            };
            let m = GroundingModel::new(cfg, 3).unwrap();
            let mut tape = Tape::new();
            let bind = m.store.bind(&mut tape);
            let v = tape.leaf(Tensor::zeros([1, 5]).with_grad());
            let o = m
                .objective(
                    &mut tape,
                    &bind,
                    s,
                    &state,
                    Some(v),
                    ObjectiveOptions::default(),
                )
                .unwrap();
            assert_eq!(o.fwd.clda.is_some(), clda);
            assert_eq!(o.fwd.plda_v2t.is_some(), plda);
            assert_eq!(o.geom.is_some() || o.geom_skipped, dgtl);
            totals.push(tape.item(o.total));
        }
        // with v = 0 and no warm-up the weighted total equals the plain sum,
        // so only the architecture switches are compared
        for i in 1..3 {
            assert_ne!(totals[0], totals[i]);
        }
    }
}
