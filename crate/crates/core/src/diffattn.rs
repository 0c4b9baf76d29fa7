//! Multi-head cross-modal differential attention.
//!
//! Queries come from one token set and keys/values from another. Q and K are
//! split into `2·N_h` heads of width `d_h = d_model / (2·N_h)`; heads `2i` and
//! `2i+1` form the two channels of logical head `i`, and V is split into `N_h`
//! heads of width `2·d_h`. Each logical head computes
//!
//! ```text
//! A1 = softmax(Q1·K1ᵀ / √d_h)    A2 = softmax(Q2·K2ᵀ / √d_h)
//! head = (A1 − λ·A2)·V
//! λ = exp(Σ λq1⊙λk1) − exp(Σ λq2⊙λk2)
//! ```
//!
//! Heads are layer-normalized over their `2·d_h` channels, concatenated and
//! projected by `W_O`.

use std::path::Path;
use std::str::FromStr;

use crate::params::{normal, xavier, Binding, ParamError, ParamGroup, ParamId, ParamStore, LN_EPS};
use crate::rng::SplitMix64;
use crate::tensor::{write_dump, Result, Tape, Tensor, TensorError, Var};

/// Dot products inside the λ exponentials are clamped to this magnitude.
pub const LAMBDA_EXP_CLAMP: f64 = 50.0;
/// Standard deviation of the λ vector initialization.
pub const LAMBDA_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffAttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_ln: bool,
}

impl DiffAttnConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            head_ln: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / (2 * self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(2 * self.n_heads)
        {
            return Err(TensorError::InvalidShape {
                op: "diff_attention",
                shape: vec![self.d_model],
                reason: format!(
                    "d_model must be divisible by 2·n_heads = {}",
                    2 * self.n_heads
                ),
            });
        }
        Ok(())
    }
}

/// Parameters of one differential attention layer.
#[derive(Clone, Copy, Debug)]
pub struct DiffAttnParams {
    pub cfg: DiffAttnConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// `[N_h × d_h]`, row `h` belongs to logical head `h`.
    pub lambda_q1: ParamId,
    pub lambda_k1: ParamId,
    pub lambda_q2: ParamId,
    pub lambda_k2: ParamId,
    /// `[N_h × 2·d_h]` per-head layer-norm affine.
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl DiffAttnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DiffAttnConfig,
        group: ParamGroup,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let (nh, dh) = (cfg.n_heads, cfg.d_head());
        let mut add = |suffix: &str, t: Tensor| store.add(format!("{name}.{suffix}"), t, group);
        Ok(Self {
            cfg,
            w_q: add("w_q", xavier(rng, d, d))?,
            w_k: add("w_k", xavier(rng, d, d))?,
            w_v: add("w_v", xavier(rng, d, d))?,
            w_o: add("w_o", xavier(rng, d, d))?,
            lambda_q1: add("lambda_q1", normal(rng, &[nh, dh], LAMBDA_INIT_STD))?,
            lambda_k1: add("lambda_k1", normal(rng, &[nh, dh], LAMBDA_INIT_STD))?,
            lambda_q2: add("lambda_q2", normal(rng, &[nh, dh], LAMBDA_INIT_STD))?,
            lambda_k2: add("lambda_k2", normal(rng, &[nh, dh], LAMBDA_INIT_STD))?,
            ln_gain: add("ln_gain", Tensor::ones([nh, 2 * dh]))?,
            ln_bias: add("ln_bias", Tensor::zeros([nh, 2 * dh]))?,
        })
    }

    pub fn num_params(&self) -> usize {
        let d = self.cfg.d_model;
        let (nh, dh) = (self.cfg.n_heads, self.cfg.d_head());
        4 * d * d + 4 * nh * dh + 2 * nh * 2 * dh
    }

    pub fn lambda_ids(&self) -> [ParamId; 4] {
        [
            self.lambda_q1,
            self.lambda_k1,
            self.lambda_q2,
            self.lambda_k2,
        ]
    }
}

fn check_width(tape: &Tape, x: Var, d: usize, op: &'static str) -> Result<()> {
    let t = tape.value(x);
    let (_, n) = t.dims2(op)?;
    if n != d {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

/// `Q = query_src·W_Q`, `K = kv_src·W_K`, `V = kv_src·W_V`.
pub fn project_qkv(
    tape: &mut Tape,
    bind: &Binding,
    query_src: Var,
    kv_src: Var,
    p: &DiffAttnParams,
) -> Result<(Var, Var, Var)> {
    check_width(tape, query_src, p.cfg.d_model, "project_qkv")?;
    check_width(tape, kv_src, p.cfg.d_model, "project_qkv")?;
    let q = tape.matmul(query_src, bind[p.w_q])?;
    let k = tape.matmul(kv_src, bind[p.w_k])?;
    let v = tape.matmul(kv_src, bind[p.w_v])?;
    Ok((q, k, v))
}

/// Per-head views of projected Q/K/V.
#[derive(Clone, Debug)]
pub struct HeadSplit {
    /// `(Q_1, Q_2)` per logical head, each `[m × d_h]`.
    pub q: Vec<(Var, Var)>,
    pub k: Vec<(Var, Var)>,
    /// `[n × 2·d_h]` per logical head.
    pub v: Vec<Var>,
}

pub fn split_heads(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<HeadSplit> {
    let d = tape.value(q).cols();
    let cfg = DiffAttnConfig::new(d, n_heads);
    cfg.validate()?;
    let dh = cfg.d_head();
    let mut out = HeadSplit {
        q: Vec::with_capacity(n_heads),
        k: Vec::with_capacity(n_heads),
        v: Vec::with_capacity(n_heads),
    };
    for h in 0..n_heads {
        let (c1, c2, c3) = (2 * h * dh, (2 * h + 1) * dh, (2 * h + 2) * dh);
        out.q
            .push((tape.slice_cols(q, c1, c2)?, tape.slice_cols(q, c2, c3)?));
        out.k
            .push((tape.slice_cols(k, c1, c2)?, tape.slice_cols(k, c2, c3)?));
        out.v.push(tape.slice_cols(v, c1, c3)?);
    }
    Ok(out)
}

/// Concatenates head outputs along the channel axis (inverse of the V split).
pub fn merge_heads(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    tape.concat_cols(heads)
}

/// λ per logical head, shape `[N_h × 1]`.
pub fn lambda_value(tape: &mut Tape, bind: &Binding, p: &DiffAttnParams) -> Result<Var> {
    let first = {
        let prod = tape.mul(bind[p.lambda_q1], bind[p.lambda_k1])?;
        let dot = tape.sum_last(prod)?;
        let dot = tape.clamp(dot, -LAMBDA_EXP_CLAMP, LAMBDA_EXP_CLAMP)?;
        tape.exp(dot)?
    };
    let second = {
        let prod = tape.mul(bind[p.lambda_q2], bind[p.lambda_k2])?;
        let dot = tape.sum_last(prod)?;
        let dot = tape.clamp(dot, -LAMBDA_EXP_CLAMP, LAMBDA_EXP_CLAMP)?;
        tape.exp(dot)?
    };
    tape.sub(first, second)
}

/// Tape handles produced by one differential attention call.
#[derive(Clone, Debug)]
pub struct DiffAttnOutput {
    /// `[m × d_model]`
    pub out: Var,
    /// `[N_h × 1]`
    pub lambda: Var,
    pub a1: Vec<Var>,
    pub a2: Vec<Var>,
    /// `(A1 − λ·A2)·V` per head, before layer norm.
    pub head_outputs: Vec<Var>,
}

impl DiffAttnOutput {
    pub fn trace(&self, tape: &Tape) -> AttnTrace {
        let stack = |vs: &[Var]| {
            let first = tape.value(vs[0]);
            let (m, n) = (first.rows(), first.cols());
            let mut data = Vec::with_capacity(vs.len() * m * n);
            for v in vs {
                data.extend_from_slice(tape.value(*v).data());
            }
            Tensor::new([vs.len(), m, n], data).expect("trace shapes")
        };
        AttnTrace {
            a1: stack(&self.a1),
            a2: stack(&self.a2),
            lambda: tape
                .value(self.lambda)
                .reshape([self.a1.len()])
                .expect("lambda shape"),
        }
    }
}

/// Attention maps and λ values for debugging and invariant checks.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    /// `[N_h × m × n]`
    pub a1: Tensor,
    pub a2: Tensor,
    /// `[N_h]`
    pub lambda: Tensor,
}

impl AttnTrace {
    /// Writes `{prefix}.a1.pcxd`, `{prefix}.a2.pcxd` and `{prefix}.lambda.pcxd`.
    pub fn write_dumps(&self, dir: &Path, prefix: &str) -> Result<()> {
        write_dump(dir.join(format!("{prefix}.a1.pcxd")), &self.a1)?;
        write_dump(dir.join(format!("{prefix}.a2.pcxd")), &self.a2)?;
        write_dump(dir.join(format!("{prefix}.lambda.pcxd")), &self.lambda)
    }
}

fn attention_map(tape: &mut Tape, q: Var, k: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, scale)?;
    tape.softmax_rows(s)
}

fn head_norm(tape: &mut Tape, bind: &Binding, p: &DiffAttnParams, h: usize, x: Var) -> Result<Var> {
    if !p.cfg.head_ln {
        return Ok(x);
    }
    let gain = tape.slice_rows(bind[p.ln_gain], h, h + 1)?;
    let bias = tape.slice_rows(bind[p.ln_bias], h, h + 1)?;
    tape.layer_norm(x, gain, bias, LN_EPS)
}

pub fn diff_attention(
    tape: &mut Tape,
    bind: &Binding,
    query_src: Var,
    kv_src: Var,
    p: &DiffAttnParams,
) -> Result<DiffAttnOutput> {
    p.cfg.validate()?;
    let (q, k, v) = project_qkv(tape, bind, query_src, kv_src, p)?;
    let heads = split_heads(tape, q, k, v, p.cfg.n_heads)?;
    let lambda = lambda_value(tape, bind, p)?;
    let scale = 1.0 / (p.cfg.d_head() as f64).sqrt();
    let mut out = DiffAttnOutput {
        out: lambda,
        lambda,
        a1: Vec::new(),
        a2: Vec::new(),
        head_outputs: Vec::new(),
    };
    let mut normed = Vec::with_capacity(p.cfg.n_heads);
    for h in 0..p.cfg.n_heads {
        let (q1, q2) = heads.q[h];
        let (k1, k2) = heads.k[h];
        let a1 = attention_map(tape, q1, k1, scale)?;
        let a2 = attention_map(tape, q2, k2, scale)?;
        let lam_h = tape.slice_rows(lambda, h, h + 1)?;
        let suppressed = tape.mul_scalar(a2, lam_h)?;
        let diff = tape.sub(a1, suppressed)?;
        let ho = tape.matmul(diff, heads.v[h])?;
        normed.push(head_norm(tape, bind, p, h, ho)?);
        out.a1.push(a1);
        out.a2.push(a2);
        out.head_outputs.push(ho);
    }
    let merged = merge_heads(tape, &normed)?;
    out.out = tape.matmul(merged, bind[p.w_o])?;
    Ok(out)
}

/// Single-channel softmax attention over the same parameters: each logical
/// head attends with its channel-1 queries/keys (`Q_1`, `K_1`) and its full
/// `2·d_h` value slice, followed by the same per-head norm and `W_O`. The λ
/// vectors are ignored. This is what [`diff_attention`] computes when λ = 0.
pub fn reference_attention(
    tape: &mut Tape,
    bind: &Binding,
    query_src: Var,
    kv_src: Var,
    p: &DiffAttnParams,
) -> Result<Var> {
    p.cfg.validate()?;
    check_width(tape, query_src, p.cfg.d_model, "reference_attention")?;
    check_width(tape, kv_src, p.cfg.d_model, "reference_attention")?;
    let dh = p.cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(query_src, bind[p.w_q])?;
    let k = tape.matmul(kv_src, bind[p.w_k])?;
    let v = tape.matmul(kv_src, bind[p.w_v])?;
    let mut heads = Vec::with_capacity(p.cfg.n_heads);
    for h in 0..p.cfg.n_heads {
        let qh = tape.slice_cols(q, 2 * h * dh, (2 * h + 1) * dh)?;
        let kh = tape.slice_cols(k, 2 * h * dh, (2 * h + 1) * dh)?;
        let vh = tape.slice_cols(v, 2 * h * dh, (2 * h + 2) * dh)?;
        let a = attention_map(tape, qh, kh, scale)?;
        let o = tape.matmul(a, vh)?;
        heads.push(head_norm(tape, bind, p, h, o)?);
    }
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, bind[p.w_o])
}

/// Which attention operator the cross-modal blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionKind {
    #[default]
    Differential,
    /// Plain softmax attention ([`reference_attention`]).
    Standard,
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "diff" | "differential" => Ok(Self::Differential),
            "standard" => Ok(Self::Standard),
            other => Err(format!(
                "unknown attention kind {other:?} (expected diff|standard)"
            )),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Differential => "diff",
            Self::Standard => "standard",
        })
    }
}

/// Dispatches on [`AttentionKind`]. The differential trace is returned when available.
pub fn attend(
    tape: &mut Tape,
    bind: &Binding,
    kind: AttentionKind,
    query_src: Var,
    kv_src: Var,
    p: &DiffAttnParams,
) -> Result<(Var, Option<DiffAttnOutput>)> {
    match kind {
        AttentionKind::Differential => {
            let o = diff_attention(tape, bind, query_src, kv_src, p)?;
            Ok((o.out, Some(o)))
        }
        AttentionKind::Standard => {
            Ok((reference_attention(tape, bind, query_src, kv_src, p)?, None))
        }
    }
}

/// Conventional multi-head attention used for self-attention refinement.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MhaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        group: ParamGroup,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::InvalidShape {
                op: "MhaParams::new",
                shape: vec![d_model],
                reason: format!("d_model not divisible by {n_heads} heads"),
            }
            .into());
        }
        let mut add = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                xavier(rng, d_model, d_model),
                group,
            )
        };
        Ok(Self {
            d_model,
            n_heads,
            w_q: add("w_q")?,
            w_k: add("w_k")?,
            w_v: add("w_v")?,
            w_o: add("w_o")?,
        })
    }
}

pub fn multi_head_attention(
    tape: &mut Tape,
    bind: &Binding,
    query_src: Var,
    kv_src: Var,
    p: &MhaParams,
) -> Result<Var> {
    check_width(tape, query_src, p.d_model, "multi_head_attention")?;
    check_width(tape, kv_src, p.d_model, "multi_head_attention")?;
    let dh = p.d_model / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(query_src, bind[p.w_q])?;
    let k = tape.matmul(kv_src, bind[p.w_k])?;
    let v = tape.matmul(kv_src, bind[p.w_v])?;
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let att = attention_map(tape, qh, kh, scale)?;
        heads.push(tape.matmul(att, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, bind[p.w_o])
}

/// `x + MHA(x, x)`.
pub fn self_attention_block(tape: &mut Tape, bind: &Binding, x: Var, p: &MhaParams) -> Result<Var> {
    let a = multi_head_attention(tape, bind, x, x, p)?;
    tape.add(x, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheckOptions;

    fn setup(d: usize, nh: usize, seed: u64) -> (ParamStore, DiffAttnParams) {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let p = DiffAttnParams::new(
            &mut store,
            "attn",
            DiffAttnConfig::new(d, nh),
            ParamGroup::Rest,
            &mut rng,
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn identity_projection_and_zero_input() {
        let (mut store, p) = setup(4, 1, 1);
        store.set(p.w_q, Tensor::eye(4)).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap());
        let z = tape.constant(Tensor::zeros([2, 4]));
        let (q, _, _) = project_qkv(&mut tape, &bind, x, z, &p).unwrap();
        assert_eq!(tape.value(q), tape.value(x));
        let (q, _, _) = project_qkv(&mut tape, &bind, z, x, &p).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_layout_single_head() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[5.0, 7.0]]).unwrap());
        let s = split_heads(&mut tape, q, q, q, 1).unwrap();
        assert_eq!(tape.value(s.q[0].0).data(), &[5.0]);
        assert_eq!(tape.value(s.q[0].1).data(), &[7.0]);
        let merged = merge_heads(&mut tape, &s.v).unwrap();
        assert_eq!(tape.value(merged), tape.value(q));
    }

    #[test]
    fn indivisible_width_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros([1, 6]));
        assert!(split_heads(&mut tape, q, q, q, 2).is_err());
    }

    #[test]
    fn lambda_closed_forms() {
        let (mut store, p) = setup(2, 1, 2);
        for id in p.lambda_ids() {
            store.set(id, Tensor::zeros([1, 1])).unwrap();
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let l = lambda_value(&mut tape, &bind, &p).unwrap();
        assert_eq!(tape.item(l), 0.0);

        store.set(p.lambda_q1, Tensor::ones([1, 1])).unwrap();
        store.set(p.lambda_k1, Tensor::ones([1, 1])).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let l = lambda_value(&mut tape, &bind, &p).unwrap();
        assert!((tape.item(l) - (std::f64::consts::E - 1.0)).abs() < 1e-15);

        // equal dot products on both channels cancel
        store
            .set(p.lambda_q1, Tensor::from_rows(&[[2.0]]).unwrap())
            .unwrap();
        store
            .set(p.lambda_k1, Tensor::from_rows(&[[0.5]]).unwrap())
            .unwrap();
        store
            .set(p.lambda_q2, Tensor::from_rows(&[[0.25]]).unwrap())
            .unwrap();
        store
            .set(p.lambda_k2, Tensor::from_rows(&[[4.0]]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let l = lambda_value(&mut tape, &bind, &p).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn lambda_is_finite_for_huge_vectors() {
        let (mut store, p) = setup(2, 1, 2);
        store
            .set(p.lambda_q1, Tensor::from_rows(&[[1e6]]).unwrap())
            .unwrap();
        store
            .set(p.lambda_k1, Tensor::from_rows(&[[1e6]]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let l = lambda_value(&mut tape, &bind, &p).unwrap();
        assert!(tape.item(l).is_finite());
    }

    #[test]
    fn single_key_gives_scaled_values() {
        let (mut store, p) = setup(4, 1, 3);
        let mut rng = SplitMix64::new(11);
        store
            .set(p.lambda_q1, normal(&mut rng, &[1, 2], 0.5))
            .unwrap();
        let mut cfg_noln = p;
        cfg_noln.cfg.head_ln = false;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xq = tape.constant(normal(&mut rng, &[3, 4], 1.0));
        let xkv = tape.constant(normal(&mut rng, &[1, 4], 1.0));
        let o = diff_attention(&mut tape, &bind, xq, xkv, &cfg_noln).unwrap();
        let lam = tape.item(o.lambda);
        for a in o.a1.iter().chain(&o.a2) {
            assert!(tape.value(*a).data().iter().all(|&v| v == 1.0));
        }
        // out = (1 − λ)·V·W_O for every query row
        let v = tape.value(xkv).matmul(store.get(p.w_v)).unwrap();
        let want = v.matmul(store.get(p.w_o)).unwrap().map(|x| (1.0 - lam) * x);
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(o.out).at(r, c) - want.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_of_both_maps_sum_to_one() {
        let (store, p) = setup(8, 2, 4);
        let mut rng = SplitMix64::new(4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xq = tape.constant(normal(&mut rng, &[5, 8], 2.0));
        let xkv = tape.constant(normal(&mut rng, &[6, 8], 2.0));
        let o = diff_attention(&mut tape, &bind, xq, xkv, &p).unwrap();
        let tr = o.trace(&tape);
        assert_eq!(tr.a1.shape(), &[2, 5, 6]);
        for t in [&tr.a1, &tr.a2] {
            for row in t.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_including_lambda() {
        let (store, p) = setup(8, 2, 8);
        let mut rng = SplitMix64::new(8);
        let xq = normal(&mut rng, &[4, 8], 1.0);
        let xkv = normal(&mut rng, &[5, 8], 1.0);
        let rep = store
            .grad_check(
                None,
                |tape, bind| {
                    let a = tape.constant(xq.clone());
                    let b = tape.constant(xkv.clone());
                    let o = diff_attention(tape, bind, a, b, &p)?;
                    tape.sum(o.out)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
    }

    #[test]
    fn self_attention_block_shapes() {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, "sa", 8, 2, ParamGroup::Rest, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(normal(&mut rng, &[7, 8], 1.0));
        let y = self_attention_block(&mut tape, &bind, x, &p).unwrap();
        assert_eq!(tape.shape(y), &[7, 8]);
    }
}
