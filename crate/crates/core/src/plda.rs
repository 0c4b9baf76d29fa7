//! Point-level differential attention: visual tokens attend to text and text
//! tokens attend to visual tokens, each direction with its own parameters.
//! The visual-side result is upsampled back to the full point set and fused
//! with the finer encoder scales; a max-pooled text summary feeds the
//! cluster-level text branch.

use std::str::FromStr;

use crate::diffattn::{attend, AttentionKind, DiffAttnConfig, DiffAttnOutput, DiffAttnParams};
use crate::params::{Binding, Linear, ParamError, ParamGroup, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Result, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct PldaParams {
    pub v2t: DiffAttnParams,
    pub t2v: DiffAttnParams,
}

impl PldaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DiffAttnConfig,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            v2t: DiffAttnParams::new(store, &format!("{name}.v2t"), cfg, ParamGroup::Rest, rng)?,
            t2v: DiffAttnParams::new(store, &format!("{name}.t2v"), cfg, ParamGroup::Rest, rng)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.v2t.num_params() + self.t2v.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct PldaOutput {
    /// `[n_sem × d]`, visual queries over text.
    pub k_v2t: Var,
    /// `[l_t × d]`, text queries over visual tokens.
    pub k_t2v: Var,
    pub trace_v2t: Option<DiffAttnOutput>,
    pub trace_t2v: Option<DiffAttnOutput>,
}

pub fn plda_forward(
    tape: &mut Tape,
    bind: &Binding,
    kind: AttentionKind,
    fv4: Var,
    ft: Var,
    p: &PldaParams,
) -> Result<PldaOutput> {
    let (k_v2t, trace_v2t) = attend(tape, bind, kind, fv4, ft, &p.v2t)?;
    let (k_t2v, trace_t2v) = attend(tape, bind, kind, ft, fv4, &p.t2v)?;
    Ok(PldaOutput {
        k_v2t,
        k_t2v,
        trace_v2t,
        trace_t2v,
    })
}

/// Source pooled by the Max block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaxBlockSource {
    /// Coarsest visual features.
    Fv4,
    /// Text queries over visual tokens.
    Kt2v,
    /// Raw text features.
    Ft,
    /// Visual queries over text.
    #[default]
    Kv2t,
}

impl FromStr for MaxBlockSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fv4" => Ok(Self::Fv4),
            "kt2v" => Ok(Self::Kt2v),
            "ft" => Ok(Self::Ft),
            "kv2t" => Ok(Self::Kv2t),
            other => Err(format!(
                "unknown max block source {other:?} (expected fv4|kt2v|ft|kv2t)"
            )),
        }
    }
}

impl std::fmt::Display for MaxBlockSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fv4 => "fv4",
            Self::Kt2v => "kt2v",
            Self::Ft => "ft",
            Self::Kv2t => "kv2t",
        })
    }
}

impl MaxBlockSource {
    pub const ALL: [MaxBlockSource; 4] = [Self::Fv4, Self::Kt2v, Self::Ft, Self::Kv2t];

    pub fn select(self, fv4: Var, ft: Var, out: &PldaOutput) -> Var {
        match self {
            Self::Fv4 => fv4,
            Self::Kt2v => out.k_t2v,
            Self::Ft => ft,
            Self::Kv2t => out.k_v2t,
        }
    }
}

/// Projections used by [`fuse_multiscale`] and [`max_pool_text`].
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// `[d_sem + d3 → d_mod]`
    pub proj3: Linear,
    /// `[d_mod + d2 → d_mod]`
    pub proj2: Linear,
    /// `[d → d_mod]` after column-wise max.
    pub pool: Linear,
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_sem: usize,
        d3: usize,
        d2: usize,
        d_mod: usize,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            proj3: Linear::new(
                store,
                &format!("{name}.proj3"),
                d_sem + d3,
                d_mod,
                true,
                ParamGroup::Rest,
                rng,
            )?,
            proj2: Linear::new(
                store,
                &format!("{name}.proj2"),
                d_mod + d2,
                d_mod,
                true,
                ParamGroup::Rest,
                rng,
            )?,
            pool: Linear::new(
                store,
                &format!("{name}.pool"),
                d_sem,
                d_mod,
                true,
                ParamGroup::Rest,
                rng,
            )?,
        })
    }
}

/// Upsamples `k_v2t` by nearest-parent gather (`parent3[i]` is the coarse
/// token of scale-3 point `i`, `parent2[j]` the scale-3 point of fine point
/// `j`), concatenates with each scale's features and projects.
#[allow(clippy::too_many_arguments)]
pub fn fuse_multiscale(
    tape: &mut Tape,
    bind: &Binding,
    k_v2t: Var,
    fv3: Var,
    fv2: Var,
    parent3: &[usize],
    parent2: &[usize],
    fp: &FusionParams,
) -> Result<Var> {
    for (op, map, rows) in [
        ("fuse_multiscale.parent3", parent3, fv3),
        ("fuse_multiscale.parent2", parent2, fv2),
    ] {
        if map.len() != tape.value(rows).rows() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![map.len()],
                rhs: tape.shape(rows).to_vec(),
            });
        }
    }
    let up3 = tape.gather_rows(k_v2t, parent3)?;
    let cat3 = tape.concat_cols(&[up3, fv3])?;
    let h3 = fp.proj3.forward(tape, bind, cat3)?;
    let up2 = tape.gather_rows(h3, parent2)?;
    let cat2 = tape.concat_cols(&[up2, fv2])?;
    fp.proj2.forward(tape, bind, cat2)
}

/// Column-wise max over tokens followed by a projection, `[1 × d_mod]`.
pub fn max_pool_text(
    tape: &mut Tape,
    bind: &Binding,
    tokens: Var,
    fp: &FusionParams,
) -> Result<Var> {
    if tape.value(tokens).rows() == 0 {
        return Err(TensorError::InvalidShape {
            op: "max_pool_text",
            shape: tape.shape(tokens).to_vec(),
            reason: "no tokens".into(),
        });
    }
    let pooled = tape.max_rows(tokens)?;
    fp.pool.forward(tape, bind, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffattn::reference_attention;
    use crate::params::normal;
    use crate::tensor::Tensor;

    #[test]
    fn lambda_zero_is_two_reference_passes() {
        let mut rng = SplitMix64::new(6);
        let mut store = ParamStore::new();
        let p = PldaParams::new(&mut store, "plda", DiffAttnConfig::new(8, 2), &mut rng).unwrap();
        for dp in [p.v2t, p.t2v] {
            for id in dp.lambda_ids() {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(shape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let fv = tape.constant(normal(&mut rng, &[4, 8], 1.0));
        let ft = tape.constant(normal(&mut rng, &[3, 8], 1.0));
        let o = plda_forward(&mut tape, &bind, AttentionKind::Differential, fv, ft, &p).unwrap();
        let r1 = reference_attention(&mut tape, &bind, fv, ft, &p.v2t).unwrap();
        let r2 = reference_attention(&mut tape, &bind, ft, fv, &p.t2v).unwrap();
        assert_eq!(tape.shape(o.k_v2t), &[4, 8]);
        assert_eq!(tape.shape(o.k_t2v), &[3, 8]);
        assert!(tape.value(o.k_v2t).max_abs_diff(tape.value(r1)) < 1e-10);
        assert!(tape.value(o.k_t2v).max_abs_diff(tape.value(r2)) < 1e-10);
    }

    #[test]
    fn single_coarse_token_broadcasts() {
        let mut rng = SplitMix64::new(7);
        let mut store = ParamStore::new();
        let fp = FusionParams::new(&mut store, "fuse", 4, 2, 2, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let k = tape.constant(normal(&mut rng, &[1, 4], 1.0));
        let f3 = tape.constant(Tensor::zeros([3, 2]));
        let f2 = tape.constant(Tensor::zeros([6, 2]));
        let out = fuse_multiscale(
            &mut tape,
            &bind,
            k,
            f3,
            f2,
            &[0, 0, 0],
            &[0, 1, 2, 0, 1, 2],
            &fp,
        )
        .unwrap();
        let t = tape.value(out);
        for r in 1..6 {
            assert_eq!(t.row(r), t.row(0));
        }
        assert!(fuse_multiscale(&mut tape, &bind, k, f3, f2, &[0, 0, 5], &[0; 6], &fp).is_err());
    }

    #[test]
    fn max_pool_takes_larger_row() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0);
        let fp = FusionParams::new(&mut store, "fuse", 2, 1, 1, 2, &mut rng).unwrap();
        store.set(fp.pool.weight, Tensor::eye(2)).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let toks = tape.constant(Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap());
        let o = max_pool_text(&mut tape, &bind, toks, &fp).unwrap();
        assert_eq!(tape.value(o).data(), &[3.0, 5.0]);
    }

    #[test]
    fn source_names_roundtrip() {
        for s in MaxBlockSource::ALL {
            assert_eq!(s.to_string().parse::<MaxBlockSource>().unwrap(), s);
        }
    }
}
