//! Cluster-level differential attention.
//!
//! Spatial relation modeling groups the scene into `N_clust` clusters (FPS
//! centroids, centroid-KNN membership), encodes each cluster from its
//! centroid-relative coordinates, mixes clusters with an EdgeConv over the
//! centroid kNN graph, and projects the raw centroids. Two filter-then-enhance
//! blocks then update the visual stream (attending to the EdgeConv features)
//! and the text stream (attending to the projected centroids).
//!
//! Cluster selection is discrete, so coordinates enter as constants and no
//! gradient flows through FPS or KNN.

use crate::diffattn::{
    attend, AttentionKind, DiffAttnConfig, DiffAttnOutput, DiffAttnParams, MhaParams,
};
use crate::params::{Binding, LayerNormParams, Linear, Mlp, ParamError, ParamGroup, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum CldaError {
    #[error("cannot sample {m} centroids from {n} points")]
    TooManyCentroids { m: usize, n: usize },
    #[error("k_graph = {k} must be below the cluster count {n}")]
    GraphTooDense { k: usize, n: usize },
    #[error("{n_p} points are not divisible into {n_clust} clusters")]
    Indivisible { n_p: usize, n_clust: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CldaError>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling over the rows of `points` `[n × 3]`.
///
/// Starts at `start`, then repeatedly takes the point with the largest
/// distance to the selected set. Ties go to the lowest index.
pub fn fps(points: &Tensor, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if m == 0 || m > n {
        return Err(CldaError::TooManyCentroids { m, n });
    }
    if start >= n {
        return Err(TensorError::IndexOutOfRange {
            op: "fps",
            index: start,
            len: n,
        }
        .into());
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        selected.push(cur);
        let c = points.row(cur);
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, md) in min_d.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// Indices of the `k` rows of `points` nearest to `query` (ties: lower index),
/// optionally skipping one index.
fn nearest(points: &Tensor, query: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..points.rows())
        .filter(|&i| Some(i) != skip)
        .map(|i| (sq_dist(points.row(i), query), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub centroid_indices: Vec<usize>,
    /// `members[c]` lists the `S_clust` points nearest to centroid `c`, nearest first.
    pub members: Vec<Vec<usize>>,
    /// `[N_clust × 3]`
    pub centroids: Tensor,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_size(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }
}

/// Assigns the `s_clust` nearest points to every centroid. Points may belong
/// to several clusters.
pub fn knn_partition(
    points: &Tensor,
    centroid_indices: &[usize],
    s_clust: usize,
) -> Result<ClusterAssignment> {
    let n = points.rows();
    if s_clust == 0 || s_clust > n {
        return Err(TensorError::InvalidShape {
            op: "knn_partition",
            shape: points.shape().to_vec(),
            reason: format!("cluster size {s_clust} outside 1..={n}"),
        }
        .into());
    }
    let mut cdata = Vec::with_capacity(centroid_indices.len() * 3);
    let mut members = Vec::with_capacity(centroid_indices.len());
    for &c in centroid_indices {
        if c >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "knn_partition",
                index: c,
                len: n,
            }
            .into());
        }
        let q = points.row(c);
        cdata.extend_from_slice(&q[..3]);
        members.push(nearest(points, q, s_clust, None));
    }
    Ok(ClusterAssignment {
        centroid_indices: centroid_indices.to_vec(),
        members,
        centroids: Tensor::new([centroid_indices.len(), 3], cdata)?,
    })
}

/// FPS followed by KNN partition with `S_clust = n_p / n_clust`.
pub fn cluster(points: &Tensor, n_clust: usize, fps_start: usize) -> Result<ClusterAssignment> {
    let n_p = points.rows();
    if n_clust == 0 || !n_p.is_multiple_of(n_clust) {
        return Err(CldaError::Indivisible { n_p, n_clust });
    }
    let idx = fps(points, n_clust, fps_start)?;
    knn_partition(points, &idx, n_p / n_clust)
}

/// Neighbors of every centroid in the kNN graph over `centroids`, self excluded.
pub fn knn_graph(centroids: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = centroids.rows();
    if k == 0 || k >= n {
        return Err(CldaError::GraphTooDense { k, n });
    }
    Ok((0..n)
        .map(|i| nearest(centroids, centroids.row(i), k, Some(i)))
        .collect())
}

/// Member coordinates relative to their centroid, stacked cluster by cluster: `[N·S × 3]`.
pub fn relative_coords(points: &Tensor, assign: &ClusterAssignment) -> Tensor {
    let mut data = Vec::with_capacity(assign.n_clusters() * assign.cluster_size() * 3);
    for (c, members) in assign.members.iter().enumerate() {
        let o = assign.centroids.row(c);
        for &i in members {
            let p = points.row(i);
            data.extend((0..3).map(|a| p[a] - o[a]));
        }
    }
    Tensor::from_parts(vec![data.len() / 3, 3], data)
}

/// Shared pointwise MLP over relative coordinates, max-pooled per cluster.
#[derive(Clone, Copy, Debug)]
pub struct IntraEncoder {
    pub mlp: Mlp,
}

impl IntraEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            mlp: Mlp::new(store, name, [3, (d / 2).max(1), d], ParamGroup::Rest, rng)?,
        })
    }

    /// `F_iRel`, `[N_clust × d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        points: &Tensor,
        assign: &ClusterAssignment,
    ) -> tensor::Result<Var> {
        let rel = tape.constant(relative_coords(points, assign));
        let h = self.mlp.forward(tape, bind, rel)?;
        tape.segment_max(h, assign.cluster_size())
    }
}

/// `max_j ReLU([f_i ; f_j − f_i]·W + b)` over the kNN neighbors `j` of `i`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConv {
    pub lin: Linear,
}

impl EdgeConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            lin: Linear::new(store, name, 2 * d, d, true, ParamGroup::Rest, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feats: Var,
        graph: &[Vec<usize>],
    ) -> tensor::Result<Var> {
        let k = graph.first().map_or(0, Vec::len);
        let centers: Vec<usize> = (0..graph.len())
            .flat_map(|i| std::iter::repeat_n(i, k))
            .collect();
        let neighbors: Vec<usize> = graph.iter().flatten().copied().collect();
        let fc = tape.gather_rows(feats, &centers)?;
        let fn_ = tape.gather_rows(feats, &neighbors)?;
        let diff = tape.sub(fn_, fc)?;
        let edge = tape.concat_cols(&[fc, diff])?;
        let h = self.lin.forward(tape, bind, edge)?;
        let h = tape.relu(h)?;
        tape.segment_max(h, k)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SrmParams {
    pub intra: IntraEncoder,
    pub edge: EdgeConv,
    /// `F'_ctr = O·W_o + b_o`.
    pub ctr: Linear,
}

#[derive(Clone, Debug)]
pub struct SrmOutput {
    pub f_irel: Var,
    pub f_orel: Var,
    pub f_ctr: Var,
    pub assign: ClusterAssignment,
    pub graph: Vec<Vec<usize>>,
}

pub fn centroid_project(
    tape: &mut Tape,
    bind: &Binding,
    centroids: &Tensor,
    ctr: &Linear,
) -> tensor::Result<Var> {
    let o = tape.constant(centroids.clone());
    ctr.forward(tape, bind, o)
}

pub fn srm_forward(
    tape: &mut Tape,
    bind: &Binding,
    points: &Tensor,
    n_clust: usize,
    k_graph: usize,
    fps_start: usize,
    p: &SrmParams,
) -> Result<SrmOutput> {
    let assign = cluster(points, n_clust, fps_start)?;
    let graph = knn_graph(&assign.centroids, k_graph)?;
    let f_irel = p.intra.forward(tape, bind, points, &assign)?;
    let f_orel = p.edge.forward(tape, bind, f_irel, &graph)?;
    let f_ctr = centroid_project(tape, bind, &assign.centroids, &p.ctr)?;
    Ok(SrmOutput {
        f_irel,
        f_orel,
        f_ctr,
        assign,
        graph,
    })
}

/// Filter-then-enhance block: cross attention, residual (through an MLP on
/// the visual branch), then self-attention refinement.
#[derive(Clone, Copy, Debug)]
pub struct LdaParams {
    pub attn: DiffAttnParams,
    pub mlp: Option<Mlp>,
    pub self_attn: MhaParams,
}

impl LdaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DiffAttnConfig,
        with_mlp: bool,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        let d = cfg.d_model;
        Ok(Self {
            attn: DiffAttnParams::new(store, &format!("{name}.attn"), cfg, ParamGroup::Rest, rng)?,
            mlp: if with_mlp {
                Some(Mlp::new(
                    store,
                    &format!("{name}.mlp"),
                    [d, d, d],
                    ParamGroup::Rest,
                    rng,
                )?)
            } else {
                None
            },
            self_attn: MhaParams::new(
                store,
                &format!("{name}.self_attn"),
                d,
                cfg.n_heads,
                ParamGroup::Rest,
                rng,
            )?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LdaOutput {
    pub out: Var,
    pub attn: Option<DiffAttnOutput>,
}

pub fn lda_block(
    tape: &mut Tape,
    bind: &Binding,
    kind: AttentionKind,
    query: Var,
    kv: Var,
    p: &LdaParams,
) -> tensor::Result<LdaOutput> {
    let (d, attn) = attend(tape, bind, kind, query, kv, &p.attn)?;
    let upd = match &p.mlp {
        Some(mlp) => mlp.forward(tape, bind, d)?,
        None => d,
    };
    let res = tape.add(query, upd)?;
    let out = crate::diffattn::self_attention_block(tape, bind, res, &p.self_attn)?;
    Ok(LdaOutput { out, attn })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CldaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_ln: bool,
    pub n_clust: usize,
    pub k_graph: usize,
}

impl CldaConfig {
    pub fn new(d_model: usize, n_heads: usize, n_clust: usize, k_graph: usize) -> Self {
        Self {
            d_model,
            n_heads,
            head_ln: true,
            n_clust,
            k_graph,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CldaParams {
    pub cfg: CldaConfig,
    pub srm: SrmParams,
    pub visual: LdaParams,
    pub text: LdaParams,
    pub ln_visual: LayerNormParams,
    pub ln_text: LayerNormParams,
}

impl CldaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: CldaConfig,
        rng: &mut SplitMix64,
    ) -> std::result::Result<Self, ParamError> {
        let d = cfg.d_model;
        let acfg = DiffAttnConfig {
            d_model: d,
            n_heads: cfg.n_heads,
            head_ln: cfg.head_ln,
        };
        Ok(Self {
            cfg,
            srm: SrmParams {
                intra: IntraEncoder::new(store, &format!("{name}.srm.intra"), d, rng)?,
                edge: EdgeConv::new(store, &format!("{name}.srm.edge"), d, rng)?,
                ctr: Linear::new(
                    store,
                    &format!("{name}.srm.ctr"),
                    3,
                    d,
                    true,
                    ParamGroup::Rest,
                    rng,
                )?,
            },
            visual: LdaParams::new(store, &format!("{name}.lda_v"), acfg, true, rng)?,
            text: LdaParams::new(store, &format!("{name}.lda_t"), acfg, false, rng)?,
            ln_visual: LayerNormParams::new(store, &format!("{name}.ln_v"), d, ParamGroup::Rest)?,
            ln_text: LayerNormParams::new(store, &format!("{name}.ln_t"), d, ParamGroup::Rest)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CldaOutput {
    pub visual: Var,
    pub text: Var,
    pub srm: SrmOutput,
    pub visual_attn: Option<DiffAttnOutput>,
    pub text_attn: Option<DiffAttnOutput>,
}

/// Runs SRM on `xyz` and both filter-then-enhance branches.
///
/// `fv` is `[n_p × d]` (row `i` belongs to point `i` of `xyz`), `ft` is `[l_t × d]`.
#[allow(clippy::too_many_arguments)]
pub fn clda_forward(
    tape: &mut Tape,
    bind: &Binding,
    kind: AttentionKind,
    fv: Var,
    ft: Var,
    xyz: &Tensor,
    fps_start: usize,
    p: &CldaParams,
) -> Result<CldaOutput> {
    let n_p = xyz.rows();
    if tape.value(fv).rows() != n_p {
        return Err(TensorError::ShapeMismatch {
            op: "clda_forward",
            lhs: tape.shape(fv).to_vec(),
            rhs: xyz.shape().to_vec(),
        }
        .into());
    }
    let srm = srm_forward(
        tape,
        bind,
        xyz,
        p.cfg.n_clust,
        p.cfg.k_graph,
        fps_start,
        &p.srm,
    )?;
    let v = lda_block(tape, bind, kind, fv, srm.f_orel, &p.visual)?;
    let t = lda_block(tape, bind, kind, ft, srm.f_ctr, &p.text)?;
    let visual = p.ln_visual.forward(tape, bind, v.out)?;
    let text = p.ln_text.forward(tape, bind, t.out)?;
    Ok(CldaOutput {
        visual,
        text,
        srm,
        visual_attn: v.attn,
        text_attn: t.attn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;

    fn brute_fps(points: &Tensor, m: usize) -> Vec<usize> {
        let n = points.rows();
        let mut sel = vec![0];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..n {
                let d = sel
                    .iter()
                    .map(|&s| sq_dist(points.row(i), points.row(s)))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    fn cloud(rng: &mut SplitMix64, n: usize) -> Tensor {
        Tensor::new([n, 3], (0..3 * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn fps_square_corners() {
        let pts = Tensor::from_points(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps(&pts, 4, 0).unwrap(), vec![0, 3, 1, 2]);
        assert!(fps(&pts, 5, 0).is_err());
    }

    #[test]
    fn fps_matches_brute_force() {
        for seed in 0..30 {
            let mut rng = SplitMix64::new(seed);
            let pts = cloud(&mut rng, 16);
            assert_eq!(fps(&pts, 4, 0).unwrap(), brute_fps(&pts, 4));
        }
    }

    #[test]
    fn knn_examples() {
        let mut rng = SplitMix64::new(3);
        let pts = cloud(&mut rng, 1024);
        let a = cluster(&pts, 64, 0).unwrap();
        assert_eq!(a.cluster_size(), 16);
        for (c, m) in a.members.iter().enumerate() {
            assert_eq!(m[0], a.centroid_indices[c]);
        }
        assert!(matches!(
            cluster(&pts, 48, 0),
            Err(CldaError::Indivisible { .. })
        ));
    }

    #[test]
    fn knn_graph_rejects_dense() {
        let pts = Tensor::zeros([4, 3]);
        assert!(knn_graph(&pts, 4).is_err());
        // all-equal distances fall back to index order
        assert_eq!(knn_graph(&pts, 2).unwrap()[2], vec![0, 1]);
    }

    fn srm_setup(d: usize) -> (ParamStore, SrmParams) {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        let p = SrmParams {
            intra: IntraEncoder::new(&mut store, "intra", d, &mut rng).unwrap(),
            edge: EdgeConv::new(&mut store, "edge", d, &mut rng).unwrap(),
            ctr: Linear::new(&mut store, "ctr", 3, d, true, ParamGroup::Rest, &mut rng).unwrap(),
        };
        (store, p)
    }

    #[test]
    fn degenerate_clusters_share_features() {
        let (store, p) = srm_setup(4);
        let mut rng = SplitMix64::new(2);
        let pts = cloud(&mut rng, 8);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s = srm_forward(&mut tape, &bind, &pts, 8, 2, 0, &p).unwrap();
        let f = tape.value(s.f_irel);
        for r in 1..8 {
            assert_eq!(f.row(r), f.row(0));
        }
        // identical F_iRel makes every edge difference zero
        let g = tape.value(s.f_orel);
        for r in 1..8 {
            assert_eq!(g.row(r), g.row(0));
        }
    }

    #[test]
    fn translation_leaves_relations_unchanged() {
        let (store, p) = srm_setup(6);
        let mut rng = SplitMix64::new(9);
        let pts = cloud(&mut rng, 24);
        let shift = [0.75, -1.5, 0.25];
        let moved = Tensor::new(
            [24, 3],
            pts.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + shift[i % 3])
                .collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = srm_forward(&mut tape, &bind, &pts, 4, 2, 0, &p).unwrap();
        let b = srm_forward(&mut tape, &bind, &moved, 4, 2, 0, &p).unwrap();
        assert_eq!(a.assign.centroid_indices, b.assign.centroid_indices);
        assert!(tape.value(a.f_irel).max_abs_diff(tape.value(b.f_irel)) < 1e-12);
        assert!(tape.value(a.f_orel).max_abs_diff(tape.value(b.f_orel)) < 1e-12);
        let w = store.get(p.ctr.weight);
        let delta = Tensor::new([1, 3], shift.to_vec())
            .unwrap()
            .matmul(w)
            .unwrap();
        let (fa, fb) = (tape.value(a.f_ctr), tape.value(b.f_ctr));
        for r in 0..4 {
            for c in 0..6 {
                assert!((fb.at(r, c) - fa.at(r, c) - delta.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clda_preserves_row_counts() {
        let mut rng = SplitMix64::new(4);
        let mut store = ParamStore::new();
        let p = CldaParams::new(&mut store, "clda", CldaConfig::new(8, 2, 4, 2), &mut rng).unwrap();
        let pts = cloud(&mut rng, 16);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let fv = tape.constant(normal(&mut rng, &[16, 8], 1.0));
        let ft = tape.constant(normal(&mut rng, &[5, 8], 1.0));
        let o = clda_forward(
            &mut tape,
            &bind,
            AttentionKind::Differential,
            fv,
            ft,
            &pts,
            0,
            &p,
        )
        .unwrap();
        assert_eq!(tape.shape(o.visual), &[16, 8]);
        assert_eq!(tape.shape(o.text), &[5, 8]);
        let bad = cloud(&mut rng, 15);
        assert!(clda_forward(
            &mut tape,
            &bind,
            AttentionKind::Differential,
            fv,
            ft,
            &bad,
            0,
            &p
        )
        .is_err());
    }
}
