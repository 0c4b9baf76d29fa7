//! Per-sample tensors and the fixed point hierarchy used by the encoder.

use super::{ModelConfig, ModelError, Result, SCALE3_STRIDE};
use crate::clda::fps;
use crate::geomloss::Box3D;
use crate::rng::SplitMix64;
use crate::scenes::{Corpus, Expression, Scene, Tag};
use crate::tensor::Tensor;

const FPS_START_SALT: u64 = 0xC1A5_7E12_0000_0001;

/// Sampling and grouping indices, functions of the coordinates only.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub k: usize,
    /// Flattened `[n3 × k]` fine-point indices.
    pub group3: Vec<usize>,
    /// `[n3·k × 3]` neighbour minus centre.
    pub rel3: Tensor,
    /// Flattened `[n_sem × k]` scale-3 indices.
    pub group4: Vec<usize>,
    pub rel4: Tensor,
    /// Nearest scale-3 token of each fine point.
    pub parent2: Vec<usize>,
    /// Nearest coarse token of each scale-3 token.
    pub parent3: Vec<usize>,
    pub xyz3: Tensor,
    pub xyz4: Tensor,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` nearest rows of `points` to `q`, nearest first, ties to the lower index.
fn knn(points: &Tensor, q: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.rows())
        .map(|i| (sq(points.row(i), q), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

fn gather(points: &Tensor, idx: &[usize]) -> Tensor {
    let c = points.cols();
    let data = idx
        .iter()
        .flat_map(|&i| points.row(i).iter().copied())
        .collect();
    Tensor::new([idx.len(), c], data).unwrap()
}

fn group(points: &Tensor, centres: &Tensor, k: usize) -> (Vec<usize>, Tensor) {
    let mut idx = Vec::with_capacity(centres.rows() * k);
    let mut rel = Vec::with_capacity(centres.rows() * k * 3);
    for c in 0..centres.rows() {
        let ctr = centres.row(c);
        for j in knn(points, ctr, k) {
            idx.push(j);
            rel.extend(points.row(j).iter().zip(ctr).map(|(p, q)| p - q));
        }
    }
    let n = idx.len();
    (idx, Tensor::new([n, 3], rel).unwrap())
}

impl Hierarchy {
    pub fn build(xyz: &Tensor, n3: usize, n4: usize, k: usize) -> Result<Self> {
        let idx3 = fps(xyz, n3, 0)?;
        let xyz3 = gather(xyz, &idx3);
        let idx4 = fps(&xyz3, n4, 0)?;
        let xyz4 = gather(&xyz3, &idx4);
        let (group3, rel3) = group(xyz, &xyz3, k);
        let (group4, rel4) = group(&xyz3, &xyz4, k);
        let parent2 = (0..xyz.rows())
            .map(|i| knn(&xyz3, xyz.row(i), 1)[0])
            .collect();
        let parent3 = (0..xyz3.rows())
            .map(|i| knn(&xyz4, xyz3.row(i), 1)[0])
            .collect();
        Ok(Self {
            k,
            group3,
            rel3,
            group4,
            rel4,
            parent2,
            parent3,
            xyz3,
            xyz4,
        })
    }
}

/// One (scene, expression) pair ready for the model.
#[derive(Clone, Debug)]
pub struct GroundingSample {
    pub scene_seed: u64,
    pub text: String,
    pub xyz: Tensor,
    /// `[n × 6]` xyz and rgb.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub class: usize,
    pub gt_box: Box3D,
    /// 1 for target points, 0 elsewhere.
    pub gt_mask: Vec<f64>,
    pub tags: Vec<Tag>,
    pub fps_start: usize,
    pub hierarchy: Hierarchy,
}

impl GroundingSample {
    pub fn new(scene: &Scene, expr: &Expression, cfg: &ModelConfig) -> Result<Self> {
        let n = scene.n_points();
        if n != cfg.n_points {
            return Err(ModelError::Invalid(format!(
                "scene has {n} points, model expects {}",
                cfg.n_points
            )));
        }
        if expr.tokens.is_empty() || expr.tokens.len() > cfg.max_tokens {
            return Err(ModelError::Invalid(format!(
                "{} tokens, model accepts 1..={}",
                expr.tokens.len(),
                cfg.max_tokens
            )));
        }
        let target = scene
            .objects
            .iter()
            .find(|o| o.id == expr.target)
            .ok_or_else(|| ModelError::Invalid(format!("no object {}", expr.target)))?;
        let xyz = scene.xyz();
        let hierarchy = Hierarchy::build(&xyz, n / SCALE3_STRIDE, cfg.n_sem, cfg.group_k)?;
        let fps_start = if cfg.fps_random_start {
            SplitMix64::new(scene.seed ^ FPS_START_SALT).below(n)
        } else {
            0
        };
        Ok(Self {
            scene_seed: scene.seed,
            text: expr.text.clone(),
            features: scene.features(),
            xyz,
            tokens: expr.tokens.iter().map(|&t| t as usize).collect(),
            class: target.class.index(),
            gt_box: target.bbox,
            gt_mask: scene
                .object_mask(target.id)
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
            tags: expr.tags.clone(),
            fps_start,
            hierarchy,
        })
    }
}

/// Every expression of every scene, in corpus order.
pub fn build_samples(corpus: &Corpus, cfg: &ModelConfig) -> Result<Vec<GroundingSample>> {
    let mut out = Vec::with_capacity(corpus.n_expressions());
    for e in &corpus.entries {
        for x in &e.expressions {
            out.push(GroundingSample::new(&e.scene, x, cfg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchy_maps_are_consistent() {
        let mut rng = SplitMix64::new(5);
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let xyz = Tensor::from_points(&pts).unwrap();
        let h = Hierarchy::build(&xyz, 16, 4, 3).unwrap();
        assert_eq!(h.group3.len(), 48);
        assert_eq!(h.parent2.len(), 64);
        assert_eq!(h.parent3.len(), 16);
        assert!(h.parent2.iter().all(|&p| p < 16) && h.parent3.iter().all(|&p| p < 4));
        // each centre is its own nearest neighbour
        for c in 0..16 {
            let first = h.group3[c * 3];
            assert_eq!(xyz.row(first), h.xyz3.row(c));
            assert_eq!(h.rel3.row(c * 3), &[0.0, 0.0, 0.0]);
        }
        // parent is the brute-force nearest centre
        for i in 0..64 {
            let best = (0..16)
                .min_by(|&a, &b| {
                    sq(xyz.row(i), h.xyz3.row(a)).total_cmp(&sq(xyz.row(i), h.xyz3.row(b)))
                })
                .unwrap();
            assert_eq!(
                sq(xyz.row(i), h.xyz3.row(best)),
                sq(xyz.row(i), h.xyz3.row(h.parent2[i]))
            );
        }
    }
}
