//! Synthetic multi-object scenes, templated referring expressions and the
//! grounding metrics computed over them.
//!
//! A scene is a floor patch with axis-aligned objects. Large objects stand on
//! the floor without overlapping; small objects are stacked on top of free
//! support objects when one exists. Every object owns a fixed share of the
//! point budget, sampled uniformly inside its volume, and its box is then
//! tightened to those points. All randomness comes from [`SplitMix64`], so a
//! seed reproduces a scene exactly on every platform.

mod expr;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::geomloss::Box3D;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub use expr::{
    generate_expression, tokenize, Expression, ExpressionFamily, ImplicitCategory, Tag, Vocab,
    FAMILY_WEIGHTS,
};
pub use metrics::{
    acc_at_iou, acc_at_mask_iou, mask_iou, miou, subset_report, GroupMetrics, SampleResult,
    SubsetReport,
};

/// Side length of the square floor.
pub const ROOM_SIZE: f64 = 4.0;
/// Minimum clearance between floor-standing footprints.
const FOOTPRINT_GAP: f64 = 0.1;
const PLACEMENT_TRIES: usize = 500;
/// Fraction of the point budget spent on the floor.
const BACKGROUND_FRACTION: f64 = 0.25;
const COLOR_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Table,
    Cabinet,
    Chair,
    Sofa,
    Lamp,
    Laptop,
    Vase,
    Book,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Can carry a small object.
    Support,
    Floor,
    /// Stacked on a support when possible.
    Small,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 8] = [
        Self::Table,
        Self::Cabinet,
        Self::Chair,
        Self::Sofa,
        Self::Lamp,
        Self::Laptop,
        Self::Vase,
        Self::Book,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Cabinet => "cabinet",
            Self::Chair => "chair",
            Self::Sofa => "sofa",
            Self::Lamp => "lamp",
            Self::Laptop => "laptop",
            Self::Vase => "vase",
            Self::Book => "book",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn placement(self) -> Placement {
        match self {
            Self::Table | Self::Cabinet => Placement::Support,
            Self::Chair | Self::Sofa => Placement::Floor,
            _ => Placement::Small,
        }
    }

    /// `(lo, hi)` ranges of the full extents along x, y, z.
    fn size_ranges(self) -> [(f64, f64); 3] {
        match self {
            Self::Table => [(0.8, 1.2), (0.6, 0.9), (0.6, 0.8)],
            Self::Cabinet => [(0.5, 0.8), (0.4, 0.6), (0.8, 1.1)],
            Self::Chair => [(0.4, 0.6), (0.4, 0.6), (0.7, 0.9)],
            Self::Sofa => [(1.2, 1.6), (0.6, 0.8), (0.6, 0.8)],
            Self::Lamp => [(0.15, 0.25), (0.15, 0.25), (0.3, 0.5)],
            Self::Laptop => [(0.25, 0.35), (0.2, 0.3), (0.04, 0.08)],
            Self::Vase => [(0.1, 0.2), (0.1, 0.2), (0.2, 0.35)],
            Self::Book => [(0.15, 0.25), (0.1, 0.2), (0.04, 0.07)],
        }
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::White,
        Self::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::White => "white",
            Self::Black => "black",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [0.85, 0.15, 0.15],
            Self::Green => [0.15, 0.7, 0.2],
            Self::Blue => [0.15, 0.25, 0.85],
            Self::Yellow => [0.9, 0.85, 0.15],
            Self::White => [0.95, 0.95, 0.95],
            Self::Black => [0.08, 0.08, 0.08],
        }
    }
}

const FLOOR_RGB: [f64; 3] = [0.5, 0.45, 0.4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub class: ObjectClass,
    pub color: Color,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    /// Id of the object this one is stacked on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resting_on: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    /// Owning object id per point, `None` for the floor.
    pub instance: Vec<Option<usize>>,
    pub objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct SceneRepr {
    seed: u64,
    /// `[x, y, z, instance_id]`, background is `-1`.
    points: Vec<[f64; 4]>,
    colors: Vec<[f64; 3]>,
    objects: Vec<SceneObject>,
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SceneRepr {
            seed: self.seed,
            points: self
                .points
                .iter()
                .zip(&self.instance)
                .map(|(p, id)| [p[0], p[1], p[2], id.map_or(-1.0, |i| i as f64)])
                .collect(),
            colors: self.colors.clone(),
            objects: self.objects.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = SceneRepr::deserialize(d)?;
        if r.colors.len() != r.points.len() {
            return Err(D::Error::custom("colors and points differ in length"));
        }
        let mut instance = Vec::with_capacity(r.points.len());
        for p in &r.points {
            let id = p[3];
            instance.push(if id < 0.0 {
                None
            } else if id.fract() == 0.0 && (id as usize) < r.objects.len() {
                Some(id as usize)
            } else {
                return Err(D::Error::custom(format!("bad instance id {id}")));
            });
        }
        Ok(Scene {
            seed: r.seed,
            points: r.points.iter().map(|p| [p[0], p[1], p[2]]).collect(),
            colors: r.colors,
            instance,
            objects: r.objects,
        })
    }
}

impl Scene {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn xyz(&self) -> Tensor {
        Tensor::from_points(&self.points).expect("scene has points")
    }

    /// `[n × 6]` rows of `(x, y, z, r, g, b)`.
    pub fn features(&self) -> Tensor {
        let data = self
            .points
            .iter()
            .zip(&self.colors)
            .flat_map(|(p, c)| p.iter().chain(c).copied())
            .collect();
        Tensor::new([self.points.len(), 6], data).unwrap()
    }

    pub fn object_mask(&self, id: usize) -> Vec<bool> {
        self.instance.iter().map(|&i| i == Some(id)).collect()
    }

    pub fn count_class(&self, class: ObjectClass) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }

    pub fn object_points(&self, id: usize) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points
            .iter()
            .zip(&self.instance)
            .filter(move |(_, i)| **i == Some(id))
            .map(|(p, _)| *p)
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.points.len() != self.instance.len() || self.points.len() != self.colors.len() {
            return Err("per-point arrays differ in length".into());
        }
        for (k, o) in self.objects.iter().enumerate() {
            if o.id != k {
                return Err(format!("object {k} carries id {}", o.id));
            }
            let pts: Vec<[f64; 3]> = self.object_points(k).collect();
            if pts.is_empty() {
                return Err(format!("object {k} owns no points"));
            }
            let tight = tight_box(&pts);
            if tight != o.bbox {
                return Err(format!("object {k} box is not tight"));
            }
        }
        for a in 0..self.objects.len() {
            for b in a + 1..self.objects.len() {
                if self.objects[a].bbox.intersects(&self.objects[b].bbox) {
                    return Err(format!("objects {a} and {b} overlap"));
                }
            }
        }
        Ok(())
    }
}

fn tight_box(pts: &[[f64; 3]]) -> Box3D {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Box3D { min, max }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_points: usize,
    pub n_objects: usize,
    /// Extra objects sharing the class of the first object.
    pub n_distractors: usize,
    pub classes: Vec<ObjectClass>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 256,
            n_objects: 4,
            n_distractors: 1,
            classes: ObjectClass::ALL.to_vec(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("could not place {class} after {tries} attempts")]
    Infeasible { class: ObjectClass, tries: usize },
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("no applicable expression template")]
    NoTemplate,
}

/// Generates one scene. Same seed and config give an identical scene.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    if cfg.n_objects == 0 || cfg.classes.is_empty() {
        return Err(SceneError::Config(
            "need at least one object and one class".into(),
        ));
    }
    let n_bg = ((cfg.n_points as f64) * BACKGROUND_FRACTION).floor() as usize;
    if cfg.n_points < n_bg + cfg.n_objects {
        return Err(SceneError::Config(format!(
            "{} points cannot cover {} objects",
            cfg.n_points, cfg.n_objects
        )));
    }
    let mut rng = SplitMix64::new(seed);

    // Class list: focus class repeated, then random fill, then a shuffle so
    // the repeats do not always take the lowest ids.
    let focus = cfg.classes[rng.below(cfg.classes.len())];
    let mut classes = vec![focus; (cfg.n_distractors + 1).min(cfg.n_objects)];
    while classes.len() < cfg.n_objects {
        classes.push(cfg.classes[rng.below(cfg.classes.len())]);
    }
    rng.shuffle(&mut classes);
    // Large objects first so small ones can find supports.
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by_key(|&i| (classes[i].placement() == Placement::Small, i));

    let mut raw: Vec<Option<(Box3D, Option<usize>)>> = vec![None; classes.len()];
    let mut footprints: Vec<Box3D> = Vec::new();
    let mut occupied: Vec<usize> = Vec::new();
    for &i in &order {
        let class = classes[i];
        let r = class.size_ranges();
        let size = [
            rng.uniform(r[0].0, r[0].1),
            rng.uniform(r[1].0, r[1].1),
            rng.uniform(r[2].0, r[2].1),
        ];
        let mut placed = None;
        if class.placement() == Placement::Small {
            let free: Vec<usize> = (0..classes.len())
                .filter(|&s| {
                    classes[s].placement() == Placement::Support
                        && raw[s].is_some()
                        && !occupied.contains(&s)
                })
                .collect();
            if !free.is_empty() {
                let s = free[rng.below(free.len())];
                let sb = raw[s].unwrap().0;
                let cx = rng.uniform(sb.min[0] + size[0] / 2.0, sb.max[0] - size[0] / 2.0);
                let cy = rng.uniform(sb.min[1] + size[1] / 2.0, sb.max[1] - size[1] / 2.0);
                let b = Box3D {
                    min: [cx - size[0] / 2.0, cy - size[1] / 2.0, sb.max[2]],
                    max: [cx + size[0] / 2.0, cy + size[1] / 2.0, sb.max[2] + size[2]],
                };
                occupied.push(s);
                placed = Some((b, Some(s)));
            }
        }
        if placed.is_none() {
            for _ in 0..PLACEMENT_TRIES {
                let cx = rng.uniform(size[0] / 2.0, ROOM_SIZE - size[0] / 2.0);
                let cy = rng.uniform(size[1] / 2.0, ROOM_SIZE - size[1] / 2.0);
                let b = Box3D {
                    min: [cx - size[0] / 2.0, cy - size[1] / 2.0, 0.0],
                    max: [cx + size[0] / 2.0, cy + size[1] / 2.0, size[2]],
                };
                let padded = Box3D {
                    min: [b.min[0] - FOOTPRINT_GAP, b.min[1] - FOOTPRINT_GAP, -1.0],
                    max: [b.max[0] + FOOTPRINT_GAP, b.max[1] + FOOTPRINT_GAP, 10.0],
                };
                if footprints.iter().all(|f| !f.intersects(&padded)) {
                    footprints.push(b);
                    placed = Some((b, None));
                    break;
                }
            }
        }
        match placed {
            Some(p) => raw[i] = Some(p),
            None => {
                return Err(SceneError::Infeasible {
                    class,
                    tries: PLACEMENT_TRIES,
                })
            }
        }
    }

    // Distinct colors within a class keep attribute phrases unambiguous.
    let mut colors = Vec::with_capacity(classes.len());
    for (i, &c) in classes.iter().enumerate() {
        let used: Vec<Color> = (0..i)
            .filter(|&j| classes[j] == c)
            .map(|j| colors[j])
            .collect();
        let avail: Vec<Color> = Color::ALL
            .into_iter()
            .filter(|col| !used.contains(col))
            .collect();
        let pool = if avail.is_empty() {
            Color::ALL.to_vec()
        } else {
            avail
        };
        colors.push(pool[rng.below(pool.len())]);
    }

    let per_obj = (cfg.n_points - n_bg) / cfg.n_objects;
    let n_bg = cfg.n_points - per_obj * cfg.n_objects;
    let mut points = Vec::with_capacity(cfg.n_points);
    let mut rgb = Vec::with_capacity(cfg.n_points);
    let mut instance = Vec::with_capacity(cfg.n_points);
    let noisy = |rng: &mut SplitMix64, base: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|a| (base[a] + rng.uniform(-COLOR_NOISE, COLOR_NOISE)).clamp(0.0, 1.0))
    };
    for _ in 0..n_bg {
        points.push([
            rng.uniform(0.0, ROOM_SIZE),
            rng.uniform(0.0, ROOM_SIZE),
            rng.uniform(-0.02, -0.005),
        ]);
        rgb.push(noisy(&mut rng, FLOOR_RGB));
        instance.push(None);
    }
    for (i, slot) in raw.iter().enumerate() {
        let (b, _) = slot.unwrap();
        for _ in 0..per_obj {
            points.push(std::array::from_fn(|a| rng.uniform(b.min[a], b.max[a])));
            rgb.push(noisy(&mut rng, colors[i].rgb()));
            instance.push(Some(i));
        }
    }

    let mut objects = Vec::with_capacity(classes.len());
    for (i, slot) in raw.iter().enumerate() {
        let pts: Vec<[f64; 3]> = points
            .iter()
            .zip(&instance)
            .filter(|(_, id)| **id == Some(i))
            .map(|(p, _)| *p)
            .collect();
        objects.push(SceneObject {
            id: i,
            class: classes[i],
            color: colors[i],
            bbox: tight_box(&pts),
            resting_on: slot.unwrap().1,
        });
    }
    Ok(Scene {
        seed,
        points,
        colors: rgb,
        instance,
        objects,
    })
}

/// One scene with its expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub scene: Scene,
    pub expressions: Vec<Expression>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    /// `n_scenes` scenes seeded `base_seed, base_seed + 1, …`, each with
    /// `per_scene` expressions.
    pub fn generate(
        base_seed: u64,
        n_scenes: usize,
        per_scene: usize,
        cfg: &SceneConfig,
    ) -> Result<Self, SceneError> {
        let mut entries = Vec::with_capacity(n_scenes);
        for k in 0..n_scenes {
            let seed = base_seed.wrapping_add(k as u64);
            let scene = generate_scene(seed, cfg)?;
            let mut rng = SplitMix64::new(seed ^ 0x5eed_e49e);
            let expressions = (0..per_scene)
                .map(|_| generate_expression(&scene, &mut rng))
                .collect::<Result<_, _>>()?;
            entries.push(CorpusEntry { scene, expressions });
        }
        Ok(Self { entries })
    }

    pub fn n_expressions(&self) -> usize {
        self.entries.iter().map(|e| e.expressions.len()).sum()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
