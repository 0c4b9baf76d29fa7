//! Templated referring expressions over a closed vocabulary.

use serde::{Deserialize, Serialize};

use super::{Color, ObjectClass, Scene, SceneError};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Unique,
    Multiple,
    Implicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionFamily {
    Attribute,
    Explicit,
    Implicit,
}

/// Sampling weights of attribute, explicit-relation and implicit-relation templates.
pub const FAMILY_WEIGHTS: [(ExpressionFamily, f64); 3] = [
    (ExpressionFamily::Attribute, 0.4),
    (ExpressionFamily::Explicit, 0.3),
    (ExpressionFamily::Implicit, 0.3),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitCategory {
    Physical,
    Functional,
    Contextual,
}

impl ImplicitCategory {
    pub fn name(self) -> &'static str {
        match self {
            Self::Physical => "physical",
            Self::Functional => "functional",
            Self::Contextual => "contextual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Object id of the referent.
    pub target: usize,
    pub tags: Vec<Tag>,
    pub family: ExpressionFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ImplicitCategory>,
}

impl Expression {
    pub fn has_tag(&self, t: Tag) -> bool {
        self.tags.contains(&t)
    }
}

const FILLER_WORDS: &[&str] = &[
    "the",
    "a",
    "that",
    "is",
    "find",
    "colored",
    "to",
    "left",
    "right",
    "of",
    "behind",
    "in",
    "front",
    "above",
    "below",
    "next",
    "resting",
    "sitting",
    "lying",
    "on",
    "holding",
    "supporting",
    "carrying",
    "belongs",
    "with",
    "goes",
    "used",
];

/// Closed vocabulary: filler words, then class names, then color names.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<&'static str> = FILLER_WORDS.to_vec();
        words.extend(ObjectClass::ALL.iter().map(|c| c.name()));
        words.extend(Color::ALL.iter().map(|c| c.name()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, w: &str) -> Option<u32> {
        self.words.iter().position(|x| *x == w).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }
}

/// Whitespace tokenization against the default [`Vocab`].
pub fn tokenize(text: &str) -> Result<Vec<u32>, String> {
    let vocab = Vocab::default();
    text.split_whitespace()
        .map(|w| {
            let w = w.to_ascii_lowercase();
            vocab
                .id(&w)
                .ok_or_else(|| format!("word {w:?} not in vocabulary"))
        })
        .collect()
}

fn named(scene: &Scene, id: usize) -> String {
    let o = &scene.objects[id];
    format!("{} {}", o.color.name(), o.class.name())
}

fn center_xy(scene: &Scene, id: usize) -> [f64; 2] {
    let c = scene.objects[id].bbox.center();
    [c[0], c[1]]
}

fn dist_xy(scene: &Scene, a: usize, b: usize) -> f64 {
    let (p, q) = (center_xy(scene, a), center_xy(scene, b));
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    LeftOf,
    RightOf,
    Behind,
    InFrontOf,
    Above,
    Below,
    NextTo,
}

impl Relation {
    const ALL: [Relation; 7] = [
        Self::LeftOf,
        Self::RightOf,
        Self::Behind,
        Self::InFrontOf,
        Self::Above,
        Self::Below,
        Self::NextTo,
    ];

    fn phrase(self) -> &'static str {
        match self {
            Self::LeftOf => "to the left of",
            Self::RightOf => "to the right of",
            Self::Behind => "behind",
            Self::InFrontOf => "in front of",
            Self::Above => "above",
            Self::Below => "below",
            Self::NextTo => "next to",
        }
    }
}

/// Whether object `t` of the scene is the closest object of its class to `anchor`.
fn nearest_of_class(scene: &Scene, t: usize, anchor: usize) -> bool {
    let class = scene.objects[t].class;
    let d = dist_xy(scene, t, anchor);
    scene
        .objects
        .iter()
        .filter(|o| o.class == class && o.id != t && o.id != anchor)
        .all(|o| dist_xy(scene, o.id, anchor) > d)
}

fn holds(scene: &Scene, rel: Relation, t: usize, a: usize) -> bool {
    let (bt, ba) = (&scene.objects[t].bbox, &scene.objects[a].bbox);
    let ct = bt.center();
    match rel {
        Relation::LeftOf => ct[0] < ba.min[0],
        Relation::RightOf => ct[0] > ba.max[0],
        Relation::Behind => ct[1] > ba.max[1],
        Relation::InFrontOf => ct[1] < ba.min[1],
        Relation::Above => scene.objects[t].resting_on == Some(a),
        Relation::Below => scene.objects[a].resting_on == Some(t),
        Relation::NextTo => nearest_of_class(scene, t, a),
    }
}

struct Candidate {
    target: usize,
    text: String,
    category: Option<ImplicitCategory>,
}

fn attribute_options(scene: &Scene) -> Vec<Candidate> {
    let mut out = Vec::new();
    for o in &scene.objects {
        let same_color = scene
            .objects
            .iter()
            .filter(|p| p.class == o.class && p.color == o.color)
            .count();
        if same_color != 1 {
            continue;
        }
        let (c, k) = (o.color.name(), o.class.name());
        for text in [
            format!("the {c} {k}"),
            format!("the {k} that is {c}"),
            format!("find the {c} {k}"),
            format!("a {c} colored {k}"),
        ] {
            out.push(Candidate {
                target: o.id,
                text,
                category: None,
            });
        }
    }
    out
}

fn explicit_options(scene: &Scene) -> Vec<Candidate> {
    let mut out = Vec::new();
    for t in &scene.objects {
        for a in &scene.objects {
            if a.class == t.class {
                continue;
            }
            for rel in Relation::ALL {
                if !holds(scene, rel, t.id, a.id) {
                    continue;
                }
                let rivals = scene
                    .objects
                    .iter()
                    .filter(|o| o.class == t.class && o.id != t.id && holds(scene, rel, o.id, a.id))
                    .count();
                if rivals == 0 {
                    out.push(Candidate {
                        target: t.id,
                        text: format!(
                            "the {} {} the {}",
                            t.class.name(),
                            rel.phrase(),
                            named(scene, a.id)
                        ),
                        category: None,
                    });
                }
            }
        }
    }
    out
}

fn implicit_options(scene: &Scene) -> Vec<Candidate> {
    let mut out = Vec::new();
    for t in &scene.objects {
        let k = t.class.name();
        if let Some(s) = t.resting_on {
            for verb in ["resting on", "sitting on", "lying on"] {
                out.push(Candidate {
                    target: t.id,
                    text: format!("the {k} {verb} the {}", named(scene, s)),
                    category: Some(ImplicitCategory::Physical),
                });
            }
        }
        for o in scene.objects.iter().filter(|o| o.resting_on == Some(t.id)) {
            for verb in ["holding", "supporting", "carrying"] {
                out.push(Candidate {
                    target: t.id,
                    text: format!("the {k} {verb} the {}", named(scene, o.id)),
                    category: Some(ImplicitCategory::Functional),
                });
            }
        }
        for a in &scene.objects {
            let stacked = t.resting_on == Some(a.id) || a.resting_on == Some(t.id);
            if a.class == t.class || stacked || !nearest_of_class(scene, t.id, a.id) {
                continue;
            }
            for phrase in ["that belongs with", "that goes with", "used with"] {
                out.push(Candidate {
                    target: t.id,
                    text: format!("the {k} {phrase} the {}", named(scene, a.id)),
                    category: Some(ImplicitCategory::Contextual),
                });
            }
        }
    }
    out
}

/// Samples a family by [`FAMILY_WEIGHTS`], then a uniformly random applicable
/// (target, template) pair of that family. A family with no applicable
/// template falls back to the next one in attribute → explicit → implicit order.
pub fn generate_expression(scene: &Scene, rng: &mut SplitMix64) -> Result<Expression, SceneError> {
    let weights: Vec<f64> = FAMILY_WEIGHTS.iter().map(|f| f.1).collect();
    let first = rng.weighted(&weights);
    for k in 0..FAMILY_WEIGHTS.len() {
        let family = FAMILY_WEIGHTS[(first + k) % FAMILY_WEIGHTS.len()].0;
        let options = match family {
            ExpressionFamily::Attribute => attribute_options(scene),
            ExpressionFamily::Explicit => explicit_options(scene),
            ExpressionFamily::Implicit => implicit_options(scene),
        };
        if options.is_empty() {
            continue;
        }
        let c = &options[rng.below(options.len())];
        let class = scene.objects[c.target].class;
        let mut tags = vec![if scene.count_class(class) >= 2 {
            Tag::Multiple
        } else {
            Tag::Unique
        }];
        if family == ExpressionFamily::Implicit {
            tags.push(Tag::Implicit);
        }
        let tokens = tokenize(&c.text).map_err(|_| SceneError::NoTemplate)?;
        return Ok(Expression {
            text: c.text.clone(),
            tokens,
            target: c.target,
            tags,
            family,
            category: c.category,
        });
    }
    Err(SceneError::NoTemplate)
}
