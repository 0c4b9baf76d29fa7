use std::fs;

use anyhow::{Context, Result};
use crossdiff_core::config::RunConfig;
use crossdiff_core::model::{build_samples, GroundingSample};
use crossdiff_core::scenes::Corpus;

use crate::{mark_done, prepare_dir, Common};

/// Offset between the training and held-out scene seeds.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            other => Err(format!("unknown split {other:?} (train or eval)")),
        }
    }
}

pub fn corpus(config: &RunConfig, split: Split) -> Result<Corpus> {
    let (base, key) = match split {
        Split::Train => (config.seed(), "scenes.n_train"),
        Split::Eval => (
            config.seed().wrapping_add(EVAL_SEED_OFFSET),
            "scenes.n_eval",
        ),
    };
    let n: usize = config.get(key)?;
    let per: usize = config.get("scenes.per_scene")?;
    Ok(Corpus::generate(base, n, per, &config.scene())?)
}

pub fn samples(config: &RunConfig, split: Split) -> Result<Vec<GroundingSample>> {
    Ok(build_samples(&corpus(config, split)?, &config.model())?)
}

/// Writes `train.json` and `eval.json` corpora.
pub fn run(c: &Common) -> Result<()> {
    prepare_dir(&c.out, &c.config, c.force)?;
    for (split, name) in [(Split::Train, "train.json"), (Split::Eval, "eval.json")] {
        let corpus = corpus(&c.config, split)?;
        fs::write(c.out.join(name), corpus.to_json()?)
            .with_context(|| format!("writing {name}"))?;
        println!(
            "{name}: {} scenes, {} expressions",
            corpus.entries.len(),
            corpus.n_expressions()
        );
    }
    mark_done(&c.out)
}
