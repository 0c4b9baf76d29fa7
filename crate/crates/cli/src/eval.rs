use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use crossdiff_core::config::RunConfig;
use crossdiff_core::geomloss::iou3d;
use crossdiff_core::model::{evaluate, read_checkpoint, GroundingModel, GroundingSample};
use crossdiff_core::scenes::{mask_iou, subset_report, SampleResult, SubsetReport};
use crossdiff_core::Box3D;
use serde::{Deserialize, Serialize};

use crate::scenes::{samples, Split};
use crate::train::CHECKPOINT_FILE;
use crate::{mark_done, prepare_dir, write_json, Common, CONFIG_FILE};

/// One externally produced prediction, in corpus order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalPrediction {
    pub bbox: Box3D,
    /// Per-point probability (or 0/1) for the referred object.
    pub mask: Vec<f64>,
}

pub fn load_model(run: &Path) -> Result<(RunConfig, GroundingModel)> {
    let config = RunConfig::load(&run.join(CONFIG_FILE))
        .with_context(|| format!("reading {}/{CONFIG_FILE}", run.display()))?;
    let mut model = GroundingModel::new(config.model(), config.seed())?;
    let path = run.join(CHECKPOINT_FILE);
    let mut f =
        BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
    model.load_entries(read_checkpoint(&mut f)?)?;
    Ok((config, model))
}

/// Scores predictions against the ground truth of `samples`.
pub fn score(preds: &[ExternalPrediction], samples: &[GroundingSample]) -> Result<SubsetReport> {
    if preds.len() != samples.len() {
        bail!(
            "{} predictions for {} expressions",
            preds.len(),
            samples.len()
        );
    }
    let mut results = Vec::with_capacity(preds.len());
    for (i, (p, s)) in preds.iter().zip(samples).enumerate() {
        if p.mask.len() != s.gt_mask.len() {
            bail!(
                "prediction {i}: mask has {} points, scene has {}",
                p.mask.len(),
                s.gt_mask.len()
            );
        }
        let pm: Vec<bool> = p.mask.iter().map(|&x| x > 0.5).collect();
        let gm: Vec<bool> = s.gt_mask.iter().map(|&x| x > 0.5).collect();
        results.push(SampleResult {
            box_iou: iou3d(&p.bbox, &s.gt_box),
            mask_iou: mask_iou(&pm, &gm),
            tags: s.tags.clone(),
        });
    }
    Ok(subset_report(&results))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ExternalPrediction>> {
    let f =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

pub enum Source<'a> {
    /// A finished training run directory.
    Run(&'a Path),
    /// A JSONL file of [`ExternalPrediction`] scored against the configured corpus.
    Predictions(&'a Path),
}

pub fn run(c: &Common, source: Source<'_>, split: Split) -> Result<SubsetReport> {
    let report = match source {
        Source::Run(dir) => {
            let (config, model) = load_model(dir)?;
            prepare_dir(&c.out, &config, c.force)?;
            let evaluation = evaluate(&model, &samples(&config, split)?)?;
            write_json(&c.out.join("predictions.json"), &evaluation.predictions)?;
            evaluation.report
        }
        Source::Predictions(path) => {
            prepare_dir(&c.out, &c.config, c.force)?;
            score(&read_predictions(path)?, &samples(&c.config, split)?)?
        }
    };
    fs::write(c.out.join("report.txt"), report.table())?;
    write_json(&c.out.join("report.json"), &report)?;
    print!("{}", report.table());
    mark_done(&c.out)?;
    Ok(report)
}
