use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use crossdiff_core::model::{
    evaluate, write_checkpoint, Evaluation, GroundingModel, GroundingSample, Trainer,
};
use crossdiff_core::tensor::{write_dump, Tape};

use crate::scenes::{samples, Split};
use crate::{mark_done, prepare_dir, write_json, Common};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.pcxd";

#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    /// Evaluation on the training scenes.
    pub evaluation: Evaluation,
    pub elapsed: Duration,
}

/// `out/<config hash>`
pub fn run_dir(c: &Common) -> PathBuf {
    c.out.join(c.config.hash())
}

pub fn run(c: &Common) -> Result<TrainOutcome> {
    let dir = run_dir(c);
    prepare_dir(&dir, &c.config, c.force)?;
    let start = Instant::now();
    let train = samples(&c.config, Split::Train)?;
    let model = GroundingModel::new(c.config.model(), c.config.seed())?;
    let mut trainer = Trainer::new(model, c.config.train());

    let mut log = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let mut io_err = None;
    let fitted = trainer.fit(&train, |m| {
        if io_err.is_none() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics");
    }
    if let Err(e) = fitted {
        let dump = dir.join("nonfinite");
        dump_state(&dump, &trainer, &train)?;
        return Err(anyhow!(e))
            .with_context(|| format!("training failed; parameters dumped to {}", dump.display()));
    }

    let mut ckpt = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&mut ckpt, &trainer.named_tensors())?;
    ckpt.flush()?;

    let evaluation = evaluate(&trainer.model, &train)?;
    fs::write(dir.join("train_report.txt"), evaluation.report.table())?;
    write_json(&dir.join("train_eval.json"), &evaluation)?;
    if c.config.get::<bool>("trace.dump")? {
        dump_traces(&dir.join("traces"), &trainer.model, &train[0])?;
    }
    mark_done(&dir)?;
    Ok(TrainOutcome {
        dir,
        evaluation,
        elapsed: start.elapsed(),
    })
}

/// Parameters, task weights and the inputs of every training sample.
fn dump_state(dir: &Path, trainer: &Trainer, samples: &[GroundingSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in trainer.named_tensors() {
        write_dump(dir.join(format!("{name}.pcxd")), &t)?;
    }
    for (i, s) in samples.iter().enumerate() {
        write_dump(dir.join(format!("sample{i}.xyz.pcxd")), &s.xyz)?;
        write_dump(dir.join(format!("sample{i}.features.pcxd")), &s.features)?;
    }
    Ok(())
}

/// Attention maps and λ of every differential block for one sample.
pub fn dump_traces(dir: &Path, model: &GroundingModel, s: &GroundingSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tape = Tape::new();
    let bind = model.store.bind_frozen(&mut tape);
    let f = model.forward(&mut tape, &bind, s)?;
    let clda = f.clda.as_ref();
    let traces = [
        ("plda.v2t", f.plda_v2t.as_ref()),
        ("plda.t2v", f.plda_t2v.as_ref()),
        ("clda.lda_v", clda.and_then(|c| c.visual_attn.as_ref())),
        ("clda.lda_t", clda.and_then(|c| c.text_attn.as_ref())),
    ];
    for (name, t) in traces {
        if let Some(t) = t {
            t.trace(&tape).write_dumps(dir, name)?;
        }
    }
    Ok(())
}
