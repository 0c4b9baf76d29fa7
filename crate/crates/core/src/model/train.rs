//! Optimisation loop and evaluation.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{GroundingModel, GroundingSample, ModelError, ObjectiveOptions, Result};
use crate::dgtl::{conflict_penalty, DgtlConfig, DgtlState, GradSnapshot, PairCosine, TaskKind};
use crate::geomloss::{iou3d, Box3D};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::scenes::{mask_iou, subset_report, SampleResult, SubsetReport};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub log_every: u64,
    pub adam: AdamConfig,
    pub lr_weights: f64,
    pub dgtl: DgtlConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            log_every: 1,
            adam: AdamConfig::default(),
            lr_weights: 1e-3,
            dgtl: DgtlConfig::default(),
            seed: 0,
        }
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Batch-mean objective plus the conflict penalty.
    pub loss: f64,
    pub tasks: BTreeMap<String, f64>,
    pub weights: Vec<f64>,
    pub penalty: f64,
    pub cosines: Vec<PairCosine>,
    /// Batch mean over samples where the term was computed.
    pub geom: Option<f64>,
    pub geom_skipped: usize,
    pub zeta: f64,
    pub eta: f64,
}

pub struct Trainer {
    pub model: GroundingModel,
    pub cfg: TrainConfig,
    pub state: DgtlState,
    adam: Adam,
    adam_v: Adam,
    rng: SplitMix64,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: GroundingModel, cfg: TrainConfig) -> Self {
        let state = DgtlState::new(&cfg.dgtl, cfg.steps);
        Self {
            model,
            state,
            adam: Adam::new(cfg.adam),
            adam_v: Adam::new(cfg.adam),
            rng: SplitMix64::new(cfg.seed ^ 0xBA7C_0000_0000_0000),
            order: Vec::new(),
            cursor: 0,
            cfg,
        }
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// Next batch of indices from shuffled passes over `n` samples.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch);
        while out.len() < self.cfg.batch.min(n) {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimiser step on `batch`. Per-sample gradients are summed in
    /// batch order, so the result does not depend on anything but the inputs.
    pub fn train_step(&mut self, batch: &[&GroundingSample]) -> Result<StepMetrics> {
        let dgtl = self.model.cfg.dgtl_enabled;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut v_grad = vec![0.0; TaskKind::ALL.len()];
        let mut task_sum = [0.0; 5];
        let mut loss = 0.0;
        let mut geom_sum = 0.0;
        let mut geom_n = 0usize;
        let mut geom_skipped = 0usize;
        let mut snaps: Vec<GradSnapshot> = TaskKind::ALL
            .iter()
            .map(|&task| GradSnapshot {
                task,
                grad: Vec::new(),
            })
            .collect();

        for (i, s) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let bind = self.model.store.bind(&mut tape);
            let v = dgtl.then(|| {
                tape.leaf(
                    Tensor::new([1, 5], self.state.v.clone())
                        .unwrap()
                        .with_grad(),
                )
            });
            let opts = ObjectiveOptions {
                snapshots: dgtl,
                fixed_mask_box: None,
            };
            let obj = self
                .model
                .objective(&mut tape, &bind, s, &self.state, v, opts)
                .map_err(|e| non_finite_context(e, self.state.step, i))?;
            for &(t, l) in &obj.losses {
                task_sum[t.index()] += tape.item(l) * scale;
            }
            for (acc, s) in snaps.iter_mut().zip(obj.snapshots) {
                acc.grad.extend(s.grad);
            }
            match obj.geom {
                Some(g) => {
                    geom_sum += tape.item(g);
                    geom_n += 1;
                }
                None if obj.geom_skipped => geom_skipped += 1,
                None => {}
            }
            let root = tape.scale(obj.total, scale)?;
            loss += tape.item(root);
            let g = tape.backward(root)?;
            for (slot, &var) in grads.iter_mut().zip(bind.vars()) {
                if let Some(gv) = g.get(var) {
                    match slot {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(gv.data())
                            .for_each(|(a, b)| *a += b),
                        None => *slot = Some(gv.clone()),
                    }
                }
            }
            if let Some(v) = v {
                if let Some(gv) = g.get(v) {
                    v_grad.iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b);
                }
            }
        }

        let penalty = if dgtl {
            conflict_penalty(&self.state, &snaps)
        } else {
            crate::dgtl::Penalty {
                value: 0.0,
                pairs: Vec::new(),
            }
        };
        let metrics = StepMetrics {
            step: self.state.step,
            loss: loss + penalty.value,
            tasks: TaskKind::ALL
                .iter()
                .map(|t| (t.name().to_string(), task_sum[t.index()]))
                .collect(),
            weights: if dgtl {
                self.state.weights()
            } else {
                vec![1.0; 5]
            },
            penalty: penalty.value,
            cosines: penalty.pairs,
            geom: (geom_n > 0).then(|| geom_sum / geom_n as f64),
            geom_skipped,
            zeta: self.state.zeta(),
            eta: self.state.eta(),
        };
        if !metrics.loss.is_finite() {
            return Err(ModelError::Invalid(format!(
                "non-finite loss at step {}",
                self.state.step
            )));
        }
        self.adam.step(&mut self.model.store, &grads);
        if dgtl {
            self.adam_v
                .step_flat(&mut self.state.v, &v_grad, self.cfg.lr_weights);
        }
        self.state.step += 1;
        Ok(metrics)
    }

    /// Runs the remaining steps, handing each logged line to `log`.
    pub fn fit(
        &mut self,
        samples: &[GroundingSample],
        mut log: impl FnMut(&StepMetrics),
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(ModelError::Invalid("no training samples".into()));
        }
        while self.state.step < self.cfg.steps {
            let idx = self.next_batch(samples.len());
            let batch: Vec<&GroundingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let m = self.train_step(&batch)?;
            if m.step % self.cfg.log_every == 0 || m.step + 1 == self.cfg.steps {
                log(&m);
            }
        }
        Ok(())
    }

    /// Model parameters plus the task-weight vector, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        out.push((
            "loss.v".into(),
            Tensor::new([5], self.state.v.clone()).unwrap(),
        ));
        out
    }
}

fn non_finite_context(e: ModelError, step: u64, sample: usize) -> ModelError {
    match e {
        ModelError::Tensor(t) => {
            ModelError::Invalid(format!("step {step}, batch item {sample}: {t}"))
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub text: String,
    pub bbox: Box3D,
    pub box_iou: f64,
    pub mask_iou: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: SubsetReport,
    pub predictions: Vec<Prediction>,
}

/// Forward without gradients on every sample.
pub fn evaluate(model: &GroundingModel, samples: &[GroundingSample]) -> Result<Evaluation> {
    let mut results = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let f = model.forward(&mut tape, &bind, s)?;
        let b = tape.value(f.bbox).data();
        let bbox = Box3D::from_slice(b);
        let pred: Vec<bool> = tape.value(f.mask).data().iter().map(|&p| p > 0.5).collect();
        let gt: Vec<bool> = s.gt_mask.iter().map(|&y| y > 0.5).collect();
        let logits = tape.value(f.logits).data();
        let class =
            (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        let r = SampleResult {
            box_iou: iou3d(&bbox, &s.gt_box),
            mask_iou: mask_iou(&pred, &gt),
            tags: s.tags.clone(),
        };
        predictions.push(Prediction {
            text: s.text.clone(),
            bbox,
            box_iou: r.box_iou,
            mask_iou: r.mask_iou,
            class,
        });
        results.push(r);
    }
    Ok(Evaluation {
        report: subset_report(&results),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_cfg, tiny_samples};
    use super::*;

    fn short(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_goes_down_on_a_few_samples() {
        let cfg = tiny_cfg();
        let samples = tiny_samples(&cfg, 2);
        let mut t = Trainer::new(GroundingModel::new(cfg, 4).unwrap(), short(60));
        let mut losses = Vec::new();
        t.fit(&samples, |m| {
            losses.push(m.tasks["mask_bce"] + m.tasks["box_l1"])
        })
        .unwrap();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[losses.len() - 5..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(t.step(), 60);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = tiny_cfg();
        let samples = tiny_samples(&cfg, 3);
        let run = || {
            let mut t = Trainer::new(GroundingModel::new(cfg.clone(), 9).unwrap(), short(5));
            let mut log = Vec::new();
            t.fit(&samples, |m| log.push(serde_json::to_string(m).unwrap()))
                .unwrap();
            (log, t.named_tensors())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batches_cover_every_sample_per_pass() {
        let cfg = tiny_cfg();
        let mut t = Trainer::new(
            GroundingModel::new(cfg, 0).unwrap(),
            TrainConfig {
                batch: 3,
                ..short(1)
            },
        );
        let mut seen: Vec<usize> = (0..3).flat_map(|_| t.next_batch(9)).collect();
        seen.sort();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }
}
