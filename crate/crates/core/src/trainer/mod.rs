//! SGD training with hard-negative mining, checkpointing and validation.

mod checkpoint;
mod sgd;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use sgd::{sgd_step, OptimState, SgdConfig};

use crate::autodiff::Tape;
use crate::data::{augment, to_batch, Sample};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::experiment::evaluate_samples;
use crate::losses::{combined_loss, hard_negative_sample, per_pixel_ce, SampleSet};
use crate::metrics::EvalReport;
use crate::model::{MEnetParams, ModelConfig};
use crate::nn::BnMode;
use crate::rng::Rng;
use crate::saliency::MapKind;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    /// Weight of the metric term; 0 trains the classifier alone.
    pub metric_weight: f64,
    pub augment: bool,
    /// Average the classifier loss over the hard-negative-mined 1:1 set
    /// instead of every pixel.
    pub mine_ce_loss: bool,
    /// Same choice for the metric loss.
    pub mine_metric_loss: bool,
    /// Map scored during validation.
    pub eval_map: MapKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-8,
            batch_size: 5,
            iterations: 5000,
            checkpoint_interval: 500,
            seed: 0,
            lambda: 1.0,
            metric_weight: 1.0,
            augment: true,
            mine_ce_loss: true,
            mine_metric_loss: true,
            eval_map: MapKind::Metric,
        }
    }
}

impl TrainConfig {
    /// Settings for the 64-pixel synthetic benchmark. The metric term is
    /// averaged over the embedding channels instead of summed, and the step
    /// is smaller than the default, which oscillates on the small network.
    pub fn desk(embedding_dim: usize) -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 2000,
            metric_weight: 1.0 / embedding_dim.max(1) as f64,
            eval_map: MapKind::Ce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(
                    format!("train.{name}"),
                    format!("must be a finite value >= 0, got {v}"),
                ))
            }
        };
        rate("learning_rate", self.learning_rate)?;
        rate("momentum", self.momentum)?;
        rate("weight_decay", self.weight_decay)?;
        rate("lambda", self.lambda)?;
        rate("metric_weight", self.metric_weight)?;
        if self.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size",
                "must be >= 2 (batch norm needs two samples)",
            ));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("train.checkpoint_interval", "must be >= 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_ce: f64,
    pub l_ml_star: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Validation record with the highest F-beta.
    pub best: Option<ValidationRecord>,
}

pub struct Trainer<T: Element> {
    pub config: TrainConfig,
    pub params: MEnetParams<T>,
    pub optim: OptimState<T>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = MEnetParams::build(model, &Rng::new(config.seed, INIT_STREAM))?;
        let optim = OptimState::zeros_like(params.named_tensors().into_iter().map(|(_, t)| t));
        Ok(Self {
            config,
            params,
            optim,
        })
    }

    /// Continue from a checkpoint that carries optimizer state. `config`
    /// replaces the stored one (e.g. to extend the iteration budget).
    pub fn resume(ckpt: Checkpoint<T>, config: Option<TrainConfig>) -> Result<Self> {
        let optim = ckpt.optim.ok_or_else(|| {
            Error::Checkpoint(
                "checkpoint has no optimizer state; it can be used for inference only".into(),
            )
        })?;
        let config = config.unwrap_or(ckpt.train);
        config.validate()?;
        Ok(Self {
            config,
            params: ckpt.params,
            optim,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.optim.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            train: self.config.clone(),
            iteration: self.iteration(),
            params: self.params.clone(),
            optim: Some(self.optim.clone()),
        }
    }

    /// One optimizer step. The batch and its augmentation depend only on the
    /// seed and the iteration number, so a resumed run replays exactly.
    /// Returns `None` when too few usable samples were drawn.
    pub fn step(&mut self, data: &[Sample]) -> Result<Option<LossRecord>> {
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let it = self.iteration();
        let mut r = Rng::new(self.config.seed, DATA_STREAM).split(it);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let s = &data[r.below(data.len())];
            let s = if self.config.augment {
                augment(s, &mut r)
            } else {
                s.clone()
            };
            if s.mask.has_both_classes() {
                batch.push(s);
            } else {
                log::warn!(
                    "iteration {it}: sample {} has a single class, skipped",
                    s.id
                );
            }
        }
        if batch.len() < 2 {
            log::warn!("iteration {it}: fewer than two usable samples, no update");
            self.optim.iteration += 1;
            return Ok(None);
        }

        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<Vec<u8>> = batch.iter().map(|s| s.mask.data.clone()).collect();
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let x = tape.constant(to_batch::<T>(&images)?);
        let f = self
            .params
            .forward_on_tape(&mut tape, x, &vars, BnMode::Train)?;

        let probs = tape.value(f.probs);
        let mined = if self.config.mine_ce_loss || self.config.mine_metric_loss {
            labels
                .iter()
                .enumerate()
                .map(|(b, l)| hard_negative_sample(&per_pixel_ce(probs, b, l), l))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let pick = |mine: bool| -> Vec<SampleSet> {
            if mine {
                mined.clone()
            } else {
                labels.iter().map(|l| SampleSet::all(l)).collect()
            }
        };
        let (ce_sets, metric_sets) = (
            pick(self.config.mine_ce_loss),
            pick(self.config.mine_metric_loss),
        );
        let loss = combined_loss(
            &mut tape,
            f.embedding,
            f.probs,
            &labels,
            &ce_sets,
            &metric_sets,
            self.config.lambda,
            self.config.metric_weight,
        )?;
        let values = loss.values(&tape, self.config.lambda);
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {it}")));
        }

        let param_vars = vars.vars();
        let seed = Tensor::ones(tape.value(loss.total).shape());
        let mut grads = tape.backward(loss.total, seed)?;
        let mut tensors = self.params.tensors_mut();
        let grads: Vec<Tensor<T>> = param_vars
            .iter()
            .zip(&tensors)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at iteration {it}")));
        }
        sgd_step(&mut tensors, &grads, &mut self.optim, &self.config.sgd())?;
        self.params.update_running_stats(&f.bn_stats);

        Ok(Some(LossRecord {
            iteration: it,
            l_ce: values.l_ce,
            l_ml_star: values.l_ml_star,
            total: values.total,
        }))
    }

    /// Train until `config.iterations`. With `out`, every checkpoint interval
    /// writes `last.ment`, appends to `loss.csv` and, when `val` is given,
    /// validates and refreshes `best.ment` on a new best F-beta.
    pub fn run(
        &mut self,
        data: &[Sample],
        val: Option<&[Sample]>,
        out: Option<&Path>,
    ) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        let mut pending: Vec<LossRecord> = Vec::new();
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.iteration() < self.config.iterations {
            if let Some(rec) = self.step(data)? {
                pending.push(rec);
                summary.history.push(rec);
            }
            let it = self.iteration();
            if !it.is_multiple_of(self.config.checkpoint_interval) && it != self.config.iterations {
                continue;
            }
            let window = &pending[..];
            if !window.is_empty() {
                let mean = window.iter().map(|r| r.total).sum::<f64>() / window.len() as f64;
                log::info!("iteration {it}: mean total loss {mean:.4}");
            }
            if let Some(dir) = out {
                append_loss_csv(&dir.join("loss.csv"), &pending)?;
                save_checkpoint(&dir.join("last.ment"), &self.checkpoint())?;
            }
            pending.clear();
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let report = evaluate_samples(&self.params, val, self.config.eval_map)?.mean;
                let rec = ValidationRecord {
                    iteration: it,
                    report,
                };
                log::info!(
                    "iteration {it}: validation F {:.4} MAE {:.4}",
                    report.f_beta,
                    report.mae
                );
                let improved = summary.best.is_none_or(|b| report.f_beta > b.report.f_beta);
                if improved {
                    summary.best = Some(rec);
                    if let Some(dir) = out {
                        save_checkpoint(&dir.join("best.ment"), &self.checkpoint())?;
                    }
                }
                if let Some(dir) = out {
                    append_validation_csv(&dir.join("validation.csv"), &rec)?;
                }
                summary.validations.push(rec);
            }
        }
        Ok(summary)
    }
}

fn append_lines(path: &Path, header: &str, lines: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
    }
    text.push_str(lines);
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn append_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let lines: String = records
        .iter()
        .map(|r| format!("{},{},{},{}\n", r.iteration, r.l_ce, r.l_ml_star, r.total))
        .collect();
    append_lines(path, "iteration,l_ce,l_ml_star,total\n", &lines)
}

fn append_validation_csv(path: &Path, rec: &ValidationRecord) -> Result<()> {
    let r = &rec.report;
    append_lines(
        path,
        "iteration,f_beta,mae,precision,recall\n",
        &format!(
            "{},{},{},{},{}\n",
            rec.iteration, r.f_beta, r.mae, r.precision, r.recall
        ),
    )
}

/// Mean of `total` over records with `lo <= iteration < hi`.
pub fn window_mean(history: &[LossRecord], lo: u64, hi: u64) -> Option<f64> {
    let w: Vec<f64> = history
        .iter()
        .filter(|r| r.iteration >= lo && r.iteration < hi)
        .map(|r| r.total)
        .collect();
    (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
}
