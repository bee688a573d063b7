//! Loss, optimizer, evaluation and the epoch loop.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use crate::data::{batches, Dataset, NormStats, Normalization, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Model, ModelConfig};
use crate::tensor::{kernels, Tape, Tensor};

/// Mean sparse cross-entropy of `[B,R]` logits.
pub fn sparse_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim("sparse_ce_loss", logits.shape(), &[labels.len()]));
    }
    let classes = logits.shape()[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        let row = logits.row(i);
        total += kernels::log_sum_exp(row) - row[l];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub adam: AdamHyper,
    /// Seeds batch shuffling and dropout masks.
    pub seed: u64,
    /// Per-class loss weights; `None` weighs every sample equally.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            eval_batch_size: 256,
            adam: AdamHyper::default(),
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if self.eval_batch_size == 0 {
            errs.push("eval_batch_size must be >= 1".to_string());
        }
        let h = self.adam;
        if !(h.learning_rate > 0.0 && h.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", h.learning_rate));
        }
        if !(0.0..1.0).contains(&h.beta1) {
            errs.push(format!("beta1 must be in [0, 1), got {}", h.beta1));
        }
        if !(0.0..1.0).contains(&h.beta2) {
            errs.push(format!("beta2 must be in [0, 1), got {}", h.beta2));
        }
        if h.epsilon.is_nan() || h.epsilon <= 0.0 {
            errs.push(format!("epsilon must be positive, got {}", h.epsilon));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != NUM_CLASSES {
                errs.push(format!("class_weights needs {NUM_CLASSES} values, got {}", w.len()));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                errs.push("class_weights must be finite and non-negative".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let weights = match &self.class_weights {
            None => "none".to_string(),
            Some(w) => w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        };
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("learning_rate", self.adam.learning_rate.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("epsilon", self.adam.epsilon.to_string()),
            ("train_seed", self.seed.to_string()),
            ("class_weights", weights),
        ]
    }

    /// Applies one `key = value` pair; `Ok(false)` means the key is not a
    /// training key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eval_batch_size" => self.eval_batch_size = num(key, value)?,
            "learning_rate" => self.adam.learning_rate = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "epsilon" => self.adam.epsilon = num(key, value)?,
            "train_seed" => self.seed = num(key, value)?,
            "class_weights" => {
                self.class_weights = if value == "none" {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|v| num(key, v.trim()))
                            .collect::<std::result::Result<_, _>>()?,
                    )
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Dataset-level loss and accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode loss and accuracy over the whole dataset.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(ds.len());
    for batch in batches(ds, batch_size, false, 0)? {
        let logits = model.logits(&batch.features)?;
        loss += sparse_ce_loss(&logits, &batch.labels)? * batch.labels.len() as f64;
        predictions.extend(logits.argmax_rows());
    }
    let correct = predictions.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for r in &self.epochs {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc).unwrap();
        }
        out
    }
}

/// Tracks the best validation loss; only strict improvements count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BestTracker {
    best: Option<f64>,
}

impl BestTracker {
    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> bool {
        let improved = self.best.is_none_or(|b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
        }
        improved
    }
}

pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub model: Model,
    /// Snapshot at the lowest validation loss.
    pub best: Checkpoint,
    pub history: History,
}

/// Preprocessing applied to both datasets before training.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub normalization: Normalization,
    pub stats: Option<NormStats>,
}

/// Trains a fresh model; writes `checkpoint` each time validation loss
/// strictly improves.
pub fn train_loop(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    prep: &Preprocessing,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training and validation sets must be non-empty".into()));
    }
    if let Some(stats) = &prep.stats {
        for ds in [train, val] {
            if ds.norm_id() != Some(stats.fitted_on.as_str()) {
                return Err(Error::Contract(format!(
                    "{} is not normalized with statistics fitted on {}",
                    ds.id(),
                    stats.fitted_on
                )));
            }
        }
    }

    let mut model = Model::build(model_config)?;
    let mut opt = AdamState::new(config.adam, model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d80f);
    let mut tracker = BestTracker::default();
    let mut history = History::default();
    let mut best = None;

    for epoch in 1..=config.epochs {
        let shuffle_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, batch) in batches(train, config.batch_size, true, shuffle_seed)?.into_iter().enumerate() {
            let weights: Option<Vec<f64>> = config
                .class_weights
                .as_ref()
                .map(|w| batch.labels.iter().map(|&l| w[l]).collect());
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(batch.features);
            let logits = model.forward_on_tape(&mut tape, &bound, x, Mode::Train, &mut dropout_rng)?;
            let loss = tape.cross_entropy(logits, &batch.labels, weights.as_deref())?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&tape, &bound);
            adam_step(model.params_mut(), &mut opt)?;

            let n = batch.labels.len();
            loss_sum += value * n as f64;
            let preds = tape.value(logits).argmax_rows();
            correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }

        let eval = evaluate(&model, val, config.eval_batch_size)?;
        if !eval.loss.is_finite() {
            // batch 0 marks the validation pass
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                loss: eval.loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: eval.accuracy,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} train_acc {:.4} val_acc {:.4}",
            record.train_loss,
            record.val_loss,
            record.train_acc,
            record.val_acc
        );
        history.epochs.push(record);

        if tracker.observe(eval.loss) {
            let ckpt = Checkpoint::from_model(
                &model,
                prep.normalization,
                prep.stats.clone(),
                eval.loss,
                epoch,
                config.seed,
                Some(opt.clone()),
            );
            if let Some(path) = checkpoint {
                save_checkpoint(&ckpt, path)?;
            }
            best = Some(ckpt);
        }
    }

    Ok(TrainOutcome {
        model,
        best: best.expect("at least one epoch ran"),
        history,
    })
}
