//! End-to-end runs: data splits, training, evaluation and prediction, with
//! their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    fit_normalizer, load_csv, load_unlabeled_csv, normalize_per_sample, standardize_rows, stratified_split,
    stratified_subset, apply_normalizer, Dataset, Normalization, CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{classification_report, ClassificationReport};
use crate::model::{Model, ModelConfig};
use crate::tensor::{grad_check, Fault, GradCheckReport, Tensor};
use crate::train::{
    evaluate, load_checkpoint, train_loop, Checkpoint, Evaluation, Preprocessing, TrainOutcome,
};

pub const CONFIG_FILE: &str = "config.resolved";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";

const EVAL_SEED_OFFSET: u64 = 0x7e57;

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Draws the configured training pool and carves the validation set from it.
/// Returns raw (unnormalized) `(train, val)`.
pub fn split_train_pool(cfg: &RunConfig, full: &Dataset) -> Result<(Dataset, Dataset)> {
    let pool = match cfg.subset {
        Some(n) => stratified_subset(full, n, cfg.split_seed)?,
        None => full.clone(),
    };
    let present = pool.class_counts().iter().filter(|&&c| c > 0).count();
    let val_n = cfg
        .val_size
        .unwrap_or_else(|| ((pool.len() as f64 * cfg.val_fraction).round() as usize).max(present));
    let (val, train) = stratified_split(&pool, val_n, cfg.split_seed.wrapping_add(1))?;
    let train = train.ok_or_else(|| Error::InsufficientData("validation carve-out left no training rows".into()))?;
    Ok((train, val))
}

/// Optional stratified draw from a test file.
pub fn draw_test(cfg: &RunConfig, full: Dataset) -> Result<Dataset> {
    match cfg.test_subset {
        Some(n) => stratified_subset(&full, n, cfg.split_seed.wrapping_add(EVAL_SEED_OFFSET)),
        None => Ok(full),
    }
}

/// Fits (when needed) and applies the configured normalization.
pub fn preprocess(
    normalization: Normalization,
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Preprocessing, Dataset, Vec<Dataset>)> {
    match normalization {
        Normalization::PerFeature => {
            let stats = fit_normalizer(train)?;
            let t = apply_normalizer(train, &stats)?;
            let o = others.iter().map(|d| apply_normalizer(d, &stats)).collect::<Result<_>>()?;
            Ok((
                Preprocessing {
                    normalization,
                    stats: Some(stats),
                },
                t,
                o,
            ))
        }
        Normalization::PerSample => Ok((
            Preprocessing {
                normalization,
                stats: None,
            },
            normalize_per_sample(train),
            others.iter().map(|d| normalize_per_sample(d)).collect(),
        )),
    }
}

/// Normalizes raw features the way the checkpointed run did.
pub fn normalize_like(ckpt: &Checkpoint, ds: &Dataset) -> Result<Dataset> {
    match (ckpt.normalization, &ckpt.norm_stats) {
        (Normalization::PerFeature, Some(stats)) => apply_normalizer(ds, stats),
        (Normalization::PerFeature, None) => Err(Error::Format {
            offset: 0,
            msg: "per-feature checkpoint without normalization statistics".into(),
        }),
        (Normalization::PerSample, _) => Ok(normalize_per_sample(ds)),
    }
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub val: Evaluation,
    pub report: ClassificationReport,
    pub out: PathBuf,
}

/// The full `train` command. Inputs are checked before anything is written.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let train_path = cfg
        .data_train
        .as_ref()
        .ok_or_else(|| Error::config("data_train is required"))?;
    require_file(train_path)?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;

    let full = load_csv(train_path)?;
    let (train_raw, val_raw) = split_train_pool(cfg, &full)?;
    let (prep, train, mut others) = preprocess(cfg.normalization, &train_raw, &[&val_raw])?;
    let val = others.remove(0);
    log::info!("training on {} rows, validating on {}", train.len(), val.len());

    let outcome = train_loop(
        &cfg.model,
        &cfg.train,
        &train,
        &val,
        &prep,
        Some(&cfg.out.join(CHECKPOINT_FILE)),
    )?;
    fs::write(cfg.out.join(HISTORY_FILE), outcome.history.to_csv())?;

    let best = outcome.best.model()?;
    let eval = evaluate(&best, &val, cfg.train.eval_batch_size)?;
    let report = classification_report(val.labels(), &eval.predictions, &CLASS_NAMES)?;
    write_report(&cfg.out, &report)?;
    Ok(TrainRun {
        outcome,
        val: eval,
        report,
        out: cfg.out.clone(),
    })
}

pub fn write_report(dir: &Path, report: &ClassificationReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_TXT), report.format())?;
    fs::write(dir.join(REPORT_CSV), report.to_csv())?;
    fs::write(dir.join(CONFUSION_CSV), report.confusion_csv())?;
    Ok(())
}

pub struct EvalRun {
    pub evaluation: Evaluation,
    pub report: ClassificationReport,
}

/// Scores a checkpoint on already-loaded raw data.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, raw: &Dataset, batch_size: usize) -> Result<EvalRun> {
    let model = ckpt.model()?;
    let ds = normalize_like(ckpt, raw)?;
    let evaluation = evaluate(&model, &ds, batch_size)?;
    let report = classification_report(ds.labels(), &evaluation.predictions, &CLASS_NAMES)?;
    Ok(EvalRun { evaluation, report })
}

/// The `eval` command; writes the report files when `out` is given.
pub fn run_eval(
    checkpoint: &Path,
    data: &Path,
    expected: Option<&ModelConfig>,
    out: Option<&Path>,
) -> Result<EvalRun> {
    require_file(checkpoint)?;
    require_file(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if let Some(expected) = expected {
        ckpt.check_config(expected)?;
    }
    let raw = load_csv(data)?;
    let run = evaluate_checkpoint(&ckpt, &raw, 256)?;
    if let Some(dir) = out {
        write_report(dir, &run.report)?;
    }
    Ok(run)
}

/// The `predict` command: `index,predicted_class,p_N,...,p_Q` rows.
pub fn run_predict(checkpoint: &Path, data: &Path) -> Result<String> {
    require_file(checkpoint)?;
    require_file(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let (raw, _) = load_unlabeled_csv(data)?;
    let features = match (ckpt.normalization, &ckpt.norm_stats) {
        (Normalization::PerFeature, Some(stats)) => stats.apply(&raw)?,
        (Normalization::PerSample, _) => standardize_rows(&raw),
        (Normalization::PerFeature, None) => {
            return Err(Error::Format {
                offset: 0,
                msg: "per-feature checkpoint without normalization statistics".into(),
            })
        }
    };
    let probs = model.predict_proba(&features)?;
    let predicted = probs.argmax_rows();
    let mut out = String::from("index,predicted_class");
    for name in CLASS_NAMES {
        write!(out, ",p_{name}").unwrap();
    }
    out.push('\n');
    for (i, class) in predicted.iter().enumerate() {
        write!(out, "{i},{class}").unwrap();
        for p in probs.row(i) {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Finite-difference check of every parameter of a freshly built model on a
/// small seeded batch. `fault` corrupts one backward rule (negative control).
pub fn model_grad_check(cfg: &ModelConfig, fault: Option<Fault>, batch: usize) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let model = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let data = (0..batch * cfg.input_len).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let features = Tensor::new(vec![batch, cfg.input_len], data)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.n_classes).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::new(p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect::<Result<_>>()?;

    grad_check(
        &names,
        &values,
        |tape, vars| {
            tape.set_fault(fault.clone());
            // same dropout masks on every evaluation
            let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let x = tape.constant(features.clone());
            let logits = model.forward_on_tape(tape, vars, x, Mode::Train, &mut drop_rng)?;
            tape.cross_entropy(logits, &labels, None)
        },
        GRADCHECK_EPS,
        GRADCHECK_TOL,
    )
}
