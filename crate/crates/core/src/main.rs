use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ecgformer::config::RunConfig;
use ecgformer::data::load_csv;
use ecgformer::pipeline::{self, GRADCHECK_TOL};
use ecgformer::tensor::Fault;
use ecgformer::Error;

/// Transformer heartbeat classifier.
#[derive(Parser)]
#[command(name = "ecgformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, history, checkpoint and validation report.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled CSV.
    Eval(EvalArgs),
    /// Emit class probabilities for every row of a CSV.
    Predict(PredictArgs),
    /// Check analytic gradients of the tiny model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds initialization, shuffling, dropout and splits.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_train: Option<PathBuf>,
    /// Scored with the best checkpoint after training when given.
    #[arg(long)]
    data_test: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_test: PathBuf,
    /// Expected architecture; a differing checkpoint is rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.txt, report.csv and confusion.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rows of 187 features, optionally followed by a label.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, hide = true)]
    fault_op: Option<String>,
    #[arg(long, hide = true, default_value_t = 1.01)]
    fault_factor: f64,
}

/// Exit statuses.
const OK: u8 = 0;
const VERIFY_FAILED: u8 = 1;
const INPUT_ERROR: u8 = 2;
const NUMERIC_ABORT: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => NUMERIC_ABORT,
        Some(Error::InvalidCheck(_)) => VERIFY_FAILED,
        _ => INPUT_ERROR,
    }
}

fn resolve(base: RunConfig, o: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::MissingInput(path.clone()).into());
            }
            RunConfig::from_file(path, base).with_context(|| format!("reading {}", path.display()))?
        }
        None => base,
    };
    if let Some(seed) = o.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> anyhow::Result<u8> {
    let mut cfg = resolve(RunConfig::default(), &args.common)?;
    if let Some(n) = args.subset {
        cfg.subset = Some(n);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = args.out {
        cfg.out = p;
    }
    if let Some(p) = args.data_train {
        cfg.data_train = Some(p);
    }
    if let Some(p) = args.data_test {
        cfg.data_test = Some(p);
    }
    if let Some(p) = &cfg.data_test {
        if !p.is_file() {
            return Err(Error::MissingInput(p.clone()).into());
        }
    }

    let run = pipeline::run_train(&cfg)?;
    let best = &run.outcome.best;
    println!("best val_loss {} at epoch {}", best.best_val_loss, best.epoch);
    println!("validation report\n{}", run.report.format());

    if let Some(p) = &cfg.data_test {
        let test = pipeline::draw_test(&cfg, load_csv(p)?)?;
        let eval = pipeline::evaluate_checkpoint(best, &test, cfg.train.eval_batch_size)?;
        println!("test report ({} rows)\n{}", test.len(), eval.report.format());
    }
    println!("artifacts in {}", run.out.display());
    Ok(OK)
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let expected = match &args.config {
        Some(path) => Some(resolve(RunConfig::default(), &Overrides { config: Some(path.clone()), seed: None })?.model),
        None => None,
    };
    let run = pipeline::run_eval(&args.checkpoint, &args.data_test, expected.as_ref(), args.out.as_deref())?;
    println!("loss {}", run.evaluation.loss);
    print!("{}", run.report.format());
    Ok(OK)
}

fn predict(args: PredictArgs) -> anyhow::Result<u8> {
    let csv = pipeline::run_predict(&args.checkpoint, &args.input)?;
    match args.out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(OK)
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<u8> {
    let cfg = resolve(RunConfig::tiny(), &args.common)?;
    cfg.model.validate()?;
    let fault = args.fault_op.map(|op| Fault {
        op,
        factor: args.fault_factor,
    });
    let report = pipeline::model_grad_check(&cfg.model, fault, 2)?;
    println!(
        "checked {} elements, max relative error {:.3e} (tolerance {:.0e})",
        report.elements_checked, report.max_rel_error, GRADCHECK_TOL
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.12e} numeric {:.12e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.passed {
        println!("gradcheck PASS");
        Ok(OK)
    } else {
        println!("gradcheck FAIL");
        Ok(VERIFY_FAILED)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
