use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gazegroup::experiment::{
    load_config, make_run_dir, run_eval, run_generate, run_plot, run_train, ExpError,
    ExperimentConfig, Method,
};

#[derive(Parser)]
#[command(
    name = "gazegroup",
    version,
    about = "Shared-attention group detection on synthetic gaze scenes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file with flat dotted keys (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set training.lr=1e-3.  Repeatable;
    /// flags win over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Experiment seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a labeled scene dataset and print summary statistics.
    Generate {
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Index of the first scene; lets train/test splits share a seed.
        #[arg(long, default_value_t = 0)]
        start_index: u64,
        /// Output file; default is dataset.jsonl inside a fresh run dir.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Shortcut for --set generator.positive_fraction=...
        #[arg(long)]
        positive_fraction: Option<f64>,
    },
    /// Fit the model on a dataset; writes checkpoint, log, and report.
    Train {
        /// Scene dataset; falls back to paths.dataset from the config.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Shortcut for --set training.steps=...
        #[arg(long)]
        steps: Option<usize>,
        /// Skip the argmax-feedback stage; first-stage outputs are final.
        #[arg(long)]
        no_refinement: bool,
        /// Drop the pairwise social term from the loss.
        #[arg(long)]
        no_social_loss: bool,
    },
    /// Score a method on a dataset and emit the AP table.
    Eval {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Trained parameters; falls back to paths.checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// One of: ours, pp, pairwise, oracle.
        #[arg(long, default_value = "ours", value_parser = parse_method)]
        method: Method,
    },
    /// Score a training-free baseline (eval restricted to pp/pairwise).
    Baseline {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// One of: pp, pairwise.
        #[arg(long, default_value = "pp", value_parser = parse_baseline_method)]
        method: Method,
    },
    /// Render PR curves and qualitative figures from a prediction dump.
    Plot {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Prediction dump written by eval (predictions_*.jsonl).
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        /// Output directory; default is a fresh run dir.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// How many scenes get qualitative renderings.
        #[arg(long, default_value_t = 8)]
        max_scenes: usize,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "ours" => Ok(Method::Ours),
        "pp" => Ok(Method::Pp),
        "pairwise" => Ok(Method::Pairwise),
        "oracle" => Ok(Method::Oracle),
        other => Err(format!(
            "unknown method '{other}' (expected ours, pp, pairwise, or oracle)"
        )),
    }
}

fn parse_baseline_method(s: &str) -> Result<Method, String> {
    match s {
        "pp" => Ok(Method::Pp),
        "pairwise" => Ok(Method::Pairwise),
        other => Err(format!(
            "unknown baseline '{other}' (expected pp or pairwise)"
        )),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                ExpError::Config(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, ExpError> {
    let mut cfg = load_config(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset_path(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, ExpError> {
    flag.or_else(|| cfg.paths.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            ExpError::Config("no dataset given; pass --dataset or set paths.dataset".into())
        })
}

fn checkpoint_path(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Option<PathBuf> {
    flag.or_else(|| cfg.paths.checkpoint.as_ref().map(PathBuf::from))
}

fn dispatch(cli: Cli) -> Result<(), ExpError> {
    match cli.cmd {
        Cmd::Generate {
            count,
            start_index,
            out,
            positive_fraction,
        } => {
            let mut cfg = load(&cli.common)?;
            if let Some(frac) = positive_fraction {
                cfg.generator.positive_fraction = frac;
            }
            cfg.generator.seed = cfg.seed;
            cfg.validate()?;
            let out = match out {
                Some(path) => path,
                None => make_run_dir(&cfg, "generate")?.join("dataset.jsonl"),
            };
            let done = run_generate(&cfg, count, start_index, &out)?;
            println!("wrote {}", done.path.display());
            println!(
                "scenes={} positive_fraction={:.3} mean_group_size={:.3}",
                done.summary.scenes,
                done.summary.positive_fraction,
                done.summary.mean_group_size
            );
            Ok(())
        }
        Cmd::Train {
            dataset,
            steps,
            no_refinement,
            no_social_loss,
        } => {
            let mut cfg = load(&cli.common)?;
            if let Some(steps) = steps {
                cfg.training.steps = steps;
            }
            if no_refinement {
                cfg.training.with_refinement = false;
            }
            if no_social_loss {
                cfg.training.with_social_loss = false;
            }
            cfg.validate()?;
            let dataset = dataset_path(dataset, &cfg)?;
            let run_dir = make_run_dir(&cfg, "train")?;
            println!("run dir {}", run_dir.display());
            let done = run_train(&cfg, &dataset, &run_dir, true)?;
            println!("checkpoint {}", done.checkpoint.display());
            println!("report {}", done.report.display());
            Ok(())
        }
        Cmd::Eval {
            dataset,
            checkpoint,
            method,
        } => eval_cmd(&cli.common, dataset, checkpoint, method),
        Cmd::Baseline {
            dataset,
            checkpoint,
            method,
        } => eval_cmd(&cli.common, dataset, checkpoint, method),
        Cmd::Plot {
            dataset,
            predictions,
            out,
            max_scenes,
        } => {
            let cfg = load(&cli.common)?;
            cfg.validate()?;
            let dataset = dataset_path(dataset, &cfg)?;
            let out = match out {
                Some(dir) => dir,
                None => make_run_dir(&cfg, "plot")?,
            };
            let done = run_plot(&cfg, &dataset, &predictions, &out, max_scenes)?;
            for warning in &done.warnings {
                eprintln!("warning: {warning}");
            }
            println!("wrote {} figures to {}", done.files.len(), out.display());
            Ok(())
        }
    }
}

fn eval_cmd(
    common: &Common,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    method: Method,
) -> Result<(), ExpError> {
    let cfg = load(common)?;
    cfg.validate()?;
    let dataset = dataset_path(dataset, &cfg)?;
    let checkpoint = checkpoint_path(checkpoint, &cfg);
    let run_dir = make_run_dir(&cfg, &format!("eval-{}", method.as_str()))?;
    let done = run_eval(
        &cfg,
        &dataset,
        checkpoint.as_deref(),
        method,
        &run_dir,
    )?;
    print!("{}", done.table.render());
    println!("scenes={}", done.scenes);
    println!("table {}", done.csv.display());
    println!("dump {}", done.dump.display());
    println!("report {}", done.report.display());
    Ok(())
}
