use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use unremix::encoder::Checkpoint;
use unremix::eval::{self, audit_batch, sweep_classes, write_audit_csv, write_sweep_csv};
use unremix::gradcheck::{self, CheckOptions};
use unremix::trainer::{self, evaluate, prepare_out_dir, TrainConfig, TrainState};
use unremix::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "unremix", version, about = "Hard-negative weighted contrastive training on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override, e.g. `--set sampler=uniform`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args)]
struct OutArgs {
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes metrics.jsonl, checkpoint.json and resolved-config.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate a checkpoint (linear probe, KNN, negative metrics); writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        /// Number of random instances per suite.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "out")]
        force: bool,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Dump the top-weighted negatives of a batch to audit.csv.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of anchors to audit.
        #[arg(long, default_value_t = 8)]
        anchors: usize,
        /// Negatives listed per anchor.
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Fail if the dataset has no labels.
        #[arg(long)]
        require_labels: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train with negatives restricted to classes 0..k and report KNN accuracy; writes sweep.csv.
    SweepK {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated class counts.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        /// Seeds per k, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        out: OutArgs,
    },
}

enum Failure {
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("UNREMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("UNREMIX_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("could not size the worker pool: {e}")))?;
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Error> {
    let cfg = TrainConfig::from_file(&args.config, &args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_state(checkpoint: &Path, cfg: &TrainConfig, d_in: usize) -> Result<TrainState, Error> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.params.d_in() != d_in {
        return Err(Error::Usage(format!(
            "checkpoint expects {} input columns, the dataset has {d_in}",
            ck.params.d_in()
        )));
    }
    Ok(TrainState::from_checkpoint(ck, cfg))
}

fn run_train(config: &ConfigArgs, out: &OutArgs) -> Outcome {
    let cfg = load_config(config)?;
    let outcome = trainer::run_to_dir(&cfg, &out.out, out.force)?;
    let last = outcome.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps): final loss {:.6}, lambda = ({:.4}, {:.4}, {:.4})",
        last.epoch, last.step, last.loss, last.lambda_u, last.lambda_s, last.lambda_r
    );
    if let (Some(p), Some(k)) = (last.probe_acc, last.knn_acc) {
        println!("probe accuracy {p:.4}, knn accuracy {k:.4}");
    }
    println!("wrote {}", out.out.display());
    Ok(())
}

fn run_eval(checkpoint: &Path, config: &ConfigArgs, out: &OutArgs) -> Outcome {
    let cfg = load_config(config)?;
    let dataset = cfg.data.load()?;
    let Some(labels) = dataset.labels() else {
        return Err(Error::Usage("evaluation needs a labeled dataset".into()).into());
    };
    let state = load_state(checkpoint, &cfg, dataset.dim())?;
    prepare_out_dir(&out.out, &["eval.json"], out.force)?;
    let snap = evaluate(&state, &dataset, &cfg)?.expect("labels present");
    let emb = unremix::encoder::forward(&state.params, dataset.features())?.unit_output;
    let probe = eval::linear_probe(&emb, labels, cfg.seed)?;
    write_json(
        &out.out.join("eval.json"),
        &json!({
            "probe_acc": snap.probe_acc,
            "probe_per_class": probe.per_class,
            "probe_split_seed": probe.split_seed,
            "knn_acc": snap.knn_acc,
            "knn_k": cfg.eval.knn_k,
            "fnr_at_k": snap.fnr_at_k,
            "diversity_entropy": snap.diversity_entropy,
            "audit_k": cfg.eval.audit_k,
        }),
    )?;
    println!(
        "probe {:.4}  knn {:.4}  fnr@{k} {:.4}  entropy@{k} {:.4}",
        snap.probe_acc,
        snap.knn_acc,
        snap.fnr_at_k,
        snap.diversity_entropy,
        k = cfg.eval.audit_k
    );
    Ok(())
}

fn run_gradcheck(seeds: u64, out: Option<&Path>, force: bool, corrupt: bool) -> Outcome {
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()).into());
    }
    if let Some(dir) = out {
        prepare_out_dir(dir, &["gradcheck.json"], force)?;
    }
    let seed_list: Vec<u64> = (0..seeds).collect();
    let reports = gradcheck::run_all(&seed_list, CheckOptions { corrupt })?;
    for r in &reports {
        println!(
            "{:<18} {} instances  max rel err {:.3e}  (tol {:.0e}, worst seed {})  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            r.tolerance,
            r.worst_seed,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        let suites: Vec<_> = reports
            .iter()
            .map(|r| {
                json!({
                    "suite": r.name,
                    "instances": r.instances,
                    "max_rel_err": r.max_rel_err,
                    "tolerance": r.tolerance,
                    "worst_seed": r.worst_seed,
                    "passed": r.passed(),
                })
            })
            .collect();
        write_json(&dir.join("gradcheck.json"), &json!({ "suites": suites }))?;
    }
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure::Check(format!(
            "{} exceeded tolerance: {:.3e} > {:.0e} at seed {}",
            r.name, r.max_rel_err, r.tolerance, r.worst_seed
        ))),
        None => Ok(()),
    }
}

fn run_inspect(
    checkpoint: &Path,
    config: &ConfigArgs,
    anchors: usize,
    topk: usize,
    require_labels: bool,
    out: &OutArgs,
) -> Outcome {
    let cfg = load_config(config)?;
    let dataset = cfg.data.load()?;
    if require_labels && !dataset.has_labels() {
        return Err(Error::Usage("--require-labels given but the dataset has no label column".into()).into());
    }
    let state = load_state(checkpoint, &cfg, dataset.dim())?;
    let batch = trainer::eval_batch(&cfg, &dataset)?;
    let n = batch.len();
    if topk == 0 || topk > n - 1 {
        return Err(Error::Usage(format!("--topk must lie in [1, N - 1 = {}], got {topk}", n - 1)).into());
    }
    if anchors == 0 || anchors > n {
        return Err(Error::Usage(format!("--anchors must lie in [1, N = {n}], got {anchors}")).into());
    }
    prepare_out_dir(&out.out, &["audit.csv"], out.force)?;
    let audits = audit_batch(&state.params, &state.aggregation, &batch, &cfg, anchors, topk)?;
    let path = out.out.join("audit.csv");
    write_audit_csv(&path, &audits)?;
    println!("wrote {} rows to {}", anchors * topk, path.display());
    Ok(())
}

fn run_sweep(config: &ConfigArgs, ks: &[usize], seeds: u64, out: &OutArgs) -> Outcome {
    let cfg = load_config(config)?;
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()).into());
    }
    let dataset = cfg.data.load()?;
    prepare_out_dir(&out.out, &["sweep.csv"], out.force)?;
    let seed_list: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
    let rows = sweep_classes(&cfg, &dataset, ks, &seed_list)?;
    let path = out.out.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    let x: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.knn_accuracy).collect();
    for &k in ks {
        let acc: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.knn_accuracy).collect();
        println!("k = {k:<3} mean knn accuracy {:.4}", acc.iter().sum::<f64>() / acc.len() as f64);
    }
    println!("spearman(k, knn) = {:.4}", eval::spearman(&x, &y));
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().map_err(Failure::from).and_then(|_| match &cli.command {
        Command::Train { config, out } => run_train(config, out),
        Command::Eval { checkpoint, config, out } => run_eval(checkpoint, config, out),
        Command::Gradcheck {
            seeds,
            out,
            force,
            corrupt,
        } => run_gradcheck(*seeds, out.as_deref(), *force, *corrupt),
        Command::Inspect {
            checkpoint,
            config,
            anchors,
            topk,
            require_labels,
            out,
        } => run_inspect(checkpoint, config, *anchors, *topk, *require_labels, out),
        Command::SweepK { config, k, seeds, out } => run_sweep(config, k, *seeds, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
