//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration or argument
//! error, 3 data or I/O error, 4 numeric divergence.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dropnet::checkpoint::checkpoint_load;
use dropnet::config::{parse_overrides, TrainConfig};
use dropnet::data::{load_idx, parse_corpus, synthetic_corpus, vectorize_corpus, write_idx, BowVocab};
use dropnet::error::Error;
use dropnet::export::export_features;
use dropnet::oracle::{
    check_geometric_equivalence, check_gradients, check_logprob_superiority, check_regression_superiority,
    reports_csv, CheckReport, MAX_EQUIVALENCE_UNITS,
};
use dropnet::rng::RandomSource;
use dropnet::trainer::{evaluate, load_datasets, run, Trainer};

#[derive(Parser)]
#[command(name = "dropnet", version, about = "Dropout-trained neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; trailing `--key=value` flags override the config.
    Train(TrainArgs),
    /// Mean-network error of a checkpoint on an IDX dataset.
    Eval(EvalArgs),
    /// Run the averaging checks (equivalence, log-probability, squared error).
    OracleCheck(OracleArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradArgs),
    /// Render first-layer (or any dense layer) features as a PGM grid.
    ExportFeatures(ExportArgs),
    /// Turn a `label<TAB>text` corpus into bag-of-words IDX files.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random nets for the equivalence check.
    #[arg(long, default_value_t = 100)]
    equivalence_trials: usize,
    /// Largest hidden layer enumerated by the equivalence check.
    #[arg(long, default_value_t = MAX_EQUIVALENCE_UNITS)]
    max_units: usize,
    #[arg(long, default_value_t = 1000)]
    logprob_trials: usize,
    #[arg(long, default_value_t = 1000)]
    regression_trials: usize,
    /// Write the CSV report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random architectures per family (dense and convolutional).
    #[arg(long, default_value_t = 50)]
    archs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dense layer index (0 is the first hidden layer).
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Tile shape `HxW`.
    #[arg(long, default_value = "28x28")]
    tile: String,
    /// Show this many randomly chosen units instead of all of them.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Corpus of `label<TAB>text` lines.
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Generate a synthetic corpus with this many documents instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Reuse an existing vocabulary file (one token per line).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    /// Output prefix; writes `<prefix>-features.idx`, `<prefix>-labels.idx`,
    /// `<prefix>-vocab.txt` and `<prefix>-classes.txt`.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Parse { .. } | Error::Io(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::OracleCheck(a) => cmd_oracle(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportFeatures(a) => cmd_export(a),
        Command::Ingest(a) => cmd_ingest(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("dropnet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type CmdResult = Result<u8, Error>;

fn cmd_train(a: TrainArgs) -> CmdResult {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let config = TrainConfig::from_sources(&text, &parse_overrides(&a.overrides)?)?;
    if a.print_config {
        print!("{}", config.to_text());
        return Ok(0);
    }
    let (train, test) = load_datasets(&config)?;
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(&config, checkpoint_load(p)?)?,
        None => Trainer::new(&config, &train)?,
    };
    eprintln!(
        "training {} on {} cases for epochs {}..{}",
        trainer.spec,
        train.len(),
        trainer.epoch(),
        config.epochs
    );
    let outcome = run(trainer, &train, test.as_ref())?;
    for row in &outcome.metrics {
        println!("{}", row.to_csv());
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt = checkpoint_load(&a.checkpoint)?;
    let ds = load_idx(&a.images, &a.labels)?;
    let (errors, frac) = evaluate(&ckpt.network, &ckpt.dropout, &ds)?;
    println!("errors={errors} cases={} error_rate={frac}", ds.len());
    Ok(0)
}

fn emit(reports: &[CheckReport], out: &Option<PathBuf>) -> CmdResult {
    let csv = reports_csv(reports);
    match out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    for r in reports {
        eprintln!("{}: {}", r.name, if r.passed { "pass" } else { "FAIL" });
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

fn cmd_oracle(a: OracleArgs) -> CmdResult {
    let reports = vec![
        check_geometric_equivalence(a.equivalence_trials, a.max_units, a.seed)?,
        check_logprob_superiority(a.logprob_trials, a.seed)?,
        check_regression_superiority(a.regression_trials, a.seed)?,
    ];
    emit(&reports, &a.out)
}

fn cmd_gradcheck(a: GradArgs) -> CmdResult {
    emit(&check_gradients(a.archs, a.seed)?, &a.out)
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    let ckpt = checkpoint_load(&a.checkpoint)?;
    let (h, w) = a
        .tile
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .ok_or_else(|| Error::Argument(format!("bad tile shape '{}'", a.tile)))?;
    let n_units = ckpt
        .network
        .layers
        .get(a.layer)
        .map(|l| l.n_out())
        .ok_or_else(|| Error::Argument(format!("no dense layer {}", a.layer)))?;
    let units = a.count.map(|c| {
        let mut all: Vec<usize> = (0..n_units).collect();
        RandomSource::new(a.seed).shuffle(&mut all);
        let mut pick = all[..c.min(n_units)].to_vec();
        pick.sort_unstable();
        pick
    });
    let img = export_features(&ckpt.network, a.layer, (h, w), units.as_deref(), &a.out)?;
    eprintln!("wrote {}x{} image to {}", img.width, img.height, a.out.display());
    Ok(0)
}

fn cmd_ingest(a: IngestArgs) -> CmdResult {
    let text = match (&a.corpus, a.synthetic) {
        (Some(p), _) => fs::read_to_string(p)?,
        (None, Some(n)) => synthetic_corpus(&mut RandomSource::new(a.seed), n, 5, 500, 60),
        (None, None) => return Err(Error::Argument("give --corpus or --synthetic".into())),
    };
    let docs = parse_corpus(&text)?;
    let vocab = match &a.vocab {
        Some(p) => BowVocab::parse(&fs::read_to_string(p)?)?,
        None => {
            let tokens: Vec<Vec<String>> = docs.iter().map(|d| d.tokens.clone()).collect();
            BowVocab::build(&tokens, a.vocab_size)
        }
    };
    let (ds, classes) = vectorize_corpus(&docs, &vocab)?;
    let prefix = a.out.display().to_string();
    write_idx(
        &ds,
        &PathBuf::from(format!("{prefix}-features.idx")),
        &PathBuf::from(format!("{prefix}-labels.idx")),
    )?;
    fs::write(format!("{prefix}-vocab.txt"), vocab.to_file_string())?;
    fs::write(format!("{prefix}-classes.txt"), classes.join("\n") + "\n")?;
    eprintln!(
        "{} documents, {} classes, vocabulary of {}",
        ds.len(),
        classes.len(),
        vocab.len()
    );
    Ok(0)
}
