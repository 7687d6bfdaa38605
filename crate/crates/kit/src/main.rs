use accent_kit::analysis::export_embeddings;
use accent_kit::checkpoint::Checkpoint;
use accent_kit::checks::{run_ctc_oracle, run_e2e_check, run_loss_checks};
use accent_kit::config::{keys_help, PartialRunConfig, RunConfig};
use accent_kit::data::{generate_synthetic, load_manifest, Split};
use accent_kit::error::{KitError, Result};
use accent_kit::trainer::{evaluate, train, write_metrics};
use accent_core::ctc::Vocabulary;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "accent-kit",
    version,
    about = "Accent embedding toolkit: synthetic corpora, multi-task training, and numerical checks",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic accent corpus
    #[command(name = "gen-data", after_help = keys_help())]
    GenData(GenDataArgs),
    /// Train a model on a generated corpus
    #[command(after_help = keys_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split
    #[command(after_help = keys_help())]
    Eval(EvalArgs),
    /// Export utterance embeddings as CSV
    #[command(name = "export-embeddings", after_help = keys_help())]
    ExportEmbeddings(ExportArgs),
    /// Verify analytic gradients against central finite differences
    #[command(after_help = keys_help())]
    Gradcheck(GradcheckArgs),
    /// Compare the alignment-sum recursion against brute-force enumeration
    #[command(name = "ctc-oracle", after_help = keys_help())]
    CtcOracle(CtcOracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to write the corpus into
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key/value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: PartialRunConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint and the metrics log
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key/value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint whose parameters seed this run
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[command(flatten)]
    overrides: PartialRunConfig,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory
    #[arg(long)]
    data: PathBuf,
    /// Which split to score: train or dev
    #[arg(long, default_value = "dev")]
    split: String,
    /// Optional flat key/value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: PartialRunConfig,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint to read parameters from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory
    #[arg(long)]
    data: PathBuf,
    /// Which split to export: train or dev
    #[arg(long, default_value = "dev")]
    split: String,
    /// Coordinate width: 0 for the raw embedding, 2 or 3 for the trained bottleneck
    #[arg(long, default_value_t = 0)]
    dim: usize,
    /// CSV file to write
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key/value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: PartialRunConfig,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random draws per loss family
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    /// Screened draws for the whole-graph sweep
    #[arg(long, default_value_t = 10)]
    deep_seeds: usize,
    /// Double the analytic gradients first; the run must then fail
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct CtcOracleArgs {
    /// Random grids per target shape
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Seed for the random grids
    #[arg(long, default_value_t = 71)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let spec = cfg.synthetic_spec()?;
    let header = generate_synthetic(&spec, &args.out)?;
    println!(
        "wrote {} train + {} dev utterances across {} classes to {}",
        header.train_count,
        header.dev_count,
        header.classes,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file_overlay = match &args.config {
        Some(p) => PartialRunConfig::from_file(p)?,
        None => PartialRunConfig::default(),
    };
    let mut cfg = RunConfig::default();
    cfg.apply(&file_overlay);
    cfg.apply(&args.overrides);

    let ds = load_manifest(&args.data)?;

    // The corpus is the authority on label and token counts; an explicit
    // conflicting key is an error rather than a silent override.
    let explicit_classes = args.overrides.classes.or(file_overlay.classes);
    if let Some(c) = explicit_classes {
        if c != ds.header.classes {
            return Err(KitError::Config(format!(
                "classes = {c} conflicts with the corpus ({} classes)",
                ds.header.classes
            )));
        }
    }
    let explicit_vocab = args.overrides.vocab_size.or(file_overlay.vocab_size);
    if let Some(v) = explicit_vocab {
        if v != ds.header.vocab.len() {
            return Err(KitError::Config(format!(
                "vocab_size = {v} conflicts with the corpus ({} tokens)",
                ds.header.vocab.len()
            )));
        }
    }
    cfg.classes = ds.header.classes;
    cfg.vocab_size = ds.header.vocab.len();

    let vocab = Vocabulary::new(ds.header.vocab.clone())?;
    let model = cfg.model_config(vocab)?;
    let tcfg = cfg.train_config()?;

    let warm = match &args.warm_start {
        Some(p) => Some(Checkpoint::load(p)?.params),
        None => None,
    };

    std::fs::create_dir_all(&args.out).map_err(KitError::io(&args.out))?;
    let outcome = train(&model, &ds, &tcfg, warm, |m| {
        println!(
            "epoch {:>3}  train {:.6}  ctc {:.6}  disc {:.6}  clf {:.6}  dev {:.4}  lr {:.6}",
            m.epoch, m.train_loss, m.ctc_loss, m.disc_loss, m.clf_loss, m.dev_accuracy, m.lr
        );
    })?;

    let ckpt_path = args.out.join("model.ckpt");
    let metrics_path = args.out.join("metrics.csv");
    outcome.checkpoint.save(&ckpt_path)?;
    write_metrics(&metrics_path, &outcome.metrics)?;
    if outcome.skipped_ctc_total > 0 {
        println!(
            "note: {} utterance passes had transcripts too long for their frame count and skipped the transcription term",
            outcome.skipped_ctc_total
        );
    }
    println!(
        "best epoch {} dev accuracy {:.4}; wrote {} and {}",
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.meta.dev_accuracy,
        ckpt_path.display(),
        metrics_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let split = parse_split(&args.split)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = load_manifest(&args.data)?;
    let (acc, confusion) = evaluate(&ckpt.model, &ckpt.params, &ds, split, cfg.max_frames)?;
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    println!("split {}: accuracy {:.4} over {} utterances", args.split, acc, total);
    for (label, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
        println!("true {label}: {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let split = parse_split(&args.split)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = load_manifest(&args.data)?;
    let rows = export_embeddings(
        &ckpt.model,
        &ckpt.params,
        &ds,
        split,
        args.dim,
        cfg.max_frames,
        &args.out,
    )?;
    println!("wrote {} rows to {}", rows, args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let grad_scale = if args.corrupt { 2.0 } else { 1.0 };
    let mut reports = run_loss_checks(args.seeds, grad_scale)?;
    reports.push(run_e2e_check(args.deep_seeds, grad_scale)?);
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let skipped = if r.skipped > 0 {
            format!(", {} draws screened out", r.skipped)
        } else {
            String::new()
        };
        println!(
            "{:>10}: worst {:.3e} over {} seeds{} (tol {:.0e}) {}",
            r.name, r.worst, r.seeds, skipped, r.tolerance, status
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(KitError::Check(format!(
            "{failed} gradient sweep(s) exceeded tolerance"
        )));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn cmd_ctc_oracle(args: &CtcOracleArgs) -> Result<()> {
    let report = run_ctc_oracle(args.cases, args.seed)?;
    println!(
        "compared {} cases ({} infeasible, flagged identically): worst rel diff {:.3e} (tol {:.0e})",
        report.compared, report.infeasible, report.worst, report.tolerance
    );
    if !report.passed() {
        return Err(KitError::Check(format!(
            "lattice and enumeration disagree by {:.3e}",
            report.worst
        )));
    }
    println!("recursion matches enumeration");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ExportEmbeddings(a) => cmd_export(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::CtcOracle(a) => cmd_ctc_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error and exits 1.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
