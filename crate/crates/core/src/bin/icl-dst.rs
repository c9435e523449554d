//! Command line front end: import corpora, precompute embeddings, run
//! experiments and grids, summarize results.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use icl_dst::corpus::{accumulate_turns, import_multiwoz, import_multiwoz_dir, save_corpus, Schema, Split, TurnSample};
use icl_dst::embedder::{EmbedTextMode, Embedder, MockEmbedder, ServiceEmbedder};
use icl_dst::harness::{self, EmbeddingSource, ExperimentConfig, RunOptions};
use icl_dst::prompt::DecodingStrategy;
use icl_dst::repair::{parse_repair_cases, run_repair_suite, REPAIR_CORPUS};
use icl_dst::HistoryMode;

#[derive(Parser)]
#[command(name = "icl-dst", version, about = "Retrieval-augmented in-context dialogue state tracking")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a MultiWOZ-style dump into turn-sample JSONL.
    Import(ImportArgs),
    /// Precompute an emb-jsonl store for the corpora of a config.
    Embed(EmbedArgs),
    /// Run one configuration.
    Run(RunArgs),
    /// Run every point of the config's grid.
    Grid(GridArgs),
    /// Tables and CSVs from finished runs.
    Report(ReportArgs),
    /// Run the JSON repair suite.
    RepairTest(RepairArgs),
}

#[derive(Args)]
struct ImportArgs {
    /// A single data.json-like file.
    #[arg(long, conflicts_with = "dir", required_unless_present = "dir")]
    input: Option<PathBuf>,
    /// A release directory with data.json, valListFile and testListFile.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Output file (with --input) or directory (with --dir).
    #[arg(long)]
    out: PathBuf,
    /// Split assigned to every dialogue of --input.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Domain/slot schema JSON; defaults to the five MultiWOZ domains.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output store.
    #[arg(long)]
    out: PathBuf,
    /// Embedded text; defaults to the config's prompt.embed_text_mode.
    #[arg(long)]
    mode: Option<EmbedTextMode>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    sample_limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Fail samples whose K demonstrations do not fit instead of dropping some.
    #[arg(long)]
    strict_k: bool,
    /// Stop after this many new samples; rerun to resume.
    #[arg(long)]
    max_new_samples: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    history_mode: Option<HistoryMode>,
    #[arg(long)]
    embed_text_mode: Option<EmbedTextMode>,
    #[arg(long)]
    decoding_strategy: Option<DecodingStrategy>,
    /// Render and write prompts without calling the backend.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RepairArgs {
    /// Cases as JSONL ({"id", "class", "raw", "expected"}); defaults to the bundled suite.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Minimum number of parsed cases for success.
    #[arg(long)]
    min_parsed: Option<usize>,
}

fn load_config(o: &Overrides) -> Result<(ExperimentConfig, RunOptions)> {
    let mut config = ExperimentConfig::load(&o.config)?;
    if let Some(dir) = &o.output_dir {
        config.output_dir = dir.clone();
    }
    if o.sample_limit.is_some() {
        config.sample_limit = o.sample_limit;
    }
    if o.seed.is_some() {
        config.seed = o.seed;
    }
    if let Some(p) = o.parallelism {
        config.parallelism = p;
    }
    if o.strict_k {
        config.prompt.strict_k = true;
    }
    Ok((config, RunOptions { max_new_samples: o.max_new_samples }))
}

fn import(args: ImportArgs) -> Result<()> {
    let schema = match &args.schema {
        Some(p) => Schema::load(p)?,
        None => Schema::multiwoz(),
    };
    let (report, samples) = if let Some(dir) = &args.dir {
        import_multiwoz_dir(dir, &schema)?
    } else {
        let input = args.input.as_ref().expect("clap requires --input or --dir");
        let report = import_multiwoz(input, &schema)?;
        let samples: Vec<TurnSample> = report.dialogues.iter().flat_map(|d| accumulate_turns(d, args.split)).collect();
        (report, samples)
    };
    for e in &report.errors {
        log::warn!("skipped dialogue: {e:?}");
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.unknown_slots.is_empty() {
        log::warn!("values for slots outside the schema: {:?}", report.unknown_slots);
    }

    if args.dir.is_some() {
        std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let part: Vec<TurnSample> = samples.iter().filter(|s| s.split == split).cloned().collect();
            let path = args.out.join(format!("{}.jsonl", split.as_str()));
            save_corpus(&path, &part)?;
            println!("{}: {} turns -> {}", split.as_str(), part.len(), path.display());
        }
    } else {
        save_corpus(&args.out, &samples)?;
        println!("{} dialogues, {} turns -> {}", report.dialogues.len(), samples.len(), args.out.display());
    }
    if !report.errors.is_empty() {
        println!("{} dialogues skipped", report.errors.len());
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let embedder: Box<dyn Embedder> = match &config.embedding.source {
        EmbeddingSource::Mock { dim } => Box::new(MockEmbedder::new(*dim)?),
        EmbeddingSource::Service(service) => Box::new(ServiceEmbedder::new(service.clone())?),
        EmbeddingSource::Precomputed { .. } => bail!("embedding.source is already a precomputed store"),
    };
    let mut samples = icl_dst::load_corpus(&config.corpus.train)?;
    samples.extend(icl_dst::load_corpus(&config.corpus.test)?);
    let mode = args.mode.unwrap_or(config.prompt.embed_text_mode);
    let summary = harness::precompute_embeddings(
        &samples,
        embedder.as_ref(),
        mode,
        config.embedding.speaker_tags,
        &args.out,
        args.batch_size,
    )?;
    if summary.up_to_date {
        println!("{} is up to date", args.out.display());
    } else {
        println!("{} computed, {} resumed -> {}", summary.computed, summary.resumed, args.out.display());
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<bool> {
    let (mut config, options) = load_config(&args.common)?;
    if let Some(k) = args.k {
        config.prompt.max_demos = k;
    }
    if let Some(m) = args.history_mode {
        config.prompt.history_mode = m;
    }
    if let Some(m) = args.embed_text_mode {
        config.prompt.embed_text_mode = m;
    }
    if let Some(s) = args.decoding_strategy {
        config.prompt.decoding_strategy = s;
    }
    if args.dry_run {
        let r = harness::dry_run(&config)?;
        println!(
            "{} samples, {} prompts written to {}, {} unfittable, {} failed",
            r.samples,
            r.prompts,
            r.prompt_dir.display(),
            r.unfittable,
            r.failed
        );
        return Ok(true);
    }
    let report = harness::run_experiment(&config, options)?;
    println!(
        "{}: precision {:.4} recall {:.4} ({} samples, {} failed, {} unfittable){}",
        report.config_id,
        report.metrics.precision,
        report.metrics.recall,
        report.samples,
        report.failed,
        report.unfittable,
        if report.complete { "" } else { " [incomplete]" }
    );
    Ok(true)
}

fn grid(args: GridArgs) -> Result<bool> {
    let (config, options) = load_config(&args.common)?;
    let report = harness::run_grid(&config, options)?;
    for row in &report.rows {
        println!("{:<48} {:<10} P={:.4} R={:.4}", row.config_id, row.status, row.precision, row.recall);
    }
    println!("-> {}", report.csv_path.display());
    Ok(report.rows.iter().all(|r| !r.status.starts_with("failed")))
}

fn report(args: ReportArgs) -> Result<()> {
    let summary = harness::report(&args.inputs, &args.out)?;
    print!("{}", summary.text);
    Ok(())
}

fn repair_test(args: RepairArgs) -> Result<bool> {
    let text = match &args.file {
        Some(p) => std::fs::read_to_string(p).with_context(|| p.display().to_string())?,
        None => REPAIR_CORPUS.to_string(),
    };
    let cases = parse_repair_cases(&text).map_err(anyhow::Error::msg)?;
    let r = run_repair_suite(&cases);
    println!(
        "{} cases: {} clean, {} after repair, {} unparseable, {} mismatched",
        r.cases,
        r.parsed_clean,
        r.parsed_after_repair,
        r.unparseable,
        r.mismatched.len()
    );
    for (fix, n) in &r.fixes {
        println!("  {fix:<16} {n}");
    }
    for id in &r.failed {
        println!("unparseable: {id}");
    }
    for id in &r.mismatched {
        println!("mismatched: {id}");
    }
    Ok(r.parsed() >= args.min_parsed.unwrap_or(r.cases) && r.mismatched.is_empty())
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Import(a) => import(a).map(|_| true),
        Command::Embed(a) => embed(a).map(|_| true),
        Command::Run(a) => run(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a).map(|_| true),
        Command::RepairTest(a) => repair_test(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

