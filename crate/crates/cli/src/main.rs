use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use driveforge::boxer::sidecar::{serve, DEFAULT_TIMEOUT};
use driveforge::boxer::{SyntheticProvider, DEFAULT_K_NEAREST};
use driveforge::compositor::{count_tokens, save_png, tile};
use driveforge::fixtures::{write_fixture, FixtureSpec};
use driveforge::geometry::CompositeLayout;
use driveforge::metrics::report::{read_ground_truth, read_predictions};
use driveforge::metrics::{score, FinalWeights, HttpJudge, JudgeClient, ScoreConfig, StubJudge, DEFAULT_MATCH_THRESHOLD};
use driveforge::pipeline::inspect::{find_record, render_record};
use driveforge::pipeline::{ingest, run, FrameSession, ProviderKind, RunConfig, TagStyle, RECORDS_FILE};

#[derive(Parser, Debug)]
#[command(name = "driveforge", version, about = "Convert multi-view driving QA data and score model answers")]
struct Cli {
    /// Worker threads for conversion.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=256))]
    workers: u64,
    /// Seed for synthetic fixtures; recorded in manifests.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Keep verified outputs of an earlier run and redo the rest.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a QA file into conversation records and composites.
    Convert(ConvertArgs),
    /// Compose and tile one frame for inspection.
    Compose(ComposeArgs),
    /// Score predictions against ground truth.
    Score(ScoreArgs),
    /// Draw a converted record's boxes onto its composite.
    Inspect(InspectArgs),
    /// Write a seeded synthetic dataset.
    Fixture(FixtureArgs),
    /// Answer mask requests on stdin/stdout with the synthetic provider.
    #[command(hide = true)]
    ServeSynthetic {
        #[arg(long, default_value_t = DEFAULT_K_NEAREST)]
        k_nearest: usize,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Backend {
    Synthetic,
    Sidecar,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Style {
    Inline,
    RefBox,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// Root that image paths in the input are relative to.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    backend: Backend,
    /// Sidecar command line, run through `sh -c`.
    #[arg(long, env = "DRIVEFORGE_SIDECAR_CMD")]
    sidecar_cmd: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs_f64())]
    sidecar_timeout_secs: f64,
    /// Extra components offered by the synthetic backend.
    #[arg(long, default_value_t = DEFAULT_K_NEAREST)]
    k_nearest: usize,
    /// Pair each frame with its previous key frame.
    #[arg(long)]
    temporal: bool,
    #[arg(long, value_enum, default_value = "inline")]
    tag_style: Style,
    /// Replace the built-in system prompt with the contents of a file.
    #[arg(long)]
    system_prompt_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    frame: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum JudgeKind {
    None,
    Stub,
    Http,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// JSONL of {"id", "answer"}.
    #[arg(long)]
    pred: PathBuf,
    /// records.jsonl or JSONL of {"id", "question", "answer"}.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    judge: JudgeKind,
    #[arg(long, required_if_eq("judge", "http"))]
    judge_url: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    judge_timeout_secs: f64,
    #[arg(long, default_value_t = 2)]
    judge_retries: usize,
    #[arg(long, default_value_t = 4)]
    judge_in_flight: usize,
    /// accuracy,chatgpt,match,language; must sum to 1.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    match_threshold: f64,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// What to print on standard output.
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Output directory of a convert run.
    #[arg(long)]
    out: PathBuf,
    /// Sample id of the record.
    #[arg(long)]
    record: String,
    /// PNG to write; defaults to `<out>/inspect/<record>.png`.
    #[arg(long)]
    dest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    records: usize,
    #[arg(long, default_value_t = 1600)]
    view_width: u32,
    #[arg(long, default_value_t = 900)]
    view_height: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers as usize;
    match cli.command {
        Command::Convert(args) => cmd_convert(args, workers, cli.seed, cli.resume),
        Command::Compose(args) => cmd_compose(args),
        Command::Score(args) => cmd_score(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Fixture(args) => cmd_fixture(args, cli.seed),
        Command::ServeSynthetic { k_nearest } => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve(stdin, stdout, &mut SyntheticProvider::new(k_nearest))?;
            Ok(())
        }
    }
}

/// Report a flag problem the way clap does and exit with status 2.
fn usage(kind: ErrorKind, message: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, message).exit()
}

fn secs(v: f64, flag: &str) -> Duration {
    Duration::try_from_secs_f64(v)
        .unwrap_or_else(|_| usage(ErrorKind::InvalidValue, format!("--{flag} must be a non-negative number of seconds")))
}

fn cmd_convert(args: ConvertArgs, workers: usize, seed: u64, resume: bool) -> Result<()> {
    let provider = match args.backend {
        Backend::Synthetic => ProviderKind::Synthetic {
            k_nearest: args.k_nearest,
        },
        Backend::Sidecar => {
            let Some(cmd) = args.sidecar_cmd else {
                usage(
                    ErrorKind::MissingRequiredArgument,
                    "--backend sidecar needs --sidecar-cmd or DRIVEFORGE_SIDECAR_CMD",
                );
            };
            ProviderKind::Sidecar {
                argv: vec!["sh".into(), "-c".into(), format!("exec {cmd}")],
                timeout_ms: secs(args.sidecar_timeout_secs, "sidecar-timeout-secs").as_millis() as u64,
            }
        }
    };
    let system_prompt = match &args.system_prompt_file {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut config = RunConfig::new(&args.input, &args.images, &args.out);
    config.workers = workers;
    config.temporal = args.temporal;
    config.resume = resume;
    config.provider = provider;
    config.tag_style = match args.tag_style {
        Style::Inline => TagStyle::Inline,
        Style::RefBox => TagStyle::RefBox,
    };
    config.system_prompt = system_prompt;
    config.seed = seed;

    let manifest = run(&config)?;
    let c = manifest.counts;
    println!(
        "{} frames, {} records: {} ok, {} errors{}",
        c.frames,
        c.records,
        c.ok,
        c.error,
        if manifest.run.resumed_frames > 0 {
            format!(" ({} frames kept from the previous run)", manifest.run.resumed_frames)
        } else {
            String::new()
        }
    );
    for s in manifest.records.iter().filter(|s| !s.is_ok()).take(10) {
        if let driveforge::pipeline::RecordStatus::Error { sample_id, stage, message } = s {
            println!("  {sample_id}: {stage}: {message}");
        }
    }
    Ok(())
}

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let mut found = None;
    for frame in ingest(&args.input, &args.images)? {
        let frame = frame?;
        if frame.frame_id == args.frame {
            found = Some(frame);
            break;
        }
    }
    let Some(frame) = found else {
        bail!("frame {:?} not found in {}", args.frame, args.input.display());
    };
    let session = FrameSession::open(&frame, &CompositeLayout::STANDARD)?;
    let composite = session.composite()?;
    let tiles = tile(&composite)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let id = &frame.frame_id;
    save_png(&composite.pixels, &args.out.join(format!("{id}.png")))?;
    for (k, t) in tiles.tiles.iter().enumerate() {
        save_png(t, &args.out.join(format!("{id}_tile{k}.png")))?;
    }
    save_png(&tiles.thumbnail, &args.out.join(format!("{id}_thumb.png")))?;
    let (w, h) = composite.pixels.dimensions();
    println!(
        "{id}: {w}x{h} composite, {} tiles + thumbnail, {} image tokens",
        tiles.tiles.len(),
        count_tokens(&tiles)
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let mut config = ScoreConfig {
        match_threshold: args.match_threshold,
        judge_in_flight: args.judge_in_flight.max(1),
        ..ScoreConfig::default()
    };
    if let Some(w) = &args.weights {
        config.weights = FinalWeights::parse_csv(w)
            .and_then(|w| w.validate().map(|()| w))
            .unwrap_or_else(|e| usage(ErrorKind::InvalidValue, format!("--weights: {e}")));
    }
    let timeout = secs(args.judge_timeout_secs, "judge-timeout-secs");
    let gts = read_ground_truth(&args.gt)?;
    let preds = read_predictions(&args.pred)?;
    let http;
    let judge: Option<&dyn JudgeClient> = match args.judge {
        JudgeKind::None => None,
        JudgeKind::Stub => Some(&StubJudge),
        JudgeKind::Http => {
            let url = args.judge_url.as_deref().expect("clap requires --judge-url");
            http = HttpJudge::new(url, timeout, args.judge_retries)?;
            Some(&http)
        }
    };
    let report = score(&gts, &preds, judge, &config)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.report {
        std::fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut stdout = std::io::stdout().lock();
    match args.format {
        Format::Table => write!(stdout, "{}", report.to_table())?,
        Format::Json => writeln!(stdout, "{json}")?,
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let rec = find_record(&args.out.join(RECORDS_FILE), &args.record)?;
    let img = render_record(&args.out, &rec)?;
    let dest = args
        .dest
        .unwrap_or_else(|| args.out.join("inspect").join(format!("{}.png", args.record)));
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_png(&img, &dest)?;
    println!("{}", dest.display());
    Ok(())
}

fn cmd_fixture(args: FixtureArgs, seed: u64) -> Result<()> {
    let fx = write_fixture(
        &args.out,
        &FixtureSpec {
            records: args.records,
            view_w: args.view_width,
            view_h: args.view_height,
            seed,
        },
    )
    .with_context(|| format!("writing fixture to {}", args.out.display()))?;
    println!("{} ({} frames, {} records; images under {})", fx.qa_json.display(), fx.frames, fx.records, fx.image_root.display());
    Ok(())
}
