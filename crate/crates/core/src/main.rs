use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use adherence::config::RunConfig;
use adherence::features::Padding;
use adherence::learners::Family;
use adherence::pipeline::{self, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "adherence", version, about = "Treatment-phase adherence risk from claims event streams")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the stage's directory under `paths`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only warnings and errors on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Emit a synthetic cohort and its ground truth.
    Simulate,
    /// Segment claims into labeled treatment phases (phases.csv).
    Phases(ClaimsArg),
    /// Build features.csv and sequences.jsonl.
    Features(FeaturesArgs),
    /// Fit and save one model per family and horizon.
    Train(ModelArgs),
    /// Cross-validated benchmark: report.csv, folds.csv, roc.csv, cap.csv, SVGs.
    Evaluate(ModelArgs),
    /// Risk scores for new claims with a saved model (scores.csv).
    Score(ScoreArgs),
    /// Compare the phase engine with the brute-force labeler.
    OracleCheck(ClaimsArg),
}

#[derive(Args, Debug)]
struct ClaimsArg {
    /// Claims directory; defaults to `paths.claims`.
    #[arg(long)]
    claims: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[command(flatten)]
    claims: ClaimsArg,
    /// Directory holding phases.csv; defaults to `paths.phases`.
    #[arg(long)]
    phases: Option<PathBuf>,
    #[arg(long)]
    padding: Option<Padding>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Directory holding features.csv and sequences.jsonl; defaults to `paths.features`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// logistic, tree, gbt, mlp, lstm or all.
    #[arg(long, default_value = "all")]
    model: Selection<Family>,
    /// 90, 180, 360 (any configured horizon) or all.
    #[arg(long, default_value = "all")]
    horizon: Selection<i64>,
    #[arg(long)]
    padding: Option<Padding>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// A model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    claims: ClaimsArg,
    #[arg(long)]
    padding: Option<Padding>,
}

#[derive(Clone, Debug)]
enum Selection<T> {
    All,
    One(T),
}

impl<T: std::str::FromStr> std::str::FromStr for Selection<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(Selection::All)
        } else {
            s.parse::<T>().map(Selection::One).map_err(|e| e.to_string())
        }
    }
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg.validated()?)
}

fn select(cfg: &mut RunConfig, args: &ModelArgs) -> Result<(), PipelineError> {
    if let Selection::One(family) = args.model {
        cfg.evaluation.families = vec![family];
    }
    if let Selection::One(h) = args.horizon {
        if !cfg.phases.horizons.contains(&h) {
            return Err(PipelineError::Usage(format!("horizon {h} is not configured (have {:?})", cfg.phases.horizons)));
        }
        cfg.evaluation.horizons = vec![h];
    }
    Ok(())
}

fn or<'a>(flag: &'a Option<PathBuf>, default: &'a Path) -> &'a Path {
    flag.as_deref().unwrap_or(default)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| PipelineError::Usage(format!("thread pool: {e}")))?;
    let paths = cfg.paths.clone();
    let out = |default: &Path| cli.out.clone().unwrap_or_else(|| default.to_path_buf());
    let written = match &cli.command {
        Command::Simulate => pipeline::simulate(&cfg, &out(&paths.claims))?,
        Command::Phases(a) => pipeline::phases(&cfg, or(&a.claims, &paths.claims), &out(&paths.phases))?,
        Command::Features(a) => {
            if let Some(p) = a.padding {
                cfg.features.padding = p;
            }
            pipeline::features(&cfg, or(&a.claims.claims, &paths.claims), or(&a.phases, &paths.phases), &out(&paths.features))?
        }
        Command::Train(a) => {
            select(&mut cfg, a)?;
            pipeline::train(&cfg, or(&a.features, &paths.features), a.padding, &out(&paths.models))?
        }
        Command::Evaluate(a) => {
            select(&mut cfg, a)?;
            pipeline::evaluate_to(&cfg, or(&a.features, &paths.features), a.padding, &out(&paths.reports))?
        }
        Command::Score(a) => pipeline::score(&cfg, &a.model, or(&a.claims.claims, &paths.claims), a.padding, &out(&paths.reports))?,
        Command::OracleCheck(a) => {
            let report = pipeline::oracle(&cfg, or(&a.claims, &paths.claims))?;
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
            Vec::new()
        }
    };
    for path in written {
        emit(&path.display().to_string());
    }
    Ok(())
}

/// Data line on standard output; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn fail(kind: &str, message: String, details: Vec<String>, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "details": details }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.kind().to_string(), vec![e.to_string().trim_end().to_string()], 2),
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e {
                PipelineError::Config(_) | PipelineError::Usage(_) => 2,
                _ => 1,
            };
            if let PipelineError::OracleMismatch(report) = &e {
                emit(&serde_json::to_string_pretty(report).expect("report serializes"));
            }
            fail(e.kind(), e.to_string(), e.details(), code)
        }
    }
}
