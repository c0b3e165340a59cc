//! `planforge`: ingest, shard, train, eval and report from one binary.
//!
//! Every subcommand prints exactly one JSON line on stdout. Logs go to
//! stderr. Exit codes: 0 ok, 1 data or validation failure, 2 usage, 3 I/O.

mod cmd;
mod fail;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fail::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "planforge",
    version,
    about = "Multi-task planning data pipeline and training harness"
)]
struct Cli {
    /// Seed override (distractor sampling for ingest, shard tag, run seed for train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert source JSONL files listed in a corpus manifest into unified samples.
    Ingest(IngestArgs),
    /// Split a unified corpus into per-task shard sets.
    Shard(ShardArgs),
    /// Run (or resume) a simulated training run over sharded data.
    Train(TrainArgs),
    /// Kill a run at the given steps, resume it, and compare with an uninterrupted run.
    KillTest(KillTestArgs),
    /// Score predictions against gold under a benchmark protocol.
    Eval(EvalArgs),
    /// Merge eval reports and run summaries into one comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long, value_name = "M")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Accept unknown fields in source records.
    #[arg(long)]
    pub lenient: bool,
    /// Fraction of synthetic items generated invalid on purpose.
    #[arg(long, value_name = "F")]
    pub adversarial: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ShardArgs {
    #[arg(long = "in", value_name = "CORPUS")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub shard_size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "RUN_JSON")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from the latest consistent checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this step without further cleanup, as if killed.
    #[arg(long, value_name = "N")]
    pub stop_after: Option<u64>,
    /// Make the simulated trainer fail at this step.
    #[arg(long, value_name = "N")]
    pub fail_at_step: Option<u64>,
}

#[derive(Args, Debug)]
pub struct KillTestArgs {
    #[arg(long, value_name = "RUN_JSON")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Steps after which the run is killed; repeat or comma-separate.
    #[arg(long, value_name = "N", value_delimiter = ',', required_unless_present_any = ["random_kills", "crash_boundary"])]
    pub at_step: Vec<u64>,
    /// Additional kill points drawn uniformly from the run using --seed.
    #[arg(long, value_name = "K")]
    pub random_kills: Option<usize>,
    /// Also crash at this checkpoint write boundary during the first segment.
    #[arg(long, value_name = "B")]
    pub crash_boundary: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_parser = [planforge_core::evalharness::BLEU_PROTOCOL, planforge_core::evalharness::TOP1_PROTOCOL])]
    pub protocol: String,
    #[arg(long, value_name = "P")]
    pub pred: PathBuf,
    #[arg(long, value_name = "G")]
    pub gold: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Category taxonomy for top-1 (comma-separated); defaults to the four EgoPlan categories.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories or eval_report.json files.
    #[arg(required = true, value_name = "RUN")]
    pub inputs: Vec<PathBuf>,
    /// Row labels, in input order; defaults to directory names.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Write report.json and report.txt here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub struct Globals {
    pub seed: Option<u64>,
    pub quiet: bool,
}

fn emit(value: &serde_json::Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(value).expect("json"));
}

fn fail(command: &str, f: &Failure) -> ExitCode {
    log::error!("{:#}", f.error);
    emit(&json!({
        "command": command,
        "status": "error",
        "exit_code": f.kind.code(),
        "kind": f.kind.as_str(),
        "error": format!("{:#}", f.error),
    }));
    ExitCode::from(f.kind.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return fail("", &Failure::usage(e.kind()));
        }
    };

    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .target(env_logger::Target::Stderr)
    .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            return fail("", &Failure::usage("--threads must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    let g = Globals {
        seed: cli.seed,
        quiet: cli.quiet,
    };
    let (name, result) = match &cli.command {
        Command::Ingest(a) => ("ingest", cmd::ingest(a, &g)),
        Command::Shard(a) => ("shard", cmd::shard(a, &g)),
        Command::Train(a) => ("train", cmd::train(a, &g)),
        Command::KillTest(a) => ("kill-test", cmd::kill_test(a, &g)),
        Command::Eval(a) => ("eval", cmd::eval(a, &g)),
        Command::Report(a) => ("report", cmd::report(a, &g)),
    };
    match result {
        Ok(mut v) => {
            if let Some(obj) = v.as_object_mut() {
                let mut out = serde_json::Map::new();
                out.insert("command".into(), name.into());
                out.insert("status".into(), "ok".into());
                out.append(obj);
                v = out.into();
            }
            emit(&v);
            ExitCode::SUCCESS
        }
        Err(f) => fail(name, &f),
    }
}
