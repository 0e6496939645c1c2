use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spex::commands::{cmd_ablate, cmd_agreement, cmd_build_index, cmd_run, cmd_score};
use spex::eval::MatchMode;
use spex::gate::VotePolicy;
use spex::pipeline::{RunOutput, StageName};
use spex::Result;

#[derive(Parser)]
#[command(name = "spex", version, about = "Staged event extraction from speech transcripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run gate, triggers, arguments and formatting, then score.
    Run(RunArgs),
    /// Run up to and including the gate stage.
    Gate(RunArgs),
    /// Run up to and including trigger extraction.
    ExtractTriggers(RunArgs),
    /// Run up to and including argument extraction.
    ExtractArgs(RunArgs),
    /// Run up to and including post-processing (writes predictions and report).
    Format(RunArgs),
    /// Score a predictions file against gold.
    Score {
        predictions: PathBuf,
        gold: PathBuf,
        /// Count repeated tuples once.
        #[arg(long)]
        set: bool,
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every gate policy over shared extraction output.
    Ablate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Comma-separated policies (default: all seven).
        #[arg(long, value_delimiter = ',')]
        policies: Vec<VotePolicy>,
        /// Write the JSON table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the rule × learned × LLM agreement table for a verdict file.
    Agreement { verdicts: PathBuf },
    /// Embed the support set and write the index file.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reuse stage artifacts written under the same config hash.
    #[arg(long)]
    resume: bool,
}

fn print_run(out: &RunOutput) {
    let s = &out.stats;
    println!(
        "segments: {}  gated in: {}  extraction failed: {}  provider calls: {}",
        s.segments,
        s.gated_in,
        s.extraction_failed,
        s.total_provider_calls()
    );
    if let Some(report) = &out.report {
        print!("{}", report.render());
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) | Command::Format(a) => print_run(&cmd_run(&a.config, StageName::Final, a.resume)?),
        Command::Gate(a) => print_run(&cmd_run(&a.config, StageName::Gate, a.resume)?),
        Command::ExtractTriggers(a) => print_run(&cmd_run(&a.config, StageName::Triggers, a.resume)?),
        Command::ExtractArgs(a) => print_run(&cmd_run(&a.config, StageName::Arguments, a.resume)?),
        Command::Score {
            predictions,
            gold,
            set,
            ontology,
            out,
        } => {
            let mode = if set { MatchMode::Set } else { MatchMode::Multiset };
            let report = cmd_score(&predictions, &gold, ontology.as_deref(), mode, out.as_deref())?;
            print!("{}", report.render());
        }
        Command::Ablate { configs, policies, out } => {
            let policies = if policies.is_empty() { VotePolicy::ABLATION.to_vec() } else { policies };
            let table = cmd_ablate(&configs, &policies)?;
            print!("{}", table.render());
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&table).expect("serializable") + "\n";
                std::fs::write(&out, text).map_err(|e| spex::Error::Io { path: out, source: e })?;
            }
        }
        Command::Agreement { verdicts } => print!("{}", cmd_agreement(&verdicts)?.render()),
        Command::BuildIndex { config } => {
            let (path, n) = cmd_build_index(&config)?;
            println!("indexed {n} example(s) into {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
