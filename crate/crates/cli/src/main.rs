//! `steerlab`: dataset generation, component attribution, ranking, steering
//! and activation patching from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "steerlab", version, about = "Attribute, rank and amplify GPT-2 components")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Model bundle directory (config.json, vocab.json, merges.txt, model.tensors).
    #[arg(long, global = true, visible_alias = "model")]
    pub bundle: Option<PathBuf>,
    /// Seed for every generator.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "steerlab-out")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write task datasets as JSON lines.
    GenData(commands::GenDataArgs),
    /// Score heads and FF neurons on the train splits.
    Attribute(commands::AttributeArgs),
    /// Order scored components.
    Rank(commands::RankArgs),
    /// Amplify the top-k components and evaluate on the test splits.
    Steer(commands::SteerArgs),
    /// Test accuracy across several k.
    Sweep(commands::SweepArgs),
    /// Activation patching and circuit faithfulness for one sub-task.
    Patch(commands::PatchArgs),
    /// Overlap between the tops of two rankings.
    Overlap(commands::OverlapArgs),
    /// Consolidate a run directory into report.json and report.txt.
    Report(commands::ReportArgs),
    /// Dump attention patterns and final-position activations for a prompt.
    Trace(commands::TraceArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::Attribute(a) => commands::attribute(g, a),
        Command::Rank(a) => commands::rank(g, a),
        Command::Steer(a) => commands::steer(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
        Command::Patch(a) => commands::patch(g, a),
        Command::Overlap(a) => commands::overlap(g, a),
        Command::Report(a) => commands::report(g, a),
        Command::Trace(a) => commands::trace(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
