//! `genmark` — protect image subjects with learned watermarks, synthesize
//! from protected sets with toy proxies, and evaluate detection.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;
mod plot;

use clap::Parser;
use genmark_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "genmark",
    version,
    about = "Subject watermarking against unauthorized subject-driven synthesis",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    common: config::CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Jointly pretrain the watermark generator and detector.
    Pretrain(commands::pretrain::PretrainArgs),
    /// Watermark a subject's images and register the subject.
    Watermark(commands::watermark::WatermarkArgs),
    /// Train a synthesis proxy on a subject's images and sample from it.
    Synth(commands::synth::SynthArgs),
    /// Fine-tune the detector for one registered subject.
    Finetune(commands::finetune::FinetuneArgs),
    /// Run the scenario evaluation and write a report.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Measure detector robustness under forgery and removal attacks.
    Countermeasure(commands::countermeasure::CountermeasureArgs),
    /// Re-emit tables and plots from a stored report.
    Report(commands::report::ReportArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else clap
            // rejects is a usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Pretrain(args) => commands::pretrain::run(&cli.common, args),
        Command::Watermark(args) => commands::watermark::run(&cli.common, args),
        Command::Synth(args) => commands::synth::run(&cli.common, args),
        Command::Finetune(args) => commands::finetune::run(&cli.common, args),
        Command::Evaluate(args) => commands::evaluate::run(&cli.common, args),
        Command::Countermeasure(args) => commands::countermeasure::run(&cli.common, args),
        Command::Report(args) => commands::report::run(&cli.common, args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Bad inputs are the caller's problem (1); everything else is ours (2).
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) => 1,
        _ => 2,
    }
}
