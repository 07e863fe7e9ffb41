use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agpad::commands;
use agpad::config::RunConfig;
use agpad::Result;

#[derive(Parser)]
#[command(name = "agpad", version, about = "Attention-guided iris presentation attack detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus
    Synth(Common),
    /// Train one model
    Train(Common),
    /// Score the evaluation split with a checkpoint
    Eval(Common),
    /// Train and evaluate all six fusion variants
    Ablate(Common),
    /// Grad-CAM heatmaps before and after attention
    Gradcam(Common),
    /// Parameter table and attention-map dump
    Inspect(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Fusion variant: none, pam, cam, parallel, sequential, hierarchical
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint to load (defaults to OUT/model.agpd)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated FDR operating points
    #[arg(long)]
    fdr_targets: Option<String>,
    /// Decision threshold for APCER/BPCER
    #[arg(long)]
    threshold: Option<String>,
    /// Image files (gradcam; first one is the inspect probe)
    images: Vec<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides: Vec<(String, String)> = [
            ("out", &self.out),
            ("seed", &self.seed),
            ("model.fusion", &self.variant),
            ("eval.fdr_targets", &self.fdr_targets),
            ("eval.threshold", &self.threshold),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => commands::cmd_synth(&c.resolve()?).map(drop),
        Command::Train(c) => commands::cmd_train(&c.resolve()?).map(drop),
        Command::Eval(c) => commands::cmd_eval(&c.resolve()?, c.checkpoint.as_deref()).map(drop),
        Command::Ablate(c) => commands::cmd_ablate(&c.resolve()?).map(drop),
        Command::Gradcam(c) => commands::cmd_gradcam(&c.resolve()?, c.checkpoint.as_deref(), &c.images).map(drop),
        Command::Inspect(c) => {
            commands::cmd_inspect(&c.resolve()?, c.checkpoint.as_deref(), c.images.first().map(|p| p.as_path())).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
