use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "hyspark", version, about = "Hybrid sparse masked pretraining for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes with labels and an index.
    GenData(GenDataArgs),
    /// Masked-image-modeling pretraining; writes a checkpoint and a loss log.
    Pretrain(PretrainArgs),
    /// Segmentation fine-tuning from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Dump input / masked input / prediction volumes for one mask.
    Reconstruct(ReconstructArgs),
    /// Run the invariant suites and print a JSON report.
    Verify(VerifyArgs),
    /// Pretrain + fine-tune ablation arms and print a comparison table.
    Ablate(AblateArgs),
}

/// Options shared by every command that reads a configuration.
#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// TOML config file; missing keys take the desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given (desk, paper-scale).
    #[arg(long)]
    profile: Option<String>,
    /// Numeric precision for training: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Volume extent as D,H,W.
    #[arg(long, default_value = "32,32,32")]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Sample every scale's mask independently instead of propagating the junction mask.
    #[arg(long)]
    no_bottom_up: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decoder fusion: concat, add or none.
    #[arg(long)]
    fusion: Option<String>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss log (NDJSON); defaults to the checkpoint path with `.loss.ndjson`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretraining checkpoint, or `none` to train from scratch.
    #[arg(long, conflicts_with_all = ["from_scratch", "from_checkpoint"])]
    ckpt: Option<String>,
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    /// Labeled training data directory.
    #[arg(long)]
    data: PathBuf,
    /// Optional labeled validation data directory.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once train Dice exceeds this value.
    #[arg(long)]
    stop_at_dice: Option<f64>,
    /// Model checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Dice log (NDJSON); defaults to the model path with `.dice.ndjson`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Raw volume (with sidecar) in HU.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for input.raw, masked.raw and prediction.raw.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    /// Use independently sampled per-scale masks as fixtures.
    #[arg(long)]
    no_bottom_up: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Arm(s): ratio25, ratio50, ratio75, no-skip, skip-add, skip-concat, or all.
    #[arg(long, value_delimiter = ',', required = true)]
    arm: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretraining steps per arm.
    #[arg(long)]
    steps: Option<usize>,
    /// Fine-tuning steps per arm.
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for ablation.json, ablation.txt and per-arm logs.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Verify(a) => commands::verify(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
