//! `rawmix`: every pipeline stage as a subcommand.

mod commands;
mod error;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rawmix", version, about = "Raw multispectral texture features: simulation, augmentation, RawMixer and M-LBP")]
struct Cli {
    /// Print errors to stderr as one line of JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Msfa {
    Imec2x2,
    Imec4x4,
    Imec5x5,
}

impl Msfa {
    fn id(self) -> &'static str {
        match self {
            Msfa::Imec2x2 => "imec2x2",
            Msfa::Imec4x4 => "imec4x4",
            Msfa::Imec5x5 => "imec5x5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
struct InOut {
    /// Input tensor file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output tensor file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a fully-defined scene tensor into a raw mosaic.
    Mosaic(InOut),
    /// Rearrange a raw mosaic into its B*B-channel plane cube.
    Unshuffle(InOut),
    /// Rearrange a plane cube back into a raw mosaic.
    Shuffle(InOut),
    /// Max-Raw white balance of a raw mosaic.
    Wb {
        #[command(flatten)]
        io: InOut,
        /// Also write the per-band illumination estimate as JSON.
        #[arg(long)]
        dump_estimate: Option<PathBuf>,
    },
    /// Apply one augmentation to a raw file or to every file of a directory.
    Augment {
        /// Augmentation JSON, e.g. {"kind":"translate_y","step":2}.
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural texture scenes and a dataset manifest.
    Synth {
        #[arg(long, value_enum, default_value = "imec4x4")]
        msfa: Msfa,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long, default_value = "daylight")]
        illuminant_train: String,
        #[arg(long, default_value = "warm")]
        illuminant_test: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene tensor under a named illuminant into a raw mosaic.
    Render {
        #[command(flatten)]
        io: InOut,
        /// One of flat_white, daylight, warm.
        #[arg(long)]
        illuminant: String,
    },
    /// Cut train/test patches for every scene of a dataset manifest.
    Patches {
        /// Dataset manifest.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for patch tensors and patches.json.
        #[arg(long)]
        out: PathBuf,
        /// White-balance every patch.
        #[arg(long)]
        wb: bool,
    },
    /// Train a RawMixer on the train patches of a patch manifest.
    Train {
        /// Patch manifest.
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Experiment JSON whose `training` and `model` sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract features of manifest patches into a CSV file.
    Extract {
        /// Patch manifest.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// RawMixer checkpoint; M-LBP is used when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        role: RoleArg,
    },
    /// 1-NN classification of test features against train features.
    Knn {
        /// Feature CSV of the training patches.
        #[arg(long)]
        train: PathBuf,
        /// Feature CSV of the test patches.
        #[arg(long)]
        test: PathBuf,
        /// Prediction CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment for every configured seed and write reports.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the operator property suite for one MSFA.
    Verify {
        #[arg(long, value_enum)]
        msfa: Msfa,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per property.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

fn report_error(err: &CliError, json: bool) {
    if json {
        let line = serde_json::json!({"error": err.kind(), "message": err.to_string()});
        eprintln!("{line}");
    } else {
        eprintln!("rawmix: {err}");
    }
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if json {
                let text = e.render().to_string();
                let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
                report_error(&CliError::Usage(first.to_string()), true);
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, cli.json);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
