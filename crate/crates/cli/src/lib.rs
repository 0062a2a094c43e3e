//! Command-line front end of the codec: training, coding, evaluation, FLOPs
//! accounting and the ablation sweep.

pub mod ablate;
pub mod commands;
pub mod image_file;
pub mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mfcodec::network::{ArchConfig, Variant};
use mfcodec::train::Distortion;

pub use ablate::{cmd_ablate, parse_grid, AblateArgs, GridEntry, ABLATION_COLUMNS};
pub use commands::{
    cmd_decode, cmd_encode, cmd_eval, cmd_flops, cmd_synth, cmd_train, DecodeReport, EncodeReport, EvalRow,
    EVAL_COLUMNS,
};
pub use image_file::ImageFile;
pub use manifest::RunManifest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

/// Invalid arguments that clap's own parsing cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<mfcodec::Error>() {
            return match e {
                mfcodec::Error::DigestMismatch { .. } => EXIT_MISMATCH,
                mfcodec::Error::Config(_) | mfcodec::Error::Invalid(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "mfcodec", version, about = "Multi-frequency learned image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of PNG/PPM images.
    Train(TrainArgs),
    /// Compress one image.
    Encode(EncodeArgs),
    /// Decompress one bitstream.
    Decode(DecodeArgs),
    /// Code every image of a directory and tabulate rate and quality.
    Eval(EvalArgs),
    /// Analytic FLOPs of a model configuration.
    Flops(FlopsArgs),
    /// Train and evaluate a grid of model variants at toy scale.
    Ablate(AblateArgs),
    /// Write synthetic toy images.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionArg {
    Mse,
    Msssim,
}

impl From<DistortionArg> for Distortion {
    fn from(d: DistortionArg) -> Self {
        match d {
            DistortionArg::Mse => Distortion::Mse,
            DistortionArg::Msssim => Distortion::MsSsim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Goct,
    Actout,
    Coreoct,
    Orgoct,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Goct => Variant::GoOct,
            VariantArg::Actout => Variant::ActOut,
            VariantArg::Coreoct => Variant::CoreOct,
            VariantArg::Orgoct => Variant::OrgOct,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = DistortionArg::Mse)]
    pub distortion: DistortionArg,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Latent channels M, optionally followed by internal channels N.
    #[arg(long, default_value = "192")]
    pub channels: String,
    #[arg(long, value_enum, default_value_t = VariantArg::Goct)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Total optimizer steps; overrides --epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint that carries optimizer state. Its training
    /// configuration replaces the one given on the command line.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Original image to compare the reconstruction against.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value = "192")]
    pub channels: String,
    #[arg(long, default_value_t = 768)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Original octave units.
    #[arg(long, group = "variant")]
    pub orgoct: bool,
    /// Octave units in the core transforms only.
    #[arg(long, group = "variant")]
    pub coreoct: bool,
    /// Activations outside the octave units.
    #[arg(long, group = "variant")]
    pub actout: bool,
    /// Print CSV instead of an aligned table.
    #[arg(long)]
    pub csv: bool,
}

impl FlopsArgs {
    pub fn variant(&self) -> Variant {
        if self.orgoct {
            Variant::OrgOct
        } else if self.coreoct {
            Variant::CoreOct
        } else if self.actout {
            Variant::ActOut
        } else {
            Variant::GoOct
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `png` or `ppm`.
    #[arg(long, default_value = "png")]
    pub format: String,
}

/// `M` or `M,N`; N defaults to M.
pub fn parse_channels(s: &str) -> anyhow::Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| -> anyhow::Result<usize> {
        match p.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(usage(format!("invalid channel count `{p}` in --channels {s}"))),
        }
    };
    match parts.as_slice() {
        [m] => Ok((num(m)?, num(m)?)),
        [m, n] => Ok((num(m)?, num(n)?)),
        _ => Err(usage(format!("--channels takes M or M,N, got `{s}`"))),
    }
}

/// Architecture from command-line geometry, validated.
pub fn arch(channels: &str, alpha: f64, variant: Variant) -> anyhow::Result<ArchConfig> {
    let (m, n) = parse_channels(channels)?;
    let cfg = ArchConfig {
        variant,
        ..ArchConfig::with_channels(m, n, alpha)
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Runs one parsed command, printing its report to stdout.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let records = cmd_train(&a)?;
            if let Some(last) = records.last() {
                println!(
                    "trained {} steps: loss {} bpp_estimate {} psnr {}",
                    last.step + 1,
                    last.loss,
                    last.bpp_estimate,
                    last.psnr
                );
            }
        }
        Command::Encode(a) => {
            let r = cmd_encode(&a)?;
            println!("{}x{} {} bytes", r.width, r.height, r.bytes);
            println!("bpp {}", r.bpp);
        }
        Command::Decode(a) => {
            let r = cmd_decode(&a)?;
            println!("{}x{}", r.width, r.height);
            println!("bpp {}", r.bpp);
            if let Some(p) = r.psnr {
                println!("PSNR {p}");
            }
            if let Some(m) = r.msssim {
                println!("MS-SSIM {m}");
                println!("MS-SSIM_dB {}", mfcodec::train::msssim_db(m));
            }
        }
        Command::Eval(a) => {
            let rows = cmd_eval(&a)?;
            let table = commands::eval_table(&rows);
            print!(
                "{}",
                String::from_utf8_lossy(&mfcodec::report::render_table(
                    &table,
                    mfcodec::report::TableFormat::Text
                ))
            );
        }
        Command::Flops(a) => {
            let report = cmd_flops(&a)?;
            let table = commands::flops_table(&report);
            let format = if a.csv {
                mfcodec::report::TableFormat::Csv
            } else {
                mfcodec::report::TableFormat::Text
            };
            print!(
                "{}",
                String::from_utf8_lossy(&mfcodec::report::render_table(&table, format))
            );
        }
        Command::Ablate(a) => {
            let table = cmd_ablate(&a)?;
            print!(
                "{}",
                String::from_utf8_lossy(&mfcodec::report::render_table(
                    &table,
                    mfcodec::report::TableFormat::Text
                ))
            );
        }
        Command::Synth(a) => {
            let paths = cmd_synth(&a)?;
            println!("wrote {} images to {}", paths.len(), a.out.display());
        }
    }
    Ok(())
}
