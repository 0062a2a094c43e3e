//! Toy-scale ablation sweep over octave ratio and unit variants.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use mfcodec::coder::{encode_image, model_digest};
use mfcodec::network::{CodecModel, Variant, SPATIAL_MULTIPLE};
use mfcodec::report::{fmt_value, render_table, Table, TableFormat};
use mfcodec::train::data::mix_seed;
use mfcodec::train::{
    msssim, msssim_db, psnr, synthetic_set, train_loop, Dataset, TrainConfig, FINAL_CHECKPOINT, LOG_FILE,
};
use mfcodec::Tensor;

use crate::commands::MANIFEST_FILE;
use crate::image_file::quantize8;
use crate::manifest::{hex, RunManifest};
use crate::{arch, usage};

pub const DEFAULT_GRID: &str = "alpha=0.25,alpha=0.5,alpha=0.75,actout,orgoct";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_COLUMNS: [&str; 9] = [
    "variant",
    "alpha",
    "bpp",
    "bpp_hf",
    "bpp_lf",
    "psnr",
    "msssim_db",
    "gflops",
    "digest",
];

#[derive(Clone, Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Comma-separated entries: `alpha=F` (generalized units at ratio F) or
    /// `goct`, `actout`, `coreoct`, `orgoct`, optionally `@F` for the ratio
    /// (default 0.5). `default` expands to the standard five-entry grid.
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "16")]
    pub channels: String,
    #[arg(long, default_value_t = 1000.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 128)]
    pub crop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training images; synthetic ones when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub train_images: usize,
    #[arg(long, default_value_t = 256)]
    pub train_size: usize,
    /// Evaluation images; held-out synthetic ones when omitted.
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub eval_images: usize,
    #[arg(long, default_value_t = 128)]
    pub eval_size: usize,
    /// Input size for the FLOPs column.
    #[arg(long, default_value_t = 768)]
    pub flops_width: usize,
    #[arg(long, default_value_t = 512)]
    pub flops_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub variant: Variant,
    pub alpha: f64,
}

impl GridEntry {
    pub fn label(&self) -> String {
        format!("{}_a{}", self.variant.name(), self.alpha)
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<GridEntry>> {
    let mut out: Vec<GridEntry> = Vec::new();
    for raw in spec.split(',').map(str::trim) {
        if raw.is_empty() {
            return Err(usage(format!("empty entry in grid `{spec}`")));
        }
        if raw == "default" {
            for e in parse_grid(DEFAULT_GRID)? {
                push_unique(&mut out, e)?;
            }
            continue;
        }
        let (name, alpha) = match raw.split_once('@') {
            Some((n, a)) => (n, Some(a)),
            None => match raw.strip_prefix("alpha=") {
                Some(a) => ("goct", Some(a)),
                None => (raw, None),
            },
        };
        let variant = match name.to_ascii_lowercase().as_str() {
            "goct" => Variant::GoOct,
            "actout" => Variant::ActOut,
            "coreoct" => Variant::CoreOct,
            "orgoct" => Variant::OrgOct,
            _ => return Err(usage(format!("unknown grid entry `{raw}`"))),
        };
        let alpha = match alpha {
            Some(a) => a
                .parse::<f64>()
                .map_err(|_| usage(format!("bad ratio in grid entry `{raw}`")))?,
            None => 0.5,
        };
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(usage(format!(
                "grid entry `{raw}`: ratio must lie strictly between 0 and 1"
            )));
        }
        push_unique(&mut out, GridEntry { variant, alpha })?;
    }
    Ok(out)
}

fn push_unique(out: &mut Vec<GridEntry>, e: GridEntry) -> Result<()> {
    if out.contains(&e) {
        return Err(usage(format!("grid lists {} twice", e.label())));
    }
    out.push(e);
    Ok(())
}

fn load_dir(dir: &PathBuf) -> Result<Vec<Tensor<f32>>> {
    let (data, warnings) = Dataset::from_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(data.images().to_vec())
}

/// Trains every grid entry from the same seed and data, codes the evaluation
/// images, and writes `ablation.csv` (one row per entry plus a mean row).
pub fn cmd_ablate(a: &AblateArgs) -> Result<Table> {
    let grid = parse_grid(&a.grid)?;
    if a.steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    for (name, v) in [
        ("crop", a.crop),
        ("eval-size", a.eval_size),
        ("flops-width", a.flops_width),
        ("flops-height", a.flops_height),
    ] {
        if v == 0 || v % SPATIAL_MULTIPLE != 0 {
            return Err(usage(format!(
                "--{name} must be a positive multiple of {SPATIAL_MULTIPLE}, got {v}"
            )));
        }
    }
    let mut manifest = RunManifest::begin("ablate", a, Some(a.seed))?;
    let train = match &a.data {
        Some(d) => load_dir(d)?,
        None => synthetic_set(a.seed, a.train_images, a.train_size, a.train_size),
    };
    let eval = match &a.eval_dir {
        Some(d) => load_dir(d)?,
        None => synthetic_set(mix_seed(a.seed, 6, 0), a.eval_images, a.eval_size, a.eval_size),
    };
    if eval.is_empty() {
        return Err(mfcodec::Error::Data("no evaluation images".into()).into());
    }
    let train = Dataset::new(train)?;
    fs::create_dir_all(&a.out)?;

    let mut table = Table::new(&ABLATION_COLUMNS);
    let mut sums = [0.0f64; 6];
    for entry in &grid {
        let label = entry.label();
        eprintln!("ablate: training {label} for {} steps", a.steps);
        let cfg = TrainConfig {
            lambda: a.lambda,
            lr: a.lr,
            batch: a.batch,
            crop: a.crop,
            seed: a.seed,
            steps: Some(a.steps),
            ..TrainConfig::default()
        };
        let model = CodecModel::new(arch(&a.channels, entry.alpha, entry.variant)?, a.seed)?;
        let dir = a.out.join(&label);
        let (model, _) = train_loop(&train, &cfg, model, Some(&dir))?;
        manifest.add(&dir.join(LOG_FILE))?;
        manifest.add(&dir.join(FINAL_CHECKPOINT))?;

        let (mut hf_bits, mut lf_bits, mut pixels) = (0u64, 0u64, 0u64);
        let (mut psnr_sum, mut db_sum) = (0.0, 0.0);
        for img in &eval {
            let enc = encode_image(&model, img, a.lambda as f32)?;
            let (hf, lf) = enc.bitstream.band_bits();
            hf_bits += hf;
            lf_bits += lf;
            pixels += (img.shape()[2] * img.shape()[3]) as u64;
            let rec = quantize8(&enc.reconstruction)?;
            psnr_sum += psnr(&rec, img)?;
            db_sum += msssim_db(msssim(&rec, img)?);
        }
        let n = eval.len() as f64;
        let p = pixels as f64;
        let values = [
            (hf_bits + lf_bits) as f64 / p,
            hf_bits as f64 / p,
            lf_bits as f64 / p,
            psnr_sum / n,
            db_sum / n,
            model.count_flops(1, a.flops_height, a.flops_width).gflops(),
        ];
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        let mut row = vec![entry.variant.name().to_string(), fmt_value(entry.alpha)];
        row.extend(values.iter().map(|&v| fmt_value(v)));
        row.push(hex(&model_digest(&model)[..8]));
        table.push(row)?;
    }
    let k = grid.len() as f64;
    let mut mean = vec!["mean".to_string(), String::new()];
    mean.extend(sums.iter().map(|s| fmt_value(s / k)));
    mean.push(String::new());
    table.push(mean)?;

    let csv = a.out.join(ABLATION_FILE);
    fs::write(&csv, render_table(&table, TableFormat::Csv)).with_context(|| format!("writing {}", csv.display()))?;
    manifest.add(&csv)?;
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(table)
}
