//! Implementations of the individual subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;

use mfcodec::checkpoint::Checkpoint;
use mfcodec::coder::{decode_image, encode_image, Bitstream};
use mfcodec::network::{CodecModel, FlopReport, SPATIAL_MULTIPLE};
use mfcodec::report::{fmt_value, render_table, Table, TableFormat};
use mfcodec::train::{
    image_paths, msssim, msssim_db, psnr, synthetic_image, Dataset, StepRecord, TrainConfig, Trainer, LOG_FILE,
};

use crate::image_file::{quantize8, write, ImageFile};
use crate::manifest::{sidecar, RunManifest};
use crate::{arch, usage, DecodeArgs, EncodeArgs, EvalArgs, FlopsArgs, SynthArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_COLUMNS: [&str; 6] = ["image", "bytes", "bpp", "psnr", "msssim", "msssim_db"];

/// Bits per original pixel of a file of `bytes` bytes.
pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn header_lambda(ckpt: &Checkpoint) -> f32 {
    ckpt.training.as_ref().map_or(0.0, |t| t.cfg.lambda as f32)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<StepRecord>> {
    if a.resume.is_none() {
        if a.alpha == 0.0 {
            return Err(usage(
                "--alpha 0 puts every channel in the high-frequency band, which leaves a single-band model \
                 with no low-frequency latents to code; choose alpha strictly between 0 and 1",
            ));
        }
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(usage(format!(
                "--alpha must lie strictly between 0 and 1, got {}",
                a.alpha
            )));
        }
        if a.crop == 0 || !a.crop.is_multiple_of(SPATIAL_MULTIPLE) {
            return Err(usage(format!(
                "--crop must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                a.crop
            )));
        }
    }
    let (data, warnings) =
        Dataset::from_dir(&a.data).with_context(|| format!("reading training images from {}", a.data.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let mut manifest = RunManifest::begin("train", a, Some(a.seed))?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?)?,
        None => {
            let cfg = TrainConfig {
                lambda: a.lambda,
                distortion: a.distortion.into(),
                epochs: a.epochs,
                batch: a.batch,
                lr: a.lr,
                crop: a.crop,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
                steps: a.steps,
                ..TrainConfig::default()
            };
            let model = CodecModel::new(arch(&a.channels, a.alpha, a.variant.into())?, a.seed)?;
            Trainer::new(model, cfg)?
        }
    };
    let crop = trainer.cfg.crop;
    let usable = data.usable(crop);
    if usable.is_empty() {
        return Err(mfcodec::Error::Data(format!(
            "no usable images in {}: need at least one readable image of {crop}x{crop} or larger",
            a.data.display()
        ))
        .into());
    }
    let total = trainer.cfg.total_steps(usable.len());
    let records = trainer.run(&usable, total, total, Some(&a.out))?;
    let log = a.out.join(LOG_FILE);
    finalize_log(&log)?;

    let mut artifacts = vec![log];
    let mut checkpoints: Vec<PathBuf> = fs::read_dir(&a.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "octc"))
        .collect();
    checkpoints.sort();
    artifacts.extend(checkpoints);
    for p in &artifacts {
        manifest.add(p)?;
    }
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(records)
}

/// Replaces any previous summary row of a training log with the mean of
/// every step row.
pub fn finalize_log(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty() && !l.starts_with("mean,")).collect();
    let width = header.split(',').count();
    let mut sums = vec![0.0f64; width];
    for row in &rows {
        for (j, cell) in row.split(',').enumerate().skip(1) {
            sums[j] += cell
                .parse::<f64>()
                .with_context(|| format!("bad value `{cell}` in {}", path.display()))?;
        }
    }
    let mut out = header;
    out.push('\n');
    for row in &rows {
        out.push_str(row);
        out.push('\n');
    }
    let n = rows.len().max(1) as f64;
    let means: Vec<String> = sums[1..].iter().map(|s| fmt_value(s / n)).collect();
    out.push_str(&format!("mean,{}\n", means.join(",")));
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeReport {
    pub width: usize,
    pub height: usize,
    pub bytes: usize,
    pub bpp: f64,
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<EncodeReport> {
    let mut manifest = RunManifest::begin("encode", a, None)?;
    let ckpt = load_checkpoint(&a.model)?;
    let img = ImageFile::read(&a.input)?;
    let enc = encode_image(&ckpt.model, &img.pixels, header_lambda(&ckpt))?;
    let bytes = enc.bitstream.to_bytes();
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    manifest.add(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    Ok(EncodeReport {
        width: img.width,
        height: img.height,
        bytes: bytes.len(),
        bpp: bpp(bytes.len(), img.width, img.height),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeReport {
    pub width: usize,
    pub height: usize,
    pub bpp: f64,
    pub psnr: Option<f64>,
    pub msssim: Option<f64>,
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<DecodeReport> {
    let mut manifest = RunManifest::begin("decode", a, None)?;
    let ckpt = load_checkpoint(&a.model)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let bs = Bitstream::from_bytes(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
    let x = decode_image(&bs, &ckpt.model)?;
    write(&a.out, &x)?;
    manifest.add(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    let (width, height) = (bs.header.orig_width as usize, bs.header.orig_height as usize);
    let mut report = DecodeReport {
        width,
        height,
        bpp: bpp(bytes.len(), width, height),
        psnr: None,
        msssim: None,
    };
    if let Some(r) = &a.reference {
        let reference = ImageFile::read(r)?;
        if (reference.width, reference.height) != (width, height) {
            return Err(mfcodec::Error::Data(format!(
                "reference is {}x{}, decoded image is {width}x{height}",
                reference.width, reference.height
            ))
            .into());
        }
        let rec = quantize8(&x)?;
        report.psnr = Some(psnr(&rec, &reference.pixels)?);
        report.msssim = msssim(&rec, &reference.pixels).ok();
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub msssim_db: f64,
}

/// Codes one image and measures the 8-bit reconstruction the decoder would
/// write.
pub fn evaluate_image(ckpt: &Checkpoint, img: &ImageFile) -> Result<EvalRow> {
    let enc = encode_image(&ckpt.model, &img.pixels, header_lambda(ckpt))?;
    let bytes = enc.bitstream.to_bytes().len();
    let rec = quantize8(&enc.reconstruction)?;
    let ms = msssim(&rec, &img.pixels).unwrap_or(f64::NAN);
    let name = img
        .path
        .file_name()
        .map(|n| n.to_string_lossy().replace(',', "_"))
        .unwrap_or_default();
    Ok(EvalRow {
        image: name,
        bytes,
        bpp: bpp(bytes, img.width, img.height),
        psnr: psnr(&rec, &img.pixels)?,
        msssim: ms,
        msssim_db: msssim_db(ms),
    })
}

/// Per-image rows followed by a `mean` row.
pub fn eval_table(rows: &[EvalRow]) -> Table {
    let mut t = Table::new(&EVAL_COLUMNS);
    for r in rows {
        t.push(vec![
            r.image.clone(),
            r.bytes.to_string(),
            fmt_value(r.bpp),
            fmt_value(r.psnr),
            fmt_value(r.msssim),
            fmt_value(r.msssim_db),
        ])
        .expect("row width matches");
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EvalRow) -> f64| fmt_value(rows.iter().map(f).sum::<f64>() / n);
    t.push(vec![
        "mean".into(),
        mean(|r| r.bytes as f64),
        mean(|r| r.bpp),
        mean(|r| r.psnr),
        mean(|r| r.msssim),
        mean(|r| r.msssim_db),
    ])
    .expect("row width matches");
    t
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<EvalRow>> {
    let mut manifest = RunManifest::begin("eval", a, None)?;
    let ckpt = load_checkpoint(&a.model)?;
    let mut images = Vec::new();
    for p in image_paths(&a.dir).with_context(|| format!("listing {}", a.dir.display()))? {
        match ImageFile::read(&p) {
            Ok(img) => images.push(img),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(mfcodec::Error::Data(format!("no readable images in {}", a.dir.display())).into());
    }
    let rows = images
        .par_iter()
        .map(|img| evaluate_image(&ckpt, img))
        .collect::<Result<Vec<_>>>()?;
    fs::write(&a.csv, render_table(&eval_table(&rows), TableFormat::Csv))
        .with_context(|| format!("writing {}", a.csv.display()))?;
    manifest.add(&a.csv)?;
    manifest.write(&sidecar(&a.csv))?;
    Ok(rows)
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<FlopReport> {
    for (name, v) in [("width", a.width), ("height", a.height)] {
        if v == 0 || v % SPATIAL_MULTIPLE != 0 {
            return Err(usage(format!(
                "--{name} must be a positive multiple of {SPATIAL_MULTIPLE}, got {v}"
            )));
        }
    }
    let model = CodecModel::<f32>::new(arch(&a.channels, a.alpha, a.variant())?, 0)?;
    Ok(model.count_flops(1, a.height, a.width))
}

/// GFLOPs per top-level module, then the total.
pub fn flops_table(report: &FlopReport) -> Table {
    let mut t = Table::new(&["module", "gflops"]);
    for (module, flops) in report.per_module() {
        t.push(vec![module, fmt_value(flops as f64 / 1e9)])
            .expect("row width matches");
    }
    t.push(vec!["total".into(), fmt_value(report.gflops())])
        .expect("row width matches");
    t
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    let ext = a.format.to_ascii_lowercase();
    if ext != "png" && ext != "ppm" {
        return Err(usage(format!("--format must be png or ppm, got `{}`", a.format)));
    }
    if a.width == 0 || a.height == 0 {
        return Err(usage("image dims must be positive"));
    }
    fs::create_dir_all(&a.out)?;
    let mut paths = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let img = synthetic_image(mfcodec::train::data::mix_seed(a.seed, 4, i as u64), a.height, a.width);
        let p = a.out.join(format!("synth_{i:03}.{ext}"));
        write(&p, &img)?;
        paths.push(p);
    }
    Ok(paths)
}
