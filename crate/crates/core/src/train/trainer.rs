//! The training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::entropy::Quantizer;
use crate::error::{Error, Result};
use crate::imageio::clamp_unit;
use crate::network::CodecModel;
use crate::tape::Tape;

use super::adam::{adam_step, clip_global_norm, collect_grads, AdamState};
use super::data::{mix_seed, Dataset};
use super::loss::{rd_loss, Distortion};
use super::metrics::psnr;

pub const LOG_HEADER: &str = "step,loss,bpp_estimate,distortion,psnr,lr";
pub const LOG_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.octc";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub crop: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Overrides the step count implied by `epochs`.
    pub steps: Option<usize>,
    /// Global gradient-norm limit.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            distortion: Distortion::Mse,
            epochs: 200,
            batch: 8,
            lr: 5e-5,
            crop: 256,
            seed: 0,
            checkpoint_every: 0,
            steps: None,
            clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.crop == 0 {
            return Err(Error::Config("batch and crop must be positive".into()));
        }
        if self.clip.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    pub fn total_steps(&self, images: usize) -> usize {
        self.steps.unwrap_or(self.epochs * images.div_ceil(self.batch))
    }

    /// Constant for the first half of training, then linear decay towards
    /// zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let half = total / 2;
        if step < half {
            self.lr
        } else {
            let left = total.saturating_sub(step) as f64;
            self.lr * left / (total - half).max(1) as f64
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bpp_estimate: f64,
    pub distortion: f64,
    pub psnr: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.bpp_estimate, self.distortion, self.psnr, self.lr
        )
    }
}

pub struct Trainer {
    pub model: CodecModel<f32>,
    pub adam: AdamState<f32>,
    pub cfg: TrainConfig,
    /// Steps completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: CodecModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model);
        Ok(Self {
            model,
            adam,
            cfg,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .training
            .ok_or_else(|| Error::Config("checkpoint has no training state".into()))?;
        state.cfg.validate()?;
        Ok(Self {
            model: ckpt.model,
            adam: state.adam,
            cfg: state.cfg,
            step: state.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingState {
                cfg: self.cfg.clone(),
                step: self.step,
                adam: self.adam.clone(),
            }),
        }
    }

    /// One optimizer update. Crops and quantization noise depend only on the
    /// seed and the step index.
    pub fn train_step(&mut self, data: &Dataset, total: usize) -> Result<StepRecord> {
        let cfg = &self.cfg;
        let step = self.step;
        let x = data.batch(cfg.seed, step, cfg.batch, cfg.crop)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 5, step as u64));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.model.forward(&mut tape, xv, Quantizer::TrainNoise, &mut rng)?;
        let terms = rd_loss(&mut tape, xv, &out, cfg.lambda, cfg.distortion)?;
        let grads = tape.backward(terms.loss)?;
        let mut g = collect_grads(&self.model, &grads);
        clip_global_norm(&mut g, cfg.clip);
        let lr = cfg.lr_at(step, total);
        let record = StepRecord {
            step,
            loss: tape.value(terms.loss).item() as f64,
            bpp_estimate: tape.value(terms.bpp).item() as f64,
            distortion: tape.value(terms.distortion).item() as f64,
            psnr: psnr(&clamp_unit(tape.value(out.x_hat)), &x)?,
            lr,
        };
        adam_step(&mut self.model, &g, &mut self.adam, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Trains until `stop` steps are complete out of a schedule of `total`.
    /// With an output directory, every record is appended to the CSV log and
    /// checkpoints are written at the configured cadence and at the end.
    pub fn run(&mut self, data: &Dataset, total: usize, stop: usize, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOG_FILE);
                let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(stop.saturating_sub(self.step));
        while self.step < stop.min(total) {
            let r = self.train_step(data, total)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", r.csv_row())?;
            }
            records.push(r);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint()
                        .save(dir.join(format!("step_{:07}.octc", self.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

/// Trains `model` on the usable images of `dataset` for the whole schedule.
pub fn train_loop(
    dataset: &Dataset,
    cfg: &TrainConfig,
    model: CodecModel<f32>,
    out: Option<&Path>,
) -> Result<(CodecModel<f32>, Vec<StepRecord>)> {
    let data = dataset.usable(cfg.crop);
    if data.is_empty() {
        return Err(Error::Data(format!(
            "no usable images: need at least one image of {0}x{0} or larger",
            cfg.crop
        )));
    }
    let total = cfg.total_steps(data.len());
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let records = trainer.run(&data, total, total, out)?;
    Ok((trainer.model, records))
}
