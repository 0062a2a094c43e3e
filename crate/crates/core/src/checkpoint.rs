//! Model checkpoint files.
//!
//! Layout (little-endian): magic `OCTC`, `u32` format version, the
//! architecture, `u32` parameter count, then per parameter its name
//! (`u32` length + UTF-8), rank (`u32`), extents (`u32` each) and raw `f32`
//! values. A trailing flag byte says whether optimizer state follows; if so:
//! completed steps, the training configuration, Adam step and betas, and the
//! two moment tensors of every parameter in the same order.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::network::{ArchConfig, CodecModel, ContextInput, HyperInput, Variant};
use crate::tensor::Tensor;
use crate::train::{AdamState, Distortion, TrainConfig};

pub const MAGIC: &[u8; 4] = b"OCTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct TrainingState {
    pub cfg: TrainConfig,
    /// Steps completed.
    pub step: usize,
    pub adam: AdamState<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CodecModel<f32>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn from_model(model: CodecModel<f32>) -> Self {
        Self { model, training: None }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("octc.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        write_config(&mut w, &self.model.config);
        let mut params = Vec::new();
        self.model
            .visit("", &mut |name, p| params.push((name.to_string(), p.value.clone())));
        w.u32(params.len() as u32);
        for (name, t) in &params {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            write_tensor(&mut w, t);
        }
        match &self.training {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.step as u64);
                write_train_config(&mut w, &s.cfg);
                w.u64(s.adam.step);
                w.f64(s.adam.beta1);
                w.f64(s.adam.beta2);
                w.f64(s.adam.eps);
                for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
                    write_values(&mut w, m);
                    write_values(&mut w, v);
                }
            }
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let config = read_config(&mut r)?;
        let count = r.u32()? as usize;
        let mut blocks: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
            let t = read_tensor(&mut r)?;
            if blocks.insert(name.clone(), t).is_some() {
                return Err(Error::Corrupt(format!("duplicate parameter `{name}`")));
            }
        }
        let mut model = CodecModel::new(config, 0)?;
        let mut problem: Option<String> = None;
        let mut shapes = Vec::new();
        model.visit_mut("", &mut |name, p| {
            match blocks.remove(name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t,
                Some(t) => {
                    problem.get_or_insert(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    ));
                }
                None => {
                    problem.get_or_insert(format!("missing parameter `{name}`"));
                }
            }
            shapes.push(p.value.shape().to_vec());
        });
        if let Some(p) = problem {
            return Err(Error::Corrupt(p));
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Corrupt(format!("unexpected parameter `{extra}`")));
        }
        let training = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()? as usize;
                let cfg = read_train_config(&mut r)?;
                let mut adam = AdamState::new(&model);
                adam.step = r.u64()?;
                adam.beta1 = r.f64()?;
                adam.beta2 = r.f64()?;
                adam.eps = r.f64()?;
                for (i, shape) in shapes.iter().enumerate() {
                    adam.m[i] = read_values(&mut r, shape)?;
                    adam.v[i] = read_values(&mut r, shape)?;
                }
                Some(TrainingState { cfg, step, adam })
            }
            f => return Err(Error::Corrupt(format!("bad training flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model, training })
    }
}

fn write_config(w: &mut Writer, c: &ArchConfig) {
    w.u32(c.m as u32);
    w.u32(c.n as u32);
    w.f64(c.alpha);
    for k in [
        c.k_core,
        c.k_hyper_first,
        c.k_hyper,
        c.k_context,
        c.k_inter.unwrap_or(0),
    ] {
        w.u32(k as u32);
    }
    w.f64(c.leaky_slope);
    w.u8(c.variant.code());
    w.u8(match c.hyper_input {
        HyperInput::Quantized => 0,
        HyperInput::PreQuantization => 1,
    });
    w.u8(match c.context_input {
        ContextInput::Rounded => 0,
        ContextInput::Noisy => 1,
    });
}

fn read_config(r: &mut Reader) -> Result<ArchConfig> {
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let alpha = r.f64()?;
    let mut k = [0usize; 5];
    for slot in &mut k {
        *slot = r.u32()? as usize;
    }
    let leaky_slope = r.f64()?;
    let variant = Variant::from_code(r.take(1)?[0])?;
    let hyper_input = match r.take(1)?[0] {
        0 => HyperInput::Quantized,
        1 => HyperInput::PreQuantization,
        v => return Err(Error::Corrupt(format!("unknown hyper input code {v}"))),
    };
    let context_input = match r.take(1)?[0] {
        0 => ContextInput::Rounded,
        1 => ContextInput::Noisy,
        v => return Err(Error::Corrupt(format!("unknown context input code {v}"))),
    };
    let cfg = ArchConfig {
        m,
        n,
        alpha,
        k_core: k[0],
        k_hyper_first: k[1],
        k_hyper: k[2],
        k_context: k[3],
        k_inter: (k[4] != 0).then_some(k[4]),
        leaky_slope,
        variant,
        hyper_input,
        context_input,
    };
    cfg.validate()
        .map_err(|e| Error::Corrupt(format!("stored architecture is invalid: {e}")))?;
    Ok(cfg)
}

fn write_train_config(w: &mut Writer, c: &TrainConfig) {
    w.f64(c.lambda);
    w.u8(c.distortion.code());
    w.u64(c.epochs as u64);
    w.u64(c.batch as u64);
    w.f64(c.lr);
    w.u64(c.crop as u64);
    w.u64(c.seed);
    w.u64(c.checkpoint_every as u64);
    match c.steps {
        Some(s) => {
            w.u8(1);
            w.u64(s as u64);
        }
        None => w.u8(0),
    }
    w.f64(c.clip);
}

fn read_train_config(r: &mut Reader) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lambda: r.f64()?,
        distortion: Distortion::from_code(r.take(1)?[0])?,
        epochs: r.u64()? as usize,
        batch: r.u64()? as usize,
        lr: r.f64()?,
        crop: r.u64()? as usize,
        seed: r.u64()?,
        checkpoint_every: r.u64()? as usize,
        steps: match r.take(1)?[0] {
            0 => None,
            _ => Some(r.u64()? as usize),
        },
        clip: r.f64()?,
    })
}

fn write_tensor(w: &mut Writer, t: &Tensor<f32>) {
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    write_values(w, t);
}

fn write_values(w: &mut Writer, t: &Tensor<f32>) {
    for v in t.data() {
        w.bytes(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor<f32>> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Corrupt(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    read_values(r, &shape)
}

fn read_values(r: &mut Reader, shape: &[usize]) -> Result<Tensor<f32>> {
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corrupt(format!("tensor shape {shape:?} overflows")))?;
    let raw = r.take(n)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint needs {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
