//! Training images and deterministic batch sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Derives an independent stream seed from a run seed and counters.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A set of `[1, 3, h, w]` images.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        for img in &images {
            let [n, c, _, _] = img.dims4()?;
            if n != 1 || c != 3 {
                return Err(Error::InvalidShape {
                    shape: img.shape().to_vec(),
                    reason: "dataset images must be single RGB images".into(),
                });
            }
        }
        Ok(Self { images })
    }

    /// Loads every PNG/PPM file in `dir` in name order. Unreadable files are
    /// returned as warnings instead of failing the whole load.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let paths = image_paths(dir)?;
        let mut images = Vec::new();
        let mut warnings = Vec::new();
        for p in paths {
            match imageio::load(&p) {
                Ok(t) => images.push(t),
                Err(e) => warnings.push(format!("skipping {}: {e}", p.display())),
            }
        }
        Ok((Self { images }, warnings))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    /// Keeps only images with both sides at least `crop`.
    pub fn usable(&self, crop: usize) -> Self {
        let images = self
            .images
            .iter()
            .filter(|t| t.shape()[2] >= crop && t.shape()[3] >= crop)
            .cloned()
            .collect();
        Self { images }
    }

    /// The `batch` crops used at `step`. Images are visited in a fresh
    /// permutation every pass over the set; crop offsets depend only on
    /// `(seed, sample index)`.
    pub fn batch(&self, seed: u64, step: usize, batch: usize, crop: usize) -> Result<Tensor<f32>> {
        if self.images.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let n = self.images.len();
        let mut parts = Vec::with_capacity(batch);
        for b in 0..batch {
            let k = (step * batch + b) as u64;
            let pass = k / n as u64;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, pass)));
            let img = &self.images[order[(k % n as u64) as usize]];
            let (h, w) = (img.shape()[2], img.shape()[3]);
            if h < crop || w < crop {
                return Err(Error::Data(format!("image {h}x{w} smaller than crop {crop}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2, k));
            let top = rng.random_range(0..=h - crop);
            let left = rng.random_range(0..=w - crop);
            parts.push(window(img, top, left, crop));
        }
        Tensor::concat_batch(&parts)
    }
}

/// PNG and PPM files directly inside `dir`, sorted by path.
pub fn image_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        .unwrap_or(false)
}

fn window(img: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let d = img.data();
    Tensor::from_fn([1, 3, size, size], |i| {
        let c = i / (size * size);
        let p = i % (size * size);
        d[c * h * w + (top + p / size) * w + left + p % size]
    })
}

/// A smooth toy image: a colour gradient, a few flat shapes with soft edges,
/// a low-frequency texture and mild noise.
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3, 0));
    let base: [[f64; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    struct Shape {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        disc: bool,
        colour: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.random_range(2..6))
        .map(|_| Shape {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            ry: rng.random_range(0.08..0.3) * h as f64,
            rx: rng.random_range(0.08..0.3) * w as f64,
            disc: rng.random_bool(0.5),
            colour: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let (fy, fx) = (rng.random_range(0.02..0.15), rng.random_range(0.02..0.15));
    let amp = rng.random_range(0.02..0.1);
    let noise: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-0.02..0.02)).collect();

    let mut out = vec![0f32; 3 * h * w];
    for r in 0..h {
        for s in 0..w {
            let u = ((r as f64 / h as f64 - 0.5) * sa + (s as f64 / w as f64 - 0.5) * ca + 0.75) / 1.5;
            let mut px = [0f64; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = base[0][c] * (1.0 - u) + base[1][c] * u;
            }
            for sh in &shapes {
                let dy = (r as f64 - sh.cy) / sh.ry;
                let dx = (s as f64 - sh.cx) / sh.rx;
                let d = if sh.disc {
                    (dy * dy + dx * dx).sqrt()
                } else {
                    dy.abs().max(dx.abs())
                };
                let cover = ((1.0 - d) * 4.0).clamp(0.0, 1.0);
                for (p, &col) in px.iter_mut().zip(&sh.colour) {
                    *p = *p * (1.0 - cover) + col * cover;
                }
            }
            let tex = amp * (r as f64 * fy).sin() * (s as f64 * fx).cos();
            for (c, &p) in px.iter().enumerate() {
                let i = c * h * w + r * w + s;
                out[i] = (p + tex + noise[i]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new([1, 3, h, w], out).expect("consistent shape")
}

/// `n` toy images; image `i` depends only on `(seed, i)`.
pub fn synthetic_set(seed: u64, n: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|i| synthetic_image(mix_seed(seed, 4, i as u64), h, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_reproducible_and_in_range() {
        let ds = Dataset::new(synthetic_set(1, 3, 40, 50)).unwrap();
        let a = ds.batch(7, 5, 4, 32).unwrap();
        assert_eq!(a.shape(), &[4, 3, 32, 32]);
        assert_eq!(a, ds.batch(7, 5, 4, 32).unwrap());
        assert_ne!(a, ds.batch(7, 6, 4, 32).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_image_is_visited_once_per_pass() {
        let imgs: Vec<Tensor<f32>> = (0..5).map(|i| Tensor::full([1, 3, 8, 8], i as f32)).collect();
        let ds = Dataset::new(imgs).unwrap();
        let mut seen: Vec<f32> = (0..5).map(|s| ds.batch(3, s, 1, 8).unwrap().data()[0]).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn synthetic_images_differ_by_seed() {
        let a = synthetic_image(1, 32, 32);
        assert_eq!(a, synthetic_image(1, 32, 32));
        assert_ne!(a, synthetic_image(2, 32, 32));
    }
}
