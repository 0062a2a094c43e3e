//! 8-bit RGB images on disk.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mfcodec::imageio;
use mfcodec::Tensor;

#[derive(Clone, Debug)]
pub struct ImageFile {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// `[1, 3, h, w]`, each value an 8-bit level divided by 255.
    pub pixels: Tensor<f32>,
}

impl ImageFile {
    pub fn read(path: &Path) -> Result<Self> {
        let pixels = imageio::load(path).with_context(|| format!("reading image {}", path.display()))?;
        let [_, _, height, width] = pixels.dims4()?;
        Ok(Self {
            path: path.to_path_buf(),
            width,
            height,
            pixels,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rounds to the nearest 8-bit level, as writing and re-reading would.
pub fn quantize8(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(imageio::from_rgb8(&imageio::to_rgb8(x)?))
}

pub fn write(path: &Path, x: &Tensor<f32>) -> Result<()> {
    imageio::save(path, x).with_context(|| format!("writing image {}", path.display()))
}
