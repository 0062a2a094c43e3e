//! Container for a compressed image: a fixed header followed by four
//! length-prefixed range-coder payloads.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OCMF";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 4 * 4 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub orig_width: u32,
    pub orig_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    /// Leading bytes of the model digest the stream was made with.
    pub digest: [u8; 8],
    pub lambda: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub z_hf: Vec<u8>,
    pub z_lf: Vec<u8>,
    pub y_hf: Vec<u8>,
    pub y_lf: Vec<u8>,
}

impl Bitstream {
    pub fn payloads(&self) -> [&[u8]; 4] {
        [&self.z_hf, &self.z_lf, &self.y_hf, &self.y_lf]
    }

    pub fn payload_bytes(&self) -> usize {
        self.payloads().iter().map(|p| p.len()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + 4 * 4 + self.payload_bytes()
    }

    pub fn pixels(&self) -> f64 {
        self.header.orig_width as f64 * self.header.orig_height as f64
    }

    /// Bits per pixel of the whole file over the original image area.
    pub fn bpp(&self) -> f64 {
        8.0 * self.total_bytes() as f64 / self.pixels()
    }

    /// Bits of the whole file split by band. The header and the length
    /// prefixes are charged to the high-frequency band, so the two parts sum
    /// to the file size.
    pub fn band_bits(&self) -> (u64, u64) {
        let lf = 8 * (self.z_lf.len() + self.y_lf.len()) as u64;
        (8 * self.total_bytes() as u64 - lf, lf)
    }

    /// [`Self::band_bits`] per original pixel.
    pub fn band_bpp(&self) -> (f64, f64) {
        let (hf, lf) = self.band_bits();
        (hf as f64 / self.pixels(), lf as f64 / self.pixels())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [h.orig_width, h.orig_height, h.padded_width, h.padded_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.digest);
        out.extend_from_slice(&h.lambda.to_le_bytes());
        for p in self.payloads() {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let orig_width = r.u32()?;
        let orig_height = r.u32()?;
        let padded_width = r.u32()?;
        let padded_height = r.u32()?;
        let mut digest = [0u8; 8];
        digest.copy_from_slice(r.take(8)?);
        let lambda = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if orig_width == 0 || orig_height == 0 || orig_width > padded_width || orig_height > padded_height {
            return Err(Error::Corrupt(format!(
                "image {orig_width}x{orig_height} does not fit padded {padded_width}x{padded_height}"
            )));
        }
        let mut payload = || -> Result<Vec<u8>> {
            let n = r.u32()? as usize;
            Ok(r.take(n)?.to_vec())
        };
        let bs = Self {
            header: Header {
                orig_width,
                orig_height,
                padded_width,
                padded_height,
                digest,
                lambda,
            },
            z_hf: payload()?,
            z_lf: payload()?,
            y_hf: payload()?,
            y_lf: payload()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(bs)
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
            .ok_or_else(|| {
                Error::Truncated(format!("need {n} bytes at offset {} of {}", self.pos, self.bytes.len()))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                orig_width: 250,
                orig_height: 250,
                padded_width: 256,
                padded_height: 256,
                digest: [1, 2, 3, 4, 5, 6, 7, 8],
                lambda: 0.01,
            },
            z_hf: vec![1, 2, 3],
            z_lf: vec![],
            y_hf: vec![9; 100],
            y_lf: vec![7; 10],
        }
    }

    #[test]
    fn serialization_round_trips() {
        let bs = sample();
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), bs.total_bytes());
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
    }

    #[test]
    fn bpp_counts_the_whole_file() {
        let mut bs = sample();
        bs.header.orig_width = 256;
        bs.header.orig_height = 256;
        let payload = 4096 / 8 - HEADER_BYTES - 16;
        bs.z_hf = vec![0; payload];
        bs.z_lf.clear();
        bs.y_hf.clear();
        bs.y_lf.clear();
        assert_eq!(bs.total_bytes() * 8, 4096);
        assert_eq!(bs.bpp(), 0.0625);
    }

    #[test]
    fn band_split_covers_the_whole_file() {
        let bs = sample();
        let (hf, lf) = bs.band_bits();
        assert_eq!(lf, 80);
        assert_eq!(hf + lf, 8 * bs.total_bytes() as u64);
    }

    #[test]
    fn damaged_streams_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, HEADER_BYTES, bytes.len() - 1] {
            assert!(
                matches!(Bitstream::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Corrupt(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Bitstream::from_bytes(&long), Err(Error::Corrupt(_))));
    }
}
