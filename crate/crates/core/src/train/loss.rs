//! Rate-distortion objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ForwardOutput;
use crate::real::Real;
use crate::tape::{Tape, Var};

use super::metrics::msssim_var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    /// Mean squared error on the `[0, 1]` scale.
    Mse,
    /// `1 - MS-SSIM`.
    MsSsim,
}

impl Distortion {
    pub fn code(self) -> u8 {
        match self {
            Distortion::Mse => 0,
            Distortion::MsSsim => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Distortion::Mse),
            1 => Ok(Distortion::MsSsim),
            _ => Err(Error::Corrupt(format!("unknown distortion code {c}"))),
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "msssim",
        })
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Distortion::Mse),
            "msssim" | "ms-ssim" => Ok(Distortion::MsSsim),
            _ => Err(Error::Config(format!(
                "unknown distortion `{s}` (expected mse or msssim)"
            ))),
        }
    }
}

/// The scalar loss and the two terms it is made of.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    /// Estimated bits per pixel of all four latent groups.
    pub bpp: Var,
    pub distortion: Var,
}

/// `rate / pixels + lambda * D`, where `pixels` counts every image in the
/// batch.
pub fn rd_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    out: &ForwardOutput,
    lambda: f64,
    distortion: Distortion,
) -> Result<LossTerms> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let [n, _, h, w] = tape.value(x).dims4()?;
    let bpp = tape.scale(out.rate, 1.0 / (n * h * w) as f64)?;
    let d = match distortion {
        Distortion::Mse => {
            let e = tape.sub(out.x_hat, x)?;
            let e = tape.square(e)?;
            tape.mean(e)?
        }
        Distortion::MsSsim => {
            let s = msssim_var(tape, out.x_hat, x)?;
            let neg = tape.scale(s, -1.0)?;
            tape.add_scalar(neg, 1.0)?
        }
    };
    let weighted = tape.scale(d, lambda)?;
    let loss = tape.add(bpp, weighted)?;
    if !tape.value(loss).item().f64().is_finite() {
        return Err(Error::NonFinite { op: "rd_loss" });
    }
    Ok(LossTerms {
        loss,
        bpp,
        distortion: d,
    })
}
