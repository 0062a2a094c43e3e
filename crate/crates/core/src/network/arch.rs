//! Architecture description of a codec model.

use crate::error::{Error, Result};
use crate::layers::DEFAULT_LEAKY_SLOPE;
use crate::octave::split_channels;

/// Which octave units the model is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Generalized units with internal activations everywhere.
    GoOct,
    /// Generalized units with GDN/IGDN moved to the unit outputs/inputs.
    ActOut,
    /// Generalized units in the core transforms only; the hyper transforms
    /// are two independent single-band networks.
    CoreOct,
    /// Original octave units (pooling and nearest upsampling) everywhere.
    OrgOct,
}

impl Variant {
    pub fn code(self) -> u8 {
        match self {
            Variant::GoOct => 0,
            Variant::ActOut => 1,
            Variant::CoreOct => 2,
            Variant::OrgOct => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Variant::GoOct,
            1 => Variant::ActOut,
            2 => Variant::CoreOct,
            3 => Variant::OrgOct,
            _ => return Err(Error::Corrupt(format!("unknown variant code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::GoOct => "GoOct",
            Variant::ActOut => "ActOut",
            Variant::CoreOct => "CoreOct",
            Variant::OrgOct => "OrgOct",
        }
    }
}

/// What the hyper encoder reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperInput {
    /// The quantized (noisy during training) core latents.
    Quantized,
    /// The core latents before quantization.
    PreQuantization,
}

/// What the context models read during training. At test time they always
/// read the rounded latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextInput {
    Rounded,
    Noisy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Latent channels.
    pub m: usize,
    /// Internal channels.
    pub n: usize,
    /// Ratio of channels in the low-frequency band.
    pub alpha: f64,
    pub k_core: usize,
    /// Kernel of the first (stride 1) hyper encoder layer and of the last
    /// hyper decoder layer.
    pub k_hyper_first: usize,
    pub k_hyper: usize,
    pub k_context: usize,
    /// Kernel of the stride-2 inter-frequency paths; `None` uses the kernel
    /// size of the layer they belong to.
    pub k_inter: Option<usize>,
    pub leaky_slope: f64,
    pub variant: Variant,
    pub hyper_input: HyperInput,
    pub context_input: ContextInput,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            m: 192,
            n: 192,
            alpha: 0.5,
            k_core: 5,
            k_hyper_first: 3,
            k_hyper: 5,
            k_context: 5,
            k_inter: None,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            variant: Variant::GoOct,
            hyper_input: HyperInput::Quantized,
            context_input: ContextInput::Rounded,
        }
    }
}

/// Input spatial dims must be multiples of this so that every band of every
/// latent halves exactly.
pub const SPATIAL_MULTIPLE: usize = 128;

impl ArchConfig {
    pub fn with_channels(m: usize, n: usize, alpha: f64) -> Self {
        Self {
            m,
            n,
            alpha,
            ..Self::default()
        }
    }

    /// The `M = N = 256` setting for higher rates.
    pub fn high_rate(alpha: f64) -> Self {
        Self::with_channels(256, 256, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (name, k) in [
            ("k_core", self.k_core),
            ("k_hyper_first", self.k_hyper_first),
            ("k_hyper", self.k_hyper),
            ("k_context", self.k_context),
            ("k_inter", self.k_inter.unwrap_or(1)),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        for c in [self.m, self.n, 2 * self.m, self.hyper_mid()] {
            split_channels(c, self.alpha)?;
            let exact = self.alpha * c as f64;
            if (exact - exact.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "alpha {} does not split {c} channels into whole numbers",
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    pub fn inter_kernel(&self, layer_k: usize) -> usize {
        self.k_inter.unwrap_or(layer_k)
    }

    /// Channels of the middle hyper decoder layer (1.5 N).
    pub fn hyper_mid(&self) -> usize {
        (3 * self.n).div_ceil(2)
    }

    /// `(hf, lf)` channels of the latents.
    pub fn latent_split(&self) -> (usize, usize) {
        split_channels(self.m, self.alpha).expect("validated")
    }

    pub fn hyper_split(&self) -> (usize, usize) {
        split_channels(self.n, self.alpha).expect("validated")
    }

    pub fn has_lf(&self) -> bool {
        self.latent_split().1 > 0
    }

    pub fn describe(&self) -> String {
        format!(
            "{} M={} N={} alpha={} k_core={} k_hyper={}/{} k_ctx={} k_inter={}",
            self.variant.name(),
            self.m,
            self.n,
            self.alpha,
            self.k_core,
            self.k_hyper_first,
            self.k_hyper,
            self.k_context,
            self.k_inter.map_or("layer".to_string(), |k| k.to_string()),
        )
    }
}

/// Parameter-estimator widths for a band with `c` latent channels:
/// `4c -> 10c/3 -> 8c/3 -> 2c`.
pub fn estimator_widths(c: usize) -> [usize; 4] {
    let r = |num: usize| (num * c + 1) / 3;
    [4 * c, r(10), r(8), 2 * c]
}
