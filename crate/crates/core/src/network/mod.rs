//! The codec network and its analytic cost model.

pub mod arch;
pub mod flops;
pub mod model;
pub mod units;

pub use arch::{ArchConfig, ContextInput, HyperInput, Variant, SPATIAL_MULTIPLE};
pub use flops::{Category, FlopReport};
pub use model::{Band, BandModel, CodecModel, ForwardOutput, Hyper, ParamEstimator};
