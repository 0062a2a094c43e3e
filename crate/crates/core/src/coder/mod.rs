//! Entropy coding: quantized CDF tables, the range coder, the bitstream
//! container and the image codec on top of them.

pub mod bitstream;
pub mod cdf;
pub mod codec;
pub mod range;

pub use bitstream::{Bitstream, Header};
pub use cdf::{build_cdf, CdfTable};
pub use codec::{decode_image, decode_image_with, encode_image, model_digest, BandCoder, Encoded, RateEstimate};
pub use range::{ideal_bits, rc_decode, rc_encode, Escaped, RangeDecoder, RangeEncoder};
