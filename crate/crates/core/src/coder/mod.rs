//! Turning model probabilities into bytes: CDF tables, the range coder, the
//! container format and the image-level pipeline.

pub mod cdf;
pub mod container;
pub mod pad;
pub mod pipeline;
pub mod range;

pub use cdf::{fixed_point, gaussian_pmf, CdfTable, DEFAULT_PRECISION, SYMBOL_HI, SYMBOL_LO};
pub use container::{coded_size, Bitstream, FLAG_ADAPTED, HEADER_LEN, MAGIC, VERSION};
pub use pad::{crop, pad_input};
pub use pipeline::{decode_image, encode_image, latent_checksum, DecodeTrace, EncodeOptions, EncodeTrace};
pub use range::{RangeDecoder, RangeEncoder};
