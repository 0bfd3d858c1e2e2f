//! Window-level mixed-precision KV-cache quantization for transformer
//! decoding.
//!
//! The library scores each window of visual tokens against the text prompt,
//! assigns it FP16, INT4, or INT2 from per-layer sensitivity-driven
//! thresholds, reorders the KV cache into precision-contiguous segments,
//! and runs a blocked mixed-precision attention step over the segmented
//! cache. A deterministic synthetic pipeline verifies the whole flow
//! against a full-precision oracle at desk scale.

pub mod attention;
pub mod cli;
pub mod error;
pub mod kvstore;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod search;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use quant::BitWidth;
