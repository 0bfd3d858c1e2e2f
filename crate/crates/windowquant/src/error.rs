//! Error type shared across the crate.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by matrix, quantization, search, cache, and pipeline code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{context}: data length {got} does not match {rows}x{cols}")]
    DataLength {
        context: &'static str,
        rows: usize,
        cols: usize,
        got: usize,
    },

    #[error("{context}: non-finite value at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero-norm vector passed to {0} (degenerate embedding)")]
    ZeroNorm(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("threshold parameter alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("threshold order violated: t_low {low} > t_high {high}")]
    ThresholdOrder { low: f64, high: f64 },

    #[error("unsupported bit width {0} (expected 2 or 4)")]
    UnsupportedBits(u32),

    #[error("code {code} out of range for {bits}-bit packing (max {max})")]
    CodeOutOfRange { code: u32, bits: u32, max: u32 },

    #[error("packed buffer length mismatch: expected {expected} bytes, got {got}")]
    BufferLength { expected: usize, got: usize },

    #[error("fused kernel requires a quantized segment, got fp16 (use the plain matmul path)")]
    FullPrecisionSegment,

    #[error("invalid window permutation: {0}")]
    InvalidPermutation(String),

    #[error("config/plan mismatch: {0}")]
    ConfigMismatch(String),

    #[error("average bit-width undefined: all token counts are zero")]
    NoTokens,

    #[error("decode step on an empty cache")]
    EmptyCache,

    #[error("token cap exceeded: run needs {needed} tokens, cap is {cap}")]
    TokenCapExceeded { needed: usize, cap: usize },
}
