//! Precision-segmented KV cache for one decoder layer.
//!
//! Visual-token windows are stable-partitioned into contiguous segments by
//! assigned bit-width (INT2, then INT4, then FP16), quantized group-wise per
//! (window, head, K-or-V), and followed by a full-precision live tail that
//! holds the truncated visual remainder, the text tokens, and every token
//! appended during decoding. Byte accounting is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{quantize_group, BitWidth, PackedGroup};
use crate::search::WindowPlan;

/// Bytes charged per quantized group for scale/zero-point metadata in
/// reports. Models a compact deployment encoding, not the in-memory structs.
pub const METADATA_BYTES_PER_GROUP: u64 = 4;

/// Accounting bytes per element for the FP16 label.
pub const FP16_BYTES_PER_ELEMENT: u64 = 2;

/// K or V payload of one cached window.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowData {
    /// One packed group per head, each `window_size x head_dim` row-major.
    Quantized(Vec<PackedGroup>),
    /// Full-precision slab, `window_size x (heads * head_dim)`.
    Full(Matrix),
}

/// One reordered window, K and V sides kept together so their widths and
/// positions always agree.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedWindow {
    pub window_id: usize,
    pub k: WindowData,
    pub v: WindowData,
}

impl CachedWindow {
    pub fn token_rows(&self, head_dim: usize) -> usize {
        match &self.k {
            WindowData::Quantized(groups) => groups[0].count / head_dim,
            WindowData::Full(m) => m.rows(),
        }
    }
}

/// A run of windows sharing one bit-width, contiguous in cache order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub width: BitWidth,
    pub windows: Vec<CachedWindow>,
}

impl Segment {
    pub fn empty(width: BitWidth) -> Self {
        Self {
            width,
            windows: Vec::new(),
        }
    }

    pub fn window_ids(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.window_id).collect()
    }

    pub fn token_count(&self, head_dim: usize) -> usize {
        self.windows.iter().map(|w| w.token_rows(head_dim)).sum()
    }
}

/// Append-only full-precision row store for the live tail.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBuffer {
    cols: usize,
    data: Vec<f64>,
}

impl RowBuffer {
    pub fn new(cols: usize) -> Self {
        Self {
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "RowBuffer::push_row",
                left_rows: 1,
                left_cols: row.len(),
                right_rows: 1,
                right_cols: self.cols,
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Segmented KV cache for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache {
    pub heads: usize,
    pub head_dim: usize,
    pub window_size: usize,
    /// Precision-contiguous when built reordered: INT2, INT4, FP16 in that
    /// fixed order. Unreordered builds keep one segment per window in the
    /// original interleaving.
    pub segments: Vec<Segment>,
    pub tail_k: RowBuffer,
    pub tail_v: RowBuffer,
    pub reordered: bool,
}

impl LayerKvCache {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Tokens held in segments plus the live tail.
    pub fn total_tokens(&self) -> usize {
        let seg: usize = self
            .segments
            .iter()
            .map(|s| s.token_count(self.head_dim))
            .sum();
        seg + self.tail_k.rows()
    }

    /// Segment token counts by width: (int2, int4, fp16-segment).
    pub fn segment_token_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for s in &self.segments {
            let t = s.token_count(self.head_dim);
            match s.width {
                BitWidth::Int2 => counts.0 += t,
                BitWidth::Int4 => counts.1 += t,
                BitWidth::Fp16 => counts.2 += t,
            }
        }
        counts
    }

    /// Append one decode-step K/V row pair to the live tail. Segments are
    /// untouched.
    pub fn append_decode_token(&mut self, k_row: &[f64], v_row: &[f64]) -> Result<()> {
        self.tail_k.push_row(k_row)?;
        self.tail_v.push_row(v_row)
    }

    /// Window ids across all segments, in cache order.
    pub fn all_window_ids(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.windows.iter().map(|w| w.window_id))
            .collect()
    }

    /// Dequantize every segment and re-interleave windows by original id,
    /// returning the reconstructed K and V matrices for the windowed span.
    pub fn reconstruct_windows(&self) -> Result<(Matrix, Matrix)> {
        let embed = self.embed_dim();
        let mut ordered: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
        for seg in &self.segments {
            for win in &seg.windows {
                let rows = win.token_rows(self.head_dim);
                let k = reconstruct_window_data(&win.k, self.heads, self.head_dim, rows)?;
                let v = reconstruct_window_data(&win.v, self.heads, self.head_dim, rows)?;
                ordered.push((win.window_id, k, v));
            }
        }
        ordered.sort_by_key(|(id, _, _)| *id);
        let mut k_data = Vec::new();
        let mut v_data = Vec::new();
        for (_, k, v) in ordered {
            k_data.extend(k);
            v_data.extend(v);
        }
        let rows = k_data.len() / embed;
        Ok((
            Matrix::from_vec(rows, embed, k_data)?,
            Matrix::from_vec(rows, embed, v_data)?,
        ))
    }
}

fn reconstruct_window_data(
    data: &WindowData,
    heads: usize,
    head_dim: usize,
    rows: usize,
) -> Result<Vec<f64>> {
    match data {
        WindowData::Full(m) => Ok(m.data().to_vec()),
        WindowData::Quantized(groups) => {
            let embed = heads * head_dim;
            let mut out = vec![0.0; rows * embed];
            for (h, group) in groups.iter().enumerate() {
                let values = crate::quant::dequantize_group(group)?;
                for t in 0..rows {
                    for d in 0..head_dim {
                        out[t * embed + h * head_dim + d] = values[t * head_dim + d];
                    }
                }
            }
            Ok(out)
        }
    }
}

fn quantize_window(slab: &Matrix, heads: usize, head_dim: usize, bits: u32) -> Result<Vec<PackedGroup>> {
    let mut groups = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut values = Vec::with_capacity(slab.rows() * head_dim);
        for t in 0..slab.rows() {
            values.extend_from_slice(&slab.row(t)[h * head_dim..(h + 1) * head_dim]);
        }
        groups.push(quantize_group(&values, bits)?);
    }
    Ok(groups)
}

/// Build the segmented cache for one layer from full-precision K and V.
///
/// `k` and `v` are `(tokens x heads*head_dim)` in original order: windowed
/// visual tokens first, then the visual tail, then any text tokens. Windows
/// are stable-partitioned by the layer's width assignment and quantized
/// where required; everything past the windowed span lands in the live tail.
pub fn build_cache(
    k: &Matrix,
    v: &Matrix,
    layer_widths: &[BitWidth],
    plan: WindowPlan,
    heads: usize,
    head_dim: usize,
) -> Result<LayerKvCache> {
    build_cache_with_layout(k, v, layer_widths, plan, heads, head_dim, true)
}

/// [`build_cache`] with the precision-contiguous reordering selectable, for
/// the reorder ablation. Without reordering each window becomes its own
/// segment in original order (widths interleaved in memory).
pub fn build_cache_with_layout(
    k: &Matrix,
    v: &Matrix,
    layer_widths: &[BitWidth],
    plan: WindowPlan,
    heads: usize,
    head_dim: usize,
    reorder: bool,
) -> Result<LayerKvCache> {
    let embed = heads * head_dim;
    if k.rows() != v.rows() || k.cols() != v.cols() {
        return Err(Error::DimensionMismatch {
            op: "build_cache",
            left_rows: k.rows(),
            left_cols: k.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    if k.cols() != embed {
        return Err(Error::ConfigMismatch(format!(
            "build_cache: K/V width {} does not match heads*head_dim {}",
            k.cols(),
            embed
        )));
    }
    if layer_widths.len() != plan.num_windows {
        return Err(Error::ConfigMismatch(format!(
            "build_cache: {} window widths for a plan with {} windows",
            layer_widths.len(),
            plan.num_windows
        )));
    }
    if k.rows() < plan.total_tokens() {
        return Err(Error::ConfigMismatch(format!(
            "build_cache: {} token rows but the plan spans {}",
            k.rows(),
            plan.total_tokens()
        )));
    }

    let build_window = |window_id: usize, width: BitWidth| -> Result<CachedWindow> {
        let start = window_id * plan.window_size;
        let k_slab = k.slice_rows(start, start + plan.window_size);
        let v_slab = v.slice_rows(start, start + plan.window_size);
        let (k_data, v_data) = match width {
            BitWidth::Fp16 => (WindowData::Full(k_slab), WindowData::Full(v_slab)),
            BitWidth::Int4 | BitWidth::Int2 => (
                WindowData::Quantized(quantize_window(&k_slab, heads, head_dim, width.bits())?),
                WindowData::Quantized(quantize_window(&v_slab, heads, head_dim, width.bits())?),
            ),
        };
        Ok(CachedWindow {
            window_id,
            k: k_data,
            v: v_data,
        })
    };

    let segments = if reorder {
        // Stable partition into the fixed INT2, INT4, FP16 order.
        let mut int2 = Segment::empty(BitWidth::Int2);
        let mut int4 = Segment::empty(BitWidth::Int4);
        let mut fp16 = Segment::empty(BitWidth::Fp16);
        for (window_id, &width) in layer_widths.iter().enumerate() {
            let win = build_window(window_id, width)?;
            match width {
                BitWidth::Int2 => int2.windows.push(win),
                BitWidth::Int4 => int4.windows.push(win),
                BitWidth::Fp16 => fp16.windows.push(win),
            }
        }
        vec![int2, int4, fp16]
    } else {
        layer_widths
            .iter()
            .enumerate()
            .map(|(window_id, &width)| {
                Ok(Segment {
                    width,
                    windows: vec![build_window(window_id, width)?],
                })
            })
            .collect::<Result<Vec<_>>>()?
    };

    // Visual tail plus any trailing (text) tokens stay full precision.
    let windowed = plan.windowed_tokens();
    let tail_k = RowBuffer::from_matrix(&k.slice_rows(windowed, k.rows()));
    let tail_v = RowBuffer::from_matrix(&v.slice_rows(windowed, v.rows()));

    Ok(LayerKvCache {
        heads,
        head_dim,
        window_size: plan.window_size,
        segments,
        tail_k,
        tail_v,
        reordered: reorder,
    })
}

/// End-to-end byte accounting for a run.
///
/// All `bytes_*` fields are totals across layers. FP16 counts at 2 bytes
/// per element; quantized widths at their packed size; metadata at 4 bytes
/// per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub bytes_fp16: u64,
    pub bytes_int4: u64,
    pub bytes_int2: u64,
    pub bytes_metadata: u64,
    pub bytes_total: u64,
    pub bytes_baseline_fp16: u64,
    pub bytes_saved: u64,
    pub average_bit_width: f64,
    pub layers: u64,
}

impl MemoryReport {
    pub fn bytes_saved_per_layer(&self) -> u64 {
        self.bytes_saved / self.layers.max(1)
    }

    /// Headline megabyte figure, computed the way the per-layer summary is
    /// usually quoted: per-layer MiB rounded to two decimals, times layers.
    pub fn saved_mb_total(&self) -> f64 {
        let per_layer_mb = self.bytes_saved_per_layer() as f64 / (1024.0 * 1024.0);
        (per_layer_mb * 100.0).round() / 100.0 * self.layers as f64
    }
}

/// Visual-window token counts for one layer, plus the full-precision
/// remainder (tail, text, generated tokens) and quantized group count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerTokenCounts {
    pub int2_tokens: u64,
    pub int4_tokens: u64,
    pub fp16_window_tokens: u64,
    pub fp16_other_tokens: u64,
    pub quant_groups: u64,
}

fn stored_bytes(tokens: u64, heads: u64, head_dim: u64, bits: u64) -> u64 {
    // Per side (K or V): tokens * heads * head_dim elements at `bits` each.
    let bits_total = tokens * heads * head_dim * bits;
    bits_total.div_ceil(8) * 2
}

/// Accounting from uniform per-layer token counts. `n_int2`, `n_int4`, and
/// `n_fp16` are visual-window tokens per layer; the average bit-width is
/// the token-count-weighted mean over exactly those tokens.
pub fn memory_report(
    n_int2: u64,
    n_int4: u64,
    n_fp16: u64,
    heads: usize,
    head_dim: usize,
    layers: usize,
    group_count: u64,
) -> Result<MemoryReport> {
    let per_layer = LayerTokenCounts {
        int2_tokens: n_int2,
        int4_tokens: n_int4,
        fp16_window_tokens: n_fp16,
        fp16_other_tokens: 0,
        quant_groups: group_count,
    };
    memory_report_from_layers(&vec![per_layer; layers], heads, head_dim)
}

/// Accounting from per-layer token counts (layers may differ).
pub fn memory_report_from_layers(
    per_layer: &[LayerTokenCounts],
    heads: usize,
    head_dim: usize,
) -> Result<MemoryReport> {
    let (heads, head_dim) = (heads as u64, head_dim as u64);
    let mut report = MemoryReport {
        bytes_fp16: 0,
        bytes_int4: 0,
        bytes_int2: 0,
        bytes_metadata: 0,
        bytes_total: 0,
        bytes_baseline_fp16: 0,
        bytes_saved: 0,
        average_bit_width: 0.0,
        layers: per_layer.len() as u64,
    };
    let mut window_tokens = 0u64;
    let mut weighted_bits = 0u64;
    for counts in per_layer {
        let fp16_tokens = counts.fp16_window_tokens + counts.fp16_other_tokens;
        report.bytes_fp16 += stored_bytes(fp16_tokens, heads, head_dim, 16);
        report.bytes_int4 += stored_bytes(counts.int4_tokens, heads, head_dim, 4);
        report.bytes_int2 += stored_bytes(counts.int2_tokens, heads, head_dim, 2);
        report.bytes_metadata += counts.quant_groups * METADATA_BYTES_PER_GROUP;
        let all_tokens =
            counts.int2_tokens + counts.int4_tokens + fp16_tokens;
        report.bytes_baseline_fp16 += stored_bytes(all_tokens, heads, head_dim, 16);
        window_tokens +=
            counts.int2_tokens + counts.int4_tokens + counts.fp16_window_tokens;
        weighted_bits += 2 * counts.int2_tokens
            + 4 * counts.int4_tokens
            + 16 * counts.fp16_window_tokens;
    }
    if window_tokens == 0 {
        return Err(Error::NoTokens);
    }
    report.bytes_total =
        report.bytes_fp16 + report.bytes_int4 + report.bytes_int2 + report.bytes_metadata;
    report.bytes_saved = report.bytes_baseline_fp16 - report.bytes_total;
    report.average_bit_width = weighted_bits as f64 / window_tokens as f64;
    Ok(report)
}

/// Exact recount over the built caches: packed buffers at their real size,
/// full-precision slabs and tails at 2 bytes per element.
pub fn memory_report_from_caches(caches: &[LayerKvCache]) -> Result<MemoryReport> {
    if caches.is_empty() {
        return Err(Error::EmptyInput("memory_report_from_caches"));
    }
    let heads = caches[0].heads as u64;
    let head_dim = caches[0].head_dim as u64;
    let mut report = MemoryReport {
        bytes_fp16: 0,
        bytes_int4: 0,
        bytes_int2: 0,
        bytes_metadata: 0,
        bytes_total: 0,
        bytes_baseline_fp16: 0,
        bytes_saved: 0,
        average_bit_width: 0.0,
        layers: caches.len() as u64,
    };
    let mut window_tokens = 0u64;
    let mut weighted_bits = 0u64;
    for cache in caches {
        for seg in &cache.segments {
            for win in &seg.windows {
                let tokens = win.token_rows(cache.head_dim) as u64;
                window_tokens += tokens;
                weighted_bits += tokens * seg.width.bits() as u64;
                for side in [&win.k, &win.v] {
                    match side {
                        WindowData::Full(m) => {
                            report.bytes_fp16 +=
                                m.data().len() as u64 * FP16_BYTES_PER_ELEMENT;
                        }
                        WindowData::Quantized(groups) => {
                            for g in groups {
                                let b = g.bytes.len() as u64;
                                match seg.width {
                                    BitWidth::Int4 => report.bytes_int4 += b,
                                    BitWidth::Int2 => report.bytes_int2 += b,
                                    BitWidth::Fp16 => unreachable!("fp16 segment holds slabs"),
                                }
                                report.bytes_metadata += METADATA_BYTES_PER_GROUP;
                            }
                        }
                    }
                }
            }
        }
        let tail_tokens = cache.tail_k.rows() as u64;
        report.bytes_fp16 +=
            2 * tail_tokens * heads * head_dim * FP16_BYTES_PER_ELEMENT;
        let total_tokens = cache.total_tokens() as u64;
        report.bytes_baseline_fp16 += stored_bytes(total_tokens, heads, head_dim, 16);
    }
    if window_tokens == 0 {
        return Err(Error::NoTokens);
    }
    report.bytes_total =
        report.bytes_fp16 + report.bytes_int4 + report.bytes_int2 + report.bytes_metadata;
    report.bytes_saved = report.bytes_baseline_fp16 - report.bytes_total;
    report.average_bit_width = weighted_bits as f64 / window_tokens as f64;
    Ok(report)
}
