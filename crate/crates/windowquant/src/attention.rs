//! Two-stage attention engine.
//!
//! Prefill runs standard masked attention over the original token order at
//! full precision. Decoding runs the blocked mixed-precision step over a
//! segmented cache: per-segment score blocks are concatenated in the fixed
//! INT2 / INT4 / FP16+tail order, softmax is applied once over the whole
//! row, and the output accumulates per-block weighted sums of V. Quantized
//! segments go through a fused dequantize-matmul that never materializes a
//! dequantized matrix; the unfused path is retained as oracle and as the
//! fusion-ablation mode.

use crate::error::{Error, Result};
use crate::kvstore::{LayerKvCache, RowBuffer, Segment, WindowData};
use crate::numerics::{
    causal_mask, matmul, max_relative_error, scaled_scores, softmax_into, softmax_rows, Matrix,
};
use crate::quant::dequantize_group;

/// Token counts of the three decode score blocks, in concatenation order.
/// Only meaningful for a reordered cache, where the offsets `len_int2` and
/// `len_int2 + len_int4` locate the block boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeBlocks {
    pub len_int2: usize,
    pub len_int4: usize,
    /// FP16 segment plus the live tail.
    pub len_fp16: usize,
}

impl DecodeBlocks {
    pub fn total(&self) -> usize {
        self.len_int2 + self.len_int4 + self.len_fp16
    }
}

/// Masked full-precision prefill attention:
/// `softmax(q*k^T/sqrt(d_k) + causal_mask) * v`.
pub fn prefill_attention(q: &Matrix, k: &Matrix, v: &Matrix, d_k: usize) -> Result<Matrix> {
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "prefill_attention",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: v.cols(),
        });
    }
    let scores = scaled_scores(q, k, d_k)?;
    let masked = scores.add(&causal_mask(q.rows()))?;
    matmul(&softmax_rows(&masked), v)
}

#[inline]
fn unpack_code(bytes: &[u8], index: usize, bits: u32) -> u8 {
    let per_byte = (8 / bits) as usize;
    let shift = (index % per_byte) as u32 * bits;
    let mask = ((1u32 << bits) - 1) as u8;
    (bytes[index / per_byte] >> shift) & mask
}

/// Scores of one head's query row against every token of a quantized
/// segment, dequantizing inside the dot-product pass. Single sweep over the
/// packed bytes; no dequantized matrix is materialized.
pub fn fused_dequant_scores(
    q_head: &[f64],
    segment: &Segment,
    head: usize,
    d_k: usize,
) -> Result<Vec<f64>> {
    if !segment.width.is_quantized() {
        return Err(Error::FullPrecisionSegment);
    }
    let head_dim = q_head.len();
    let inv = 1.0 / (d_k as f64).sqrt();
    let mut scores = Vec::with_capacity(segment.token_count(head_dim));
    for win in &segment.windows {
        let groups = match &win.k {
            WindowData::Quantized(groups) => groups,
            WindowData::Full(_) => return Err(Error::FullPrecisionSegment),
        };
        let group = &groups[head];
        let (scale, zero, bits) = (
            group.params.scale,
            group.params.zero_point as f64,
            group.params.bits,
        );
        let tokens = group.count / head_dim;
        let mut idx = 0;
        for _ in 0..tokens {
            let mut acc = 0.0;
            for &qd in q_head.iter() {
                let code = unpack_code(&group.bytes, idx, bits);
                acc += qd * (scale * (code as f64 - zero));
                idx += 1;
            }
            scores.push(acc * inv);
        }
    }
    Ok(scores)
}

/// Unfused oracle for [`fused_dequant_scores`]: dequantize the whole group,
/// then take dot products against the materialized values.
pub fn dequant_then_scores(
    q_head: &[f64],
    segment: &Segment,
    head: usize,
    d_k: usize,
) -> Result<Vec<f64>> {
    if !segment.width.is_quantized() {
        return Err(Error::FullPrecisionSegment);
    }
    let head_dim = q_head.len();
    let inv = 1.0 / (d_k as f64).sqrt();
    let mut scores = Vec::with_capacity(segment.token_count(head_dim));
    for win in &segment.windows {
        let groups = match &win.k {
            WindowData::Quantized(groups) => groups,
            WindowData::Full(_) => return Err(Error::FullPrecisionSegment),
        };
        let values = dequantize_group(&groups[head])?;
        for row in values.chunks_exact(head_dim) {
            let mut acc = 0.0;
            for (qd, vd) in q_head.iter().zip(row.iter()) {
                acc += qd * vd;
            }
            scores.push(acc * inv);
        }
    }
    Ok(scores)
}

/// Weighted sum of a quantized segment's V rows, fused: codes are decoded
/// inside the accumulation loop.
pub fn fused_dequant_output(
    weights: &[f64],
    segment: &Segment,
    head: usize,
    head_dim: usize,
    out: &mut [f64],
) -> Result<()> {
    if !segment.width.is_quantized() {
        return Err(Error::FullPrecisionSegment);
    }
    let mut w_idx = 0;
    for win in &segment.windows {
        let groups = match &win.v {
            WindowData::Quantized(groups) => groups,
            WindowData::Full(_) => return Err(Error::FullPrecisionSegment),
        };
        let group = &groups[head];
        let (scale, zero, bits) = (
            group.params.scale,
            group.params.zero_point as f64,
            group.params.bits,
        );
        let tokens = group.count / head_dim;
        let mut idx = 0;
        for _ in 0..tokens {
            let w = weights[w_idx];
            for o in out.iter_mut().take(head_dim) {
                let code = unpack_code(&group.bytes, idx, bits);
                *o += w * (scale * (code as f64 - zero));
                idx += 1;
            }
            w_idx += 1;
        }
    }
    debug_assert_eq!(w_idx, weights.len());
    Ok(())
}

/// Unfused oracle for [`fused_dequant_output`].
pub fn dequant_then_output(
    weights: &[f64],
    segment: &Segment,
    head: usize,
    head_dim: usize,
    out: &mut [f64],
) -> Result<()> {
    if !segment.width.is_quantized() {
        return Err(Error::FullPrecisionSegment);
    }
    let mut w_idx = 0;
    for win in &segment.windows {
        let groups = match &win.v {
            WindowData::Quantized(groups) => groups,
            WindowData::Full(_) => return Err(Error::FullPrecisionSegment),
        };
        let values = dequantize_group(&groups[head])?;
        for row in values.chunks_exact(head_dim) {
            let w = weights[w_idx];
            for (o, vd) in out.iter_mut().zip(row.iter()) {
                *o += w * vd;
            }
            w_idx += 1;
        }
    }
    Ok(())
}

fn fp16_scores(
    q_head: &[f64],
    segment: &Segment,
    head: usize,
    d_k: usize,
    scores: &mut Vec<f64>,
) {
    let head_dim = q_head.len();
    let inv = 1.0 / (d_k as f64).sqrt();
    for win in &segment.windows {
        if let WindowData::Full(m) = &win.k {
            for t in 0..m.rows() {
                let row = &m.row(t)[head * head_dim..(head + 1) * head_dim];
                let mut acc = 0.0;
                for (qd, kd) in q_head.iter().zip(row.iter()) {
                    acc += qd * kd;
                }
                scores.push(acc * inv);
            }
        }
    }
}

fn fp16_output(
    weights: &[f64],
    segment: &Segment,
    head: usize,
    head_dim: usize,
    out: &mut [f64],
) {
    let mut w_idx = 0;
    for win in &segment.windows {
        if let WindowData::Full(m) = &win.v {
            for t in 0..m.rows() {
                let row = &m.row(t)[head * head_dim..(head + 1) * head_dim];
                let w = weights[w_idx];
                for (o, vd) in out.iter_mut().zip(row.iter()) {
                    *o += w * vd;
                }
                w_idx += 1;
            }
        }
    }
}

/// Unmasked decode attention of one projected query row over the segmented
/// cache. `q_row` and the returned output are `heads * head_dim` wide.
/// Scores follow cache order (segments, then the live tail), softmax runs
/// once over the full concatenated row, and quantized blocks go through the
/// fused kernels unless `fusion` is false.
pub fn decode_step(
    q_row: &[f64],
    cache: &LayerKvCache,
    d_k: usize,
    fusion: bool,
) -> Result<Vec<f64>> {
    let head_dim = cache.head_dim;
    if q_row.len() != cache.embed_dim() {
        return Err(Error::DimensionMismatch {
            op: "decode_step",
            left_rows: 1,
            left_cols: q_row.len(),
            right_rows: 1,
            right_cols: cache.embed_dim(),
        });
    }
    if d_k != head_dim {
        return Err(Error::InvalidArgument(format!(
            "decode_step: d_k {d_k} does not match cache head_dim {head_dim}"
        )));
    }
    let total = cache.total_tokens();
    if total == 0 {
        return Err(Error::EmptyCache);
    }

    let mut out = vec![0.0; cache.embed_dim()];
    for head in 0..cache.heads {
        let q_head = &q_row[head * head_dim..(head + 1) * head_dim];

        let mut scores: Vec<f64> = Vec::with_capacity(total);
        for segment in &cache.segments {
            if segment.windows.is_empty() {
                continue;
            }
            if segment.width.is_quantized() {
                let block = if fusion {
                    fused_dequant_scores(q_head, segment, head, d_k)?
                } else {
                    dequant_then_scores(q_head, segment, head, d_k)?
                };
                scores.extend(block);
            } else {
                fp16_scores(q_head, segment, head, d_k, &mut scores);
            }
        }
        let inv = 1.0 / (d_k as f64).sqrt();
        for t in 0..cache.tail_k.rows() {
            let row = &cache.tail_k.row(t)[head * head_dim..(head + 1) * head_dim];
            let mut acc = 0.0;
            for (qd, kd) in q_head.iter().zip(row.iter()) {
                acc += qd * kd;
            }
            scores.push(acc * inv);
        }

        let mut weights = vec![0.0; scores.len()];
        softmax_into(&scores, &mut weights);

        let out_head = &mut out[head * head_dim..(head + 1) * head_dim];
        let mut offset = 0;
        for segment in &cache.segments {
            if segment.windows.is_empty() {
                continue;
            }
            let len = segment.token_count(head_dim);
            let block = &weights[offset..offset + len];
            if segment.width.is_quantized() {
                if fusion {
                    fused_dequant_output(block, segment, head, head_dim, out_head)?;
                } else {
                    dequant_then_output(block, segment, head, head_dim, out_head)?;
                }
            } else {
                fp16_output(block, segment, head, head_dim, out_head);
            }
            offset += len;
        }
        for t in 0..cache.tail_v.rows() {
            let row = &cache.tail_v.row(t)[head * head_dim..(head + 1) * head_dim];
            let w = weights[offset + t];
            for (o, vd) in out_head.iter_mut().zip(row.iter()) {
                *o += w * vd;
            }
        }
    }
    Ok(out)
}

/// Score-block layout of a reordered cache.
pub fn decode_blocks(cache: &LayerKvCache) -> DecodeBlocks {
    let (int2, int4, fp16) = cache.segment_token_counts();
    DecodeBlocks {
        len_int2: int2,
        len_int4: int4,
        len_fp16: fp16 + cache.tail_k.rows(),
    }
}

/// Unmasked single-row attention over plain K/V row stores, the full-
/// precision oracle for the decode path. Same per-head blocking and
/// accumulation order as [`decode_step`] on an unsegmented cache.
pub fn unmasked_attention_row(
    q_row: &[f64],
    k: &RowBuffer,
    v: &RowBuffer,
    heads: usize,
    head_dim: usize,
) -> Result<Vec<f64>> {
    if q_row.len() != heads * head_dim || k.cols() != heads * head_dim {
        return Err(Error::DimensionMismatch {
            op: "unmasked_attention_row",
            left_rows: 1,
            left_cols: q_row.len(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::EmptyCache);
    }
    let inv = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; heads * head_dim];
    for head in 0..heads {
        let q_head = &q_row[head * head_dim..(head + 1) * head_dim];
        let mut scores = Vec::with_capacity(k.rows());
        for t in 0..k.rows() {
            let row = &k.row(t)[head * head_dim..(head + 1) * head_dim];
            let mut acc = 0.0;
            for (qd, kd) in q_head.iter().zip(row.iter()) {
                acc += qd * kd;
            }
            scores.push(acc * inv);
        }
        let mut weights = vec![0.0; scores.len()];
        softmax_into(&scores, &mut weights);
        let out_head = &mut out[head * head_dim..(head + 1) * head_dim];
        for (t, &w) in weights.iter().enumerate() {
            let row = &v.row(t)[head * head_dim..(head + 1) * head_dim];
            for (o, vd) in out_head.iter_mut().zip(row.iter()) {
                *o += w * vd;
            }
        }
    }
    Ok(out)
}

/// Measure the decode-output discrepancy introduced by permuting KV windows
/// at full precision. `permutation[i]` names the original window placed at
/// position `i`; `k.rows()` must divide evenly into `permutation.len()`
/// windows. Returns the max relative error across all query rows.
pub fn verify_reorder_equivalence(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    permutation: &[usize],
    d_k: usize,
) -> Result<f64> {
    let num_windows = permutation.len();
    if num_windows == 0 || !k.rows().is_multiple_of(num_windows) {
        return Err(Error::InvalidPermutation(format!(
            "{} windows cannot partition {} rows",
            num_windows,
            k.rows()
        )));
    }
    let mut seen = vec![false; num_windows];
    for &p in permutation {
        if p >= num_windows || seen[p] {
            return Err(Error::InvalidPermutation(format!(
                "not a bijection over 0..{num_windows}"
            )));
        }
        seen[p] = true;
    }
    let window_size = k.rows() / num_windows;
    let permute = |m: &Matrix| -> Matrix {
        let mut data = Vec::with_capacity(m.data().len());
        for &w in permutation {
            let slab = m.slice_rows(w * window_size, (w + 1) * window_size);
            data.extend_from_slice(slab.data());
        }
        Matrix::from_raw(m.rows(), m.cols(), data)
    };
    let k_perm = permute(k);
    let v_perm = permute(v);

    let attend = |kk: &Matrix, vv: &Matrix| -> Result<Matrix> {
        let scores = scaled_scores(q, kk, d_k)?;
        matmul(&softmax_rows(&scores), vv)
    };
    let base = attend(k, v)?;
    let permuted = attend(&k_perm, &v_perm)?;
    Ok(max_relative_error(base.data(), permuted.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::build_cache;
    use crate::quant::BitWidth;
    use crate::search::WindowPlan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Naive reference with explicit loops: scores, optional causal mask,
    /// row-max stabilized softmax, triple-loop output.
    #[allow(clippy::needless_range_loop)]
    fn naive_masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, d_k: usize, masked: bool) -> Matrix {
        let n = q.rows();
        let m = k.rows();
        let dim = q.cols();
        let inv = 1.0 / (d_k as f64).sqrt();
        let mut out_data = vec![0.0; n * v.cols()];
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for j in 0..m {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += q.get(i, d) * k.get(j, d);
                }
                scores[j] = acc * inv;
                if masked && j > i {
                    scores[j] += crate::numerics::MASK_SENTINEL;
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for d in 0..v.cols() {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += exps[j] / sum * v.get(j, d);
                }
                out_data[i * v.cols() + d] = acc;
            }
        }
        Matrix::from_vec(n, v.cols(), out_data).unwrap()
    }

    #[test]
    fn prefill_single_token_returns_v() {
        let q = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![5.0, -7.0]]).unwrap();
        let out = prefill_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn prefill_mask_forces_first_row_to_v0() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0, 3.0], vec![-1.0, 4.0]]).unwrap();
        let out = prefill_attention(&q, &k, &v, 2).unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn prefill_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in 1..=16 {
            let q = random_matrix(&mut rng, n, 4);
            let k = random_matrix(&mut rng, n, 4);
            let v = random_matrix(&mut rng, n, 4);
            let got = prefill_attention(&q, &k, &v, 4).unwrap();
            let oracle = naive_masked_attention(&q, &k, &v, 4, true);
            assert!(max_relative_error(got.data(), oracle.data()) < 1e-9, "n = {n}");
        }
    }

    fn build_random_cache(
        rng: &mut ChaCha8Rng,
        widths: &[BitWidth],
        window_size: usize,
        heads: usize,
        head_dim: usize,
        extra_tail: usize,
    ) -> (LayerKvCache, Matrix, Matrix) {
        let tokens = widths.len() * window_size + extra_tail;
        let embed = heads * head_dim;
        let k = random_matrix(rng, tokens, embed);
        let v = random_matrix(rng, tokens, embed);
        let plan = WindowPlan::for_tokens(widths.len() * window_size, window_size).unwrap();
        let cache = build_cache(&k, &v, widths, plan, heads, head_dim).unwrap();
        (cache, k, v)
    }

    #[test]
    fn decode_all_fp16_matches_plain_row_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (cache, k, v) =
            build_random_cache(&mut rng, &[BitWidth::Fp16; 3], 2, 2, 4, 3);
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = decode_step(&q, &cache, 4, true).unwrap();
        let oracle = unmasked_attention_row(
            &q,
            &RowBuffer::from_matrix(&k),
            &RowBuffer::from_matrix(&v),
            2,
            4,
        )
        .unwrap();
        assert_eq!(got, oracle, "all-fp16 cache in original order is bitwise identical");
    }

    #[test]
    fn decode_hand_example() {
        // q = [1, 0], K = [[1,0],[0,1]], V = [[1,0],[0,1]]: weights are
        // softmax([1/sqrt(2), 0]) = [0.669762, 0.330238].
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plan = WindowPlan::for_tokens(2, 1).unwrap();
        let cache = build_cache(&k, &k, &[BitWidth::Fp16; 2], plan, 1, 2).unwrap();
        let out = decode_step(&[1.0, 0.0], &cache, 2, true).unwrap();
        assert!((out[0] - 0.669762).abs() < 1e-5);
        assert!((out[1] - 0.330238).abs() < 1e-5);
    }

    #[test]
    fn decode_matches_naive_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for tokens in 1..=16 {
            let embed = 4;
            let k = random_matrix(&mut rng, tokens, embed);
            let v = random_matrix(&mut rng, tokens, embed);
            let q: Vec<f64> = (0..embed).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = unmasked_attention_row(
                &q,
                &RowBuffer::from_matrix(&k),
                &RowBuffer::from_matrix(&v),
                1,
                embed,
            )
            .unwrap();
            let q_m = Matrix::from_vec(1, embed, q.clone()).unwrap();
            let oracle = naive_masked_attention(&q_m, &k, &v, embed, false);
            assert!(max_relative_error(&out, oracle.row(0)) < 1e-9);
        }
    }

    #[test]
    fn fused_zero_when_codes_equal_zero_point() {
        // A constant group dequantizes to (nearly) the constant; forcing the
        // values to zero makes every dequantized entry exactly s*(c - z)
        // with c == round(0/s) + z == z, so scores vanish.
        let k = Matrix::zeros(2, 2);
        let plan = WindowPlan::for_tokens(2, 2).unwrap();
        let cache = build_cache(&k, &k, &[BitWidth::Int2], plan, 1, 2).unwrap();
        let scores = fused_dequant_scores(&[2.0, -1.0], &cache.segments[0], 0, 2).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn fused_single_element_hand_value() {
        // One token, one dim: q = [2], value dequantizes to 3, d_k = 1 →
        // score 6. Values {3, 0} give scale so that 3 is hit exactly.
        let k = Matrix::from_rows(&[vec![3.0], vec![0.0]]).unwrap();
        let plan = WindowPlan::for_tokens(2, 2).unwrap();
        let cache = build_cache(&k, &k, &[BitWidth::Int2], plan, 1, 1).unwrap();
        let scores = fused_dequant_scores(&[2.0], &cache.segments[0], 0, 1).unwrap();
        assert!((scores[0] - 6.0).abs() < 1e-9);
        assert!(scores[1].abs() < 1e-9);
    }

    #[test]
    fn fused_rejects_fp16_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (cache, _, _) = build_random_cache(&mut rng, &[BitWidth::Fp16], 2, 1, 2, 0);
        let err = fused_dequant_scores(&[1.0, 0.0], &cache.segments[2], 0, 2);
        assert!(matches!(err, Err(Error::FullPrecisionSegment)));
    }

    #[test]
    fn fused_equals_unfused_on_random_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &width in &[BitWidth::Int2, BitWidth::Int4] {
            for _ in 0..100 {
                let heads = rng.gen_range(1..4);
                let head_dim = rng.gen_range(1..8);
                let windows = rng.gen_range(1..4);
                let window_size = rng.gen_range(1..5);
                let (cache, _, _) = build_random_cache(
                    &mut rng,
                    &vec![width; windows],
                    window_size,
                    heads,
                    head_dim,
                    0,
                );
                let seg_idx = if width == BitWidth::Int2 { 0 } else { 1 };
                let segment = &cache.segments[seg_idx];
                let q: Vec<f64> = (0..head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for head in 0..heads {
                    let fused = fused_dequant_scores(&q, segment, head, head_dim).unwrap();
                    let unfused = dequant_then_scores(&q, segment, head, head_dim).unwrap();
                    assert!(max_relative_error(&fused, &unfused) < 1e-6);

                    let tokens = segment.token_count(head_dim);
                    let weights: Vec<f64> =
                        (0..tokens).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let mut out_f = vec![0.0; head_dim];
                    let mut out_u = vec![0.0; head_dim];
                    fused_dequant_output(&weights, segment, head, head_dim, &mut out_f)
                        .unwrap();
                    dequant_then_output(&weights, segment, head, head_dim, &mut out_u)
                        .unwrap();
                    assert!(max_relative_error(&out_f, &out_u) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn decode_permutation_invariance_full_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let windows = rng.gen_range(2..6);
            let window_size = rng.gen_range(1..4);
            let tokens = windows * window_size;
            let k = random_matrix(&mut rng, tokens, 6);
            let v = random_matrix(&mut rng, tokens, 6);
            let q_rows = rng.gen_range(1..3);
            let q = random_matrix(&mut rng, q_rows, 6);
            let mut perm: Vec<usize> = (0..windows).collect();
            for i in (1..windows).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let err = verify_reorder_equivalence(&q, &k, &v, &perm, 6).unwrap();
            assert!(err <= 1e-6, "error {err} for perm {perm:?}");
        }
    }

    #[test]
    fn reorder_identity_is_bitwise_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let k = random_matrix(&mut rng, 8, 4);
        let v = random_matrix(&mut rng, 8, 4);
        let q = random_matrix(&mut rng, 2, 4);
        let err = verify_reorder_equivalence(&q, &k, &v, &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn reorder_six_window_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = random_matrix(&mut rng, 12, 4);
        let v = random_matrix(&mut rng, 12, 4);
        let q = random_matrix(&mut rng, 2, 4);
        let err = verify_reorder_equivalence(&q, &k, &v, &[1, 4, 2, 5, 0, 3], 4).unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn reorder_rejects_bad_permutations() {
        let k = Matrix::zeros(4, 2);
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(verify_reorder_equivalence(&q, &k, &k, &[0, 0], 2).is_err());
        assert!(verify_reorder_equivalence(&q, &k, &k, &[0, 5], 2).is_err());
        assert!(verify_reorder_equivalence(&q, &k, &k, &[0, 1, 2], 2).is_err());
    }

    #[test]
    fn decode_output_within_v_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..20 {
            let widths = [BitWidth::Int2, BitWidth::Fp16, BitWidth::Int4];
            let (cache, _, _) = build_random_cache(&mut rng, &widths, 2, 2, 3, 2);
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = decode_step(&q, &cache, 3, true).unwrap();

            // Reconstruct the dequantized V the decode actually consumed.
            let (_, v_hat) = cache.reconstruct_windows().unwrap();
            let mut v_all = v_hat.data().to_vec();
            for t in 0..cache.tail_v.rows() {
                v_all.extend_from_slice(cache.tail_v.row(t));
            }
            let rows = v_all.len() / 6;
            for head in 0..2 {
                for d in 0..3 {
                    let col = head * 3 + d;
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for t in 0..rows {
                        lo = lo.min(v_all[t * 6 + col]);
                        hi = hi.max(v_all[t * 6 + col]);
                    }
                    assert!(out[col] >= lo - 1e-9 && out[col] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn blocked_softmax_equals_monolithic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let widths = [BitWidth::Int2, BitWidth::Int4, BitWidth::Fp16];
            let (cache, _k, _v) = build_random_cache(&mut rng, &widths, 2, 1, 4, 1);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

            // Monolithic path over the dequantized cache contents in cache
            // order: full-row softmax then one weighted sum.
            let (k_hat, v_hat) = cache.reconstruct_windows().unwrap();
            let order = cache.all_window_ids();
            let mut k_rows: Vec<Vec<f64>> = Vec::new();
            let mut v_rows: Vec<Vec<f64>> = Vec::new();
            for &w in &order {
                for t in 0..2 {
                    k_rows.push(k_hat.row(w * 2 + t).to_vec());
                    v_rows.push(v_hat.row(w * 2 + t).to_vec());
                }
            }
            for t in 0..cache.tail_k.rows() {
                k_rows.push(cache.tail_k.row(t).to_vec());
                v_rows.push(cache.tail_v.row(t).to_vec());
            }
            let mut kb = RowBuffer::new(4);
            let mut vb = RowBuffer::new(4);
            for (kr, vr) in k_rows.iter().zip(v_rows.iter()) {
                kb.push_row(kr).unwrap();
                vb.push_row(vr).unwrap();
            }
            let monolithic = unmasked_attention_row(&q, &kb, &vb, 1, 4).unwrap();
            let blocked = decode_step(&q, &cache, 4, true).unwrap();
            assert!(max_relative_error(&blocked, &monolithic) < 1e-9);
        }
    }

    #[test]
    fn decode_blocks_account_for_all_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let widths = [BitWidth::Int2, BitWidth::Fp16, BitWidth::Int4, BitWidth::Int2];
        let (cache, _, _) = build_random_cache(&mut rng, &widths, 3, 1, 2, 2);
        let blocks = decode_blocks(&cache);
        assert_eq!(blocks.len_int2, 6);
        assert_eq!(blocks.len_int4, 3);
        assert_eq!(blocks.len_fp16, 3 + 2);
        assert_eq!(blocks.total(), cache.total_tokens());
    }

    #[test]
    fn decode_rejects_empty_cache() {
        let plan = WindowPlan::for_tokens(0, 4).unwrap();
        let k = Matrix::zeros(0, 4);
        let cache = build_cache(&k, &k, &[], plan, 2, 2).unwrap();
        assert!(matches!(
            decode_step(&[0.0; 4], &cache, 2, true),
            Err(Error::EmptyCache)
        ));
    }

    #[test]
    fn no_fusion_never_changes_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let widths = [BitWidth::Int2, BitWidth::Int4, BitWidth::Fp16];
            let (cache, _, _) = build_random_cache(&mut rng, &widths, 2, 2, 4, 1);
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fused = decode_step(&q, &cache, 4, true).unwrap();
            let unfused = decode_step(&q, &cache, 4, false).unwrap();
            assert!(max_relative_error(&fused, &unfused) < 1e-6);
        }
    }
}
