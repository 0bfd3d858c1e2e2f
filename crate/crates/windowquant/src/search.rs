//! Window-level bit-width search: layer sensitivity, the exponential
//! threshold pair, window-to-prompt similarity scoring, per-layer/per-window
//! assignment with first-window pinning, and batch majority voting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, Matrix};
use crate::quant::BitWidth;

/// Per-layer sensitivity scores: cosine similarity of hidden states before
/// and after each layer's attention sub-block. High similarity means the
/// layer contributes little and tolerates aggressive quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity(pub Vec<f64>);

impl LayerSensitivity {
    pub fn layers(&self) -> usize {
        self.0.len()
    }
}

/// Per-layer similarity cutoffs derived from the threshold functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// How a visual token sequence of length `M` splits into fixed-size windows.
/// Tokens past the last full window form the tail and always stay FP16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub num_windows: usize,
    pub tail_len: usize,
}

impl WindowPlan {
    pub fn for_tokens(total_visual_tokens: usize, window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::InvalidArgument(
                "window size must be at least 1".to_string(),
            ));
        }
        Ok(Self {
            window_size,
            num_windows: total_visual_tokens / window_size,
            tail_len: total_visual_tokens % window_size,
        })
    }

    pub fn windowed_tokens(&self) -> usize {
        self.num_windows * self.window_size
    }

    pub fn total_tokens(&self) -> usize {
        self.windowed_tokens() + self.tail_len
    }
}

/// The per-layer, per-window bit-width assignment. Tail and non-visual
/// tokens are implicitly FP16 and live outside this table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitWidthConfig {
    /// `widths[layer][window]`.
    pub widths: Vec<Vec<BitWidth>>,
    pub window_size: usize,
    pub tail_len: usize,
    pub alpha: f64,
}

impl BitWidthConfig {
    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn num_windows(&self) -> usize {
        self.widths.first().map_or(0, Vec::len)
    }

    /// Window counts per width for one layer: (fp16, int4, int2).
    pub fn layer_histogram(&self, layer: usize) -> (usize, usize, usize) {
        let mut h = (0, 0, 0);
        for w in &self.widths[layer] {
            match w {
                BitWidth::Fp16 => h.0 += 1,
                BitWidth::Int4 => h.1 += 1,
                BitWidth::Int2 => h.2 += 1,
            }
        }
        h
    }

    /// Uniform config: every window of every layer at `width`.
    pub fn uniform(layers: usize, plan: WindowPlan, width: BitWidth, alpha: f64) -> Self {
        Self {
            widths: vec![vec![width; plan.num_windows]; layers],
            window_size: plan.window_size,
            tail_len: plan.tail_len,
            alpha,
        }
    }
}

/// Cosine similarity of hidden-state matrices flattened to vectors.
pub fn layer_sensitivity(h_before: &Matrix, h_after: &Matrix) -> Result<f64> {
    if h_before.rows() != h_after.rows() || h_before.cols() != h_after.cols() {
        return Err(Error::DimensionMismatch {
            op: "layer_sensitivity",
            left_rows: h_before.rows(),
            left_cols: h_before.cols(),
            right_rows: h_after.rows(),
            right_cols: h_after.cols(),
        });
    }
    cosine_sim(h_before.data(), h_after.data())
}

/// Lower similarity cutoff: `(e^(alpha*s) - 1) / (e^alpha - 1)`.
pub fn threshold_low(s: f64, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    Ok(((alpha * s).exp() - 1.0) / (alpha.exp() - 1.0))
}

/// Upper similarity cutoff: `(e^(-alpha*s) - 1) / (e^-alpha - 1)`.
pub fn threshold_high(s: f64, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    Ok(((-alpha * s).exp() - 1.0) / ((-alpha).exp() - 1.0))
}

/// Both cutoffs per layer. Sensitivities are clamped into [0, 1] first;
/// cosine can go negative but the threshold functions expect a similarity.
pub fn thresholds_for(sens: &LayerSensitivity, alpha: f64) -> Result<Thresholds> {
    let mut low = Vec::with_capacity(sens.layers());
    let mut high = Vec::with_capacity(sens.layers());
    for &s in &sens.0 {
        let s = s.clamp(0.0, 1.0);
        low.push(threshold_low(s, alpha)?);
        high.push(threshold_high(s, alpha)?);
    }
    Ok(Thresholds { low, high })
}

/// Mean pairwise cosine similarity between every text row and every window
/// row: `(1 / (S*N)) * sum_j sum_k cos(t_j, w_k)`.
pub fn window_similarity(text: &Matrix, window: &Matrix) -> Result<f64> {
    if text.cols() != window.cols() {
        return Err(Error::DimensionMismatch {
            op: "window_similarity",
            left_rows: text.rows(),
            left_cols: text.cols(),
            right_rows: window.rows(),
            right_cols: window.cols(),
        });
    }
    if text.rows() == 0 || window.rows() == 0 {
        return Err(Error::EmptyInput("window_similarity"));
    }
    let mut total = 0.0;
    for j in 0..text.rows() {
        for k in 0..window.rows() {
            total += cosine_sim(text.row(j), window.row(k))?;
        }
    }
    Ok(total / (text.rows() * window.rows()) as f64)
}

/// Three-band assignment with strict inequalities; boundary similarities
/// fall in the INT4 band.
pub fn assign_window(sim: f64, t_low: f64, t_high: f64) -> Result<BitWidth> {
    if t_low > t_high {
        return Err(Error::ThresholdOrder {
            low: t_low,
            high: t_high,
        });
    }
    Ok(if sim > t_high {
        BitWidth::Fp16
    } else if sim < t_low {
        BitWidth::Int2
    } else {
        BitWidth::Int4
    })
}

/// Per-window similarity scores against the text prompt, computed once and
/// reused across layers.
pub fn window_similarities(
    visual: &Matrix,
    text: &Matrix,
    plan: WindowPlan,
) -> Result<Vec<f64>> {
    let mut sims = Vec::with_capacity(plan.num_windows);
    for w in 0..plan.num_windows {
        let start = w * plan.window_size;
        let window = visual.slice_rows(start, start + plan.window_size);
        sims.push(window_similarity(text, &window)?);
    }
    Ok(sims)
}

/// Full window-level search. Similarities are scored once per window; each
/// layer applies its own thresholds; window 0 is then pinned to FP16 in
/// every layer.
pub fn search_config(
    visual: &Matrix,
    text: &Matrix,
    sens: &LayerSensitivity,
    window_size: usize,
    alpha: f64,
) -> Result<BitWidthConfig> {
    search_config_with(visual, text, sens, window_size, alpha, true)
}

/// Search with the first-window pin selectable, for the pin ablation.
pub fn search_config_with(
    visual: &Matrix,
    text: &Matrix,
    sens: &LayerSensitivity,
    window_size: usize,
    alpha: f64,
    pin_first_window: bool,
) -> Result<BitWidthConfig> {
    if sens.layers() == 0 {
        return Err(Error::EmptyInput("search_config: no layer sensitivities"));
    }
    let plan = WindowPlan::for_tokens(visual.rows(), window_size)?;
    if plan.num_windows == 0 {
        return Err(Error::InvalidArgument(format!(
            "search_config: {} visual tokens form no complete window of size {}",
            visual.rows(),
            window_size
        )));
    }
    let sims = window_similarities(visual, text, plan)?;
    let thresholds = thresholds_for(sens, alpha)?;

    let mut widths = Vec::with_capacity(sens.layers());
    for layer in 0..sens.layers() {
        let (t_low, t_high) = (thresholds.low[layer], thresholds.high[layer]);
        let mut row = Vec::with_capacity(plan.num_windows);
        for &sim in &sims {
            row.push(assign_window(sim, t_low, t_high)?);
        }
        if pin_first_window {
            row[0] = BitWidth::Fp16;
        }
        widths.push(row);
    }
    Ok(BitWidthConfig {
        widths,
        window_size: plan.window_size,
        tail_len: plan.tail_len,
        alpha,
    })
}

/// Modal width per (layer, window) cell across a batch of configs. Ties
/// break toward the higher-precision width.
pub fn batch_vote(configs: &[BitWidthConfig]) -> Result<BitWidthConfig> {
    let first = configs.first().ok_or(Error::EmptyInput("batch_vote"))?;
    for c in configs {
        if c.layers() != first.layers()
            || c.num_windows() != first.num_windows()
            || c.window_size != first.window_size
        {
            return Err(Error::ConfigMismatch(format!(
                "batch_vote: config shape {}x{} does not match {}x{}",
                c.layers(),
                c.num_windows(),
                first.layers(),
                first.num_windows()
            )));
        }
    }
    let mut widths = Vec::with_capacity(first.layers());
    for layer in 0..first.layers() {
        let mut row = Vec::with_capacity(first.num_windows());
        for window in 0..first.num_windows() {
            // counts indexed by precision rank: [int2, int4, fp16]
            let mut counts = [0usize; 3];
            for c in configs {
                counts[c.widths[layer][window].precision_rank() as usize] += 1;
            }
            let best = [BitWidth::Fp16, BitWidth::Int4, BitWidth::Int2]
                .into_iter()
                .max_by_key(|w| (counts[w.precision_rank() as usize], w.precision_rank()))
                .unwrap();
            row.push(best);
        }
        widths.push(row);
    }
    Ok(BitWidthConfig {
        widths,
        window_size: first.window_size,
        tail_len: first.tail_len,
        alpha: first.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[allow(clippy::approx_constant)] // frozen oracle values, not consts
    fn sensitivity_examples() {
        let h = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.2, 0.4]]).unwrap();
        assert!((layer_sensitivity(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        let neg = h.map(|v| -v);
        assert!((layer_sensitivity(&h, &neg).unwrap() + 1.0).abs() < 1e-12);

        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!((layer_sensitivity(&a, &b).unwrap() - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn threshold_fixed_points_and_midpoint() {
        for &alpha in &[0.5, 1.0, 2.0, 4.0] {
            assert_eq!(threshold_low(0.0, alpha).unwrap(), 0.0);
            assert_eq!(threshold_low(1.0, alpha).unwrap(), 1.0);
            assert_eq!(threshold_high(0.0, alpha).unwrap(), 0.0);
            assert_eq!(threshold_high(1.0, alpha).unwrap(), 1.0);
        }
        assert!((threshold_low(0.5, 2.0).unwrap() - 0.26894).abs() < 1e-5);
        assert!((threshold_high(0.5, 2.0).unwrap() - 0.73106).abs() < 1e-5);
        assert!(threshold_low(0.5, 0.0).is_err());
        assert!(threshold_high(0.5, -1.0).is_err());
    }

    #[test]
    fn threshold_symmetry_ordering_monotone() {
        for &alpha in &[0.5, 1.0, 2.0, 4.0] {
            let mut prev_low = -1.0;
            let mut prev_high = -1.0;
            for i in 0..=100 {
                let s = i as f64 / 100.0;
                let f1 = threshold_low(s, alpha).unwrap();
                let f2 = threshold_high(s, alpha).unwrap();
                let f2_mirror = threshold_high(1.0 - s, alpha).unwrap();
                assert!((f2_mirror - (1.0 - f1)).abs() < 1e-12);
                assert!(f1 <= f2 + 1e-15);
                assert!(f1 > prev_low && f2 > prev_high);
                prev_low = f1;
                prev_high = f2;
            }
        }
    }

    #[test]
    fn window_similarity_examples() {
        let row = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert!((window_similarity(&row, &row).unwrap() - 1.0).abs() < 1e-12);

        let text = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let window = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(window_similarity(&text, &window).unwrap().abs() < 1e-12);

        let window = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let sim = window_similarity(&text, &window).unwrap();
        assert!((sim - 0.85355).abs() < 1e-5);
    }

    #[test]
    fn window_similarity_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let text_data: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let win_data: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let text = Matrix::from_vec(5, 8, text_data).unwrap();
            let window = Matrix::from_vec(3, 8, win_data).unwrap();

            let mut oracle = 0.0;
            for j in 0..5 {
                for k in 0..3 {
                    let t = text.row(j);
                    let w = window.row(k);
                    let dot: f64 = t.iter().zip(w).map(|(a, b)| a * b).sum();
                    let nt: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nw: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    oracle += dot / (nt * nw);
                }
            }
            oracle /= 15.0;
            let got = window_similarity(&text, &window).unwrap();
            assert!((got - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_bands() {
        assert_eq!(assign_window(0.9, 0.2, 0.8).unwrap(), BitWidth::Fp16);
        assert_eq!(assign_window(0.1, 0.2, 0.8).unwrap(), BitWidth::Int2);
        assert_eq!(assign_window(0.8, 0.2, 0.8).unwrap(), BitWidth::Int4);
        assert_eq!(assign_window(0.2, 0.2, 0.8).unwrap(), BitWidth::Int4);
        assert!(assign_window(0.5, 0.9, 0.1).is_err());
    }

    fn tiny_scene(rng: &mut ChaCha8Rng, m: usize, d: usize) -> (Matrix, Matrix) {
        let visual: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let text: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (
            Matrix::from_vec(m, d, visual).unwrap(),
            Matrix::from_vec(2, d, text).unwrap(),
        )
    }

    #[test]
    fn search_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (visual, text) = tiny_scene(&mut rng, 12, 6);

        // All sensitivities 1: thresholds collapse at 1, every real-world
        // similarity sits below, so all but the pinned window go INT2.
        let sens = LayerSensitivity(vec![1.0, 1.0]);
        let cfg = search_config(&visual, &text, &sens, 4, 2.0).unwrap();
        for layer in 0..2 {
            assert_eq!(cfg.widths[layer][0], BitWidth::Fp16);
            for w in 1..cfg.num_windows() {
                assert_eq!(cfg.widths[layer][w], BitWidth::Int2);
            }
        }

        // All sensitivities 0: thresholds collapse at 0, any positive
        // similarity becomes FP16.
        let sens = LayerSensitivity(vec![0.0]);
        let cfg = search_config(&visual, &text, &sens, 4, 2.0).unwrap();
        let sims = window_similarities(&visual, &text, WindowPlan::for_tokens(12, 4).unwrap())
            .unwrap();
        for (w, &sim) in sims.iter().enumerate() {
            if w == 0 {
                assert_eq!(cfg.widths[0][0], BitWidth::Fp16);
            } else if sim > 0.0 {
                assert_eq!(cfg.widths[0][w], BitWidth::Fp16);
            }
        }
    }

    #[test]
    fn search_band_application() {
        // Hand-built case: sims [0.9, 0.5, 0.1] against t_low 0.2 / t_high 0.8.
        let widths: Vec<BitWidth> = [0.9, 0.5, 0.1]
            .iter()
            .map(|&s| assign_window(s, 0.2, 0.8).unwrap())
            .collect();
        assert_eq!(widths, vec![BitWidth::Fp16, BitWidth::Int4, BitWidth::Int2]);
    }

    #[test]
    fn search_always_pins_first_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let (visual, text) = tiny_scene(&mut rng, 16, 5);
            let sens = LayerSensitivity(
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let cfg = search_config(&visual, &text, &sens, 4, 2.0).unwrap();
            for layer in 0..cfg.layers() {
                assert_eq!(cfg.widths[layer][0], BitWidth::Fp16, "trial {trial}");
            }
        }
    }

    #[test]
    fn monotone_precision_response() {
        // Lowering one layer's sensitivity never drops a window to a lower
        // precision: thresholds shrink with s, widening the FP16 band.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (visual, text) = tiny_scene(&mut rng, 20, 6);
        for _ in 0..30 {
            let s_hi = rng.gen_range(0.05..1.0);
            let s_lo = rng.gen_range(0.0..s_hi);
            let cfg_hi =
                search_config(&visual, &text, &LayerSensitivity(vec![s_hi]), 4, 2.0).unwrap();
            let cfg_lo =
                search_config(&visual, &text, &LayerSensitivity(vec![s_lo]), 4, 2.0).unwrap();
            for w in 0..cfg_hi.num_windows() {
                assert!(
                    cfg_lo.widths[0][w].precision_rank() >= cfg_hi.widths[0][w].precision_rank()
                );
            }
        }
    }

    #[test]
    fn batch_vote_rules() {
        let plan = WindowPlan::for_tokens(8, 4).unwrap();
        let mk = |w: BitWidth| BitWidthConfig::uniform(1, plan, w, 2.0);

        // Identity on a single config.
        let single = mk(BitWidth::Int4);
        assert_eq!(batch_vote(std::slice::from_ref(&single)).unwrap(), single);

        // Majority wins.
        let voted = batch_vote(&[mk(BitWidth::Int4), mk(BitWidth::Int4), mk(BitWidth::Fp16)])
            .unwrap();
        assert_eq!(voted.widths[0][0], BitWidth::Int4);

        // Ties break toward higher precision.
        let voted = batch_vote(&[mk(BitWidth::Int2), mk(BitWidth::Fp16)]).unwrap();
        assert_eq!(voted.widths[0][0], BitWidth::Fp16);
        let voted = batch_vote(&[mk(BitWidth::Int2), mk(BitWidth::Int4)]).unwrap();
        assert_eq!(voted.widths[0][0], BitWidth::Int4);

        assert!(batch_vote(&[]).is_err());
        let mismatched = BitWidthConfig::uniform(2, plan, BitWidth::Int2, 2.0);
        assert!(batch_vote(&[mk(BitWidth::Int2), mismatched]).is_err());

        // Pinned inputs keep window 0 pinned through the vote.
        let mut a = mk(BitWidth::Int2);
        let mut b = mk(BitWidth::Int4);
        a.widths[0][0] = BitWidth::Fp16;
        b.widths[0][0] = BitWidth::Fp16;
        let voted = batch_vote(&[a, b]).unwrap();
        assert_eq!(voted.widths[0][0], BitWidth::Fp16);
    }

    proptest! {
        #[test]
        fn batch_vote_permutation_invariant(
            seed in 0u64..1000,
            n in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = WindowPlan::for_tokens(12, 4).unwrap();
            let all = [BitWidth::Fp16, BitWidth::Int4, BitWidth::Int2];
            let configs: Vec<BitWidthConfig> = (0..n)
                .map(|_| {
                    let widths = (0..2)
                        .map(|_| (0..3).map(|_| all[rng.gen_range(0..3)]).collect())
                        .collect();
                    BitWidthConfig { widths, window_size: plan.window_size, tail_len: plan.tail_len, alpha: 2.0 }
                })
                .collect();
            let voted = batch_vote(&configs).unwrap();
            let mut reversed = configs.clone();
            reversed.reverse();
            prop_assert_eq!(batch_vote(&reversed).unwrap(), voted.clone());
            prop_assert_eq!(batch_vote(std::slice::from_ref(&voted)).unwrap(), voted);
        }
    }
}
