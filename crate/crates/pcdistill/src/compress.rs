//! Plug-and-play visual-token compression operators.
//!
//! Every operator maps (inputs, ratio) to an order-preserving retention
//! mask with exactly `keep_count(n, r)` indices, so the model can swap
//! operators without any shape contract changing. The ratio `r` is the
//! fraction of visual tokens REMOVED; `1 - r` is retained.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Requested compression: remove fraction `ratio` of visual tokens at the
/// input to transformer layer `layer` (1-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRequest {
    pub ratio: f64,
    pub layer: usize,
}

impl CompressionRequest {
    pub fn new(ratio: f64, layer: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Compress(format!("ratio {ratio} outside [0, 1]")));
        }
        if layer == 0 {
            return Err(Error::Compress("layer index is 1-based".into()));
        }
        Ok(CompressionRequest { ratio, layer })
    }
}

/// Strictly increasing visual-token indices that survive compression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionMask {
    pub kept_indices: Vec<usize>,
    pub original_count: usize,
}

impl RetentionMask {
    fn from_sorted(kept_indices: Vec<usize>, original_count: usize) -> Self {
        debug_assert!(kept_indices.windows(2).all(|w| w[0] < w[1]));
        RetentionMask { kept_indices, original_count }
    }

    pub fn kept(&self) -> usize {
        self.kept_indices.len()
    }
}

/// A compression request together with the mask it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEvent {
    pub request: CompressionRequest,
    pub mask: RetentionMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressorKind {
    Random,
    Importance,
    Redundancy,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 3] =
        [CompressorKind::Random, CompressorKind::Importance, CompressorKind::Redundancy];

    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::Random => "random",
            CompressorKind::Importance => "importance",
            CompressorKind::Redundancy => "redundancy",
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CompressorKind::Random),
            "importance" => Ok(CompressorKind::Importance),
            "redundancy" => Ok(CompressorKind::Redundancy),
            other => Err(Error::Compress(format!("unknown compressor \"{other}\""))),
        }
    }
}

/// Number of tokens retained at removal ratio `r`:
/// `max(1, round_half_away_from_zero(n * (1 - r)))`, capped at `n`.
pub fn keep_count(n: usize, r: f64) -> usize {
    debug_assert!(n >= 1);
    let kept = (n as f64 * (1.0 - r)).round() as usize;
    kept.clamp(1, n)
}

/// Uniform sample without replacement, sorted ascending.
pub fn random_select(n: usize, r: f64, rng: &mut StdRng) -> RetentionMask {
    let k = keep_count(n, r);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    RetentionMask::from_sorted(idx, n)
}

/// FastV-style importance selection. Scores each visual token by the mean
/// attention it receives from all text-token queries, averaged over heads,
/// then keeps the top `keep_count` (ties toward lower index).
///
/// `attn` holds the previous layer's attention probabilities with shape
/// `[heads, seq, seq]`; `visual` and `text` identify key columns / query
/// rows in that sequence.
pub fn importance_select(
    attn: &Tensor,
    visual: std::ops::Range<usize>,
    text: std::ops::Range<usize>,
    r: f64,
) -> Result<RetentionMask> {
    if attn.shape.len() != 3 || attn.shape[1] != attn.shape[2] {
        return Err(Error::Compress(format!(
            "attention maps must be [heads, seq, seq], got {:?}",
            attn.shape
        )));
    }
    let (heads, seq) = (attn.shape[0], attn.shape[1]);
    if visual.end > seq || text.end > seq || text.is_empty() || visual.is_empty() {
        return Err(Error::Compress("visual/text ranges out of bounds".into()));
    }
    let n = visual.len();
    let mut scores = vec![0.0f64; n];
    for h in 0..heads {
        let base = h * seq * seq;
        for q in text.clone() {
            let row = &attn.data[base + q * seq..base + (q + 1) * seq];
            for (s, j) in scores.iter_mut().zip(visual.clone()) {
                *s += row[j];
            }
        }
    }
    let denom = (heads * text.len()) as f64;
    scores.iter_mut().for_each(|s| *s /= denom);
    Ok(top_k_mask(&scores, keep_count(n, r), n))
}

/// DART-style redundancy selection. Samples `pivots` pivot tokens, scores
/// every other token by its maximum cosine similarity to any pivot (higher
/// means more duplicated), and keeps the pivots plus the least-duplicated
/// remainder.
pub fn redundancy_select(
    hidden: &Tensor,
    r: f64,
    pivots: usize,
    rng: &mut StdRng,
) -> Result<RetentionMask> {
    if hidden.shape.len() != 2 {
        return Err(Error::Compress(format!(
            "hidden states must be [n, d], got {:?}",
            hidden.shape
        )));
    }
    let (n, d) = (hidden.shape[0], hidden.shape[1]);
    if n == 0 {
        return Err(Error::Compress("no visual tokens to compress".into()));
    }
    let k = keep_count(n, r);
    let p = pivots.min(n);
    let mut pivot_idx = sample(rng, n, p).into_vec();
    pivot_idx.sort_unstable();

    if k <= p {
        return Ok(RetentionMask::from_sorted(pivot_idx[..k].to_vec(), n));
    }

    let row = |i: usize| &hidden.data[i * d..(i + 1) * d];
    let norms: Vec<f64> = (0..n).map(|i| row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let cosine = |a: usize, b: usize| -> f64 {
        if norms[a] == 0.0 || norms[b] == 0.0 {
            return 0.0;
        }
        let dot: f64 = row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum();
        dot / (norms[a] * norms[b])
    };

    let is_pivot = {
        let mut mask = vec![false; n];
        for &i in &pivot_idx {
            mask[i] = true;
        }
        mask
    };
    // Duplication score: max cosine similarity to any pivot. Keep the
    // lowest-scoring non-pivots, ties toward lower index.
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&i| !is_pivot[i])
        .map(|i| {
            let s = pivot_idx
                .iter()
                .map(|&pi| cosine(i, pi))
                .fold(f64::NEG_INFINITY, f64::max);
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut kept = pivot_idx;
    kept.extend(scored.iter().take(k - p).map(|&(_, i)| i));
    kept.sort_unstable();
    Ok(RetentionMask::from_sorted(kept, n))
}

/// Top-k by score, ties toward lower index, output sorted ascending.
fn top_k_mask(scores: &[f64], k: usize, n: usize) -> RetentionMask {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    RetentionMask::from_sorted(kept, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn keep_count_reference_points() {
        assert_eq!(keep_count(576, 8.0 / 9.0), 64);
        assert_eq!(keep_count(576, 0.0), 576);
        assert_eq!(keep_count(10, 0.99), 1);
        assert_eq!(keep_count(1, 1.0), 1);
        // round half away from zero: 5 * 0.5 = 2.5 -> 3 kept
        assert_eq!(keep_count(5, 0.5), 3);
    }

    #[test]
    fn random_select_identity_and_determinism() {
        let mut rng = StdRng::seed_from_u64(11);
        let m = random_select(8, 0.0, &mut rng);
        assert_eq!(m.kept_indices, (0..8).collect::<Vec<_>>());

        let a = random_select(20, 0.6, &mut StdRng::seed_from_u64(5));
        let b = random_select(20, 0.6, &mut StdRng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn random_select_is_roughly_uniform() {
        let mut rng = StdRng::seed_from_u64(2024);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for i in random_select(10, 0.5, &mut rng).kept_indices {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
        }
    }

    fn attn_tensor(heads: usize, seq: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![heads, seq, seq], data).unwrap()
    }

    #[test]
    fn importance_uniform_attention_breaks_ties_low() {
        // 1 head, 6 positions: 4 visual + 2 text, uniform attention.
        let seq = 6;
        let attn = attn_tensor(1, seq, vec![1.0 / seq as f64; seq * seq]);
        let m = importance_select(&attn, 0..4, 4..6, 0.5).unwrap();
        assert_eq!(m.kept_indices, vec![0, 1]);
    }

    #[test]
    fn importance_argmax_token_survives() {
        let seq = 5; // 4 visual + 1 text
        let mut data = vec![0.0; seq * seq];
        // text query (row 4) puts all attention on visual key 2
        data[4 * seq + 2] = 1.0;
        let attn = attn_tensor(1, seq, data);
        let m = importance_select(&attn, 0..4, 4..5, 0.75).unwrap();
        assert_eq!(m.kept_indices, vec![2]);
    }

    #[test]
    fn importance_matches_brute_force_top_k() {
        // strictly decreasing scores by index -> first k kept
        let seq = 7; // 5 visual + 2 text
        let mut data = vec![0.0; seq * seq];
        for q in 5..7 {
            for j in 0..5 {
                data[q * seq + j] = (5 - j) as f64 / 20.0;
            }
        }
        let attn = attn_tensor(1, seq, data);
        let m = importance_select(&attn, 0..5, 5..7, 0.4).unwrap();
        assert_eq!(m.kept_indices, vec![0, 1, 2]);
    }

    #[test]
    fn redundancy_orthogonal_token_survives() {
        // 6 tokens in R^3: token 5 orthogonal to everything else.
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&[1.0, 0.0, 0.0]);
        }
        data.extend_from_slice(&[0.0, 1.0, 0.0]);
        let hidden = Tensor::new(vec![6, 3], data).unwrap();
        // keep_count = p + 1 with p = 2 pivots
        let r = 1.0 - 3.0 / 6.0;
        let mut rng = StdRng::seed_from_u64(0);
        let m = redundancy_select(&hidden, r, 2, &mut rng).unwrap();
        assert_eq!(m.kept(), 3);
        // pivots are duplicates of token 5's complement; the orthogonal token
        // has cosine 0 vs pivot cosine 1, so it must be among the kept
        // unless it was itself sampled as a pivot (still kept).
        assert!(m.kept_indices.contains(&5));
    }

    #[test]
    fn redundancy_degenerate_identical_rows_keeps_count() {
        let hidden = Tensor::new(vec![8, 2], vec![0.5; 16]).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let m = redundancy_select(&hidden, 0.5, 3, &mut rng).unwrap();
        assert_eq!(m.kept(), keep_count(8, 0.5));
        assert!(m.kept_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn redundancy_r_zero_keeps_all() {
        let hidden = Tensor::new(vec![5, 2], vec![1.0; 10]).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let m = redundancy_select(&hidden, 0.0, 8, &mut rng).unwrap();
        assert_eq!(m.kept_indices, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn redundancy_fewer_keeps_than_pivots() {
        let hidden = Tensor::new(vec![10, 2], vec![1.0; 20]).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let m = redundancy_select(&hidden, 0.9, 8, &mut rng).unwrap();
        assert_eq!(m.kept(), 1);
    }

    #[test]
    fn compressor_kind_parsing() {
        assert_eq!("random".parse::<CompressorKind>().unwrap(), CompressorKind::Random);
        assert_eq!("importance".parse::<CompressorKind>().unwrap(), CompressorKind::Importance);
        assert_eq!("redundancy".parse::<CompressorKind>().unwrap(), CompressorKind::Redundancy);
        assert!("merge".parse::<CompressorKind>().is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1024))]

        /// Count contract: every operator returns exactly keep_count indices,
        /// strictly increasing, for any n and ratio on a 0.01 grid.
        #[test]
        fn count_and_order_contract(n in 1usize..=1024, r_pct in 0usize..=100, seed in 0u64..1000) {
            let r = r_pct as f64 / 100.0;
            let k = keep_count(n, r);
            prop_assert!(k >= 1 && k <= n);

            let mut rng = StdRng::seed_from_u64(seed);
            let m = random_select(n, r, &mut rng);
            prop_assert_eq!(m.kept(), k);
            prop_assert!(m.kept_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.kept_indices.iter().all(|&i| i < n));
        }

        #[test]
        fn redundancy_count_contract(n in 1usize..=64, r_pct in 0usize..=100, seed in 0u64..500) {
            let r = r_pct as f64 / 100.0;
            let mut data = Vec::with_capacity(n * 3);
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            for _ in 0..n * 3 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                data.push(((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
            }
            let hidden = Tensor::new(vec![n, 3], data).unwrap();
            let mut rng = StdRng::seed_from_u64(seed);
            let m = redundancy_select(&hidden, r, 8, &mut rng).unwrap();
            prop_assert_eq!(m.kept(), keep_count(n, r));
            prop_assert!(m.kept_indices.windows(2).all(|w| w[0] < w[1]));
        }

        /// Determinism: identical inputs and seed give identical masks.
        #[test]
        fn determinism_contract(n in 1usize..=128, r_pct in 0usize..=100, seed in 0u64..1000) {
            let r = r_pct as f64 / 100.0;
            let a = random_select(n, r, &mut StdRng::seed_from_u64(seed));
            let b = random_select(n, r, &mut StdRng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }
    }
}
