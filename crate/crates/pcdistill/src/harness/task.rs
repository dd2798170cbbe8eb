//! Synthetic multimodal grid task.
//!
//! Each sample is a grid of visual tokens carrying (position, categorical
//! value) pairs, plus a single-token-answer query that is only answerable
//! from the grid: either "which value sits at (row, col)?" or "how many
//! tokens carry value v?". The duplication rate controls how many tokens
//! share a value with another token, which is exactly the redundancy a
//! DART-style compressor can exploit.

use crate::distill::BatchSource;
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Text layout: [query-type, arg1, arg2, SEP, answer].
pub const TEXT_LEN: usize = 5;

const POS_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_visual: usize,
    /// Distinct categorical values; must cover `n_visual` so a
    /// zero-duplication grid can give every token a unique value.
    pub alphabet: usize,
    /// Fraction of visual tokens that share their value with at least one
    /// other token.
    pub duplication: f64,
    /// Largest duplicate-group size the generator aims for (may exceed by
    /// one when absorbing a leftover token).
    pub max_group: usize,
    pub d_visual: usize,
    pub feature_noise: f64,
    /// Seeds the fixed value/position codebooks shared by all samples.
    pub codebook_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_visual: 64,
            alphabet: 64,
            duplication: 0.5,
            max_group: 5,
            d_visual: 16,
            feature_noise: 0.02,
            codebook_seed: 7777,
        }
    }
}

/// Token-id layout of the task vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVocab {
    alphabet: usize,
    pub max_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TaskVocab {
    pub fn value_token(&self, v: usize) -> usize {
        debug_assert!(v < self.alphabet);
        v
    }

    pub fn count_token(&self, c: usize) -> usize {
        debug_assert!(c <= self.max_count);
        self.alphabet + c
    }

    pub fn row_token(&self, r: usize) -> usize {
        self.alphabet + self.max_count + 1 + r
    }

    pub fn col_token(&self, c: usize) -> usize {
        self.alphabet + self.max_count + 1 + self.grid_rows + c
    }

    pub fn q_value(&self) -> usize {
        self.alphabet + self.max_count + 1 + self.grid_rows + self.grid_cols
    }

    pub fn q_count(&self) -> usize {
        self.q_value() + 1
    }

    pub fn sep(&self) -> usize {
        self.q_value() + 2
    }

    pub fn pad(&self) -> usize {
        self.q_value() + 3
    }

    pub fn size(&self) -> usize {
        self.q_value() + 4
    }

    /// Tokens that can appear as answers: every value token plus the
    /// nonzero count tokens.
    pub fn answer_tokens(&self) -> Vec<usize> {
        let mut t: Vec<usize> = (0..self.alphabet).collect();
        t.extend((1..=self.max_count).map(|c| self.count_token(c)));
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    ValueAt { pos: usize },
    CountOf { value: usize },
}

/// A fully materialized sample: the grid the features encode, the query,
/// and the token sequence the model sees.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: Vec<usize>,
    pub query: Query,
    pub answer_token: usize,
    pub seq: TokenSequence,
}

pub struct SyntheticTask {
    pub cfg: TaskConfig,
    pub vocab: TaskVocab,
    value_basis: Vec<f64>,
    pos_basis: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        if cfg.n_visual == 0 {
            return Err(Error::Config("n_visual must be positive".into()));
        }
        if cfg.alphabet < cfg.n_visual {
            return Err(Error::Config(format!(
                "alphabet {} cannot uniquely label {} tokens at zero duplication",
                cfg.alphabet, cfg.n_visual
            )));
        }
        if !(0.0..=1.0).contains(&cfg.duplication) {
            return Err(Error::Config("duplication must lie in [0,1]".into()));
        }
        if cfg.max_group < 2 {
            return Err(Error::Config("max_group must be at least 2".into()));
        }
        let grid_cols = (cfg.n_visual as f64).sqrt().ceil() as usize;
        let grid_rows = cfg.n_visual.div_ceil(grid_cols);
        let vocab = TaskVocab {
            alphabet: cfg.alphabet,
            max_count: cfg.max_group + 1,
            grid_rows,
            grid_cols,
        };
        let mut code_rng: StdRng = rand::SeedableRng::seed_from_u64(cfg.codebook_seed);
        let dist = Normal::new(0.0, 1.0).expect("valid normal");
        let value_basis: Vec<f64> =
            (0..cfg.alphabet * cfg.d_visual).map(|_| dist.sample(&mut code_rng)).collect();
        let pos_basis: Vec<f64> =
            (0..cfg.n_visual * cfg.d_visual).map(|_| dist.sample(&mut code_rng)).collect();
        Ok(SyntheticTask { cfg, vocab, value_basis, pos_basis })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Draw a grid: duplicate groups covering ~`duplication * n` tokens,
    /// singleton values everywhere else, positions shuffled.
    fn gen_grid(&self, rng: &mut StdRng) -> Vec<usize> {
        let n = self.cfg.n_visual;
        let target = (self.cfg.duplication * n as f64).round() as usize;
        let mut sizes: Vec<usize> = Vec::new();
        if target >= 2 {
            let mut remaining = target;
            while remaining >= 2 {
                let s = rng.random_range(2..=self.cfg.max_group.min(remaining));
                sizes.push(s);
                remaining -= s;
            }
            if remaining == 1 {
                // absorb the leftover into the last group
                *sizes.last_mut().unwrap() += 1;
            }
        }
        let n_dup: usize = sizes.iter().sum();
        let n_single = n - n_dup;

        let needed = sizes.len() + n_single;
        let chosen = rand::seq::index::sample(rng, self.cfg.alphabet, needed).into_vec();
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(rng);

        let mut grid = vec![0usize; n];
        let mut cursor = 0;
        for (g, &size) in sizes.iter().enumerate() {
            for _ in 0..size {
                grid[positions[cursor]] = chosen[g];
                cursor += 1;
            }
        }
        for s in 0..n_single {
            grid[positions[cursor]] = chosen[sizes.len() + s];
            cursor += 1;
        }
        grid
    }

    fn gen_query(&self, grid: &[usize], want_count: bool, rng: &mut StdRng) -> Query {
        if want_count {
            // choose a count uniformly among those present, then a value
            // with that count, keeping the answer marginal flat
            let mut by_value: std::collections::BTreeMap<usize, usize> = Default::default();
            for &v in grid {
                *by_value.entry(v).or_insert(0) += 1;
            }
            let mut counts: Vec<usize> = by_value.values().copied().collect();
            counts.sort_unstable();
            counts.dedup();
            let c = counts[rng.random_range(0..counts.len())];
            let candidates: Vec<usize> =
                by_value.iter().filter(|(_, &k)| k == c).map(|(&v, _)| v).collect();
            Query::CountOf { value: candidates[rng.random_range(0..candidates.len())] }
        } else {
            Query::ValueAt { pos: rng.random_range(0..grid.len()) }
        }
    }

    /// Ground-truth answer derived symbolically from the grid.
    pub fn oracle_answer(&self, grid: &[usize], query: &Query) -> usize {
        match *query {
            Query::ValueAt { pos } => self.vocab.value_token(grid[pos]),
            Query::CountOf { value } => {
                let c = grid.iter().filter(|&&v| v == value).count();
                self.vocab.count_token(c.min(self.vocab.max_count))
            }
        }
    }

    fn text_tokens(&self, query: &Query, answer: usize) -> Vec<usize> {
        let v = &self.vocab;
        match *query {
            Query::ValueAt { pos } => vec![
                v.q_value(),
                v.row_token(pos / v.grid_cols),
                v.col_token(pos % v.grid_cols),
                v.sep(),
                answer,
            ],
            Query::CountOf { value } => {
                vec![v.q_count(), v.value_token(value), v.pad(), v.sep(), answer]
            }
        }
    }

    fn features(&self, grid: &[usize], rng: &mut StdRng) -> Result<Tensor> {
        let d = self.cfg.d_visual;
        let dist = Normal::new(0.0, self.cfg.feature_noise).expect("valid normal");
        let mut data = Vec::with_capacity(grid.len() * d);
        for (pos, &val) in grid.iter().enumerate() {
            for j in 0..d {
                let base = self.value_basis[val * d + j] + POS_SCALE * self.pos_basis[pos * d + j];
                data.push(base + dist.sample(rng));
            }
        }
        Ok(Tensor::new(vec![grid.len(), d], data)?)
    }

    pub fn sample(&self, want_count: bool, rng: &mut StdRng) -> Result<Sample> {
        let grid = self.gen_grid(rng);
        let query = self.gen_query(&grid, want_count, rng);
        let answer_token = self.oracle_answer(&grid, &query);
        let features = self.features(&grid, rng)?;
        let n = self.cfg.n_visual;
        let seq = TokenSequence::new(
            features,
            self.text_tokens(&query, answer_token),
            n + TEXT_LEN - 1..n + TEXT_LEN,
        )?;
        Ok(Sample { grid, query, answer_token, seq })
    }

    pub fn sample_batch(&self, size: usize, rng: &mut StdRng) -> Result<Vec<Sample>> {
        (0..size).map(|i| self.sample(i % 2 == 1, rng)).collect()
    }

    /// Best accuracy any input-independent predictor can reach: the largest
    /// component of the answer-token marginal, estimated symbolically.
    pub fn chance_level(&self, n_samples: usize, rng: &mut StdRng) -> f64 {
        let mut counts = vec![0usize; self.vocab.size()];
        for i in 0..n_samples {
            let grid = self.gen_grid(rng);
            let query = self.gen_query(&grid, i % 2 == 1, rng);
            counts[self.oracle_answer(&grid, &query)] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / n_samples as f64
    }
}

impl BatchSource for SyntheticTask {
    fn batch(&self, size: usize, rng: &mut StdRng) -> Result<Vec<TokenSequence>> {
        Ok(self.sample_batch(size, rng)?.into_iter().map(|s| s.seq).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig::default()).unwrap()
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let t = task();
        let a = t.sample_batch(8, &mut StdRng::seed_from_u64(5)).unwrap();
        let b = t.sample_batch(8, &mut StdRng::seed_from_u64(5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.grid, y.grid);
            assert_eq!(x.seq.text_tokens, y.seq.text_tokens);
            assert_eq!(x.seq.visual_features.data, y.seq.visual_features.data);
        }
    }

    #[test]
    fn duplication_rate_is_honored() {
        for dup in [0.0, 0.5, 0.9] {
            let t = SyntheticTask::new(TaskConfig { duplication: dup, ..Default::default() }).unwrap();
            let mut rng = StdRng::seed_from_u64(1);
            for _ in 0..50 {
                let grid = t.gen_grid(&mut rng);
                let mut counts = std::collections::HashMap::new();
                for &v in &grid {
                    *counts.entry(v).or_insert(0usize) += 1;
                }
                let shared = grid.iter().filter(|v| counts[v] >= 2).count();
                let target = (dup * 64.0).round() as usize;
                assert!(shared >= target, "dup {dup}: shared {shared} < {target}");
                // loose upper bound: leftover absorption adds at most one
                assert!(shared <= target + 1 || target < 2);
            }
        }
    }

    #[test]
    fn labels_match_symbolic_oracle() {
        let t = task();
        let mut rng = StdRng::seed_from_u64(9);
        for s in t.sample_batch(64, &mut rng).unwrap() {
            assert_eq!(s.answer_token, t.oracle_answer(&s.grid, &s.query));
            assert_eq!(*s.seq.text_tokens.last().unwrap(), s.answer_token);
            assert!(s.answer_token < t.vocab_size());
        }
    }

    #[test]
    fn queries_are_balanced_and_well_formed() {
        let t = task();
        let mut rng = StdRng::seed_from_u64(10);
        let batch = t.sample_batch(32, &mut rng).unwrap();
        let n_count = batch.iter().filter(|s| matches!(s.query, Query::CountOf { .. })).count();
        assert_eq!(n_count, 16);
        for s in &batch {
            assert_eq!(s.seq.text_tokens.len(), TEXT_LEN);
            assert_eq!(s.seq.answer_span, 64 + TEXT_LEN - 1..64 + TEXT_LEN);
        }
    }

    #[test]
    fn chance_level_is_modest() {
        let t = task();
        let mut rng = StdRng::seed_from_u64(11);
        let chance = t.chance_level(4000, &mut rng);
        assert!(chance > 0.01 && chance < 0.35, "chance {chance}");
    }

    #[test]
    fn same_value_tokens_have_high_cosine_similarity() {
        let t = task();
        let mut rng = StdRng::seed_from_u64(12);
        let s = t.sample(false, &mut rng).unwrap();
        let d = t.cfg.d_visual;
        let feats = &s.seq.visual_features.data;
        let cos = |a: usize, b: usize| {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..d {
                dot += feats[a * d + j] * feats[b * d + j];
                na += feats[a * d + j] * feats[a * d + j];
                nb += feats[b * d + j] * feats[b * d + j];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let mut same_pairs = Vec::new();
        let mut diff_pairs = Vec::new();
        for a in 0..64 {
            for b in (a + 1)..64 {
                if s.grid[a] == s.grid[b] {
                    same_pairs.push(cos(a, b));
                } else {
                    diff_pairs.push(cos(a, b));
                }
            }
        }
        if same_pairs.is_empty() {
            return;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same_pairs) > mean(&diff_pairs) + 0.3);
    }

    #[test]
    fn rejects_small_alphabet() {
        assert!(SyntheticTask::new(TaskConfig { alphabet: 32, ..Default::default() }).is_err());
    }
}
