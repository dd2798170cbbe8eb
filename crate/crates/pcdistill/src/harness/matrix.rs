//! Experiment orchestration: train across (mode, seed) cells, evaluate each
//! checkpoint across (compressor, ratio) pairs, and emit long-format CSV
//! plus a JSON summary with per-group means over seeds.
//!
//! Cells are independent; they run in parallel with per-cell rng streams
//! and per-cell output directories, and the aggregator merges rows by
//! sorted cell key so the emitted files are byte-stable for a fixed
//! configuration.

use crate::compress::CompressorKind;
use crate::distill::{train_run, DistillConfig, Mode};
use crate::error::{Error, Result};
use crate::harness::eval::evaluate;
use crate::harness::stats::{mean, stddev};
use crate::harness::task::{SyntheticTask, TaskConfig, TEXT_LEN};
use crate::model::ModelConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: DistillConfig,
    pub modes: Vec<Mode>,
    pub train_compressor: CompressorKind,
    pub eval_compressors: Vec<CompressorKind>,
    pub eval_ratios: Vec<f64>,
    pub eval_layer: usize,
    pub eval_samples: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one mode and one seed".into()));
        }
        if self.eval_compressors.is_empty() || self.eval_ratios.is_empty() {
            return Err(Error::Config("need at least one eval compressor and ratio".into()));
        }
        if self.eval_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("eval ratios must lie in [0,1]".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        self.train.validate()
    }

    /// Model config aligned with the task: vocabulary and visual span come
    /// from the task definition.
    pub fn resolved_model(&self, task: &SyntheticTask) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = task.vocab_size();
        m.n_visual_tokens = task.cfg.n_visual;
        m.d_visual = task.cfg.d_visual;
        m.max_seq_len = m.max_seq_len.max(task.cfg.n_visual + TEXT_LEN);
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: Mode,
    pub train_compressor: CompressorKind,
    pub seed: u64,
    pub eval_compressor: CompressorKind,
    pub ratio: f64,
    pub retained: usize,
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mode: Mode,
    pub train_compressor: CompressorKind,
    pub eval_compressor: CompressorKind,
    pub ratio: f64,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixSummary {
    pub config_hash: String,
    pub version: String,
    pub chance_level: f64,
    pub groups: Vec<GroupSummary>,
}

pub struct MatrixOutput {
    pub rows: Vec<ResultRow>,
    pub summary: MatrixSummary,
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// FNV-1a over the canonical JSON encoding of the configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// SplitMix64 finalizer; derives independent per-cell rng streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn run_matrix(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MatrixOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let hash = config_hash(cfg);
    let version = env!("CARGO_PKG_VERSION").to_string();

    let task = SyntheticTask::new(cfg.task.clone())?;
    let model_cfg = cfg.resolved_model(&task);
    model_cfg.validate()?;
    let mut chance_rng: rand::rngs::StdRng = rand::SeedableRng::seed_from_u64(mix_seed(0xC0FFEE, 1));
    let chance_level = task.chance_level(20_000, &mut chance_rng);

    let cells: Vec<(Mode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();

    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(mode, seed)| -> Result<Vec<ResultRow>> {
            let run_dir = out_dir
                .join("runs")
                .join(format!("{}_{}_s{}", mode, cfg.train_compressor, seed));
            let dcfg = DistillConfig {
                mode,
                seed,
                train_compressor: cfg.train_compressor,
                ..cfg.train.clone()
            };
            let artifact = train_run(&task, &model_cfg, &dcfg, &run_dir)?;
            let mut rows = Vec::new();
            for (ci, &ec) in cfg.eval_compressors.iter().enumerate() {
                for (ri, &ratio) in cfg.eval_ratios.iter().enumerate() {
                    let eval_seed = mix_seed(seed, (ci as u64) << 32 | ri as u64 | 0x5EED_0000_0000);
                    let r = evaluate(
                        &model_cfg,
                        &artifact.params,
                        &task,
                        ec,
                        ratio,
                        cfg.eval_layer,
                        cfg.eval_samples,
                        eval_seed,
                    )?;
                    rows.push(ResultRow {
                        mode,
                        train_compressor: cfg.train_compressor,
                        seed,
                        eval_compressor: ec,
                        ratio,
                        retained: r.retained,
                        n_samples: r.n_samples,
                        n_correct: r.n_correct,
                        accuracy: r.accuracy,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<ResultRow> = per_cell.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (a.mode.name(), a.seed, a.eval_compressor.name())
            .cmp(&(b.mode.name(), b.seed, b.eval_compressor.name()))
            .then(a.ratio.partial_cmp(&b.ratio).unwrap())
    });

    // group means over seeds
    let mut groups: Vec<GroupSummary> = Vec::new();
    for &mode in &cfg.modes {
        for &ec in &cfg.eval_compressors {
            for &ratio in &cfg.eval_ratios {
                let accs: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.mode == mode && r.eval_compressor == ec && r.ratio == ratio)
                    .map(|r| r.accuracy)
                    .collect();
                groups.push(GroupSummary {
                    mode,
                    train_compressor: cfg.train_compressor,
                    eval_compressor: ec,
                    ratio,
                    n_seeds: accs.len(),
                    mean_accuracy: mean(&accs),
                    std_accuracy: stddev(&accs),
                });
            }
        }
    }

    let results_csv = out_dir.join("results.csv");
    write_results_csv(&rows, &hash, &version, &results_csv)?;
    let summary = MatrixSummary { config_hash: hash, version, chance_level, groups };
    let summary_json = out_dir.join("summary.json");
    std::fs::write(
        &summary_json,
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    Ok(MatrixOutput { rows, summary, results_csv, summary_json })
}

fn write_results_csv(rows: &[ResultRow], hash: &str, version: &str, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "mode,train_compressor,seed,eval_compressor,ratio,retained,n_samples,n_correct,accuracy,config_hash,version"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.train_compressor,
            r.seed,
            r.eval_compressor,
            r.ratio,
            r.retained,
            r.n_samples,
            r.n_correct,
            r.accuracy,
            hash,
            version
        )?;
    }
    Ok(())
}

/// Compact matrix configuration used by smoke tests and the determinism
/// acceptance check.
pub fn small_matrix_config() -> ExperimentConfig {
    let task = TaskConfig { n_visual: 16, alphabet: 16, max_group: 3, ..Default::default() };
    let model = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        vocab_size: 0, // resolved from the task
        n_visual_tokens: 16,
        d_visual: 16,
        max_seq_len: 24,
    };
    let train = DistillConfig {
        steps: 12,
        batch_size: 2,
        train_compressor: CompressorKind::Random,
        ..Default::default()
    };
    ExperimentConfig {
        task,
        model,
        train,
        modes: vec![Mode::None, Mode::Tcd],
        train_compressor: CompressorKind::Random,
        eval_compressors: vec![CompressorKind::Random],
        eval_ratios: vec![0.0, 8.0 / 9.0],
        eval_layer: 2,
        eval_samples: 16,
        seeds: vec![1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_emits_expected_cell_grid() {
        let mut cfg = small_matrix_config();
        cfg.seeds = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();
        let out = run_matrix(&cfg, dir.path()).unwrap();
        // modes x seeds x eval_compressors x ratios
        assert_eq!(out.rows.len(), 2 * 2 * 1 * 2);
        assert!(out.results_csv.exists());
        assert!(out.summary_json.exists());
        assert_eq!(out.summary.groups.len(), 2 * 1 * 2);
        for g in &out.summary.groups {
            assert_eq!(g.n_seeds, 2);
        }
        // per-run artifacts exist
        assert!(dir.path().join("runs/none_random_s1/steps.csv").exists());
        assert!(dir.path().join("runs/tcd_random_s2/checkpoint.ckpt").exists());
    }

    #[test]
    fn identical_configs_reproduce_identical_csv() {
        let cfg = small_matrix_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_matrix(&cfg, d1.path()).unwrap();
        let b = run_matrix(&cfg, d2.path()).unwrap();
        assert_eq!(
            std::fs::read(&a.results_csv).unwrap(),
            std::fs::read(&b.results_csv).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.summary_json).unwrap(),
            std::fs::read(&b.summary_json).unwrap()
        );
    }

    #[test]
    fn retained_column_tracks_keep_count() {
        let cfg = small_matrix_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_matrix(&cfg, dir.path()).unwrap();
        for r in &out.rows {
            assert_eq!(r.retained, keep_count(cfg.task.n_visual, r.ratio));
        }
    }

    #[test]
    fn hash_is_config_sensitive() {
        let a = small_matrix_config();
        let mut b = small_matrix_config();
        b.eval_samples += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
