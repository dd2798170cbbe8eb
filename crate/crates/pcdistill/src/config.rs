//! Flat key-value configuration files.
//!
//! Format: one `key = value` per line, `#` starts a comment, blank lines
//! ignored. Unknown keys are errors so typos fail loudly. Ratio values
//! accept plain floats or fractions like `8/9`. The full key list lives in
//! docs/CONFIG.md.

use crate::compress::CompressorKind;
use crate::distill::{DistillConfig, Mode};
use crate::error::{Error, Result};
use crate::harness::matrix::ExperimentConfig;
use crate::harness::task::TaskConfig;
use crate::model::ModelConfig;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got \"{raw}\"", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key \"{key}\"")));
            }
        }
        Ok(KvConfig { map, used: BTreeSet::new() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn get<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *target = v
                .parse::<T>()
                .map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?;
        }
        Ok(())
    }

    fn get_ratio(&mut self, key: &str, target: &mut f64) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *target = parse_ratio(&v).map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?;
        }
        Ok(())
    }

    fn get_list<T: FromStr>(&mut self, key: &str, target: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *target = v
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?;
        }
        Ok(())
    }

    fn get_ratio_list(&mut self, key: &str, target: &mut Vec<f64>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *target = v
                .split(',')
                .map(|s| parse_ratio(s.trim()))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?;
        }
        Ok(())
    }

    fn get_opt_f64(&mut self, key: &str, target: &mut Option<f64>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            if v == "none" {
                *target = None;
            } else {
                *target =
                    Some(parse_ratio(&v).map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?);
            }
        }
        Ok(())
    }

    fn get_opt_usize(&mut self, key: &str, target: &mut Option<usize>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            if v == "none" {
                *target = None;
            } else {
                *target = Some(
                    v.parse::<usize>()
                        .map_err(|e| Error::Config(format!("key \"{key}\": {e}")))?,
                );
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

/// `"8/9"` or `"0.5"`.
fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|e| format!("{e}"))?;
        let d: f64 = den.trim().parse().map_err(|e| format!("{e}"))?;
        if d == 0.0 {
            return Err("division by zero".into());
        }
        Ok(n / d)
    } else {
        s.parse::<f64>().map_err(|e| format!("{e}"))
    }
}

/// Desk-scale defaults: the full experiment grid this crate is sized for.
pub fn default_experiment() -> ExperimentConfig {
    let task = TaskConfig::default();
    let model = ModelConfig::toy(0); // vocab resolved from the task
    let train = DistillConfig::default();
    ExperimentConfig {
        task,
        model,
        train,
        modes: vec![Mode::None, Mode::Direct, Mode::Tcd],
        train_compressor: CompressorKind::Redundancy,
        eval_compressors: vec![
            CompressorKind::Redundancy,
            CompressorKind::Random,
            CompressorKind::Importance,
        ],
        eval_ratios: vec![0.0, 0.5, 8.0 / 9.0],
        eval_layer: 2,
        eval_samples: 256,
        seeds: vec![1, 2, 3],
    }
}

/// Apply a config file on top of the defaults.
pub fn experiment_from_file(path: &Path) -> Result<ExperimentConfig> {
    let mut kv = KvConfig::load(path)?;
    let mut cfg = default_experiment();
    apply(&mut kv, &mut cfg)?;
    kv.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn experiment_from_text(text: &str) -> Result<ExperimentConfig> {
    let mut kv = KvConfig::parse(text)?;
    let mut cfg = default_experiment();
    apply(&mut kv, &mut cfg)?;
    kv.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply(kv: &mut KvConfig, cfg: &mut ExperimentConfig) -> Result<()> {
    kv.get("task.n_visual", &mut cfg.task.n_visual)?;
    kv.get("task.alphabet", &mut cfg.task.alphabet)?;
    kv.get("task.duplication", &mut cfg.task.duplication)?;
    kv.get("task.max_group", &mut cfg.task.max_group)?;
    kv.get("task.d_visual", &mut cfg.task.d_visual)?;
    kv.get("task.feature_noise", &mut cfg.task.feature_noise)?;
    kv.get("task.codebook_seed", &mut cfg.task.codebook_seed)?;

    kv.get("model.n_layers", &mut cfg.model.n_layers)?;
    kv.get("model.d_model", &mut cfg.model.d_model)?;
    kv.get("model.n_heads", &mut cfg.model.n_heads)?;
    kv.get("model.ffn_dim", &mut cfg.model.ffn_dim)?;
    kv.get("model.max_seq_len", &mut cfg.model.max_seq_len)?;

    kv.get("train.mode", &mut cfg.train.mode)?;
    kv.get("train.lambda", &mut cfg.train.lambda)?;
    kv.get("train.tau", &mut cfg.train.tau)?;
    kv.get("train.steps", &mut cfg.train.steps)?;
    kv.get("train.batch_size", &mut cfg.train.batch_size)?;
    kv.get("train.learning_rate", &mut cfg.train.learning_rate)?;
    kv.get("train.seed", &mut cfg.train.seed)?;
    kv.get("train.teacher_grad", &mut cfg.train.teacher_grad)?;
    kv.get_opt_f64("train.fixed_ratio", &mut cfg.train.fixed_ratio)?;
    kv.get_opt_usize("train.fixed_layer", &mut cfg.train.fixed_layer)?;

    kv.get_ratio("sched.eps", &mut cfg.train.eps)?;
    kv.get_ratio("sched.r_max_final", &mut cfg.train.r_max_final)?;
    kv.get_ratio("sched.r_min_final", &mut cfg.train.r_min_final)?;
    kv.get_ratio("sched.delta_min", &mut cfg.train.delta_min)?;
    kv.get_ratio("sched.delta_max", &mut cfg.train.delta_max)?;
    kv.get_ratio("sched.lcd_r_min", &mut cfg.train.lcd_r_min)?;
    kv.get_ratio("sched.lcd_r_max", &mut cfg.train.lcd_r_max)?;
    kv.get("sched.l_min", &mut cfg.train.l_min)?;
    kv.get("sched.tcd_layer", &mut cfg.train.tcd_layer)?;
    kv.get("sched.gap_global", &mut cfg.train.gap_global)?;

    kv.get_list("matrix.modes", &mut cfg.modes)?;
    kv.get("matrix.train_compressor", &mut cfg.train_compressor)?;
    kv.get_list("matrix.eval_compressors", &mut cfg.eval_compressors)?;
    kv.get_ratio_list("matrix.eval_ratios", &mut cfg.eval_ratios)?;
    kv.get("matrix.eval_layer", &mut cfg.eval_layer)?;
    kv.get("matrix.eval_samples", &mut cfg.eval_samples)?;
    kv.get_list("matrix.seeds", &mut cfg.seeds)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = experiment_from_text(
            "# overrides\n\
             train.mode = direct\n\
             train.steps = 42\n\
             matrix.eval_ratios = 0, 0.5, 8/9\n\
             matrix.seeds = 5,6\n",
        )
        .unwrap();
        assert_eq!(cfg.train.mode, Mode::Direct);
        assert_eq!(cfg.train.steps, 42);
        assert_eq!(cfg.eval_ratios, vec![0.0, 0.5, 8.0 / 9.0]);
        assert_eq!(cfg.seeds, vec![5, 6]);
        // untouched defaults survive
        assert_eq!(cfg.train.lambda, 0.7);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = experiment_from_text("train.stepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("train.stepz"));
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(experiment_from_text("not a key value line\n").is_err());
        assert!(experiment_from_text("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn fraction_ratios() {
        assert_eq!(parse_ratio("8/9").unwrap(), 8.0 / 9.0);
        assert_eq!(parse_ratio("0.25").unwrap(), 0.25);
        assert!(parse_ratio("1/0").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = experiment_from_text("\n# full comment\ntrain.steps = 7 # trailing\n\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
    }
}
