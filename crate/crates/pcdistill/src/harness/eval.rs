//! Greedy exact-match evaluation under inference-time compression.

use crate::compress::{keep_count, CompressorKind};
use crate::error::Result;
use crate::harness::task::SyntheticTask;
use crate::model::{forward, predict_answer, ForwardRequest, ModelConfig, Params};
use crate::tensor::Tape;
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub compressor: CompressorKind,
    pub ratio: f64,
    pub retained: usize,
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// Exact-match accuracy of greedy answer decoding over `n_samples` fresh
/// held-out queries at the given inference-time compression.
pub fn evaluate(
    model_cfg: &ModelConfig,
    params: &Params,
    task: &SyntheticTask,
    compressor: CompressorKind,
    ratio: f64,
    layer: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng: StdRng = rand::SeedableRng::seed_from_u64(seed);
    let req = ForwardRequest::compressed(compressor, ratio, layer)?;
    let mut n_correct = 0;
    for sample in task.sample_batch(n_samples, &mut rng)? {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false)?;
        let out = forward(model_cfg, &mut tape, &vars, &sample.seq, &req, &mut rng)?;
        if predict_answer(&out, &sample.seq)? == sample.answer_token {
            n_correct += 1;
        }
    }
    Ok(EvalResult {
        compressor,
        ratio,
        retained: keep_count(task.cfg.n_visual, ratio),
        n_samples,
        n_correct,
        accuracy: n_correct as f64 / n_samples as f64,
        seed,
    })
}
