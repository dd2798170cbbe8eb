//! Toy multimodal causal transformer: visual-feature projector, learned
//! token/position embeddings, pre-norm self-attention blocks, LM head.
//!
//! Compression acts on hidden states at the input to layer `l` (1-indexed):
//! the retention mask drops visual rows only, text rows always survive, and
//! retained rows keep the positional embeddings they were given at the
//! input, so position ids are never recomputed after pruning.

use crate::compress::{
    importance_select, random_select, redundancy_select, CompressionEvent, CompressionRequest,
    CompressorKind,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

const LN_EPS: f64 = 1e-5;
const MASKED_LOGIT: f64 = -1e9;

/// Default pivot count for DART-style selection inside the model.
pub const REDUNDANCY_PIVOTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub n_visual_tokens: usize,
    pub d_visual: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size,
            n_visual_tokens: 64,
            d_visual: 16,
            max_seq_len: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.n_visual_tokens == 0 {
            return Err(Error::Model("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < self.n_visual_tokens + 1 {
            return Err(Error::Model("max_seq_len leaves no room for text".into()));
        }
        Ok(())
    }
}

/// Visual-span + text-span token layout entering the model. Visual tokens
/// occupy positions `[0, n)`, text tokens `[n, n + text_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub visual_features: Tensor,
    pub text_tokens: Vec<usize>,
    /// Absolute positions (within text span) whose tokens are the answer.
    pub answer_span: Range<usize>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(visual_features: Tensor, text_tokens: Vec<usize>, answer_span: Range<usize>) -> Result<Self> {
        if visual_features.shape.len() != 2 {
            return Err(Error::Model(format!(
                "visual features must be [n, d_v], got {:?}",
                visual_features.shape
            )));
        }
        let n = visual_features.shape[0];
        let total = n + text_tokens.len();
        if answer_span.start < n || answer_span.end > total || answer_span.start > answer_span.end {
            return Err(Error::Model(format!(
                "answer span {answer_span:?} outside text positions [{n}, {total})"
            )));
        }
        Ok(TokenSequence {
            visual_features,
            text_tokens,
            answer_span,
            positions: (0..total).collect(),
        })
    }

    pub fn n_visual(&self) -> usize {
        self.visual_features.shape[0]
    }

    pub fn len(&self) -> usize {
        self.n_visual() + self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn randn(rng: &mut StdRng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

/// All trainable state plus its configuration.
#[derive(Debug, Clone)]
pub struct Params {
    pub cfg: ModelConfig,
    pub proj_w1: Tensor,
    pub proj_b1: Tensor,
    pub proj_w2: Tensor,
    pub proj_b2: Tensor,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub head: Tensor,
}

impl Params {
    pub fn init(cfg: &ModelConfig, rng: &mut StdRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dv = cfg.d_visual;
        let ffn = cfg.ffn_dim;
        let v = cfg.vocab_size;
        let w = |rng: &mut StdRng, r: usize, c: usize| -> Result<Tensor> {
            Ok(Tensor::param(vec![r, c], randn(rng, r * c, 0.02))?)
        };
        let ones = |n: usize| -> Result<Tensor> { Ok(Tensor::param(vec![n], vec![1.0; n])?) };
        let zeros = |n: usize| -> Result<Tensor> { Ok(Tensor::param(vec![n], vec![0.0; n])?) };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        let proj_w1 = w(rng, dv, d)?;
        let proj_b1 = zeros(d)?;
        let proj_w2 = w(rng, d, d)?;
        let proj_b2 = zeros(d)?;
        let tok_embed = w(rng, v, d)?;
        let pos_embed = Tensor::param(vec![cfg.max_seq_len, d], randn(rng, cfg.max_seq_len * d, 0.01))?;
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_gain: ones(d)?,
                ln1_bias: zeros(d)?,
                wq: w(rng, d, d)?,
                wk: w(rng, d, d)?,
                wv: w(rng, d, d)?,
                wo: w(rng, d, d)?,
                ln2_gain: ones(d)?,
                ln2_bias: zeros(d)?,
                fc1: w(rng, d, ffn)?,
                fc1_bias: zeros(ffn)?,
                fc2: w(rng, ffn, d)?,
                fc2_bias: zeros(d)?,
            });
        }
        let ln_f_gain = ones(d)?;
        let ln_f_bias = zeros(d)?;
        let head = w(rng, d, v)?;
        Ok(Params {
            cfg: cfg.clone(),
            proj_w1,
            proj_b1,
            proj_w2,
            proj_b2,
            tok_embed,
            pos_embed,
            layers,
            ln_f_gain,
            ln_f_bias,
            head,
        })
    }

    /// Canonical (name, tensor) ordering shared by the optimizer and the
    /// checkpoint format.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("proj_w1".into(), &self.proj_w1),
            ("proj_b1".into(), &self.proj_b1),
            ("proj_w2".into(), &self.proj_w2),
            ("proj_b2".into(), &self.proj_b2),
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layer{i}.fc1"), &l.fc1));
            out.push((format!("layer{i}.fc1_bias"), &l.fc1_bias));
            out.push((format!("layer{i}.fc2"), &l.fc2));
            out.push((format!("layer{i}.fc2_bias"), &l.fc2_bias));
        }
        out.push(("ln_f_gain".into(), &self.ln_f_gain));
        out.push(("ln_f_bias".into(), &self.ln_f_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.proj_w1,
            &mut self.proj_b1,
            &mut self.proj_w2,
            &mut self.proj_b2,
            &mut self.tok_embed,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.fc1);
            out.push(&mut l.fc1_bias);
            out.push(&mut l.fc2);
            out.push(&mut l.fc2_bias);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.head);
        out
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.named()
            .iter()
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on a tape. With `trainable`, leaves keep
    /// their grad tracking; otherwise they enter as constants (the detached
    /// teacher pass).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut vars = Vec::new();
        for (_, t) in self.named() {
            let v = if trainable { tape.leaf(t)? } else { tape.constant(t)? };
            vars.push(v);
        }
        Ok(ParamVars { vars })
    }

    /// Pull gradients off a tape back into the parameter buffers.
    pub fn accumulate_from(&mut self, tape: &Tape, vars: &ParamVars) {
        let grads: Vec<Option<Vec<f64>>> = vars
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        for (t, g) in self.tensors_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(&g);
            }
        }
    }
}

/// Tape handles for one registration of [`Params`], in canonical order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn layer_base(layer: usize) -> usize {
        6 + layer * 12
    }
}

// Checkpoint format: magic, config JSON, then per tensor a name, shape and
// little-endian f64 payload. Byte-stable given identical parameters.
const CKPT_MAGIC: &[u8; 8] = b"PCDCKPT1";

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    let cfg = serde_json::to_vec(&params.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    f.write_all(&(cfg.len() as u32).to_le_bytes())?;
    f.write_all(&cfg)?;
    let named = params.named();
    f.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u32).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Params> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = read_u32(&mut f)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_buf)?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = read_u32(&mut f)? as usize;

    // Start from a zero-seeded skeleton, then overwrite every tensor.
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut params = Params::init(&cfg, &mut rng)?;
    let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {count} does not match config ({} expected)",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for want in &expected {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if &name != want {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
        }
        let ndim = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        loaded.push(Tensor::param(shape, data)?);
    }
    for (t, new) in params.tensors_mut().into_iter().zip(loaded) {
        if t.shape != new.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: stored {:?}, config expects {:?}",
                new.shape, t.shape
            )));
        }
        *t = new;
    }
    Ok(params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// What a forward pass should do beyond plain next-token prediction.
#[derive(Debug, Clone, Copy)]
pub struct ForwardRequest {
    pub compression: Option<CompressionRequest>,
    pub compressor: CompressorKind,
    /// Retain per-layer attention maps in the output.
    pub capture_attn: bool,
}

impl ForwardRequest {
    pub fn plain() -> Self {
        ForwardRequest { compression: None, compressor: CompressorKind::Random, capture_attn: false }
    }

    pub fn compressed(compressor: CompressorKind, ratio: f64, layer: usize) -> Result<Self> {
        Ok(ForwardRequest {
            compression: Some(CompressionRequest::new(ratio, layer)?),
            compressor,
            capture_attn: false,
        })
    }
}

pub struct ForwardOutput {
    /// Logits over the (possibly shortened) sequence, one row per position.
    pub logits: Tensor,
    pub logits_var: Var,
    pub retention: Option<CompressionEvent>,
    pub per_layer_attn: Option<Vec<Tensor>>,
    pub n_visual_original: usize,
    pub kept_visual: usize,
    text_len: usize,
}

impl ForwardOutput {
    /// Post-compression row of an original text position.
    pub fn text_row(&self, pos: usize) -> usize {
        debug_assert!(pos >= self.n_visual_original);
        debug_assert!(pos < self.n_visual_original + self.text_len);
        self.kept_visual + (pos - self.n_visual_original)
    }
}

/// Two-layer MLP projection of visual features into model width.
pub fn project_visual(tape: &mut Tape, params: &ParamVars, features: Var) -> Result<Var> {
    let h = tape.matmul(features, params.at(0))?;
    let h = tape.add_bias(h, params.at(1))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, params.at(2))?;
    Ok(tape.add_bias(h, params.at(3))?)
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASKED_LOGIT;
        }
    }
    Tensor { shape: vec![n, n], data, grad: None, requires_grad: false }
}

/// Run the transformer. Applies the requested compression at the input to
/// layer `l`; the mask source depends on the compressor kind (rng draw,
/// previous-layer attention, or current hidden states).
pub fn forward(
    cfg: &ModelConfig,
    tape: &mut Tape,
    params: &ParamVars,
    seq: &TokenSequence,
    req: &ForwardRequest,
    rng: &mut StdRng,
) -> Result<ForwardOutput> {
    let n_visual = seq.n_visual();
    let text_len = seq.text_tokens.len();
    if seq.visual_features.shape[1] != cfg.d_visual {
        return Err(Error::Model(format!(
            "visual feature dim {} does not match d_visual {}",
            seq.visual_features.shape[1], cfg.d_visual
        )));
    }
    if n_visual != cfg.n_visual_tokens {
        return Err(Error::Model(format!(
            "sequence carries {n_visual} visual tokens, model expects {}",
            cfg.n_visual_tokens
        )));
    }
    if seq.len() > cfg.max_seq_len {
        return Err(Error::Model(format!(
            "sequence length {} exceeds max_seq_len {}",
            seq.len(),
            cfg.max_seq_len
        )));
    }
    if seq.text_tokens.iter().any(|&t| t >= cfg.vocab_size) {
        return Err(Error::Model("text token outside vocabulary".into()));
    }
    if let Some(c) = &req.compression {
        if c.layer < 1 || c.layer > cfg.n_layers {
            return Err(Error::Model(format!(
                "compression layer {} outside [1, {}]",
                c.layer, cfg.n_layers
            )));
        }
        if req.compressor == CompressorKind::Importance && c.layer < 2 {
            return Err(Error::Model(
                "importance compression at layer 1 has no prior-layer attention".into(),
            ));
        }
    }

    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = d / heads;

    let features = tape.constant(&seq.visual_features)?;
    let e_v = project_visual(tape, params, features)?;
    let e_t = tape.embedding_lookup(params.at(4), &seq.text_tokens)?;
    let embedded = tape.concat_rows(&[e_v, e_t])?;
    let pos = tape.embedding_lookup(params.at(5), &seq.positions)?;
    let mut x = tape.add(embedded, pos)?;

    let mut retention: Option<CompressionEvent> = None;
    let mut captured: Vec<Tensor> = Vec::new();
    let mut last_attn: Option<Tensor> = None;
    let mut kept_visual = n_visual;

    for layer in 1..=cfg.n_layers {
        if let Some(creq) = &req.compression {
            if creq.layer == layer {
                let mask = match req.compressor {
                    CompressorKind::Random => random_select(n_visual, creq.ratio, rng),
                    CompressorKind::Importance => {
                        let attn = last_attn.as_ref().ok_or_else(|| {
                            Error::Model("importance compression missing attention maps".into())
                        })?;
                        importance_select(attn, 0..n_visual, n_visual..n_visual + text_len, creq.ratio)?
                    }
                    CompressorKind::Redundancy => {
                        let hidden = Tensor::new(
                            vec![n_visual, d],
                            tape.data(x)[..n_visual * d].to_vec(),
                        )?;
                        redundancy_select(&hidden, creq.ratio, REDUNDANCY_PIVOTS, rng)?
                    }
                };
                kept_visual = mask.kept();
                let mut keep_rows = mask.kept_indices.clone();
                keep_rows.extend(n_visual..n_visual + text_len);
                x = tape.select_rows(x, &keep_rows)?;
                retention = Some(CompressionEvent { request: *creq, mask });
            }
        }

        let n = kept_visual + text_len;
        let base = ParamVars::layer_base(layer - 1);
        let xn = tape.layer_norm(x, params.at(base), params.at(base + 1), LN_EPS)?;
        let q = tape.matmul(xn, params.at(base + 2))?;
        let k = tape.matmul(xn, params.at(base + 3))?;
        let v = tape.matmul(xn, params.at(base + 4))?;
        let mask = tape.constant(&causal_mask(n))?;

        let want_attn = req.capture_attn
            || matches!(
                &req.compression,
                Some(c) if req.compressor == CompressorKind::Importance && c.layer == layer + 1
            );
        let mut attn_buf = want_attn.then(|| vec![0.0; heads * n * n]);

        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let masked = tape.add(scaled, mask)?;
            let probs = tape.softmax(masked, 1.0)?;
            if let Some(buf) = &mut attn_buf {
                buf[h * n * n..(h + 1) * n * n].copy_from_slice(tape.data(probs));
            }
            head_ctx.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let attn_out = tape.matmul(ctx, params.at(base + 5))?;
        x = tape.add(x, attn_out)?;

        let hn = tape.layer_norm(x, params.at(base + 6), params.at(base + 7), LN_EPS)?;
        let h1 = tape.matmul(hn, params.at(base + 8))?;
        let h1 = tape.add_bias(h1, params.at(base + 9))?;
        let hg = tape.gelu(h1)?;
        let h2 = tape.matmul(hg, params.at(base + 10))?;
        let h2 = tape.add_bias(h2, params.at(base + 11))?;
        x = tape.add(x, h2)?;

        if let Some(buf) = attn_buf {
            let t = Tensor::new(vec![heads, n, n], buf)?;
            if req.capture_attn {
                captured.push(t.clone());
            }
            last_attn = Some(t);
        } else {
            last_attn = None;
        }
    }

    let final_base = 6 + cfg.n_layers * 12;
    let xf = tape.layer_norm(x, params.at(final_base), params.at(final_base + 1), LN_EPS)?;
    let logits_var = tape.matmul(xf, params.at(final_base + 2))?;

    Ok(ForwardOutput {
        logits: tape.tensor(logits_var),
        logits_var,
        retention,
        per_layer_attn: if req.capture_attn { Some(captured) } else { None },
        n_visual_original: n_visual,
        kept_visual,
        text_len,
    })
}

/// Next-token cross-entropy restricted to the answer span, with row indices
/// remapped across removed visual positions.
pub fn loss_sft(tape: &mut Tape, output: &ForwardOutput, seq: &TokenSequence) -> Result<Var> {
    if seq.answer_span.is_empty() {
        return Err(Error::Model("empty answer span".into()));
    }
    let rows = output.kept_visual + output.text_len;
    let vocab = output.logits.shape[1];
    let mut targets = vec![0usize; rows];
    let mut mask = vec![false; rows];
    for pos in seq.answer_span.clone() {
        let row = output.text_row(pos);
        if row == 0 {
            return Err(Error::Model("answer at sequence start has no predicting row".into()));
        }
        let target = seq.text_tokens[pos - seq.n_visual()];
        if target >= vocab {
            return Err(Error::Model("answer token outside vocabulary".into()));
        }
        targets[row - 1] = target;
        mask[row - 1] = true;
    }
    Ok(tape.cross_entropy(output.logits_var, &targets, &mask)?)
}

/// Greedy answer prediction: argmax logits at the row predicting the first
/// answer position.
pub fn predict_answer(output: &ForwardOutput, seq: &TokenSequence) -> Result<usize> {
    if seq.answer_span.is_empty() {
        return Err(Error::Model("empty answer span".into()));
    }
    let row = output.text_row(seq.answer_span.start) - 1;
    let vocab = output.logits.shape[1];
    let logits = &output.logits.data[row * vocab..(row + 1) * vocab];
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg(n_visual: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: 12,
            n_visual_tokens: n_visual,
            d_visual: 4,
            max_seq_len: n_visual + 8,
        }
    }

    fn tiny_seq(cfg: &ModelConfig, rng: &mut StdRng) -> TokenSequence {
        let n = cfg.n_visual_tokens;
        let features = Tensor::new(vec![n, cfg.d_visual], randn(rng, n * cfg.d_visual, 1.0)).unwrap();
        let text = vec![1, 2, 3, 4];
        TokenSequence::new(features, text, n + 3..n + 4).unwrap()
    }

    fn run_forward(
        cfg: &ModelConfig,
        params: &Params,
        seq: &TokenSequence,
        req: &ForwardRequest,
        seed: u64,
    ) -> ForwardOutput {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false).unwrap();
        let mut rng = StdRng::seed_from_u64(seed);
        forward(cfg, &mut tape, &vars, seq, req, &mut rng).unwrap()
    }

    #[test]
    fn zero_compression_is_bit_identical() {
        let cfg = tiny_cfg(6);
        let mut rng = StdRng::seed_from_u64(1);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let seq = tiny_seq(&cfg, &mut rng);

        let plain = run_forward(&cfg, &params, &seq, &ForwardRequest::plain(), 7);
        for kind in CompressorKind::ALL {
            let layer = if kind == CompressorKind::Importance { 2 } else { 1 };
            let req = ForwardRequest::compressed(kind, 0.0, layer).unwrap();
            let out = run_forward(&cfg, &params, &seq, &req, 7);
            assert_eq!(out.logits.data, plain.logits.data, "compressor {kind}");
            assert_eq!(out.retention.as_ref().unwrap().mask.kept(), 6);
        }
    }

    #[test]
    fn compression_shortens_sequence_from_layer_onward() {
        // 576 visual tokens at r = 8/9 keeps 64: sequence shrinks by 512.
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 8,
            n_visual_tokens: 576,
            d_visual: 4,
            max_seq_len: 580,
        };
        let mut rng = StdRng::seed_from_u64(2);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let features = Tensor::new(vec![576, 4], randn(&mut rng, 576 * 4, 1.0)).unwrap();
        let seq = TokenSequence::new(features, vec![1, 2, 3], 576 + 2..576 + 3).unwrap();
        let req = ForwardRequest::compressed(CompressorKind::Random, 8.0 / 9.0, 2).unwrap();
        let out = run_forward(&cfg, &params, &seq, &req, 3);
        assert_eq!(out.logits.shape[0], 576 + 3 - 512);
        assert_eq!(out.kept_visual, 64);
    }

    #[test]
    fn importance_at_layer_one_is_rejected() {
        let cfg = tiny_cfg(6);
        let mut rng = StdRng::seed_from_u64(3);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let seq = tiny_seq(&cfg, &mut rng);
        let req = ForwardRequest::compressed(CompressorKind::Importance, 0.5, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false).unwrap();
        let mut fwd_rng = StdRng::seed_from_u64(4);
        assert!(forward(&cfg, &mut tape, &vars, &seq, &req, &mut fwd_rng).is_err());
    }

    #[test]
    fn layer_out_of_range_is_rejected() {
        let cfg = tiny_cfg(6);
        let mut rng = StdRng::seed_from_u64(3);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let seq = tiny_seq(&cfg, &mut rng);
        let req = ForwardRequest::compressed(CompressorKind::Random, 0.5, cfg.n_layers + 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false).unwrap();
        let mut fwd_rng = StdRng::seed_from_u64(4);
        assert!(forward(&cfg, &mut tape, &vars, &seq, &req, &mut fwd_rng).is_err());
    }

    #[test]
    fn text_positions_always_survive() {
        let cfg = tiny_cfg(8);
        let mut rng = StdRng::seed_from_u64(5);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let seq = tiny_seq(&cfg, &mut rng);
        for kind in CompressorKind::ALL {
            for r in [0.3, 0.7, 1.0] {
                let layer = if kind == CompressorKind::Importance { 3 } else { 2 };
                let req = ForwardRequest::compressed(kind, r, layer).unwrap();
                let out = run_forward(&cfg, &params, &seq, &req, 11);
                assert_eq!(out.logits.shape[0], out.kept_visual + seq.text_tokens.len());
                let ev = out.retention.unwrap();
                assert_eq!(ev.mask.kept(), keep_count(8, r));
                // text rows remap contiguously after the kept visual rows
                for pos in seq.n_visual()..seq.len() {
                    let row = out.kept_visual + pos - seq.n_visual();
                    assert_eq!(out.text_row(pos), row);
                }
            }
        }
    }

    #[test]
    fn causality_logits_ignore_future_tokens() {
        let cfg = tiny_cfg(5);
        let mut rng = StdRng::seed_from_u64(6);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let features =
            Tensor::new(vec![5, 4], randn(&mut rng, 20, 1.0)).unwrap();
        let a = TokenSequence::new(features.clone(), vec![1, 2, 3, 4], 5 + 3..5 + 4).unwrap();
        let b = TokenSequence::new(features, vec![1, 2, 3, 9], 5 + 3..5 + 4).unwrap();
        let oa = run_forward(&cfg, &params, &a, &ForwardRequest::plain(), 0);
        let ob = run_forward(&cfg, &params, &b, &ForwardRequest::plain(), 0);
        let vocab = cfg.vocab_size;
        // all rows before the changed position are identical
        let cut = 5 + 3;
        assert_eq!(oa.logits.data[..cut * vocab], ob.logits.data[..cut * vocab]);
    }

    #[test]
    fn projection_shape_and_zero_input() {
        let cfg = tiny_cfg(4);
        let mut rng = StdRng::seed_from_u64(7);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false).unwrap();
        let feats = tape.constant(&Tensor::zeros(vec![4, 4])).unwrap();
        let out = project_visual(&mut tape, &vars, feats).unwrap();
        assert_eq!(tape.shape(out), &[4, cfg.d_model]);
    }

    #[test]
    fn zero_projection_with_zero_params_is_zero() {
        let cfg = tiny_cfg(4);
        let mut rng = StdRng::seed_from_u64(8);
        let mut params = Params::init(&cfg, &mut rng).unwrap();
        for t in [&mut params.proj_w1, &mut params.proj_b1, &mut params.proj_w2, &mut params.proj_b2] {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false).unwrap();
        let feats = tape.constant(&Tensor::zeros(vec![4, 4])).unwrap();
        let out = project_visual(&mut tape, &vars, feats).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sft_loss_matches_plain_forward_under_zero_ratio() {
        let cfg = tiny_cfg(6);
        let mut rng = StdRng::seed_from_u64(9);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let seq = tiny_seq(&cfg, &mut rng);

        let loss = |req: &ForwardRequest| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false).unwrap();
            let mut fr = StdRng::seed_from_u64(1);
            let out = forward(&cfg, &mut tape, &vars, &seq, req, &mut fr).unwrap();
            let l = loss_sft(&mut tape, &out, &seq).unwrap();
            tape.data(l)[0]
        };
        let l_plain = loss(&ForwardRequest::plain());
        let l_zero = loss(&ForwardRequest::compressed(CompressorKind::Random, 0.0, 1).unwrap());
        assert_eq!(l_plain, l_zero);
    }

    #[test]
    fn random_init_loss_near_uniform() {
        let mut cfg = tiny_cfg(6);
        cfg.vocab_size = 16;
        let mut rng = StdRng::seed_from_u64(10);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let mut total = 0.0;
        for _ in 0..8 {
            let seq = tiny_seq(&cfg, &mut rng);
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false).unwrap();
            let mut fr = StdRng::seed_from_u64(2);
            let out = forward(&cfg, &mut tape, &vars, &seq, &ForwardRequest::plain(), &mut fr).unwrap();
            let l = loss_sft(&mut tape, &out, &seq).unwrap();
            total += tape.data(l)[0];
        }
        let mean = total / 8.0;
        assert!((mean - (16.0f64).ln()).abs() < 0.5, "mean loss {mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let cfg = tiny_cfg(4);
        let mut rng = StdRng::seed_from_u64(11);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.param_count(), params.param_count());
    }
}
