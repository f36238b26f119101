//! Throughput measurement: timed training steps and KV-cached decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::PackedBlock;
use crate::error::{Error, Result};
use crate::infer::{cache_bytes, decode_step, prefill};
use crate::model::{count_params, ModelConfig};
use crate::train::{Clock, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stddev: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub batch_tokens: usize,
    pub tokens_per_step: Vec<usize>,
    pub step_seconds: Vec<f64>,
    pub train_tokens_per_sec: Summary,
    pub decode_tokens: usize,
    pub decode_tokens_per_sec: f64,
    pub peak_memory_bytes_estimate: u64,
}

/// Rough upper bound on resident bytes during a training step: weights,
/// gradients and two Adam moments (16 bytes per parameter) plus the
/// activations kept on the tape for one batch.
pub fn peak_memory_estimate(cfg: &ModelConfig, batch_tokens: usize) -> u64 {
    let params = count_params(cfg);
    let t = batch_tokens as u64;
    let (h, inter, ctx) = (
        cfg.hidden as u64,
        cfg.intermediate as u64,
        cfg.context_len as u64,
    );
    let blocks = t.div_ceil(ctx);
    // Per layer and token: norms, q/k/v, rotated q/k, attention output and
    // residuals (~12 h) plus gate, up, silu and product (4 i).
    let per_token = cfg.n_layers as u64 * (12 * h + 4 * inter) + 2 * cfg.vocab as u64;
    // Scores, masked scores and probabilities per head.
    let scores = blocks * cfg.n_layers as u64 * cfg.n_heads as u64 * ctx * ctx * 3;
    16 * params + 4 * (t * per_token + scores)
}

/// Random tokens, one block per `context_len`, deterministic in `seed`.
pub fn synthetic_batch(cfg: &ModelConfig, batch_tokens: usize, seed: u64) -> Vec<PackedBlock> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch_tokens / cfg.context_len)
        .map(|_| PackedBlock {
            tokens: (0..cfg.context_len)
                .map(|_| rng.gen_range(0..cfg.vocab as u32))
                .collect(),
            ignore: vec![false; cfg.context_len],
        })
        .collect()
}

/// Runs `steps` timed training steps on synthetic data, then decodes to
/// the end of the context window.
pub fn run_bench(cfg: &TrainConfig, steps: usize, clock: &mut dyn Clock) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::Config("bench needs at least one step".into()));
    }
    cfg.validate()?;
    let mut trainer = Trainer::from_config(cfg)?;
    let batch = synthetic_batch(&cfg.model, cfg.batch_tokens, cfg.seed);
    let mut tokens_per_step = Vec::with_capacity(steps);
    let mut step_seconds = Vec::with_capacity(steps);
    let mut rates = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = trainer.timed_step(&batch, clock)?;
        tokens_per_step.push(s.tokens);
        step_seconds.push(s.seconds);
        rates.push(s.tokens_per_sec);
    }

    let model = &trainer.model;
    let ctx = cfg.model.context_len;
    let decode_tokens = ctx.saturating_sub(1);
    let t0 = clock.now();
    let (mut cache, mut logits) = prefill(model, &[0], ctx)?;
    for _ in 0..decode_tokens {
        let next = crate::infer::argmax(&logits) as u32;
        logits = decode_step(model, &mut cache, next)?;
    }
    let dt = clock.now() - t0;

    Ok(BenchReport {
        steps,
        batch_tokens: cfg.batch_tokens,
        tokens_per_step,
        step_seconds,
        train_tokens_per_sec: Summary::of(&rates),
        decode_tokens,
        decode_tokens_per_sec: if dt > 0.0 {
            decode_tokens as f64 / dt
        } else {
            f64::INFINITY
        },
        peak_memory_bytes_estimate: peak_memory_estimate(&cfg.model, cfg.batch_tokens)
            + cache_bytes(&cfg.model, ctx),
    })
}
