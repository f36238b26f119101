//! KV-cached autoregressive decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EOS_ID;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::LayerKvCache;

/// Key/value history for every layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKvCache>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig, capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity > cfg.context_len {
            return Err(Error::Range(format!(
                "cache capacity {capacity} must be in 1..={}",
                cfg.context_len
            )));
        }
        let layers = (0..cfg.n_layers)
            .map(|_| LayerKvCache::new(cfg.n_kv_heads, cfg.head_dim, capacity))
            .collect();
        Ok(Self { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerKvCache {
        &mut self.layers[i]
    }

    pub fn filled(&self) -> usize {
        self.layers.first().map_or(0, LayerKvCache::filled)
    }

    pub fn capacity(&self) -> usize {
        self.layers.first().map_or(0, LayerKvCache::capacity)
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(LayerKvCache::bytes).sum()
    }
}

/// Bytes a full cache of `capacity` positions occupies: keys and values,
/// f32, every layer.
pub fn cache_bytes(cfg: &ModelConfig, capacity: usize) -> u64 {
    2 * cfg.n_layers as u64 * cfg.n_kv_heads as u64 * capacity as u64 * cfg.head_dim as u64 * 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 means greedy.
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Generation ends after emitting this token.
    pub stop_token: Option<u32>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 0.0,
            top_k: None,
            seed: 0,
            stop_token: Some(EOS_ID),
        }
    }
}

/// Runs the prompt through the model once, returning a cache holding it and
/// the logits at the last prompt position.
pub fn prefill(model: &Model, prompt: &[u32], capacity: usize) -> Result<(KvCache, Vec<f32>)> {
    if prompt.is_empty() {
        return Err(Error::Contract("prefill needs a non-empty prompt".into()));
    }
    let mut cache = KvCache::new(&model.cfg, capacity)?;
    let logits = model.logits(prompt, Some(&mut cache), 0)?;
    let last = logits.row(prompt.len() - 1).to_vec();
    Ok((cache, last))
}

/// Feeds one token at the next cached position and returns its logits.
pub fn decode_step(model: &Model, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
    let pos = cache.filled();
    if pos >= cache.capacity() {
        return Err(Error::Range(format!(
            "kv cache is full ({} positions)",
            cache.capacity()
        )));
    }
    Ok(model.logits(&[token], Some(cache), pos)?.into_data())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], gen: &GenerationConfig, rng: &mut ChaCha8Rng) -> usize {
    if gen.temperature <= 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = gen.top_k.filter(|&k| k > 0 && k < logits.len()) {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(k);
    }
    let t = gen.temperature as f64;
    let max = order
        .iter()
        .map(|&i| logits[i] as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] as f64 - max) / t).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("non-empty vocab")
}

/// Continues `prompt` and returns only the new tokens.
pub fn generate(model: &Model, prompt: &[u32], gen: &GenerationConfig) -> Result<Vec<u32>> {
    let ctx = model.cfg.context_len;
    if prompt.len() + gen.max_new_tokens > ctx {
        return Err(Error::Range(format!(
            "prompt ({}) + max_new_tokens ({}) exceeds context_len {ctx}",
            prompt.len(),
            gen.max_new_tokens
        )));
    }
    if gen.max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    if !(gen.temperature >= 0.0 && gen.temperature.is_finite()) {
        return Err(Error::Config(format!(
            "bad temperature {}",
            gen.temperature
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let (mut cache, mut logits) = prefill(model, prompt, prompt.len() + gen.max_new_tokens)?;
    let mut out = Vec::with_capacity(gen.max_new_tokens);
    loop {
        let next = sample(&logits, gen, &mut rng) as u32;
        out.push(next);
        if Some(next) == gen.stop_token || out.len() == gen.max_new_tokens {
            return Ok(out);
        }
        logits = decode_step(model, &mut cache, next)?;
    }
}
