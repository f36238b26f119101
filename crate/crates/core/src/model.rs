//! The decoder: token embedding, pre-norm transformer blocks, final RMSNorm
//! and an untied LM head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::infer::KvCache;
use crate::nn::{
    bind_tensor, gqa_attention, rmsnorm, swiglu, AttentionLayer, AttentionVars, Bind, RmsNormLayer,
    RotaryTable, SwiGluMlp, SwiGluVars,
};
use crate::tensor::{Element, Tape, Tensor, Var, IGNORE_INDEX};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub const KEYS: [&'static str; 10] = [
        "hidden",
        "intermediate",
        "context_len",
        "n_layers",
        "vocab",
        "n_heads",
        "n_kv_heads",
        "head_dim",
        "rope_base",
        "norm_eps",
    ];

    /// Full-scale architecture with 32 query heads and 4 key/value heads.
    pub fn full_scale() -> Self {
        Self {
            hidden: 2048,
            intermediate: 5632,
            context_len: 2048,
            n_layers: 22,
            vocab: 32000,
            n_heads: 32,
            n_kv_heads: 4,
            head_dim: 64,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// Full-scale dimensions with the 16-head layout (head_dim 128).
    pub fn full_scale_16_heads() -> Self {
        Self {
            n_heads: 16,
            head_dim: 128,
            ..Self::full_scale()
        }
    }

    /// CPU-sized model over the byte-level vocabulary.
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            intermediate: 176,
            context_len: 64,
            n_layers: 2,
            vocab: 259,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full_scale()),
            "full-16h" => Ok(Self::full_scale_16_heads()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected full, full-16h or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("context_len", self.context_len),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden ({}) != n_heads ({}) * head_dim ({})",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head_dim must be even for rotary".into()));
        }
        if !(self.rope_base > 0.0 && self.norm_eps > 0.0) {
            return Err(Error::Config(
                "rope_base and norm_eps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Starts from `preset` (default `desk`) and applies any field present.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::preset(kv.raw("preset").unwrap_or("desk"))?;
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.get(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(hidden);
        field!(intermediate);
        field!(context_len);
        field!(n_layers);
        field!(vocab);
        field!(n_heads);
        field!(n_kv_heads);
        field!(head_dim);
        field!(rope_base);
        field!(norm_eps);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.set("hidden", self.hidden);
        kv.set("intermediate", self.intermediate);
        kv.set("context_len", self.context_len);
        kv.set("n_layers", self.n_layers);
        kv.set("vocab", self.vocab);
        kv.set("n_heads", self.n_heads);
        kv.set("n_kv_heads", self.n_kv_heads);
        kv.set("head_dim", self.head_dim);
        kv.set("rope_base", self.rope_base);
        kv.set("norm_eps", self.norm_eps);
    }
}

/// Exact parameter count: embeddings, per-layer projections and gains,
/// final norm and LM head.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let h = cfg.hidden as u64;
    let q = (cfg.n_heads * cfg.head_dim) as u64;
    let kv = (cfg.n_kv_heads * cfg.head_dim) as u64;
    let inter = cfg.intermediate as u64;
    let embed = cfg.vocab as u64 * h;
    let per_layer = h * q + 2 * h * kv + q * h + 3 * h * inter + 2 * h;
    embed + cfg.n_layers as u64 * per_layer + h + h * cfg.vocab as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: RmsNormLayer,
    pub attn: AttentionLayer,
    pub mlp_norm: RmsNormLayer,
    pub mlp: SwiGluMlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// [vocab, hidden]
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: RmsNormLayer,
    /// [hidden, vocab]
    pub lm_head: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    NormGain,
}

struct TruncatedNormal {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
    bound: f64,
}

impl TruncatedNormal {
    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| loop {
            let z = self.dist.sample(&mut self.rng);
            if z.abs() <= self.bound {
                break (z * scale) as f32;
            }
        })
    }
}

/// Normal(0, 0.02^2) truncated at 3 sigma; `w_o` and `w_down` are further
/// scaled by `1/sqrt(2 * n_layers)`. Norm gains start at 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut init = TruncatedNormal {
        rng: ChaCha8Rng::seed_from_u64(seed),
        dist: Normal::new(0.0, INIT_STD).expect("finite std"),
        bound: 3.0 * INIT_STD,
    };
    build_params(cfg, |shape, scale| init.tensor(shape, scale))
}

/// Lays out every tensor in initialization order; `make(shape, scale)`
/// supplies the matrices.
fn build_params(
    cfg: &ModelConfig,
    mut make: impl FnMut(&[usize], f64) -> Tensor,
) -> Result<Parameters> {
    let (h, inter) = (cfg.hidden, cfg.intermediate);
    let q = cfg.n_heads * cfg.head_dim;
    let kv = cfg.n_kv_heads * cfg.head_dim;
    let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();

    let token_embedding = make(&[cfg.vocab, h], 1.0);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let attn = AttentionLayer {
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
            w_q: make(&[h, q], 1.0),
            w_k: make(&[h, kv], 1.0),
            w_v: make(&[h, kv], 1.0),
            w_o: make(&[q, h], resid),
        };
        let mlp = SwiGluMlp {
            w_gate: make(&[h, inter], 1.0),
            w_up: make(&[h, inter], 1.0),
            w_down: make(&[inter, h], resid),
        };
        layers.push(LayerParams {
            attn_norm: RmsNormLayer::new(h, cfg.norm_eps)?,
            attn,
            mlp_norm: RmsNormLayer::new(h, cfg.norm_eps)?,
            mlp,
        });
    }
    let lm_head = make(&[h, cfg.vocab], 1.0);
    Ok(Parameters {
        token_embedding,
        layers,
        final_norm: RmsNormLayer::new(h, cfg.norm_eps)?,
        lm_head,
    })
}

impl Parameters {
    /// Rebuilds parameters from flat buffers in [`Parameters::tensors`] order.
    pub fn from_flat(cfg: &ModelConfig, data: Vec<Vec<f32>>) -> Result<Self> {
        cfg.validate()?;
        let mut p = build_params(cfg, |shape, _| Tensor::zeros(shape))?;
        let mut slots = p.tensors_mut();
        if slots.len() != data.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                data.len()
            )));
        }
        for ((_, t), d) in slots.iter_mut().zip(data) {
            **t = Tensor::new(t.shape(), d)
                .map_err(|_| Error::Format("parameter buffer has the wrong length".into()))?;
        }
        drop(slots);
        Ok(p)
    }

    /// Every tensor with its name and kind, in a fixed order shared by
    /// [`Parameters::tensors_mut`], [`ParamVars::ordered`] and checkpoints.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor)> {
        use ParamKind::*;
        let mut out = vec![("token_embedding".to_string(), Matrix, &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("attn_norm"), NormGain, &l.attn_norm.gain),
                (p("attn.w_q"), Matrix, &l.attn.w_q),
                (p("attn.w_k"), Matrix, &l.attn.w_k),
                (p("attn.w_v"), Matrix, &l.attn.w_v),
                (p("attn.w_o"), Matrix, &l.attn.w_o),
                (p("mlp_norm"), NormGain, &l.mlp_norm.gain),
                (p("mlp.w_gate"), Matrix, &l.mlp.w_gate),
                (p("mlp.w_up"), Matrix, &l.mlp.w_up),
                (p("mlp.w_down"), Matrix, &l.mlp.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), NormGain, &self.final_norm.gain));
        out.push(("lm_head".to_string(), Matrix, &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        use ParamKind::*;
        let mut out = vec![(Matrix, &mut self.token_embedding)];
        for l in &mut self.layers {
            out.extend([
                (NormGain, &mut l.attn_norm.gain),
                (Matrix, &mut l.attn.w_q),
                (Matrix, &mut l.attn.w_k),
                (Matrix, &mut l.attn.w_v),
                (Matrix, &mut l.attn.w_o),
                (NormGain, &mut l.mlp_norm.gain),
                (Matrix, &mut l.mlp.w_gate),
                (Matrix, &mut l.mlp.w_up),
                (Matrix, &mut l.mlp.w_down),
            ]);
        }
        out.push((NormGain, &mut self.final_norm.gain));
        out.push((Matrix, &mut self.lm_head));
        out
    }

    pub fn numel(&self) -> u64 {
        self.tensors().iter().map(|(_, _, t)| t.len() as u64).sum()
    }

    /// Checks every shape against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = init_shapes(cfg);
        let actual = self.tensors();
        if actual.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, _, t), shape) in actual.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        for l in &self.layers {
            l.attn.validate()?;
            l.mlp.validate()?;
        }
        Ok(())
    }

    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, mode: Bind) -> ParamVars {
        ParamVars {
            token_embedding: bind_tensor(tape, &self.token_embedding, mode),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: l.attn_norm.bind(tape, mode),
                    attn: l.attn.bind(tape, mode),
                    mlp_norm: l.mlp_norm.bind(tape, mode),
                    mlp: l.mlp.bind(tape, mode),
                })
                .collect(),
            final_norm: self.final_norm.bind(tape, mode),
            lm_head: bind_tensor(tape, &self.lm_head, mode),
        }
    }
}

fn init_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (h, inter) = (cfg.hidden, cfg.intermediate);
    let q = cfg.n_heads * cfg.head_dim;
    let kv = cfg.n_kv_heads * cfg.head_dim;
    let mut out = vec![vec![cfg.vocab, h]];
    for _ in 0..cfg.n_layers {
        out.extend([
            vec![h],
            vec![h, q],
            vec![h, kv],
            vec![h, kv],
            vec![q, h],
            vec![h],
            vec![h, inter],
            vec![h, inter],
            vec![inter, h],
        ]);
    }
    out.push(vec![h]);
    out.push(vec![h, cfg.vocab]);
    out
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub mlp_norm: Var,
    pub mlp: SwiGluVars,
}

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ParamVars {
    /// Same order as [`Parameters::tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm,
                l.attn.w_q,
                l.attn.w_k,
                l.attn.w_v,
                l.attn.w_o,
                l.mlp_norm,
                l.mlp.w_gate,
                l.mlp.w_up,
                l.mlp.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Configuration, weights and the rotary table built for them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
    rope: RotaryTable,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: Parameters) -> Result<Self> {
        cfg.validate()?;
        params.validate(&cfg)?;
        let rope = RotaryTable::new(cfg.head_dim, cfg.context_len, cfg.rope_base)?;
        Ok(Self { cfg, params, rope })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn rope(&self) -> &RotaryTable {
        &self.rope
    }

    /// Logits [t, vocab] for `tokens` at positions `start_pos..`. Pass a cache
    /// to attend over its history and extend it.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        vars: &ParamVars,
        tokens: &[u32],
        mut cache: Option<&mut KvCache>,
        start_pos: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if tokens.is_empty() {
            return Err(Error::Contract("forward over zero tokens".into()));
        }
        if start_pos + tokens.len() > cfg.context_len {
            return Err(Error::Range(format!(
                "positions {start_pos}..{} exceed context_len {}",
                start_pos + tokens.len(),
                cfg.context_len
            )));
        }
        if let Some(c) = cache.as_deref() {
            if c.n_layers() != cfg.n_layers {
                return Err(Error::Contract(
                    "cache layer count does not match model".into(),
                ));
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = tape.embedding(vars.token_embedding, &ids)?;
        for (i, (layer, lv)) in self.params.layers.iter().zip(&vars.layers).enumerate() {
            let normed = rmsnorm(tape, x, lv.attn_norm, layer.attn_norm.eps)?;
            let layer_cache = cache.as_deref_mut().map(|c| c.layer_mut(i));
            let attn = gqa_attention(
                tape,
                normed,
                &layer.attn,
                &lv.attn,
                &self.rope,
                layer_cache,
                start_pos,
            )?;
            x = tape.add(x, attn)?;
            let normed = rmsnorm(tape, x, lv.mlp_norm, layer.mlp_norm.eps)?;
            let mlp = swiglu(tape, normed, &lv.mlp)?;
            x = tape.add(x, mlp)?;
        }
        let x = rmsnorm(tape, x, vars.final_norm, self.params.final_norm.eps)?;
        tape.matmul(x, vars.lm_head)
    }

    /// Next-token cross-entropy: logits at positions `0..t-1` against tokens
    /// `1..t`. `padding[i]` marks token `i` as padding, which removes it as
    /// a target.
    pub fn lm_loss<E: Element>(
        &self,
        tape: &mut Tape<E>,
        vars: &ParamVars,
        tokens: &[u32],
        padding: Option<&[bool]>,
    ) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::Contract(format!(
                "lm_loss needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if let Some(p) = padding {
            if p.len() != tokens.len() {
                return Err(Error::Contract(
                    "padding mask length differs from tokens".into(),
                ));
            }
        }
        let logits = self.forward(tape, vars, tokens, None, 0)?;
        let mut targets: Vec<usize> = tokens[1..]
            .iter()
            .enumerate()
            .map(|(i, &t)| match padding {
                Some(p) if p[i + 1] => IGNORE_INDEX,
                _ => t as usize,
            })
            .collect();
        targets.push(IGNORE_INDEX);
        tape.cross_entropy(logits, &targets).map_err(|e| match e {
            Error::Contract(_) => Error::Contract("lm_loss: every target is padding".into()),
            other => other,
        })
    }

    /// Inference-only logits as a plain tensor.
    pub fn logits(
        &self,
        tokens: &[u32],
        cache: Option<&mut KvCache>,
        start_pos: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, Bind::Frozen);
        let out = self.forward(&mut tape, &vars, tokens, cache, start_pos)?;
        Ok(tape.value(out).clone())
    }

    /// Token-weighted mean loss over `blocks` and the gradient of every
    /// parameter tensor, in [`Parameters::tensors`] order.
    pub fn loss_and_grads(
        &self,
        blocks: &[(&[u32], Option<&[bool]>)],
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        if blocks.is_empty() {
            return Err(Error::Contract("loss over an empty batch".into()));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, Bind::Trainable);
        let counts: Vec<usize> = blocks
            .iter()
            .map(|(tokens, pad)| {
                (1..tokens.len())
                    .filter(|&i| pad.is_none_or(|p| !p[i]))
                    .count()
            })
            .collect();
        let total: usize = counts.iter().sum();
        let mut loss: Option<Var> = None;
        for ((tokens, pad), &n) in blocks.iter().zip(&counts) {
            if n == 0 {
                continue;
            }
            let l = self.lm_loss(&mut tape, &vars, tokens, *pad)?;
            let l = tape.scale(l, n as f32 / total.max(1) as f32)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = loss.ok_or_else(|| Error::Contract("batch has nothing to predict".into()))?;
        let value = tape.value(loss).item()?;
        let order = vars.ordered();
        let mut grads = tape.backward(loss)?;
        let out = order
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, (_, _, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            intermediate: 24,
            context_len: 16,
            n_layers: 2,
            vocab: 32,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn full_scale_count_is_about_1_1b() {
        let n = count_params(&ModelConfig::full_scale());
        assert_eq!(n, 1_100_048_384);
        assert!((1.045e9..=1.155e9).contains(&(n as f64)));
    }

    #[test]
    fn count_params_edge_cases() {
        let mut cfg = ModelConfig::full_scale();
        let with_vocab = count_params(&cfg);
        cfg.vocab = 0;
        assert_eq!(with_vocab - count_params(&cfg), 2 * 32000 * 2048);

        let base = ModelConfig::desk();
        let mut doubled = base.clone();
        doubled.n_layers *= 2;
        let per_layer_total = count_params(&doubled) - count_params(&base);
        let mut none = base.clone();
        none.n_layers = 0;
        assert_eq!(count_params(&base) - count_params(&none), per_layer_total);
    }

    #[test]
    fn count_matches_materialized_params() {
        let cfg = tiny();
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(p.numel(), count_params(&cfg));
    }

    #[test]
    fn init_is_deterministic_and_gains_are_one() {
        let cfg = tiny();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
        for (_, kind, t) in a.tensors() {
            if kind == ParamKind::NormGain {
                assert!(t.data().iter().all(|&g| g == 1.0));
            } else {
                assert!(t.data().iter().all(|&w| w.abs() <= 3.0 * INIT_STD as f32));
            }
        }
    }

    #[test]
    fn embedding_std_close_to_0_02() {
        let cfg = ModelConfig {
            vocab: 2048,
            ..ModelConfig::desk()
        };
        let p = init_params(&cfg, 1).unwrap();
        let d = p.token_embedding.data();
        assert!(d.len() >= 100_000);
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var.sqrt() - 0.02).abs() <= 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn no_parameter_is_shared_between_layers() {
        let p = init_params(&tiny(), 3).unwrap();
        let ptrs: Vec<*const f32> = p
            .tensors()
            .iter()
            .map(|(_, _, t)| t.data().as_ptr())
            .collect();
        let mut dedup = ptrs.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), ptrs.len());
        assert_ne!(p.layers[0].attn.w_q, p.layers[1].attn.w_q);
        assert_ne!(p.token_embedding.data(), p.lm_head.data());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.hidden = 20;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::full_scale().validate().is_ok());
        assert!(ModelConfig::full_scale_16_heads().validate().is_ok());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut kv = KvFile::default();
        tiny().write_kv(&mut kv);
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), tiny());
        let kv = KvFile::parse("preset = full\nn_layers = 4\n").unwrap();
        let cfg = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.n_layers, 4);
        assert_eq!(cfg.hidden, 2048);
    }

    #[test]
    fn forward_errors() {
        let model = Model::init(tiny(), 0).unwrap();
        let long: Vec<u32> = vec![1; 17];
        assert!(matches!(model.logits(&long, None, 0), Err(Error::Range(_))));
        assert!(matches!(
            model.logits(&[1, 32], None, 0),
            Err(Error::Index { .. })
        ));
        let mut tape = Tape::<f32>::new();
        let vars = model.params.bind(&mut tape, Bind::Frozen);
        assert!(matches!(
            model.lm_loss(&mut tape, &vars, &[3], None),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            model.lm_loss(&mut tape, &vars, &[3, 4, 5], Some(&[false, true, true])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fresh_model_loss_is_near_ln_vocab() {
        let model = Model::init(ModelConfig::desk(), 0).unwrap();
        let tokens: Vec<u32> = (0..64).map(|i| (i * 37 % 256) as u32).collect();
        let (loss, grads) = model.loss_and_grads(&[(&tokens, None)]).unwrap();
        assert!((loss - (259f32).ln()).abs() < 0.5, "loss {loss}");
        assert_eq!(grads.len(), model.params.tensors().len());
    }
}
