//! Independent references shared by the integration tests. Nothing here goes
//! through the tape: attention is recomputed with plain loops in f64.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyllama::data::{MiniTokenizer, PackedBlock, TokenShard};
use tinyllama::model::{Model, ModelConfig, ParamVars};
use tinyllama::nn::{
    gqa_attention, rmsnorm, rope_apply, swiglu, AttentionLayer, Bind, RotaryTable, SwiGluMlp,
};
use tinyllama::optim::{AdamWConfig, LrSchedule};
use tinyllama::tensor::{Element, ScalarFn, Tape, Tensor, Var};
use tinyllama::train::Trainer;
use tinyllama::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn random_attention(
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> AttentionLayer {
    let s = 0.5;
    AttentionLayer {
        n_heads,
        n_kv_heads,
        head_dim,
        w_q: random(&[hidden, n_heads * head_dim], s, rng),
        w_k: random(&[hidden, n_kv_heads * head_dim], s, rng),
        w_v: random(&[hidden, n_kv_heads * head_dim], s, rng),
        w_o: random(&[n_heads * head_dim, hidden], s, rng),
    }
}

/// Library attention on a frozen tape.
pub fn attention(layer: &AttentionLayer, table: &RotaryTable, x: &Tensor, start: usize) -> Tensor {
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, Bind::Frozen);
    let xv = tape.constant(x.clone());
    let y = gqa_attention(&mut tape, xv, layer, &vars, table, None, start).unwrap();
    tape.value(y).clone()
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn as64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Rotates interleaved pairs of every head in `[t, heads * hd]` for
/// positions `start..`.
fn rotate64(x: &mut [f64], t: usize, width: usize, hd: usize, base: f64, start: usize) {
    for r in 0..t {
        let pos = (start + r) as f64;
        for head in 0..width / hd {
            for i in 0..hd / 2 {
                let theta = pos * base.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = theta.sin_cos();
                let at = r * width + head * hd + 2 * i;
                let (a, b) = (x[at], x[at + 1]);
                x[at] = a * c - b * s;
                x[at + 1] = a * s + b * c;
            }
        }
    }
}

/// Position-by-position causal attention: for every query row and head,
/// explicit masked scores, an explicit softmax and a weighted sum of values.
/// Query head `h` reads kv head `h * n_kv_heads / n_heads`.
pub fn reference_attention(layer: &AttentionLayer, x: &Tensor, base: f64, start: usize) -> Tensor {
    let (t, hidden) = x.dims2().unwrap();
    let hd = layer.head_dim;
    let (qw, kw) = (layer.n_heads * hd, layer.n_kv_heads * hd);
    let x64 = as64(x);
    let mut q = matmul64(&x64, &as64(&layer.w_q), t, hidden, qw);
    let mut k = matmul64(&x64, &as64(&layer.w_k), t, hidden, kw);
    let v = matmul64(&x64, &as64(&layer.w_v), t, hidden, kw);
    rotate64(&mut q, t, qw, hd, base, start);
    rotate64(&mut k, t, kw, hd, base, start);
    let mut merged = vec![0.0; t * qw];
    for h in 0..layer.n_heads {
        let g = h * layer.n_kv_heads / layer.n_heads;
        for i in 0..t {
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let dot: f64 = (0..hd)
                    .map(|d| q[i * qw + h * hd + d] * k[j * kw + g * hd + d])
                    .sum();
                scores.push(dot / (hd as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..hd {
                merged[i * qw + h * hd + d] =
                    (0..=i).map(|j| exps[j] / z * v[j * kw + g * hd + d]).sum();
            }
        }
    }
    let out = matmul64(&merged, &as64(&layer.w_o), t, qw, hidden);
    Tensor::new(&[t, hidden], out.into_iter().map(|x| x as f32).collect()).unwrap()
}

/// Textbook multi-head attention: one key/value projection per head, no
/// grouping logic at all.
pub fn reference_mha(layer: &AttentionLayer, x: &Tensor, base: f64) -> Tensor {
    assert_eq!(layer.n_heads, layer.n_kv_heads);
    reference_attention(layer, x, base, 0)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn constant<E: Element>(tape: &mut Tape<E>, t: &Tensor) -> Var {
    tape.constant(t.cast())
}

/// `sum(y * r)` for a fixed random `r`, so that no gradient cancels by
/// symmetry.
fn project<E: Element>(tape: &mut Tape<E>, y: Var, r: &Tensor) -> Result<Var> {
    let r = constant(tape, r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

pub struct RmsNormFn {
    pub gain: Tensor,
    pub probe: Tensor,
}

impl ScalarFn for RmsNormFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let g = constant(tape, &self.gain);
        let y = rmsnorm(tape, x, g, 1e-5)?;
        project(tape, y, &self.probe)
    }
}

pub struct RopeFn {
    pub table: RotaryTable,
    pub start: usize,
    pub probe: Tensor,
}

impl ScalarFn for RopeFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let y = rope_apply(tape, x, &self.table, self.start)?;
        project(tape, y, &self.probe)
    }
}

pub struct SwiGluFn {
    pub mlp: SwiGluMlp,
    pub probe: Tensor,
}

impl ScalarFn for SwiGluFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let vars = self.mlp.bind(tape, Bind::Frozen);
        let y = swiglu(tape, x, &vars)?;
        project(tape, y, &self.probe)
    }
}

pub struct AttentionFn {
    pub layer: AttentionLayer,
    pub table: RotaryTable,
    pub probe: Tensor,
}

impl ScalarFn for AttentionFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let vars = self.layer.bind(tape, Bind::Frozen);
        let y = gqa_attention(tape, x, &self.layer, &vars, &self.table, None, 0)?;
        project(tape, y, &self.probe)
    }
}

/// Attention as a function of its query projection.
pub struct AttentionWqFn {
    pub layer: AttentionLayer,
    pub table: RotaryTable,
    pub x: Tensor,
    pub probe: Tensor,
}

impl ScalarFn for AttentionWqFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, w_q: Var) -> Result<Var> {
        let mut vars = self.layer.bind(tape, Bind::Frozen);
        vars.w_q = w_q;
        let x = constant(tape, &self.x);
        let y = gqa_attention(tape, x, &self.layer, &vars, &self.table, None, 0)?;
        project(tape, y, &self.probe)
    }
}

fn replace_param(vars: &mut ParamVars, index: usize, v: Var) {
    let last = vars.ordered().len() - 1;
    match index {
        0 => vars.token_embedding = v,
        i if i == last => vars.lm_head = v,
        i if i == last - 1 => vars.final_norm = v,
        i => {
            let l = &mut vars.layers[(i - 1) / 9];
            match (i - 1) % 9 {
                0 => l.attn_norm = v,
                1 => l.attn.w_q = v,
                2 => l.attn.w_k = v,
                3 => l.attn.w_v = v,
                4 => l.attn.w_o = v,
                5 => l.mlp_norm = v,
                6 => l.mlp.w_gate = v,
                7 => l.mlp.w_up = v,
                _ => l.mlp.w_down = v,
            }
        }
    }
}

/// Language-model loss as a function of parameter tensor `index`
/// (in `Parameters::tensors` order), every other tensor held fixed.
pub struct LossFn<'a> {
    pub model: &'a Model,
    pub tokens: Vec<u32>,
    pub index: usize,
}

impl ScalarFn for LossFn<'_> {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let mut vars = self.model.params.bind(tape, Bind::Frozen);
        replace_param(&mut vars, self.index, x);
        self.model.lm_loss(tape, &vars, &self.tokens, None)
    }
}

/// hidden 16, 2 layers, 4 query heads over 2 kv heads.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        intermediate: 40,
        context_len: 16,
        n_layers: 2,
        vocab: 24,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        rope_base: 10000.0,
        norm_eps: 1e-5,
    }
}

/// A model whose weights are larger than the default init so the loss
/// surface is not nearly flat.
pub fn small_model(seed: u64) -> Model {
    let cfg = small_config();
    let mut model = Model::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, t) in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
    model
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub const MEMO_TEXT: &[u8; 64] =
    b"The quick brown fox jumps over the lazy dog; pack my box now!!!\n";

/// Desk model trained `steps` times on one repeated 64-token block.
pub fn memorize(steps: u64) -> (Trainer, Vec<u32>, f32) {
    let tokens = MiniTokenizer.encode(MEMO_TEXT);
    let block = PackedBlock {
        ignore: vec![false; tokens.len()],
        tokens: tokens.clone(),
    };
    let model = Model::init(ModelConfig::desk(), 0).unwrap();
    let schedule = LrSchedule::new(3e-3, 3e-4, 10, steps).unwrap();
    let mut trainer = Trainer::new(model, AdamWConfig::default(), schedule, 1.0);
    for _ in 0..steps {
        trainer.train_step(std::slice::from_ref(&block)).unwrap();
    }
    // Loss of the final parameters, not of the last step's input.
    let (loss, _) = trainer.model.loss_and_grads(&[(&tokens, None)]).unwrap();
    (trainer, tokens, loss)
}

/// Two sources with distinct token ranges, one excluded subset on top.
pub fn two_source_corpus() -> Vec<TokenShard> {
    let mut r = rng(99);
    let docs = |lo: u32, n: usize, r: &mut ChaCha8Rng| -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let len = r.gen_range(5..120);
                (0..len).map(|_| r.gen_range(lo..lo + 100)).collect()
            })
            .collect()
    };
    vec![
        TokenShard::new("natural:web", docs(0, 60, &mut r)),
        TokenShard::new("code:python", docs(100, 40, &mut r)),
        TokenShard::new("code:github", docs(200, 40, &mut r)),
    ]
}
