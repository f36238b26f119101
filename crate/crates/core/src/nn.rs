//! Decoder building blocks: RMSNorm, rotary embeddings, grouped-query causal
//! attention and the SwiGLU MLP.
//!
//! Layers own their weights as plain [`Tensor`]s. To run one on a [`Tape`],
//! bind it first (`bind`) which registers the weights as leaves or constants
//! and returns the matching `*Vars` handle set.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// How weights enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Leaves; gradients are produced for them.
    Trainable,
    /// Constants; inference only.
    Frozen,
}

pub(crate) fn bind_tensor<E: Element>(tape: &mut Tape<E>, t: &Tensor, mode: Bind) -> Var {
    match mode {
        Bind::Trainable => tape.leaf(t.cast()),
        Bind::Frozen => tape.constant(t.cast()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsNormLayer {
    pub gain: Tensor,
    pub eps: f64,
}

impl RmsNormLayer {
    pub fn new(hidden: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 || hidden == 0 {
            return Err(Error::Config(format!(
                "rmsnorm needs hidden > 0 and eps > 0 (hidden={hidden}, eps={eps})"
            )));
        }
        Ok(Self {
            gain: Tensor::full(&[hidden], 1.0),
            eps,
        })
    }

    pub fn hidden(&self) -> usize {
        self.gain.len()
    }

    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, mode: Bind) -> Var {
        bind_tensor(tape, &self.gain, mode)
    }
}

/// `x / sqrt(mean(x^2) + eps) * gain` per row; no centering, no bias.
pub fn rmsnorm<E: Element>(tape: &mut Tape<E>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    tape.rms_norm(x, gain, eps)
}

/// Precomputed rotation angles for positions `0..max_positions`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    base: f64,
    head_dim: usize,
    max_positions: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if base <= 0.0 {
            return Err(Error::Config(format!(
                "rotary base must be positive, got {base}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Ok(Self {
            base,
            head_dim,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Cosines and sines for positions `start..start + len`, row-major.
    pub fn angles<E: Element>(&self, start: usize, len: usize) -> Result<(Vec<E>, Vec<E>)> {
        if start + len > self.max_positions {
            return Err(Error::Range(format!(
                "positions {start}..{} exceed the rotary table ({})",
                start + len,
                self.max_positions
            )));
        }
        let half = self.head_dim / 2;
        let span = start * half..(start + len) * half;
        Ok((
            self.cos[span.clone()].iter().map(|&c| E::of(c)).collect(),
            self.sin[span].iter().map(|&s| E::of(s)).collect(),
        ))
    }
}

/// Rotates `x` ([t, heads, head_dim] or [t, heads * head_dim]) for positions
/// `start_pos..start_pos + t`.
pub fn rope_apply<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    table: &RotaryTable,
    start_pos: usize,
) -> Result<Var> {
    let t = *tape
        .shape(x)
        .first()
        .ok_or_else(|| Error::Contract("rope_apply on a scalar".into()))?;
    let (cos, sin) = table.angles(start_pos, t)?;
    tape.rope(x, cos, sin, table.head_dim())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// [hidden, n_heads * head_dim]
    pub w_q: Tensor,
    /// [hidden, n_kv_heads * head_dim]
    pub w_k: Tensor,
    /// [hidden, n_kv_heads * head_dim]
    pub w_v: Tensor,
    /// [n_heads * head_dim, hidden]
    pub w_o: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionLayer {
    pub fn validate(&self) -> Result<()> {
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        let q = self.n_heads * self.head_dim;
        let kv = self.n_kv_heads * self.head_dim;
        let (hidden, wq) = self.w_q.dims2()?;
        let checks = [
            (wq == q, "w_q", self.w_q.shape()),
            (self.w_k.shape() == [hidden, kv], "w_k", self.w_k.shape()),
            (self.w_v.shape() == [hidden, kv], "w_v", self.w_v.shape()),
            (self.w_o.shape() == [q, hidden], "w_o", self.w_o.shape()),
        ];
        for (ok, name, shape) in checks {
            if !ok {
                return Err(Error::Config(format!(
                    "{name} has shape {shape:?}; heads={} kv_heads={} head_dim={} hidden={hidden}",
                    self.n_heads, self.n_kv_heads, self.head_dim
                )));
            }
        }
        Ok(())
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, mode: Bind) -> AttentionVars {
        AttentionVars {
            w_q: bind_tensor(tape, &self.w_q, mode),
            w_k: bind_tensor(tape, &self.w_k, mode),
            w_v: bind_tensor(tape, &self.w_v, mode),
            w_o: bind_tensor(tape, &self.w_o, mode),
        }
    }
}

/// Key/value history of one attention layer. Buffers are laid out
/// `[n_kv_heads, capacity, head_dim]` and allocated once.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKvCache {
    n_kv_heads: usize,
    head_dim: usize,
    capacity: usize,
    filled: usize,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl LayerKvCache {
    pub fn new(n_kv_heads: usize, head_dim: usize, capacity: usize) -> Self {
        let n = n_kv_heads * capacity * head_dim;
        Self {
            n_kv_heads,
            head_dim,
            capacity,
            filled: 0,
            k: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    /// Bytes held by the key and value buffers.
    pub fn bytes(&self) -> usize {
        (self.k.len() + self.v.len()) * std::mem::size_of::<f32>()
    }

    /// Cached keys and values of one kv head, `[filled, head_dim]` each.
    fn history(&self, head: usize) -> (&[f32], &[f32]) {
        let start = head * self.capacity * self.head_dim;
        let end = start + self.filled * self.head_dim;
        (&self.k[start..end], &self.v[start..end])
    }

    /// Appends `t` rows of `[t, n_kv_heads * head_dim]` keys and values.
    fn append<E: Element>(&mut self, k: &[E], v: &[E], t: usize) -> Result<()> {
        if self.filled + t > self.capacity {
            return Err(Error::Range(format!(
                "kv cache overflow: {} + {t} > capacity {}",
                self.filled, self.capacity
            )));
        }
        let (hd, width) = (self.head_dim, self.n_kv_heads * self.head_dim);
        for r in 0..t {
            for g in 0..self.n_kv_heads {
                let dst = (g * self.capacity + self.filled + r) * hd;
                let src = r * width + g * hd;
                for i in 0..hd {
                    self.k[dst + i] = k[src + i].f64() as f32;
                    self.v[dst + i] = v[src + i].f64() as f32;
                }
            }
        }
        self.filled += t;
        Ok(())
    }
}

/// Causal grouped-query attention over `x` [t, hidden].
///
/// Query head `h` reads key/value head `h / (n_heads / n_kv_heads)`. Rotary
/// embeddings are applied to queries and keys at positions
/// `start_pos..start_pos + t`. With a cache, `start_pos` must equal the cache
/// fill level; scores then cover the cached rows followed by the new ones and
/// the new keys/values are appended afterwards.
pub fn gqa_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    layer: &AttentionLayer,
    vars: &AttentionVars,
    table: &RotaryTable,
    cache: Option<&mut LayerKvCache>,
    start_pos: usize,
) -> Result<Var> {
    let (t, _) = tape.value(x).dims2()?;
    let hd = layer.head_dim;
    if table.head_dim() != hd {
        return Err(Error::Contract(format!(
            "rotary table head_dim {} != attention head_dim {hd}",
            table.head_dim()
        )));
    }
    let hist_len = match cache.as_deref() {
        Some(c) => {
            if c.filled != start_pos {
                return Err(Error::Contract(format!(
                    "cache holds {} positions but start_pos is {start_pos}",
                    c.filled
                )));
            }
            if c.n_kv_heads != layer.n_kv_heads || c.head_dim != hd {
                return Err(Error::Contract(
                    "cache geometry does not match the attention layer".into(),
                ));
            }
            if c.filled + t > c.capacity {
                return Err(Error::Range(format!(
                    "kv cache overflow: {} + {t} > capacity {}",
                    c.filled, c.capacity
                )));
            }
            c.filled
        }
        None => 0,
    };

    let q = tape.matmul(x, vars.w_q)?;
    let q = rope_apply(tape, q, table, start_pos)?;
    let k = tape.matmul(x, vars.w_k)?;
    let k = rope_apply(tape, k, table, start_pos)?;
    let v = tape.matmul(x, vars.w_v)?;

    let mut keys_t = Vec::with_capacity(layer.n_kv_heads);
    let mut values = Vec::with_capacity(layer.n_kv_heads);
    for g in 0..layer.n_kv_heads {
        let mut kg = tape.slice_cols(k, g * hd, hd)?;
        let mut vg = tape.slice_cols(v, g * hd, hd)?;
        if let Some(c) = cache.as_deref() {
            if hist_len > 0 {
                let (hk, hv) = c.history(g);
                let hk = tape.constant(Tensor::new(
                    &[hist_len, hd],
                    hk.iter().map(|&a| E::of(a as f64)).collect(),
                )?);
                let hv = tape.constant(Tensor::new(
                    &[hist_len, hd],
                    hv.iter().map(|&a| E::of(a as f64)).collect(),
                )?);
                kg = tape.concat_rows(&[hk, kg])?;
                vg = tape.concat_rows(&[hv, vg])?;
            }
        }
        keys_t.push(tape.transpose(kg)?);
        values.push(vg);
    }

    let scale = E::of(1.0 / (hd as f64).sqrt());
    let group = layer.group_size();
    let mut heads = Vec::with_capacity(layer.n_heads);
    for h in 0..layer.n_heads {
        let g = h / group;
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let scores = tape.matmul(qh, keys_t[g])?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.causal_mask(scores, hist_len)?;
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, values[g])?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, vars.w_o)?;

    if let Some(c) = cache {
        let (kv, vv) = (tape.value(k).data().to_vec(), tape.value(v).data().to_vec());
        c.append(&kv, &vv, t)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwiGluMlp {
    /// [hidden, intermediate]
    pub w_gate: Tensor,
    /// [hidden, intermediate]
    pub w_up: Tensor,
    /// [intermediate, hidden]
    pub w_down: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SwiGluVars {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl SwiGluMlp {
    pub fn validate(&self) -> Result<()> {
        let (hidden, inter) = self.w_gate.dims2()?;
        if self.w_up.shape() != [hidden, inter] || self.w_down.shape() != [inter, hidden] {
            return Err(Error::Config(format!(
                "swiglu shapes disagree: gate {:?} up {:?} down {:?}",
                self.w_gate.shape(),
                self.w_up.shape(),
                self.w_down.shape()
            )));
        }
        Ok(())
    }

    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, mode: Bind) -> SwiGluVars {
        SwiGluVars {
            w_gate: bind_tensor(tape, &self.w_gate, mode),
            w_up: bind_tensor(tape, &self.w_up, mode),
            w_down: bind_tensor(tape, &self.w_down, mode),
        }
    }
}

/// `w_down(silu(x w_gate) * (x w_up))`, no biases.
pub fn swiglu<E: Element>(tape: &mut Tape<E>, x: Var, vars: &SwiGluVars) -> Result<Var> {
    let gate = tape.matmul(x, vars.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, vars.w_up)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, vars.w_down)
}
