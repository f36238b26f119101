//! Training loop, checkpoints and deterministic resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::data::{
    ByteReader, Corpus, MixtureSpec, PackedBlock, Prefetcher, Sampler, SamplerState, TokenShard,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{Model, ModelConfig, Parameters};
use crate::optim::{clip_grad_norm, global_norm, AdamWConfig, AdamWState, LrSchedule};

pub const DESK_BATCH_TOKENS: usize = 4096;
pub const FULL_BATCH_TOKENS: usize = 2_097_152;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub batch_tokens: usize,
    pub total_steps: u64,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    pub grad_clip: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub shards: Vec<PathBuf>,
    pub mixture: MixtureSpec,
    pub prefetch: usize,
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "preset",
        "batch_tokens",
        "total_steps",
        "lr_max",
        "lr_min",
        "warmup_steps",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "grad_clip",
        "seed",
        "checkpoint_every",
        "log_every",
        "shards",
        "mixture",
        "exclude_subsets",
    ];

    /// Reads training and model keys; `total_steps` is required.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let known: Vec<&str> = Self::KEYS
            .iter()
            .chain(ModelConfig::KEYS.iter())
            .chain(["prefetch"].iter())
            .copied()
            .collect();
        kv.check_known(&known)?;
        let preset = kv.raw("preset").unwrap_or("desk").to_string();
        let model = ModelConfig::from_kv(kv)?;
        let default_batch = if preset.starts_with("full") {
            FULL_BATCH_TOKENS
        } else {
            DESK_BATCH_TOKENS
        };
        let total_steps: u64 = kv
            .get("total_steps")?
            .ok_or_else(|| Error::Config("total_steps is required".into()))?;
        let schedule = LrSchedule::new(
            kv.get("lr_max")?.unwrap_or(4.0e-4),
            kv.get("lr_min")?.unwrap_or(4.0e-5),
            kv.get("warmup_steps")?.unwrap_or(2000),
            total_steps,
        )?;
        let defaults = AdamWConfig::default();
        let adamw = AdamWConfig {
            beta1: kv.get("beta1")?.unwrap_or(defaults.beta1),
            beta2: kv.get("beta2")?.unwrap_or(defaults.beta2),
            eps: kv.get("adam_eps")?.unwrap_or(defaults.eps),
            weight_decay: kv.get("weight_decay")?.unwrap_or(defaults.weight_decay),
        };
        let mut mixture = MixtureSpec::default();
        if let Some(w) = kv.raw("mixture") {
            mixture.weights = MixtureSpec::parse_weights(w)?;
        }
        if let Some(ex) = kv.raw("exclude_subsets") {
            mixture.excluded_subsets = split_list(ex).map(str::to_string).collect();
        }
        let cfg = Self {
            preset,
            model,
            batch_tokens: kv.get("batch_tokens")?.unwrap_or(default_batch),
            total_steps,
            schedule,
            adamw,
            grad_clip: kv.get("grad_clip")?.unwrap_or(1.0),
            seed: kv.get("seed")?.unwrap_or(0),
            checkpoint_every: kv.get("checkpoint_every")?.unwrap_or(0),
            log_every: kv.get("log_every")?.unwrap_or(1),
            shards: kv
                .raw("shards")
                .map_or(Vec::new(), |s| split_list(s).map(PathBuf::from).collect()),
            mixture,
            prefetch: kv.get("prefetch")?.unwrap_or(2),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.mixture.validate()?;
        let ctx = self.model.context_len;
        if self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(ctx) {
            return Err(Error::Config(format!(
                "batch_tokens ({}) must be a positive multiple of context_len ({ctx})",
                self.batch_tokens
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

/// Seconds since an arbitrary origin. Injected so throughput can be tested.
pub trait Clock {
    fn now(&mut self) -> f64;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Advances by `step` seconds on every reading after the first.
#[derive(Clone, Debug)]
pub struct FakeClock {
    t: f64,
    step: f64,
    started: bool,
}

impl FakeClock {
    pub fn new(step: f64) -> Self {
        Self {
            t: 0.0,
            step,
            started: false,
        }
    }
}

impl Clock for FakeClock {
    fn now(&mut self) -> f64 {
        if self.started {
            self.t += self.step;
        }
        self.started = true;
        self.t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    /// Global norm before clipping.
    pub raw_grad_norm: f64,
    /// Global norm of the gradients handed to the optimizer.
    pub grad_norm: f64,
    pub tokens: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

/// Model, optimizer state and schedule; `step` counts completed updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamWState,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
}

impl Trainer {
    pub fn new(model: Model, adamw: AdamWConfig, schedule: LrSchedule, grad_clip: f64) -> Self {
        let sizes: Vec<usize> = model
            .params
            .tensors()
            .iter()
            .map(|(_, _, t)| t.len())
            .collect();
        Self {
            model,
            opt: AdamWState::new(adamw, &sizes),
            schedule,
            grad_clip,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(cfg.model.clone(), cfg.seed)?;
        Ok(Self::new(
            model,
            cfg.adamw.clone(),
            cfg.schedule.clone(),
            cfg.grad_clip,
        ))
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// forward, loss, backward, clip, AdamW at `lr_at(step)`. Returns the
    /// loss before the update; the clock is not consulted.
    pub fn train_step(&mut self, blocks: &[PackedBlock]) -> Result<StepStats> {
        let step = self.opt.step;
        let lr = self.schedule.lr_at(step);
        let batch: Vec<(&[u32], Option<&[bool]>)> = blocks
            .iter()
            .map(|b| (b.tokens.as_slice(), Some(b.ignore.as_slice())))
            .collect();
        let (loss, mut grads) = self.model.loss_and_grads(&batch)?;
        let numerical = |reason: &str, grad_norm: f64| Error::Numerical {
            step,
            lr,
            grad_norm,
            reason: reason.to_string(),
        };
        if !loss.is_finite() {
            return Err(numerical(&format!("loss is {loss}"), global_norm(&grads)));
        }
        let (raw, _) = clip_grad_norm(&mut grads, self.grad_clip).map_err(|e| match e {
            Error::Numerical { grad_norm, .. } => numerical("non-finite gradient", grad_norm),
            other => other,
        })?;
        let grad_norm = global_norm(&grads);
        let mut params: Vec<_> = self
            .model
            .params
            .tensors_mut()
            .into_iter()
            .map(|(kind, t)| (kind, t.data_mut()))
            .collect();
        self.opt.step(&mut params, &grads, lr)?;
        Ok(StepStats {
            step,
            lr,
            loss,
            raw_grad_norm: raw,
            grad_norm,
            tokens: blocks.iter().map(|b| b.tokens.len()).sum(),
            seconds: 0.0,
            tokens_per_sec: 0.0,
        })
    }

    /// [`Trainer::train_step`] timed with `clock`.
    pub fn timed_step(
        &mut self,
        blocks: &[PackedBlock],
        clock: &mut dyn Clock,
    ) -> Result<StepStats> {
        let t0 = clock.now();
        let mut stats = self.train_step(blocks)?;
        let dt = clock.now() - t0;
        stats.seconds = dt;
        stats.tokens_per_sec = if dt > 0.0 {
            stats.tokens as f64 / dt
        } else {
            f64::INFINITY
        };
        Ok(stats)
    }

    pub fn checkpoint(&self, sampler: Option<SamplerState>) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.model.params.clone(),
            opt: self.opt.clone(),
            schedule: self.schedule.clone(),
            grad_clip: self.grad_clip,
            sampler,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Ok(Self {
            model: Model::new(ck.model, ck.params)?,
            opt: ck.opt,
            schedule: ck.schedule,
            grad_clip: ck.grad_clip,
        })
    }
}

/// Where training batches come from.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Vec<PackedBlock>>;
    /// State to store in a checkpoint taken after the last delivered batch.
    fn sampler_state(&self) -> Option<SamplerState>;
}

/// The same batch every step.
pub struct FixedBatch(pub Vec<PackedBlock>);

impl BatchSource for FixedBatch {
    fn next_batch(&mut self) -> Result<Vec<PackedBlock>> {
        Ok(self.0.clone())
    }

    fn sampler_state(&self) -> Option<SamplerState> {
        None
    }
}

fn unmasked(blocks: Vec<Vec<u32>>) -> Vec<PackedBlock> {
    blocks
        .into_iter()
        .map(|tokens| PackedBlock {
            ignore: vec![false; tokens.len()],
            tokens,
        })
        .collect()
}

/// Mixture sampling on the calling thread.
pub struct MixtureSource {
    pub sampler: Sampler,
    pub batch_tokens: usize,
    pub block_len: usize,
}

impl BatchSource for MixtureSource {
    fn next_batch(&mut self) -> Result<Vec<PackedBlock>> {
        Ok(unmasked(
            self.sampler
                .sample_batch(self.batch_tokens, self.block_len)?,
        ))
    }

    fn sampler_state(&self) -> Option<SamplerState> {
        Some(self.sampler.state().clone())
    }
}

/// Mixture sampling on a producer thread.
pub struct PrefetchSource {
    inner: Prefetcher,
    state: SamplerState,
}

impl PrefetchSource {
    pub fn new(sampler: Sampler, batch_tokens: usize, block_len: usize, depth: usize) -> Self {
        let state = sampler.state().clone();
        Self {
            inner: Prefetcher::spawn(sampler, batch_tokens, block_len, depth),
            state,
        }
    }
}

impl BatchSource for PrefetchSource {
    fn next_batch(&mut self) -> Result<Vec<PackedBlock>> {
        let (batch, state) = self.inner.next()?;
        self.state = state;
        Ok(unmasked(batch))
    }

    fn sampler_state(&self) -> Option<SamplerState> {
        Some(self.state.clone())
    }
}

/// Loads the configured shards and builds a sampler, resuming from `state`
/// when given.
pub fn mixture_sampler(cfg: &TrainConfig, state: Option<SamplerState>) -> Result<Sampler> {
    if cfg.shards.is_empty() {
        return Err(Error::Config("no shards configured".into()));
    }
    let shards = cfg
        .shards
        .iter()
        .map(|p| {
            let s = TokenShard::load(p)?;
            s.validate(cfg.model.vocab)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::new(&shards, &cfg.mixture)?;
    let state = state.unwrap_or_else(|| SamplerState::new(cfg.seed));
    Sampler::resume(corpus, cfg.mixture.clone(), state)
}

#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Checkpoints are written here as `step_{n:06}.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only CSV loss log.
    pub loss_log: Option<PathBuf>,
}

pub const LOSS_LOG_HEADER: &str = "step,lr,loss,grad_norm,tokens_per_sec";

fn append_log(path: &Path, rows: &[StepStats]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOSS_LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&format!(
            "{},{:e},{},{},{}\n",
            r.step, r.lr, r.loss, r.grad_norm, r.tokens_per_sec
        ));
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Trains until `trainer.step() == total_steps`, checkpointing every
/// `checkpoint_every` steps and at the end. Returns per-step stats.
pub fn train_loop(
    trainer: &mut Trainer,
    total_steps: u64,
    checkpoint_every: u64,
    log_every: u64,
    source: &mut dyn BatchSource,
    clock: &mut dyn Clock,
    out: &RunOutputs,
) -> Result<Vec<StepStats>> {
    let mut history = Vec::new();
    let mut pending = Vec::new();
    while trainer.step() < total_steps {
        let batch = source.next_batch()?;
        let stats = trainer.timed_step(&batch, clock)?;
        if stats.step % log_every.max(1) == 0 {
            log::info!(
                "step {} lr {:.3e} loss {:.4} grad_norm {:.3} tok/s {:.1}",
                stats.step,
                stats.lr,
                stats.loss,
                stats.raw_grad_norm,
                stats.tokens_per_sec
            );
        }
        pending.push(stats.clone());
        history.push(stats);
        let done = trainer.step();
        let due =
            (checkpoint_every > 0 && done.is_multiple_of(checkpoint_every)) || done == total_steps;
        if due {
            if let Some(path) = &out.loss_log {
                append_log(path, &pending)?;
                pending.clear();
            }
            if let Some(dir) = &out.checkpoint_dir {
                trainer
                    .checkpoint(source.sampler_state())
                    .save(&checkpoint_path(dir, done))?;
            }
        }
    }
    if let Some(path) = &out.loss_log {
        if !pending.is_empty() {
            append_log(path, &pending)?;
        }
    }
    Ok(history)
}

const CKPT_MAGIC: &[u8; 4] = b"TLCK";
const CKPT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u16,
    model: ModelConfig,
    optimizer: AdamWState,
    schedule: LrSchedule,
    grad_clip: f64,
    sampler: Option<SamplerState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Everything needed to continue training bit-for-bit.
///
/// File layout: `TLCK`, u16 version, u32 header length, JSON header, then
/// for each tensor in order its values, then all first moments, then all
/// second moments, every value a little-endian f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Parameters,
    pub opt: AdamWState,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub sampler: Option<SamplerState>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.params.tensors();
        let header = CheckpointHeader {
            version: CKPT_VERSION,
            model: self.model.clone(),
            optimizer: self.opt.clone(),
            schedule: self.schedule.clone(),
            grad_clip: self.grad_clip,
            sampler: self.sampler.clone(),
            tensors: tensors
                .iter()
                .map(|(name, _, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel = self.params.numel() as usize;
        let mut out = Vec::with_capacity(10 + json.len() + 12 * numel);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let buffers = tensors
            .iter()
            .map(|(_, _, t)| t.data())
            .chain(self.opt.m.iter().map(Vec::as_slice))
            .chain(self.opt.v.iter().map(Vec::as_slice));
        for buf in buffers {
            for &x in buf {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.model.validate()?;
        let sizes: Vec<usize> = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product())
            .collect();
        let read_set = |r: &mut ByteReader| -> Result<Vec<Vec<f32>>> {
            sizes
                .iter()
                .map(|&n| {
                    Ok(r.take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect())
                })
                .collect()
        };
        let values = read_set(&mut r)?;
        let m = read_set(&mut r)?;
        let v = read_set(&mut r)?;
        r.finish()?;
        let params = Parameters::from_flat(&header.model, values)?;
        for ((name, _, t), entry) in params.tensors().iter().zip(&header.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {:?} {:?} does not match the model's {name:?} {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
        }
        let mut opt = header.optimizer;
        opt.m = m;
        opt.v = v;
        Ok(Self {
            model: header.model,
            params,
            opt,
            schedule: header.schedule,
            grad_clip: header.grad_clip,
            sampler: header.sampler,
        })
    }

    /// Atomic: the file appears complete or not at all.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::fsutil::read(path)?)
    }
}
