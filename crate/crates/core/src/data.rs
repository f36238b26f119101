//! Corpus plumbing: a byte-level tokenizer, document packing, the binary
//! shard format and the seeded two-source mixture sampler.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
pub const PAD_ID: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

/// Bytes map to ids 0..256; 256..259 are reserved.
#[derive(Clone, Copy, Debug, Default)]
pub struct MiniTokenizer;

impl MiniTokenizer {
    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Reserved ids are dropped; anything past the vocabulary is an error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS_ID | EOS_ID | PAD_ID => {}
                _ => {
                    return Err(Error::Index {
                        what: "token id",
                        index: id as usize,
                        bound: BYTE_VOCAB,
                    })
                }
            }
        }
        Ok(out)
    }
}

fn is_reserved(id: u32) -> bool {
    matches!(id, BOS_ID | EOS_ID | PAD_ID)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBlock {
    pub tokens: Vec<u32>,
    /// True where the token is padding and must not be predicted.
    pub ignore: Vec<bool>,
}

/// Concatenates documents, each followed by exactly one `eos_id`, and cuts
/// the stream into `context_len` blocks. The last block is filled with
/// [`PAD_ID`].
pub fn pack_documents(
    docs: &[Vec<u32>],
    context_len: usize,
    eos_id: u32,
) -> Result<Vec<PackedBlock>> {
    if docs.is_empty() {
        return Err(Error::Validation("no documents to pack".into()));
    }
    if context_len == 0 {
        return Err(Error::Config("context_len must be positive".into()));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for (i, doc) in docs.iter().enumerate() {
        if let Some(&bad) = doc.iter().find(|&&t| is_reserved(t) || t == eos_id) {
            return Err(Error::Validation(format!(
                "document {i} contains reserved id {bad}"
            )));
        }
        stream.extend_from_slice(doc);
        stream.push(eos_id);
    }
    Ok(stream
        .chunks(context_len)
        .map(|chunk| {
            let mut tokens = chunk.to_vec();
            let mut ignore = vec![false; chunk.len()];
            tokens.resize(context_len, PAD_ID);
            ignore.resize(context_len, true);
            PackedBlock { tokens, ignore }
        })
        .collect())
}

/// Inverse of [`pack_documents`].
pub fn unpack_blocks(blocks: &[PackedBlock], eos_id: u32) -> Vec<Vec<u32>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for b in blocks {
        for (&t, &ign) in b.tokens.iter().zip(&b.ignore) {
            if ign {
                continue;
            }
            if t == eos_id {
                docs.push(std::mem::take(&mut cur));
            } else {
                cur.push(t);
            }
        }
    }
    docs
}

const SHARD_MAGIC: &[u8; 4] = b"TLSH";
const SHARD_VERSION: u16 = 1;

/// A tagged slice of pre-tokenized documents.
///
/// Tags are `source` or `source:subset` (for example `natural:github`); the
/// subset part is what [`MixtureSpec::excluded_subsets`] matches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenShard {
    pub source_tag: String,
    pub docs: Vec<Vec<u32>>,
}

impl TokenShard {
    pub fn new(source_tag: impl Into<String>, docs: Vec<Vec<u32>>) -> Self {
        Self {
            source_tag: source_tag.into(),
            docs,
        }
    }

    pub fn source(&self) -> &str {
        self.source_tag.split(':').next().unwrap_or("")
    }

    pub fn subset(&self) -> Option<&str> {
        self.source_tag.split_once(':').map(|(_, s)| s)
    }

    pub fn token_count(&self) -> u64 {
        self.docs.iter().map(|d| d.len() as u64).sum()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.source_tag.is_empty() {
            return Err(Error::Validation("shard has an empty source tag".into()));
        }
        for (i, doc) in self.docs.iter().enumerate() {
            if let Some(&t) = doc.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Validation(format!(
                    "shard {:?} doc {i}: token {t} >= vocab {vocab}",
                    self.source_tag
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(22 + self.source_tag.len() + 4 * self.token_count() as usize);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.source_tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.source_tag.as_bytes());
        out.extend_from_slice(&(self.docs.len() as u64).to_le_bytes());
        for doc in &self.docs {
            out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
            for &t in doc {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SHARD_MAGIC {
            return Err(Error::Format("not a token shard (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != SHARD_VERSION {
            return Err(Error::Format(format!(
                "unsupported shard version {version}"
            )));
        }
        let tag_len = r.u32()? as usize;
        let source_tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::Format("shard tag is not UTF-8".into()))?;
        let n_docs = r.u64()?;
        let mut docs = Vec::new();
        for _ in 0..n_docs {
            let len = r.u32()? as usize;
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Format("doc too long".into()))?,
            )?;
            docs.push(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        r.finish()?;
        Ok(Self { source_tag, docs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::fsutil::read(path)?)
    }
}

/// Little-endian cursor over a byte slice; every short read is a format error.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Probability that a block comes from each source.
    pub weights: BTreeMap<String, f64>,
    pub excluded_subsets: Vec<String>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            weights: [("natural".to_string(), 0.7), ("code".to_string(), 0.3)].into(),
            excluded_subsets: vec!["github".to_string()],
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("mixture has no sources".into()));
        }
        if let Some((k, w)) = self
            .weights
            .iter()
            .find(|(_, &w)| !(w > 0.0 && w.is_finite()))
        {
            return Err(Error::Config(format!("mixture weight for {k:?} is {w}")));
        }
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Parses `natural:0.7,code:0.3`.
    pub fn parse_weights(text: &str) -> Result<BTreeMap<String, f64>> {
        text.split(',')
            .map(|part| {
                let (k, v) = part
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad mixture entry {part:?}")))?;
                let w = v
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("mixture weight {v:?}: {e}")))?;
                Ok((k.trim().to_string(), w))
            })
            .collect()
    }
}

/// Per-source token streams after subset exclusion: every document followed
/// by one EOS, shards in the order given.
#[derive(Clone, Debug)]
pub struct Corpus {
    streams: BTreeMap<String, Vec<u32>>,
    /// Per source: (shard index, doc index, offset in stream) of each doc start.
    doc_starts: BTreeMap<String, Vec<(usize, usize, u64)>>,
}

impl Corpus {
    pub fn new(shards: &[TokenShard], spec: &MixtureSpec) -> Result<Self> {
        spec.validate()?;
        let mut streams: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        let mut doc_starts: BTreeMap<String, Vec<(usize, usize, u64)>> = BTreeMap::new();
        for (si, shard) in shards.iter().enumerate() {
            if shard
                .subset()
                .is_some_and(|s| spec.excluded_subsets.iter().any(|e| e == s))
            {
                log::info!("excluding shard {si} ({})", shard.source_tag);
                continue;
            }
            let stream = streams.entry(shard.source().to_string()).or_default();
            let starts = doc_starts.entry(shard.source().to_string()).or_default();
            for (di, doc) in shard.docs.iter().enumerate() {
                starts.push((si, di, stream.len() as u64));
                stream.extend_from_slice(doc);
                stream.push(EOS_ID);
            }
        }
        for source in spec.weights.keys() {
            if streams.get(source).is_none_or(Vec::is_empty) {
                return Err(Error::Config(format!(
                    "mixture source {source:?} has no data"
                )));
            }
        }
        Ok(Self {
            streams,
            doc_starts,
        })
    }

    /// Tokens in one pass over `source`, EOS separators included.
    pub fn source_len(&self, source: &str) -> Option<u64> {
        self.streams.get(source).map(|s| s.len() as u64)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.streams.keys().map(String::as_str)
    }

    fn stream(&self, source: &str) -> &[u32] {
        &self.streams[source]
    }
}

/// Everything needed to reproduce the rest of the sample stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// ChaCha word position of the source-choice generator.
    pub rng_word_pos: u128,
    /// Tokens drawn so far from each source, cumulative across wraps.
    pub consumed: BTreeMap<String, u64>,
    pub blocks_drawn: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng_word_pos: 0,
            consumed: BTreeMap::new(),
            blocks_drawn: 0,
        }
    }
}

/// Position inside a source: which shard and document the next token
/// comes from, the offset into that document, and completed passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Cursor {
    pub shard: usize,
    pub doc: usize,
    pub offset: u64,
    pub wraps: u64,
}

pub struct Sampler {
    corpus: Corpus,
    spec: MixtureSpec,
    state: SamplerState,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(corpus: Corpus, spec: MixtureSpec, seed: u64) -> Result<Self> {
        Self::resume(corpus, spec, SamplerState::new(seed))
    }

    pub fn resume(corpus: Corpus, spec: MixtureSpec, state: SamplerState) -> Result<Self> {
        spec.validate()?;
        if let Some(s) = spec.weights.keys().find(|s| corpus.source_len(s).is_none()) {
            return Err(Error::Config(format!("mixture source {s:?} has no data")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Self {
            corpus,
            spec,
            state,
            rng,
        })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// Picks a source by weight, then reads the next `len` tokens of it.
    pub fn next_block(&mut self, len: usize) -> Result<(String, Vec<u32>)> {
        if len == 0 {
            return Err(Error::Config("block length must be positive".into()));
        }
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (name, &w) in &self.spec.weights {
            acc += w;
            if u < acc {
                chosen = Some(name);
                break;
            }
        }
        let source = chosen
            .or_else(|| self.spec.weights.keys().last())
            .expect("validated non-empty")
            .clone();
        let stream = self.corpus.stream(&source);
        let consumed = self.state.consumed.entry(source.clone()).or_insert(0);
        let n = stream.len() as u64;
        let block = (0..len as u64)
            .map(|i| stream[((*consumed + i) % n) as usize])
            .collect();
        *consumed += len as u64;
        self.state.blocks_drawn += 1;
        self.state.rng_word_pos = self.rng.get_word_pos();
        Ok((source, block))
    }

    /// `batch_tokens / block_len` blocks.
    pub fn sample_batch(&mut self, batch_tokens: usize, block_len: usize) -> Result<Vec<Vec<u32>>> {
        if block_len == 0 || batch_tokens == 0 || !batch_tokens.is_multiple_of(block_len) {
            return Err(Error::Config(format!(
                "batch_tokens ({batch_tokens}) must be a positive multiple of the block length ({block_len})"
            )));
        }
        (0..batch_tokens / block_len)
            .map(|_| self.next_block(block_len).map(|(_, b)| b))
            .collect()
    }

    pub fn cursor(&self, source: &str) -> Option<Cursor> {
        let n = self.corpus.source_len(source)?;
        let consumed = self.state.consumed.get(source).copied().unwrap_or(0);
        let pos = consumed % n;
        let starts = &self.corpus.doc_starts[source];
        let idx = starts.partition_point(|&(_, _, s)| s <= pos) - 1;
        let (shard, doc, start) = starts[idx];
        Some(Cursor {
            shard,
            doc,
            offset: pos - start,
            wraps: consumed / n,
        })
    }

    pub fn epoch_report(&self) -> EpochReport {
        epoch_report(&self.state, &self.corpus)
    }
}

/// Repetition above this many epochs is flagged.
pub const EPOCH_WARN_THRESHOLD: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epochs: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Fractional passes over each source so far.
pub fn epoch_report(state: &SamplerState, corpus: &Corpus) -> EpochReport {
    let mut epochs = BTreeMap::new();
    let mut warnings = Vec::new();
    for source in corpus.sources() {
        let n = corpus.source_len(source).unwrap_or(1);
        let e = state.consumed.get(source).copied().unwrap_or(0) as f64 / n as f64;
        if e > EPOCH_WARN_THRESHOLD {
            let msg =
                format!("source {source:?} repeated {e:.2} epochs (> {EPOCH_WARN_THRESHOLD})");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        epochs.insert(source.to_string(), e);
    }
    EpochReport { epochs, warnings }
}

/// A sampler running on its own thread, a bounded number of batches ahead.
/// The delivered sequence is the same as calling `sample_batch` in a loop.
pub struct Prefetcher {
    rx: Receiver<Result<(Vec<Vec<u32>>, SamplerState)>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(
        mut sampler: Sampler,
        batch_tokens: usize,
        block_len: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || loop {
            let item = sampler
                .sample_batch(batch_tokens, block_len)
                .map(|b| (b, sampler.state().clone()));
            let failed = item.is_err();
            if tx.send(item).is_err() || failed {
                return;
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    /// The next batch and the sampler state right after producing it.
    pub fn next(&self) -> Result<(Vec<Vec<u32>>, SamplerState)> {
        self.rx
            .recv()
            .map_err(|_| Error::Contract("prefetch thread stopped".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock the producer, then wait for it.
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
