//! Byte-level tokenization, corpus ingestion, batching and token corruption.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type TokenSequence = Vec<usize>;

/// 256 byte tokens followed by pad, begin and end specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

pub const BYTE_TOKENS: usize = 256;

impl Default for Vocabulary {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Vocabulary {
    pub fn byte_level() -> Self {
        Self {
            size: BYTE_TOKENS + 3,
            pad: BYTE_TOKENS,
            bos: BYTE_TOKENS + 1,
            eos: BYTE_TOKENS + 2,
        }
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= BYTE_TOKENS && id < self.size
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        text.bytes().map(usize::from).collect()
    }

    /// Decodes ordinary tokens; special tokens render as nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size {
                return Err(CoreError::TokenRange { id, size: self.size });
            }
            if id < BYTE_TOKENS {
                bytes.push(id as u8);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Human-readable form of one token, used by traces and the probe REPL.
    pub fn token_str(&self, id: usize) -> String {
        match id {
            _ if id == self.pad => "<pad>".into(),
            _ if id == self.bos => "<bos>".into(),
            _ if id == self.eos => "<eos>".into(),
            _ if id < BYTE_TOKENS => {
                let b = id as u8;
                if b.is_ascii_graphic() || b == b' ' {
                    (b as char).to_string()
                } else {
                    format!("\\x{b:02x}")
                }
            }
            _ => format!("<{id}?>"),
        }
    }

    /// `<bos> text` as a generation prompt.
    pub fn prompt(&self, text: &str) -> TokenSequence {
        let mut ids = vec![self.bos];
        ids.extend(self.encode(text));
        ids
    }
}

/// A token stream of `<bos> doc <eos>` units; segments may cross documents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
}

const BIN_MAGIC: &[u8; 4] = b"BWTK";
const BIN_VERSION: u16 = 1;

impl Corpus {
    pub fn from_documents<'a>(vocab: &Vocabulary, docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = Vec::new();
        for d in docs {
            tokens.push(vocab.bos);
            tokens.extend(vocab.encode(d));
            tokens.push(vocab.eos);
        }
        Self { tokens }
    }

    /// Reads a text file; with `per_line` every non-empty line is a document.
    pub fn load_text(vocab: &Vocabulary, path: &Path, per_line: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(if per_line {
            Self::from_documents(vocab, text.lines().filter(|l| !l.trim().is_empty()))
        } else {
            Self::from_documents(vocab, [text.as_str()])
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Pre-tokenized format: magic, u16 version, u8 token width, u64 count,
    /// then little-endian ids.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(BIN_MAGIC)?;
        w.write_all(&BIN_VERSION.to_le_bytes())?;
        w.write_all(&[2u8])?;
        w.write_all(&(self.tokens.len() as u64).to_le_bytes())?;
        for &t in &self.tokens {
            w.write_all(&(t as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(vocab: &Vocabulary, mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 15];
        r.read_exact(&mut head)
            .map_err(|e| CoreError::Ingest(format!("short header: {e}")))?;
        if &head[..4] != BIN_MAGIC {
            return Err(CoreError::Ingest("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != BIN_VERSION {
            return Err(CoreError::Ingest(format!("unsupported version {version}")));
        }
        let width = head[6] as usize;
        if !(1..=4).contains(&width) {
            return Err(CoreError::Ingest(format!("unsupported token width {width}")));
        }
        let count = u64::from_le_bytes(head[7..15].try_into().expect("8 bytes")) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| CoreError::Ingest(e.to_string()))?;
        if payload.len() != count * width {
            return Err(CoreError::Ingest(format!(
                "expected {} payload bytes, found {}",
                count * width,
                payload.len()
            )));
        }
        let mut tokens = Vec::with_capacity(count);
        for chunk in payload.chunks(width) {
            let mut buf = [0u8; 4];
            buf[..width].copy_from_slice(chunk);
            let id = u32::from_le_bytes(buf) as usize;
            if id >= vocab.size {
                return Err(CoreError::TokenRange { id, size: vocab.size });
            }
            tokens.push(id);
        }
        Ok(Self { tokens })
    }

    /// Splits off the trailing `fraction` of the stream as a held-out corpus.
    pub fn split_heldout(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        (
            Corpus {
                tokens: self.tokens[..cut].to_vec(),
            },
            Corpus {
                tokens: self.tokens[cut..].to_vec(),
            },
        )
    }
}

/// `batch` rows of `seq` tokens, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl PretrainBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq {
            return Err(CoreError::contract(format!(
                "batch of {} tokens is not {batch}x{seq}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, batch, seq })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }
}

/// Start offsets of the contiguous, non-overlapping `seq`-length windows.
pub fn window_starts(corpus_len: usize, seq: usize) -> Vec<usize> {
    if seq == 0 {
        return Vec::new();
    }
    (0..corpus_len / seq).map(|i| i * seq).collect()
}

/// Shuffled fixed-length windows, cycling epochs indefinitely.
#[derive(Clone, Debug)]
pub struct SegmentSampler {
    tokens: Vec<usize>,
    starts: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    seq: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl SegmentSampler {
    pub fn new(corpus: &Corpus, seq: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq == 0 || batch == 0 {
            return Err(CoreError::Config("segment length and batch size must be positive".into()));
        }
        if corpus.len() < seq {
            return Err(CoreError::Ingest(format!(
                "corpus has {} tokens, fewer than one segment of {seq}",
                corpus.len()
            )));
        }
        let starts = window_starts(corpus.len(), seq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..starts.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            tokens: corpus.tokens.clone(),
            starts,
            order,
            cursor: 0,
            seq,
            batch,
            rng,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.starts.len()
    }

    /// Next full batch; reshuffles at each epoch boundary.
    pub fn next_batch(&mut self) -> PretrainBatch {
        let mut tokens = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = self.starts[self.order[self.cursor]];
            self.cursor += 1;
            tokens.extend_from_slice(&self.tokens[s..s + self.seq]);
        }
        PretrainBatch {
            tokens,
            batch: self.batch,
            seq: self.seq,
        }
    }
}

/// One shuffled epoch of batches; the last batch may hold fewer rows.
pub fn segment_batches(corpus: &Corpus, seq: usize, batch: usize, seed: u64) -> Result<Vec<PretrainBatch>> {
    let sampler = SegmentSampler::new(corpus, seq, batch, seed)?;
    let mut out = Vec::new();
    for chunk in sampler.order.chunks(batch) {
        let mut tokens = Vec::with_capacity(chunk.len() * seq);
        for &w in chunk {
            let s = sampler.starts[w];
            tokens.extend_from_slice(&corpus.tokens[s..s + seq]);
        }
        out.push(PretrainBatch {
            tokens,
            batch: chunk.len(),
            seq,
        });
    }
    Ok(out)
}

/// Substitutes exactly `round(rate·B·T)` distinct positions with a different
/// ordinary (byte) token.
pub fn corrupt_tokens(batch: &PretrainBatch, rate: f64, seed: u64) -> Result<PretrainBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CoreError::Config(format!("corruption rate {rate} outside [0, 1]")));
    }
    let n = batch.tokens.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    for pos in sample(&mut rng, n, count.min(n)).into_iter() {
        let old = out.tokens[pos];
        out.tokens[pos] = if old < BYTE_TOKENS {
            let r = rng.gen_range(0..BYTE_TOKENS - 1);
            if r >= old {
                r + 1
            } else {
                r
            }
        } else {
            rng.gen_range(0..BYTE_TOKENS)
        };
    }
    Ok(out)
}

/// Corrupts a whole corpus stream at `rate`, keeping document markers in place.
pub fn corrupt_corpus(corpus: &Corpus, vocab: &Vocabulary, rate: f64, seed: u64) -> Result<Corpus> {
    let ordinary: Vec<usize> = (0..corpus.len())
        .filter(|&i| !vocab.is_special(corpus.tokens[i]))
        .collect();
    let tokens: Vec<usize> = ordinary.iter().map(|&i| corpus.tokens[i]).collect();
    let n = tokens.len();
    let corrupted = corrupt_tokens(&PretrainBatch::new(tokens, 1, n)?, rate, seed)?;
    let mut out = corpus.clone();
    for (k, &i) in ordinary.iter().enumerate() {
        out.tokens[i] = corrupted.tokens[k];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub answer: String,
}

/// Reads newline-delimited JSON records `{"prompt": .., "answer": ..}`.
pub fn load_sft_records(path: &Path) -> Result<Vec<SftRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_sft_records(&text, &path.display().to_string())
}

pub fn parse_sft_records(text: &str, origin: &str) -> Result<Vec<SftRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SftRecord = serde_json::from_str(line).map_err(|e| CoreError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Padded prompt/answer rows with a per-position answer mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SftBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Prompt length of each row, counting the leading `<bos>`.
    pub prompt_len: Vec<usize>,
    /// 1 on answer tokens (including the closing `<eos>`), 0 elsewhere.
    pub mask: Vec<f32>,
}

impl SftBatch {
    pub fn from_records(vocab: &Vocabulary, records: &[SftRecord], max_len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(records.len() * max_len);
        let mut mask = Vec::with_capacity(records.len() * max_len);
        let mut prompt_len = Vec::with_capacity(records.len());
        for r in records {
            if r.answer.is_empty() {
                return Err(CoreError::Validation(format!("empty answer for prompt {:?}", r.prompt)));
            }
            let mut row = vocab.prompt(&r.prompt);
            let p = row.len();
            row.extend(vocab.encode(&r.answer));
            row.push(vocab.eos);
            if row.len() > max_len {
                return Err(CoreError::Validation(format!(
                    "record of {} tokens exceeds the maximum of {max_len}",
                    row.len()
                )));
            }
            let used = row.len();
            mask.extend((0..max_len).map(|i| if i >= p && i < used { 1.0 } else { 0.0 }));
            row.resize(max_len, vocab.pad);
            tokens.extend(row);
            prompt_len.push(p);
        }
        Ok(Self {
            tokens,
            batch: records.len(),
            seq: max_len,
            prompt_len,
            mask,
        })
    }

    /// A batch whose mask covers every position after the first.
    pub fn from_pretrain(batch: &PretrainBatch) -> Self {
        let mask = (0..batch.tokens.len())
            .map(|i| if i % batch.seq == 0 { 0.0 } else { 1.0 })
            .collect();
        Self {
            tokens: batch.tokens.clone(),
            batch: batch.batch,
            seq: batch.seq,
            prompt_len: vec![1; batch.batch],
            mask,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }

    /// Weight of each next-token target (positions 1..seq of every row).
    pub fn target_weights(&self) -> Vec<f32> {
        let mut w = Vec::with_capacity(self.batch * (self.seq - 1));
        for r in 0..self.batch {
            w.extend_from_slice(&self.mask[r * self.seq + 1..(r + 1) * self.seq]);
        }
        w
    }
}

/// Shuffled mini-batches over SFT records for a number of epochs.
pub fn sft_epochs(
    vocab: &Vocabulary,
    records: &[SftRecord],
    batch: usize,
    max_len: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<SftBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..records.len()).collect();
    for _ in 0..epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch.max(1)) {
            let recs: Vec<SftRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            out.push(SftBatch::from_records(vocab, &recs, max_len)?);
        }
    }
    Ok(out)
}

/// Histogram helper shared by reports.
pub fn histogram(ids: &[usize], size: usize) -> Vec<u32> {
    let mut h = vec![0u32; size];
    for &i in ids {
        if i < size {
            h[i] += 1;
        }
    }
    h
}

/// Counts of distinct tokens, for diagnostics.
pub fn token_counts(tokens: &[usize]) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}
