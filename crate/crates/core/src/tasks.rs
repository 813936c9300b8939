//! Associative-retrieval task generators.
//!
//! A sample is a list of key–value pairs followed by a query key; the
//! target is the value stored under that key. Rendered samples put each
//! pair in its own segment (`key : value ,`) and the query in a final
//! segment (`key - value`), with the loss on the value tokens only.
//!
//! * Remember: keys are unique within a sample.
//! * Rewrite: keys repeat; the target is the value of the last occurrence.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentBatch;

/// Fixed token enumeration: symbols `0..16`, then separators and padding.
pub struct RetrievalVocab;

impl RetrievalVocab {
    pub const SYMBOLS: usize = 16;
    pub const COLON: usize = 16;
    pub const COMMA: usize = 17;
    pub const DASH: usize = 18;
    pub const PAD: usize = 19;
    pub const SIZE: usize = 20;

    pub fn token_str(t: usize) -> String {
        match t {
            Self::COLON => ":".into(),
            Self::COMMA => ",".into(),
            Self::DASH => "-".into(),
            Self::PAD => "<pad>".into(),
            s => s.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Remember,
    Rewrite,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Remember => "remember",
            TaskKind::Rewrite => "rewrite",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remember" => Ok(TaskKind::Remember),
            "rewrite" => Ok(TaskKind::Rewrite),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Task family plus token lengths of keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub key_len: usize,
    #[serde(default = "one")]
    pub value_len: usize,
}

fn one() -> usize {
    1
}

impl TaskSpec {
    /// Three-token unique keys, one-token values.
    pub fn remember() -> Self {
        Self {
            kind: TaskKind::Remember,
            key_len: 3,
            value_len: 1,
        }
    }

    /// One-token keys drawn with replacement, one-token values.
    pub fn rewrite() -> Self {
        Self {
            kind: TaskKind::Rewrite,
            key_len: 1,
            value_len: 1,
        }
    }

    pub fn keyspace(&self) -> u64 {
        (RetrievalVocab::SYMBOLS as u64).saturating_pow(self.key_len as u32)
    }

    /// Number of distinct answers (`16^value_len`).
    pub fn n_values(&self) -> u64 {
        (RetrievalVocab::SYMBOLS as u64).saturating_pow(self.value_len as u32)
    }

    pub fn pair_segment_len(&self) -> usize {
        self.key_len + self.value_len + 2
    }

    pub fn query_segment_len(&self) -> usize {
        self.key_len + 1 + self.value_len
    }

    pub fn max_segment_len(&self) -> usize {
        self.pair_segment_len().max(self.query_segment_len())
    }

    /// Largest pair count the generator accepts.
    pub fn max_pairs(&self) -> Option<u64> {
        match self.kind {
            TaskKind::Remember => Some(self.keyspace()),
            TaskKind::Rewrite => None,
        }
    }

    pub fn generate(&self, n_pairs: usize, seed: u64) -> Result<RetrievalSample> {
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::Task("key_len and value_len must be positive".into()));
        }
        match self.kind {
            TaskKind::Remember => gen_remember_keyed(n_pairs, self.key_len, self.value_len, seed),
            TaskKind::Rewrite => gen_rewrite_keyed(n_pairs, self.key_len, self.value_len, seed),
        }
    }
}

pub type Tokens = Vec<u8>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSample {
    pub task: TaskKind,
    pub seed: u64,
    pub pairs: Vec<(Tokens, Tokens)>,
    pub query: Tokens,
    pub answer: Tokens,
}

impl RetrievalSample {
    /// Answer recomputed from the pairs alone (last write wins).
    pub fn oracle_answer(&self) -> Option<Tokens> {
        let mut map: HashMap<&Tokens, &Tokens> = HashMap::new();
        for (k, v) in &self.pairs {
            map.insert(k, v);
        }
        map.get(&self.query).map(|v| (*v).clone())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

fn digits(mut index: u64, len: usize) -> Tokens {
    let mut out = vec![0u8; len];
    for slot in out.iter_mut().rev() {
        *slot = (index % RetrievalVocab::SYMBOLS as u64) as u8;
        index /= RetrievalVocab::SYMBOLS as u64;
    }
    out
}

fn random_symbols(rng: &mut impl Rng, len: usize) -> Tokens {
    (0..len)
        .map(|_| rng.gen_range(0..RetrievalVocab::SYMBOLS as u8))
        .collect()
}

/// Remember sample with three-token keys.
pub fn gen_remember(n_pairs: usize, value_len: usize, seed: u64) -> Result<RetrievalSample> {
    gen_remember_keyed(n_pairs, 3, value_len, seed)
}

pub fn gen_remember_keyed(n_pairs: usize, key_len: usize, value_len: usize, seed: u64) -> Result<RetrievalSample> {
    let keyspace = (RetrievalVocab::SYMBOLS as u64).saturating_pow(key_len as u32);
    if n_pairs == 0 {
        return Err(Error::Task("a sample needs at least one pair".into()));
    }
    if n_pairs as u64 > keyspace {
        return Err(Error::Task(format!(
            "{n_pairs} unique keys requested but only {keyspace} exist for key length {key_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = index::sample(&mut rng, keyspace as usize, n_pairs);
    let pairs: Vec<(Tokens, Tokens)> = keys
        .iter()
        .map(|k| (digits(k as u64, key_len), random_symbols(&mut rng, value_len)))
        .collect();
    let q = rng.gen_range(0..n_pairs);
    Ok(RetrievalSample {
        task: TaskKind::Remember,
        seed,
        query: pairs[q].0.clone(),
        answer: pairs[q].1.clone(),
        pairs,
    })
}

/// Rewrite sample with single-token keys.
pub fn gen_rewrite(n_pairs: usize, value_len: usize, seed: u64) -> Result<RetrievalSample> {
    gen_rewrite_keyed(n_pairs, 1, value_len, seed)
}

pub fn gen_rewrite_keyed(n_pairs: usize, key_len: usize, value_len: usize, seed: u64) -> Result<RetrievalSample> {
    if n_pairs == 0 {
        return Err(Error::Task("a sample needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Tokens, Tokens)> = (0..n_pairs)
        .map(|_| (random_symbols(&mut rng, key_len), random_symbols(&mut rng, value_len)))
        .collect();
    let present: Vec<&Tokens> = pairs.iter().map(|(k, _)| k).collect::<BTreeSet<_>>().into_iter().collect();
    let query = present[rng.gen_range(0..present.len())].clone();
    let answer = pairs
        .iter()
        .rev()
        .find(|(k, _)| *k == query)
        .map(|(_, v)| v.clone())
        .expect("query key is present");
    Ok(RetrievalSample {
        task: TaskKind::Rewrite,
        seed,
        pairs,
        query,
        answer,
    })
}

/// Token-level layout: one segment per pair, then the query segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedSample {
    pub segments: Vec<Vec<usize>>,
    /// Same length as the last segment; true exactly on answer tokens.
    pub answer_mask: Vec<bool>,
}

impl SegmentedSample {
    pub fn query_segment(&self) -> &[usize] {
        self.segments.last().expect("at least one segment")
    }

    pub fn context_segments(&self) -> &[Vec<usize>] {
        &self.segments[..self.segments.len() - 1]
    }

    /// Query segment without the answer (`key -`).
    pub fn prompt(&self) -> &[usize] {
        let n_answer = self.answer_mask.iter().filter(|&&m| m).count();
        let q = self.query_segment();
        &q[..q.len() - n_answer]
    }

    pub fn answer(&self) -> Vec<usize> {
        self.query_segment()
            .iter()
            .zip(&self.answer_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Next-token targets and weights for the query segment: position `t`
    /// is supervised when token `t + 1` is an answer token.
    pub fn query_targets(&self) -> (Vec<usize>, Vec<f64>) {
        let q = self.query_segment();
        let mut targets = vec![0; q.len()];
        let mut weights = vec![0.0; q.len()];
        for t in 0..q.len().saturating_sub(1) {
            if self.answer_mask[t + 1] {
                targets[t] = q[t + 1];
                weights[t] = 1.0;
            }
        }
        (targets, weights)
    }
}

pub fn render(sample: &RetrievalSample) -> SegmentedSample {
    let tok = |s: &Tokens| s.iter().map(|&t| t as usize).collect::<Vec<_>>();
    let mut segments = Vec::with_capacity(sample.pairs.len() + 1);
    for (k, v) in &sample.pairs {
        let mut seg = tok(k);
        seg.push(RetrievalVocab::COLON);
        seg.extend(tok(v));
        seg.push(RetrievalVocab::COMMA);
        segments.push(seg);
    }
    let mut q = tok(&sample.query);
    q.push(RetrievalVocab::DASH);
    let mut answer_mask = vec![false; q.len()];
    q.extend(tok(&sample.answer));
    answer_mask.resize(q.len(), true);
    segments.push(q);
    SegmentedSample { segments, answer_mask }
}

/// Inverse of [`render`].
pub fn parse(seg: &SegmentedSample, task: TaskKind, seed: u64) -> Result<RetrievalSample> {
    let bad = |why: &str| Error::Task(format!("malformed segmented sample: {why}"));
    let sym = |t: usize| -> Result<u8> {
        if t < RetrievalVocab::SYMBOLS {
            Ok(t as u8)
        } else {
            Err(bad("separator where a symbol was expected"))
        }
    };
    let (last, context) = seg.segments.split_last().ok_or_else(|| bad("no segments"))?;
    let mut pairs = Vec::with_capacity(context.len());
    for s in context {
        let colon = s.iter().position(|&t| t == RetrievalVocab::COLON).ok_or_else(|| bad("pair without ':'"))?;
        if s.last() != Some(&RetrievalVocab::COMMA) {
            return Err(bad("pair without trailing ','"));
        }
        let key = s[..colon].iter().map(|&t| sym(t)).collect::<Result<Tokens>>()?;
        let value = s[colon + 1..s.len() - 1].iter().map(|&t| sym(t)).collect::<Result<Tokens>>()?;
        pairs.push((key, value));
    }
    let dash = last.iter().position(|&t| t == RetrievalVocab::DASH).ok_or_else(|| bad("query without '-'"))?;
    if seg.answer_mask.len() != last.len() || seg.answer_mask.iter().enumerate().any(|(i, &m)| m != (i > dash)) {
        return Err(bad("answer mask does not cover exactly the tokens after '-'"));
    }
    Ok(RetrievalSample {
        task,
        seed,
        pairs,
        query: last[..dash].iter().map(|&t| sym(t)).collect::<Result<_>>()?,
        answer: last[dash + 1..].iter().map(|&t| sym(t)).collect::<Result<_>>()?,
    })
}

/// Stacks samples with identical segment structure into per-segment batches.
/// Only the query segment carries loss weights.
pub fn collate(samples: &[SegmentedSample]) -> Result<Vec<SegmentBatch>> {
    let first = samples.first().ok_or_else(|| Error::Task("empty batch".into()))?;
    let n_seg = first.segments.len();
    let batch = samples.len();
    for s in samples {
        if s.segments.len() != n_seg
            || s.segments.iter().zip(&first.segments).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Task("samples in a batch must share segment structure".into()));
        }
    }
    let mut out = Vec::with_capacity(n_seg);
    for i in 0..n_seg {
        let len = first.segments[i].len();
        let tokens: Vec<usize> = samples.iter().flat_map(|s| s.segments[i].iter().copied()).collect();
        if i + 1 < n_seg {
            out.push(SegmentBatch::context(batch, len, tokens));
        } else {
            let mut targets = Vec::with_capacity(tokens.len());
            let mut weights = Vec::with_capacity(tokens.len());
            for s in samples {
                let (t, w) = s.query_targets();
                targets.extend(t);
                weights.extend(w);
            }
            out.push(SegmentBatch {
                batch,
                len,
                tokens,
                targets,
                weights,
            });
        }
    }
    Ok(out)
}
