//! Segment-recurrent models: ARMT, its γ-ablation, RMT and PRMT.
//!
//! All variants share embeddings, pre-norm blocks and the output head. They
//! differ only in what crosses the segment boundary:
//!
//! * RMT: one set of memory tokens, read at the front of the segment and
//!   written at the back, after the last layer.
//! * ARMT: each layer keeps its own memory tokens, appended after the
//!   segment, plus an associative state. At the start of a segment each
//!   layer inserts the memory tokens it produced for the previous segment,
//!   and every token of the current segment reads from the state before
//!   entering the layer's block. Under causal attention the appended tokens
//!   only write; reading goes through the state.
//! * PRMT: ARMT without the associative state. With nothing else to read
//!   from, from the second segment on each layer also places its carried
//!   tokens in front of the segment as a read block, as RMT does. The first
//!   segment has the ARMT layout, so an untrained ARMT (zero output
//!   projection, empty state) matches PRMT exactly there.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::{self, AssocProjections, AssocVars, FeatureMap, FeatureMapSpec};
use crate::error::{Error, Result};
use crate::graph::{AssocDims, GammaMode, Graph, Var};
use crate::nn::{transformer_block, TransformerBlockWeights, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Armt,
    Rmt,
    Prmt,
    ArmtNoGamma,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Armt, Variant::ArmtNoGamma, Variant::Rmt, Variant::Prmt];

    pub fn has_assoc(self) -> bool {
        matches!(self, Variant::Armt | Variant::ArmtNoGamma)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Armt => "armt",
            Variant::Rmt => "rmt",
            Variant::Prmt => "prmt",
            Variant::ArmtNoGamma => "armt_no_gamma",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::mem_tokens")]
    pub mem_tokens: usize,
    #[serde(default = "defaults::d_mem")]
    pub d_mem: usize,
    #[serde(default = "defaults::d_mem")]
    pub d_val: usize,
    #[serde(default)]
    pub feature_map: FeatureMapSpec,
    #[serde(default = "defaults::vocab")]
    pub vocab: usize,
    #[serde(default = "defaults::segment_len")]
    pub segment_len: usize,
    #[serde(default = "defaults::max_segments")]
    pub max_segments: usize,
    /// Treat γ as a constant in backward.
    #[serde(default = "defaults::detach_gamma")]
    pub detach_gamma: bool,
    /// Clip γ to `[0, 1]` before updating `z`, keeping `z` a nonnegative
    /// combination of feature-mapped keys.
    #[serde(default)]
    pub clamp_gamma: bool,
    /// Scale φ(k) and φ(q) to unit length before writing and reading.
    #[serde(default)]
    pub normalize_phi: bool,
    /// Denominator floor of recall and γ.
    #[serde(default = "defaults::eps")]
    pub eps: f64,
}

mod defaults {
    pub fn layers() -> usize {
        4
    }
    pub fn hidden() -> usize {
        128
    }
    pub fn heads() -> usize {
        4
    }
    pub fn mem_tokens() -> usize {
        10
    }
    pub fn d_mem() -> usize {
        32
    }
    pub fn vocab() -> usize {
        20
    }
    pub fn segment_len() -> usize {
        9
    }
    pub fn max_segments() -> usize {
        1024
    }
    pub fn detach_gamma() -> bool {
        true
    }
    pub fn eps() -> f64 {
        crate::assoc::DEFAULT_EPS
    }
}

impl ModelConfig {
    /// Associative-retrieval defaults: 4 layers, hidden 128, memory dimension 32.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            layers: defaults::layers(),
            hidden: defaults::hidden(),
            heads: defaults::heads(),
            mem_tokens: defaults::mem_tokens(),
            d_mem: defaults::d_mem(),
            d_val: defaults::d_mem(),
            feature_map: FeatureMapSpec::default(),
            vocab: defaults::vocab(),
            segment_len: defaults::segment_len(),
            max_segments: defaults::max_segments(),
            detach_gamma: defaults::detach_gamma(),
            clamp_gamma: false,
            normalize_phi: false,
            eps: defaults::eps(),
        }
    }

    pub fn d_phi(&self) -> usize {
        self.feature_map.output_dim(self.d_mem)
    }

    pub fn phi(&self) -> FeatureMap {
        FeatureMap {
            spec: self.feature_map,
            normalize: self.normalize_phi,
        }
    }

    pub fn gamma_mode(&self) -> GammaMode {
        match self.variant {
            Variant::ArmtNoGamma => GammaMode::One,
            _ => GammaMode::Corrected {
                detach: self.detach_gamma,
                clamp: self.clamp_gamma,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mem_tokens", self.mem_tokens),
            ("d_mem", self.d_mem),
            ("d_val", self.d_val),
            ("vocab", self.vocab),
            ("segment_len", self.segment_len),
            ("max_segments", self.max_segments),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{field}` must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "`heads` ({}) must divide `hidden` ({})",
                self.heads, self.hidden
            )));
        }
        match self.feature_map {
            FeatureMapSpec::Identity => {
                return Err(Error::Config(
                    "`feature_map`: identity is test-only; use dpfp".into(),
                ))
            }
            FeatureMapSpec::Dpfp { nu: 0 } => {
                return Err(Error::Config("`feature_map.nu` must be positive".into()))
            }
            FeatureMapSpec::Dpfp { .. } => {}
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("`eps` must be positive".into()));
        }
        Ok(())
    }

    /// Floats carried across a segment boundary per sequence.
    pub fn recurrent_floats(&self) -> usize {
        let mem = self.mem_tokens * self.hidden;
        match self.variant {
            Variant::Rmt => mem,
            Variant::Prmt => self.layers * mem,
            Variant::Armt | Variant::ArmtNoGamma => {
                self.layers * (self.d_val * self.d_phi() + self.d_phi() + mem)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct AssocIds {
    w_k: ParamId,
    w_v: ParamId,
    w_beta: ParamId,
    w_q: ParamId,
    w_o: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    memory: Vec<ParamId>,
    blocks: Vec<TransformerBlockWeights>,
    assoc: Vec<AssocIds>,
    ln_f_gain: ParamId,
    ln_f_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// One segment for a batch of sequences: `batch · len` token ids, item-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    /// Next-token targets per position (ignored where the weight is 0).
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SegmentBatch {
    /// An unsupervised segment.
    pub fn context(batch: usize, len: usize, tokens: Vec<usize>) -> Self {
        Self {
            batch,
            len,
            targets: vec![0; tokens.len()],
            weights: vec![0.0; tokens.len()],
            tokens,
        }
    }

    pub fn is_supervised(&self) -> bool {
        self.weights.iter().any(|&w| w != 0.0)
    }
}

/// State threaded between segments, as graph handles.
#[derive(Debug, Clone)]
pub struct Carry {
    pub batch: usize,
    /// Segments already folded into this carry.
    pub segments: usize,
    /// Per layer (PRMT/ARMT) or a single entry (RMT): `[batch · mem_tokens, hidden]`.
    pub memory: Vec<Var>,
    /// ARMT only: per layer `[batch, d_val + 1, d_phi]`.
    pub states: Vec<Var>,
}

/// Graph-independent copy of a [`Carry`].
#[derive(Debug, Clone, PartialEq)]
pub struct CarrySnapshot<R> {
    pub batch: usize,
    pub segments: usize,
    pub memory: Vec<Tensor<R>>,
    pub states: Vec<Tensor<R>>,
}

impl Carry {
    pub fn snapshot<R: Real>(&self, g: &Graph<R>) -> CarrySnapshot<R> {
        CarrySnapshot {
            batch: self.batch,
            segments: self.segments,
            memory: self.memory.iter().map(|&v| g.value(v).clone()).collect(),
            states: self.states.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Same values, cut from the gradient path.
    pub fn detach<R: Real>(&self, g: &mut Graph<R>) -> Result<Carry> {
        Ok(Carry {
            batch: self.batch,
            segments: self.segments,
            memory: self.memory.iter().map(|&v| g.detach(v)).collect::<Result<_>>()?,
            states: self.states.iter().map(|&v| g.detach(v)).collect::<Result<_>>()?,
        })
    }

    /// Floats per sequence.
    pub fn num_floats<R: Real>(&self, g: &Graph<R>) -> usize {
        let total: usize = self
            .memory
            .iter()
            .chain(&self.states)
            .map(|&v| g.value(v).numel())
            .sum();
        total / self.batch.max(1)
    }
}

impl<R: Real> CarrySnapshot<R> {
    pub fn load(&self, g: &mut Graph<R>) -> Result<Carry> {
        Ok(Carry {
            batch: self.batch,
            segments: self.segments,
            memory: self.memory.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?,
            states: self.states.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?,
        })
    }

    pub fn num_floats(&self) -> usize {
        let total: usize = self.memory.iter().chain(&self.states).map(|t| t.numel()).sum();
        total / self.batch.max(1)
    }
}

pub struct SequenceOutput {
    pub loss: Option<Var>,
    pub logits: Vec<Var>,
    pub carry: Carry,
}

/// Row bookkeeping for a stream made of several per-item parts.
struct Layout {
    batch: usize,
    parts: Vec<usize>,
}

impl Layout {
    fn per_item(&self) -> usize {
        self.parts.iter().sum()
    }

    /// Indices into `concat_rows(parts)` that produce item-major order.
    fn assemble(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.parts.len());
        let mut acc = 0;
        for &p in &self.parts {
            offsets.push(acc);
            acc += p * self.batch;
        }
        let mut idx = Vec::with_capacity(acc);
        for b in 0..self.batch {
            for (p, &rows) in self.parts.iter().enumerate() {
                idx.extend((0..rows).map(|r| offsets[p] + b * rows + r));
            }
        }
        idx
    }

    /// Rows of part `p` within the assembled stream.
    fn part(&self, p: usize) -> Vec<usize> {
        let before: usize = self.parts[..p].iter().sum();
        let per = self.per_item();
        (0..self.batch)
            .flat_map(|b| (0..self.parts[p]).map(move |r| b * per + before + r))
            .collect()
    }
}

pub struct Model<R> {
    config: ModelConfig,
    params: ParamStore<R>,
    ids: ModelIds,
}

impl<R: Real> Clone for Model<R> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
        }
    }
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let tok_emb = store.register_normal("embed.tokens", &[c.vocab, c.hidden], INIT_STD, &mut rng)?;
        let pos_emb = store.register_normal("embed.positions", &[c.segment_len, c.hidden], INIT_STD, &mut rng)?;
        let memory = match c.variant {
            Variant::Rmt => vec![store.register_normal("memory", &[c.mem_tokens, c.hidden], INIT_STD, &mut rng)?],
            _ => (0..c.layers)
                .map(|l| store.register_normal(format!("memory.{l}"), &[c.mem_tokens, c.hidden], INIT_STD, &mut rng))
                .collect::<Result<_>>()?,
        };
        let mut blocks = Vec::with_capacity(c.layers);
        let mut assoc = Vec::new();
        for l in 0..c.layers {
            blocks.push(TransformerBlockWeights::register(
                &mut store,
                &format!("layers.{l}"),
                c.hidden,
                c.heads,
                &mut rng,
            )?);
            if c.variant.has_assoc() {
                let p = format!("layers.{l}.assoc");
                assoc.push(AssocIds {
                    w_k: store.register_normal(format!("{p}.w_k"), &[c.hidden, c.d_mem], INIT_STD, &mut rng)?,
                    w_v: store.register_normal(format!("{p}.w_v"), &[c.hidden, c.d_val], INIT_STD, &mut rng)?,
                    w_beta: store.register_normal(format!("{p}.w_beta"), &[c.hidden, 1], INIT_STD, &mut rng)?,
                    w_q: store.register_normal(format!("{p}.w_q"), &[c.hidden, c.d_mem], INIT_STD, &mut rng)?,
                    w_o: store.register(format!("{p}.w_o"), Tensor::zeros(&[c.d_val, c.hidden]))?,
                });
            }
        }
        let ln_f_gain = store.register("final_norm.gain", Tensor::full(&[c.hidden], R::one()))?;
        let ln_f_bias = store.register("final_norm.bias", Tensor::zeros(&[c.hidden]))?;
        let head_w = store.register_normal("head.w", &[c.hidden, c.vocab], INIT_STD, &mut rng)?;
        let head_b = store.register("head.b", Tensor::zeros(&[c.vocab]))?;
        Ok(Self {
            ids: ModelIds {
                tok_emb,
                pos_emb,
                memory,
                blocks,
                assoc,
                ln_f_gain,
                ln_f_bias,
                head_w,
                head_b,
            },
            config,
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// See [`ModelConfig::recurrent_floats`].
    pub fn count_recurrent_floats(&self) -> usize {
        self.config.recurrent_floats()
    }

    /// Copies every parameter that `other` has under the same name and shape.
    /// Returns how many were copied.
    pub fn copy_shared_params_from(&mut self, other: &Model<R>) -> usize {
        let mut copied = 0;
        for (_, p) in other.params.iter() {
            if let Some(id) = self.params.id(&p.name) {
                let dst = self.params.get_mut(id);
                if dst.value.shape() == p.value.shape() {
                    dst.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Plain-tensor projections of layer `l` (ARMT variants only).
    pub fn assoc_projections(&self, l: usize) -> Option<AssocProjections<R>> {
        let a = self.ids.assoc.get(l)?;
        let t = |id| self.params.get(id).value.clone();
        Some(AssocProjections {
            w_k: t(a.w_k),
            w_v: t(a.w_v),
            w_beta: t(a.w_beta),
            w_q: t(a.w_q),
            w_o: t(a.w_o),
        })
    }

    pub fn assoc_output_projection(&self, l: usize) -> Option<ParamId> {
        self.ids.assoc.get(l).map(|a| a.w_o)
    }

    fn assoc_dims(&self, batch: usize) -> AssocDims {
        AssocDims {
            batch,
            d_val: self.config.d_val,
            d_phi: self.config.d_phi(),
        }
    }

    /// Fresh carry: learned initial memory broadcast over the batch and
    /// zero associative states.
    pub fn init_carry(&self, g: &mut Graph<R>, batch: usize) -> Result<Carry> {
        let m = self.config.mem_tokens;
        let rows: Vec<usize> = (0..batch).flat_map(|_| 0..m).collect();
        let memory = self
            .ids
            .memory
            .iter()
            .map(|&id| {
                let p = g.param(&self.params, id);
                g.select_rows(p, &rows)
            })
            .collect::<Result<_>>()?;
        let states = (0..self.ids.assoc.len())
            .map(|_| g.constant(Tensor::zeros(&self.assoc_dims(batch).shape())))
            .collect::<Result<_>>()?;
        Ok(Carry {
            batch,
            segments: 0,
            memory,
            states,
        })
    }

    fn embed(&self, g: &mut Graph<R>, seg: &SegmentBatch) -> Result<Var> {
        let c = &self.config;
        if seg.len == 0 || seg.len > c.segment_len {
            return Err(Error::Config(format!(
                "segment of {} tokens exceeds segment_len {}",
                seg.len, c.segment_len
            )));
        }
        if seg.tokens.len() != seg.batch * seg.len {
            return Err(Error::shape("segment", "token count is not batch x len"));
        }
        if let Some(&t) = seg.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::Config(format!("token id {t} outside vocab {}", c.vocab)));
        }
        let te = g.param(&self.params, self.ids.tok_emb);
        let pe = g.param(&self.params, self.ids.pos_emb);
        let tok = g.gather(te, &seg.tokens)?;
        let positions: Vec<usize> = (0..seg.batch).flat_map(|_| 0..seg.len).collect();
        let pos = g.gather(pe, &positions)?;
        g.add(tok, pos)
    }

    fn block(&self, g: &mut Graph<R>, l: usize, x: Var, batch: usize, seq: usize) -> Result<Var> {
        transformer_block(g, &self.params, x, &self.ids.blocks[l], batch, seq, true).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("layer {l}: {context}"),
            },
            other => other,
        })
    }

    fn assoc_vars(&self, g: &mut Graph<R>, l: usize) -> AssocVars {
        let a = &self.ids.assoc[l];
        AssocVars {
            w_k: g.param(&self.params, a.w_k),
            w_v: g.param(&self.params, a.w_v),
            w_beta: g.param(&self.params, a.w_beta),
            w_q: g.param(&self.params, a.w_q),
            w_o: g.param(&self.params, a.w_o),
        }
    }

    /// Processes one segment; returns logits for the segment's tokens
    /// (`[batch · len, vocab]`) and the carry for the next segment.
    pub fn forward_segment(&self, g: &mut Graph<R>, carry: &Carry, seg: &SegmentBatch) -> Result<(Var, Carry)> {
        if carry.batch != seg.batch {
            return Err(Error::shape("forward_segment", "carry batch differs from segment batch"));
        }
        let c = &self.config;
        let (b, t, m) = (seg.batch, seg.len, c.mem_tokens);
        let mut x = self.embed(g, seg)?;
        let mut memory = Vec::with_capacity(carry.memory.len());
        let mut states = Vec::with_capacity(carry.states.len());
        match c.variant {
            Variant::Rmt => {
                let layout = Layout {
                    batch: b,
                    parts: vec![m, t, m],
                };
                let mem = carry.memory[0];
                let cat = g.concat_rows(&[mem, x, mem])?;
                let mut stream = g.select_rows(cat, &layout.assemble())?;
                for l in 0..c.layers {
                    stream = self.block(g, l, stream, b, layout.per_item())?;
                }
                x = g.select_rows(stream, &layout.part(1))?;
                memory.push(g.select_rows(stream, &layout.part(2))?);
            }
            Variant::Prmt if carry.segments > 0 => {
                // per-layer read block before the segment, write block after
                let layout = Layout {
                    batch: b,
                    parts: vec![m, t, m],
                };
                for l in 0..c.layers {
                    let mem = carry.memory[l];
                    let cat = g.concat_rows(&[mem, x, mem])?;
                    let mut stream = g.select_rows(cat, &layout.assemble())?;
                    stream = self.block(g, l, stream, b, layout.per_item())?;
                    x = g.select_rows(stream, &layout.part(1))?;
                    memory.push(g.select_rows(stream, &layout.part(2))?);
                }
            }
            Variant::Prmt | Variant::Armt | Variant::ArmtNoGamma => {
                let layout = Layout {
                    batch: b,
                    parts: vec![t, m],
                };
                let dims = self.assoc_dims(b);
                let eps = R::from_f64(c.eps);
                for l in 0..c.layers {
                    let mem = carry.memory[l];
                    let cat = g.concat_rows(&[x, mem])?;
                    let mut stream = g.select_rows(cat, &layout.assemble())?;
                    if c.variant.has_assoc() {
                        let w = self.assoc_vars(g, l);
                        let mut state = carry.states[l];
                        if carry.segments > 0 {
                            state = assoc::mem_update(g, state, mem, &w, c.phi(), dims, c.gamma_mode(), eps)?;
                        }
                        stream = assoc::assoc_block(g, stream, state, &w, c.phi(), dims, eps)?;
                        states.push(state);
                    }
                    stream = self.block(g, l, stream, b, layout.per_item())?;
                    x = g.select_rows(stream, &layout.part(0))?;
                    memory.push(g.select_rows(stream, &layout.part(1))?);
                }
            }
        }
        let lg = g.param(&self.params, self.ids.ln_f_gain);
        let lb = g.param(&self.params, self.ids.ln_f_bias);
        let hw = g.param(&self.params, self.ids.head_w);
        let hb = g.param(&self.params, self.ids.head_b);
        let h = g.layer_norm(x, lg, lb)?;
        let logits = g.linear(h, hw, Some(hb))?;
        Ok((
            logits,
            Carry {
                batch: b,
                segments: carry.segments + 1,
                memory,
                states,
            },
        ))
    }

    /// Folds [`Model::forward_segment`] over `segments` from a fresh carry.
    /// The loss is the weighted cross-entropy over all supervised positions.
    /// With `bptt_window = Some(w)` the carry is detached every `w` segments.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<R>,
        segments: &[SegmentBatch],
        bptt_window: Option<usize>,
    ) -> Result<SequenceOutput> {
        let first = segments
            .first()
            .ok_or_else(|| Error::Config("forward_sequence: no segments".into()))?;
        if segments.len() > self.config.max_segments {
            return Err(Error::Config(format!(
                "{} segments exceed max_segments {}",
                segments.len(),
                self.config.max_segments
            )));
        }
        let carry = self.init_carry(g, first.batch)?;
        self.continue_sequence(g, carry, segments, bptt_window)
    }

    /// Like [`Model::forward_sequence`] but starting from an existing carry.
    pub fn continue_sequence(
        &self,
        g: &mut Graph<R>,
        mut carry: Carry,
        segments: &[SegmentBatch],
        bptt_window: Option<usize>,
    ) -> Result<SequenceOutput> {
        let mut logits = Vec::with_capacity(segments.len());
        let mut sup_logits = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            if let Some(w) = bptt_window {
                if s > 0 && w > 0 && s % w == 0 {
                    carry = carry.detach(g)?;
                }
            }
            let (lg, next) = self.forward_segment(g, &carry, seg)?;
            if seg.is_supervised() {
                sup_logits.push(lg);
                targets.extend_from_slice(&seg.targets);
                weights.extend(seg.weights.iter().map(|&w| R::from_f64(w)));
            }
            logits.push(lg);
            carry = next;
        }
        let loss = if sup_logits.is_empty() {
            None
        } else {
            let all = if sup_logits.len() == 1 {
                sup_logits[0]
            } else {
                g.concat_rows(&sup_logits)?
            };
            Some(g.cross_entropy(all, &targets, &weights)?)
        };
        Ok(SequenceOutput { loss, logits, carry })
    }

    /// Rebuilds a model from a parameter store holding exactly the parameters
    /// `config` defines (matched by name and shape).
    pub fn from_params(config: ModelConfig, params: ParamStore<R>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        if names.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                names.len()
            )));
        }
        for name in names {
            let src = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let dst = model.params.id(&name).expect("own parameter");
            let value = params.get(src).value.clone();
            if value.shape() != model.params.get(dst).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    value.shape(),
                    model.params.get(dst).value.shape()
                )));
            }
            model.params.get_mut(dst).value = value;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            mem_tokens: 2,
            d_mem: 4,
            d_val: 4,
            segment_len: 6,
            ..ModelConfig::new(variant)
        }
    }

    #[test]
    fn recurrent_float_counts() {
        let mut c = ModelConfig::new(Variant::Rmt);
        c.hidden = 128;
        c.mem_tokens = 10;
        assert_eq!(c.recurrent_floats(), 1280);
        c.variant = Variant::Armt;
        assert_eq!(c.d_phi(), 192);
        assert_eq!(c.recurrent_floats(), 30464);
        c.variant = Variant::Prmt;
        assert_eq!(c.recurrent_floats(), 5120);
    }

    #[test]
    fn identity_feature_map_rejected_in_configs() {
        let mut c = tiny(Variant::Armt);
        c.feature_map = FeatureMapSpec::Identity;
        assert!(Model::<f32>::new(c, 0).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let l = Layout {
            batch: 2,
            parts: vec![3, 1, 2],
        };
        let idx = l.assemble();
        // part rows in concat order: part0 at 0..6, part1 at 6..8, part2 at 8..12
        assert_eq!(idx, vec![0, 1, 2, 6, 8, 9, 3, 4, 5, 7, 10, 11]);
        let p1: Vec<usize> = l.part(1).iter().map(|&r| idx[r]).collect();
        assert_eq!(p1, vec![6, 7]);
    }

    #[test]
    fn overlong_segment_rejected() {
        let model = Model::<f32>::new(tiny(Variant::Prmt), 1).unwrap();
        let mut g = Graph::new();
        let carry = model.init_carry(&mut g, 1).unwrap();
        let seg = SegmentBatch::context(1, 7, vec![0; 7]);
        assert!(model.forward_segment(&mut g, &carry, &seg).is_err());
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let model = Model::<f32>::new(tiny(Variant::Rmt), 1).unwrap();
        let mut g = Graph::new();
        let carry = model.init_carry(&mut g, 1).unwrap();
        let seg = SegmentBatch::context(1, 2, vec![0, 20]);
        assert!(model.forward_segment(&mut g, &carry, &seg).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let model = Model::<f32>::new(tiny(Variant::Armt), 1).unwrap();
        let mut g = Graph::new();
        assert!(model.forward_sequence(&mut g, &[], None).is_err());
    }
}
