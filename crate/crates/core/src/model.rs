//! Projectors, token assembly and the toy causal scorer.
//!
//! One frame contributes `[p_F(E_F) ; p_B(E_B)]`; frames are concatenated in
//! order and followed by the text embeddings `E_T`. The scorer is a single
//! causal self-attention block with sinusoidal positions and a softmax over
//! the toy vocabulary. Answers are teacher-forced: the logits at the position
//! preceding answer token `i` score that token.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{EncoderConfig, SyntheticEncoders, TextEmbedder, DEFAULT_MODEL_DIM, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::fusion::{CrossAttention, Fusion, FusionConfig, MergeMethod};
use crate::nn::{Bound, FreezeMask, Group, Linear, Mlp, ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

/// Additive mask for future positions; `exp` of it underflows to exactly 0.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentOrder {
    /// Visual blocks, then text.
    #[default]
    VisualFirst,
    TextFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab: usize,
    pub projector_depth: usize,
    pub projector_hidden: usize,
    pub scorer_hidden: usize,
    pub merge: MergeMethod,
    pub order: SegmentOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: DEFAULT_MODEL_DIM,
            vocab: DEFAULT_VOCAB,
            projector_depth: 2,
            projector_hidden: 64,
            scorer_hidden: 64,
            merge: MergeMethod::Concat,
            order: SegmentOrder::VisualFirst,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.d_model {} must be a positive even number",
                self.d_model
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("model.vocab must be at least 2".into()));
        }
        if self.projector_depth == 0 || self.projector_hidden == 0 || self.scorer_hidden == 0 {
            return Err(Error::Config("model depths and widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Fused,
    Object,
    Text,
    Answer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub fused: usize,
    pub object: usize,
    pub text: usize,
    pub answer: usize,
}

impl SegmentCounts {
    pub fn total(&self) -> usize {
        self.fused + self.object + self.text + self.answer
    }
}

/// Assembled multimodal sequence on a tape.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `S × D`.
    pub embeddings: Var,
    pub segments: Vec<Segment>,
    /// Frame index per token; `None` for text and answer tokens.
    pub frames: Vec<Option<usize>>,
    /// Set when an attention merge was skipped because a frame had no objects.
    pub degenerate: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn counts(&self) -> SegmentCounts {
        let mut c = SegmentCounts::default();
        for s in &self.segments {
            match s {
                Segment::Fused => c.fused += 1,
                Segment::Object => c.object += 1,
                Segment::Text => c.text += 1,
                Segment::Answer => c.answer += 1,
            }
        }
        c
    }

    /// Per-frame `(fused, object)` token counts, in frame order.
    pub fn frame_counts(&self) -> Vec<(usize, usize)> {
        let n = self.frames.iter().flatten().max().map_or(0, |m| m + 1);
        let mut out = vec![(0, 0); n];
        for (seg, f) in self.segments.iter().zip(&self.frames) {
            if let Some(f) = f {
                match seg {
                    Segment::Fused => out[*f].0 += 1,
                    Segment::Object => out[*f].1 += 1,
                    _ => {}
                }
            }
        }
        out
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Fused => "fused",
            Segment::Object => "object",
            Segment::Text => "text",
            Segment::Answer => "answer",
        })
    }
}

/// Object-merge block as configured.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub method: MergeMethod,
    pub attention: Option<CrossAttention>,
}

/// One frame's projected visual tokens.
#[derive(Clone, Copy, Debug)]
pub struct FrameTokens {
    /// `N × D`.
    pub fused: Var,
    /// `k × D`.
    pub objects: Var,
}

fn row_dims(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    tape.value(v).dims2()
}

impl Merge {
    /// Blocks emitted for one frame: `(tokens, segment)` pairs in order.
    fn merge_frame(
        &self,
        tape: &mut Tape,
        params: &Bound,
        frame: FrameTokens,
    ) -> Result<(Vec<(Var, Segment)>, bool)> {
        let (k, _) = row_dims(tape, frame.objects)?;
        match (self.method, &self.attention) {
            (MergeMethod::Concat, _) => Ok((
                vec![(frame.fused, Segment::Fused), (frame.objects, Segment::Object)],
                false,
            )),
            (_, None) => Err(Error::Config(format!(
                "merge method {} has no attention parameters",
                self.method.name()
            ))),
            (_, Some(_)) if k == 0 => {
                log::debug!(
                    "merge {}: no object tokens, attention skipped",
                    self.method.name()
                );
                Ok((vec![(frame.fused, Segment::Fused)], true))
            }
            (MergeMethod::FToBXattn, Some(xa)) => {
                let enhanced = xa.forward(tape, params, frame.fused, frame.objects)?;
                Ok((vec![(enhanced, Segment::Fused)], false))
            }
            (MergeMethod::BToFXattn, Some(xa)) => {
                let enhanced = xa.forward(tape, params, frame.objects, frame.fused)?;
                Ok((
                    vec![(frame.fused, Segment::Fused), (enhanced, Segment::Object)],
                    false,
                ))
            }
        }
    }
}

/// Assembles one or more frames with a trailing (or leading) text segment.
pub fn assemble_frames(
    tape: &mut Tape,
    params: &Bound,
    merge: &Merge,
    frames: &[FrameTokens],
    text: Var,
    order: SegmentOrder,
) -> Result<TokenSequence> {
    if frames.is_empty() {
        return Err(Error::Empty("assemble: no frames"));
    }
    let (l_t, d) = row_dims(tape, text)?;
    for f in frames {
        for v in [f.fused, f.objects] {
            let (_, dv) = row_dims(tape, v)?;
            if dv != d {
                return Err(Error::ShapeMismatch {
                    op: "assemble",
                    lhs: tape.shape(v).to_vec(),
                    rhs: tape.shape(text).to_vec(),
                });
            }
        }
    }
    let mut blocks: Vec<Var> = Vec::new();
    let mut segments = Vec::new();
    let mut frame_ids = Vec::new();
    let mut degenerate = false;
    let push_text =
        |blocks: &mut Vec<Var>, segments: &mut Vec<Segment>, frame_ids: &mut Vec<Option<usize>>| {
            blocks.push(text);
            segments.extend(std::iter::repeat_n(Segment::Text, l_t));
            frame_ids.extend(std::iter::repeat_n(None, l_t));
        };
    if order == SegmentOrder::TextFirst {
        push_text(&mut blocks, &mut segments, &mut frame_ids);
    }
    for (fi, frame) in frames.iter().enumerate() {
        let (parts, skipped) = merge.merge_frame(tape, params, *frame)?;
        degenerate |= skipped;
        for (v, seg) in parts {
            let rows = tape.shape(v)[0];
            blocks.push(v);
            segments.extend(std::iter::repeat_n(seg, rows));
            frame_ids.extend(std::iter::repeat_n(Some(fi), rows));
        }
    }
    if order == SegmentOrder::VisualFirst {
        push_text(&mut blocks, &mut segments, &mut frame_ids);
    }
    let embeddings = tape.concat(&blocks, 0)?;
    Ok(TokenSequence {
        embeddings,
        segments,
        frames: frame_ids,
        degenerate,
    })
}

/// Single-image assembly: `[p_F(E_F) ; p_B(E_B) ; E_T]` for concat merging.
pub fn assemble(
    tape: &mut Tape,
    params: &Bound,
    merge: &Merge,
    fused: Var,
    objects: Var,
    text: Var,
    order: SegmentOrder,
) -> Result<TokenSequence> {
    assemble_frames(
        tape,
        params,
        merge,
        &[FrameTokens { fused, objects }],
        text,
        order,
    )
}

/// Sinusoidal position table `S × D`.
pub fn positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(vec![len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(vec![len, len], |i| if i % len > i / len { MASKED } else { 0.0 })
}

/// Single causal self-attention block plus output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer {
    pub embedding: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp: Mlp,
    pub head: Linear,
}

impl Scorer {
    fn init(store: &mut ParamStore, cfg: &ModelConfig, seeds: &SeedTree) -> Result<Self> {
        let d = cfg.d_model;
        let table = TextEmbedder::new(cfg.vocab, d, seeds).table().clone();
        let embedding = store.add("scorer.embedding", Group::Scorer, table);
        let mut rng = seeds.stream("model.scorer");
        let g = Group::Scorer;
        Ok(Self {
            embedding,
            wq: Linear::init(store, &mut rng, "scorer.q", g, d, d, false),
            wk: Linear::init(store, &mut rng, "scorer.k", g, d, d, false),
            wv: Linear::init(store, &mut rng, "scorer.v", g, d, d, false),
            wo: Linear::init(store, &mut rng, "scorer.o", g, d, d, false),
            mlp: Mlp::init(store, &mut rng, "scorer.mlp", g, d, cfg.scorer_hidden, d, 2)?,
            head: Linear::init(store, &mut rng, "scorer.head", g, d, cfg.vocab, true),
        })
    }

    /// Token embeddings `E_T = f_T(ids)` on the tape.
    pub fn embed(&self, tape: &mut Tape, params: &Bound, ids: &[usize]) -> Result<Var> {
        let table = params.var(self.embedding);
        let vocab = tape.shape(table)[0];
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocab { id, vocab });
        }
        tape.gather_rows(table, ids)
    }

    /// Logits `S × V` for an `S × D` input.
    pub fn logits(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let (s, d) = tape.value(x).dims2()?;
        let pos = tape.constant(positions(s, d));
        let x = tape.add(x, pos)?;
        let q = self.wq.forward(tape, params, x)?;
        let k = self.wk.forward(tape, params, x)?;
        let v = self.wv.forward(tape, params, x)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (d as f64).sqrt());
        let mask = tape.constant(causal_mask(s));
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let attn_out = self.wo.forward(tape, params, mixed)?;
        let h = tape.add(x, attn_out)?;
        let m = self.mlp.forward(tape, params, h)?;
        let h = tape.add(h, m)?;
        self.head.forward(tape, params, h)
    }
}

/// Every learned tensor plus the frozen encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub encoders: SyntheticEncoders,
    pub fusion: Fusion,
    pub proj_f: Mlp,
    pub proj_b: Mlp,
    pub merge: Merge,
    pub scorer: Scorer,
    pub order: SegmentOrder,
}

impl ModelParams {
    pub fn new(
        enc: &EncoderConfig,
        fusion: &FusionConfig,
        model: &ModelConfig,
        seeds: &SeedTree,
    ) -> Result<Self> {
        enc.validate()?;
        fusion.validate()?;
        model.validate()?;
        let encoders = SyntheticEncoders::new(enc, &seeds.child("encoders"))?;
        let mut store = ParamStore::new();
        let (c_low, c_high) = (enc.channels_low, enc.channels_high);
        let mut rng = seeds.stream("model.fusion");
        let fusion_mod = Fusion::init(&mut store, &mut rng, fusion, c_low, c_high)?;
        let c_fused = fusion.fused_width(c_low, c_high);
        let d = model.d_model;
        let mut rng = seeds.stream("model.proj_f");
        let proj_f = Mlp::init(
            &mut store,
            &mut rng,
            "proj_f",
            Group::ProjF,
            c_fused,
            model.projector_hidden,
            d,
            model.projector_depth,
        )?;
        let mut rng = seeds.stream("model.proj_b");
        let proj_b = Mlp::init(
            &mut store,
            &mut rng,
            "proj_b",
            Group::ProjB,
            enc.pyramid_channels(),
            model.projector_hidden,
            d,
            model.projector_depth,
        )?;
        let method = fusion.strategy.merge_override().unwrap_or(model.merge);
        let mut rng = seeds.stream("model.merge");
        let attention = method
            .uses_attention()
            .then(|| CrossAttention::init(&mut store, &mut rng, "merge", Group::Merge, d));
        let scorer = Scorer::init(&mut store, model, &seeds.child("scorer"))?;
        Ok(Self {
            store,
            encoders,
            fusion: fusion_mod,
            proj_f,
            proj_b,
            merge: Merge { method, attention },
            scorer,
            order: model.order,
        })
    }

    pub fn vocab(&self) -> usize {
        self.store.get(self.scorer.embedding).shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.store.get(self.scorer.embedding).shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, mask: &FreezeMask) -> Bound {
        self.store.bind(tape, mask)
    }

    /// Byte image of a group, encoders included.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        if group == Group::Encoders {
            let mut out = Vec::new();
            for (name, t) in self.encoders.tensors() {
                out.extend_from_slice(name.as_bytes());
                out.extend(t.to_le_bytes());
            }
            out
        } else {
            self.store.group_bytes(group)
        }
    }

    /// Fuses and projects one frame.
    pub fn frame_tokens(&self, tape: &mut Tape, params: &Bound, visual: &FrameVisual) -> Result<FrameTokens> {
        let fused = self.fusion.forward(tape, params, visual.e_low, visual.e_high)?;
        let fused = self.proj_f.forward(tape, params, fused)?;
        let (k, _) = tape.value(visual.objects).dims2()?;
        let objects = if k == 0 {
            tape.constant(Tensor::zeros(vec![0, self.d_model()]))
        } else {
            self.proj_b.forward(tape, params, visual.objects)?
        };
        Ok(FrameTokens { fused, objects })
    }

    /// Builds the prompt sequence (visual frames and text).
    pub fn prompt(
        &self,
        tape: &mut Tape,
        params: &Bound,
        frames: &[FrameVisual],
        text_ids: &[usize],
    ) -> Result<TokenSequence> {
        let tokens = frames
            .iter()
            .map(|f| self.frame_tokens(tape, params, f))
            .collect::<Result<Vec<_>>>()?;
        let text = self.scorer.embed(tape, params, text_ids)?;
        assemble_frames(tape, params, &self.merge, &tokens, text, self.order)
    }

    /// Mean teacher-forced negative log-likelihood of `answer` after `seq`.
    pub fn score_answer(
        &self,
        tape: &mut Tape,
        params: &Bound,
        seq: &TokenSequence,
        answer: &[usize],
    ) -> Result<(Var, TokenSequence)> {
        if answer.is_empty() {
            return Err(Error::Empty("score_answer: empty answer"));
        }
        if seq.is_empty() {
            return Err(Error::Empty("score_answer: empty prompt"));
        }
        let prefix = seq.len();
        let answer_emb = self.scorer.embed(tape, params, answer)?;
        let full = tape.concat(&[seq.embeddings, answer_emb], 0)?;
        let logits = self.scorer.logits(tape, params, full)?;
        let probs = tape.softmax(logits)?;
        let (s, v) = tape.value(probs).dims2()?;
        let flat = tape.reshape(probs, vec![s * v, 1])?;
        let picks: Vec<usize> = answer
            .iter()
            .enumerate()
            .map(|(i, &tok)| (prefix - 1 + i) * v + tok)
            .collect();
        let chosen = tape.gather_rows(flat, &picks)?;
        let logp = tape.log(chosen)?;
        let mean = tape.mean(logp)?;
        let nll = tape.mul_scalar(mean, -1.0);
        let mut out = seq.clone();
        out.embeddings = full;
        out.segments
            .extend(std::iter::repeat_n(Segment::Answer, answer.len()));
        out.frames.extend(std::iter::repeat_n(None, answer.len()));
        Ok((nll, out))
    }

    /// Prompt assembly plus answer scoring in one call.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &Bound,
        frames: &[FrameVisual],
        text_ids: &[usize],
        answer: &[usize],
    ) -> Result<(Var, TokenSequence)> {
        let seq = self.prompt(tape, params, frames, text_ids)?;
        self.score_answer(tape, params, &seq, answer)
    }

    /// Greedy argmax continuation of the prompt, without gradients.
    pub fn greedy_decode(
        &self,
        frames: &[FrameInputs],
        text_ids: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, &FreezeMask::frozen());
            let visual: Vec<FrameVisual> = frames.iter().map(|f| f.constant_on(&mut tape)).collect();
            let seq = self.prompt(&mut tape, &params, &visual, text_ids)?;
            let emb = if out.is_empty() {
                seq.embeddings
            } else {
                let gen = self.scorer.embed(&mut tape, &params, &out)?;
                tape.concat(&[seq.embeddings, gen], 0)?
            };
            let logits = self.scorer.logits(&mut tape, &params, emb)?;
            let lv = tape.value(logits);
            let (s, _) = lv.dims2()?;
            let last = lv.row(s - 1);
            let best = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("vocabulary is non-empty");
            out.push(best);
        }
        Ok(out)
    }
}

/// Visual inputs of one frame as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct FrameVisual {
    /// `N × C_L`.
    pub e_low: Var,
    /// `N × C_H`, flattened final high-resolution stage.
    pub e_high: Var,
    /// `k × C_B` pooled object features.
    pub objects: Var,
}

/// Frozen, precomputed visual inputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub e_low: Tensor,
    pub e_high: Tensor,
    pub objects: Tensor,
}

impl FrameInputs {
    pub fn constant_on(&self, tape: &mut Tape) -> FrameVisual {
        FrameVisual {
            e_low: tape.constant(self.e_low.clone()),
            e_high: tape.constant(self.e_high.clone()),
            objects: tape.constant(self.objects.clone()),
        }
    }

    pub fn k(&self) -> usize {
        self.objects.shape()[0]
    }
}
