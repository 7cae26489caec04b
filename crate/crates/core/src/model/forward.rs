use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::Variant;
use super::params::{Block, Linear, Mlp, Norm, Parameters, Stack};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};

/// Sinusoidal encodings: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding<F: Scalar>(length: usize, d: usize) -> Result<Tensor<F>> {
    let positions: Vec<usize> = (0..length).collect();
    pe_rows(&positions, d)
}

fn pe_rows<F: Scalar>(positions: &[usize], d: usize) -> Result<Tensor<F>> {
    if d % 2 != 0 {
        return Err(Error::shape(format!("positional encoding width {d} is odd")));
    }
    Ok(Tensor::from_fn(positions.len(), d, |r, c| {
        let i = (c / 2) as f64;
        let angle = positions[r] as f64 / 10000f64.powf(2.0 * i / d as f64);
        F::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Localization output of one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum Localization<F> {
    /// Per-frame probability that the frame belongs to the keyword.
    Frames(Vec<F>),
    /// Start and end distributions over frames, each summing to one.
    Span { start: Vec<F>, end: Vec<F> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F> {
    pub cls: F,
    pub loc: Option<Localization<F>>,
}

impl<F: Scalar> Prediction<F> {
    /// Per-frame probabilities of a frame-sigmoid head.
    pub fn frame_probs(&self) -> Result<&[F]> {
        match &self.loc {
            Some(Localization::Frames(p)) => Ok(p),
            Some(Localization::Span { .. }) => Err(Error::Capability(
                "span head has no per-frame probabilities".into(),
            )),
            None => Err(Error::Capability(
                "variant has no localization output".into(),
            )),
        }
    }
}

/// Tape nodes of the prediction heads.
#[derive(Clone, Copy, Debug)]
pub enum LocNodes {
    /// `T×1` probabilities.
    Frames(NodeId),
    /// `T×1` start and end probabilities.
    Span { start: NodeId, end: NodeId },
}

#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `1×1` presence probability.
    pub cls: NodeId,
    pub loc: Option<LocNodes>,
}

impl Heads {
    pub fn read<F: Scalar>(&self, tape: &Tape<F>) -> Prediction<F> {
        let loc = self.loc.map(|l| match l {
            LocNodes::Frames(n) => Localization::Frames(tape.value(n).data().to_vec()),
            LocNodes::Span { start, end } => Localization::Span {
                start: tape.value(start).data().to_vec(),
                end: tape.value(end).data().to_vec(),
            },
        });
        Prediction {
            cls: tape.value(self.cls).item(),
            loc,
        }
    }
}

fn prefix_mask(len: usize, valid: usize) -> Vec<bool> {
    (0..len).map(|i| i < valid).collect()
}

/// Builds the model's computation on a tape.
///
/// Parameters are bound lazily, so an inference pass only copies the tensors
/// it touches.
pub struct Graph<'a, F: Scalar> {
    tape: &'a mut Tape<F>,
    params: &'a Parameters<F>,
    bound: Vec<Option<NodeId>>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, params: &'a Parameters<F>) -> Self {
        let n = params.tensors().len();
        Self {
            tape,
            params,
            bound: vec![None; n],
            rng: None,
        }
    }

    /// Uses already-registered parameter nodes (in layout order); `params`
    /// then only supplies the architecture.
    pub fn with_bound(tape: &'a mut Tape<F>, params: &'a Parameters<F>, ids: &[NodeId]) -> Result<Self> {
        if ids.len() != params.tensors().len() {
            return Err(Error::shape("bound parameter count does not match layout"));
        }
        Ok(Self {
            tape,
            params,
            bound: ids.iter().copied().map(Some).collect(),
            rng: None,
        })
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn tape(&mut self) -> &mut Tape<F> {
        self.tape
    }

    fn p(&mut self, i: usize) -> NodeId {
        if let Some(id) = self.bound[i] {
            return id;
        }
        let id = self.tape.param(i, self.params.tensors()[i].clone());
        self.bound[i] = Some(id);
        id
    }

    fn linear(&mut self, x: NodeId, l: Linear) -> Result<NodeId> {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let h = self.tape.matmul(x, w, false)?;
        self.tape.add_row(h, b)
    }

    fn norm(&mut self, x: NodeId, n: Norm) -> Result<NodeId> {
        let g = self.p(n.g);
        let b = self.p(n.b);
        let eps = F::lit(self.params.config().layer_norm_eps);
        self.tape.layer_norm(x, g, b, eps)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let p = self.params.config().dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        self.tape.dropout(x, mask)
    }

    fn attend(
        &mut self,
        x: NodeId,
        x_mask: &[bool],
        src: NodeId,
        src_mask: &[bool],
        a: super::params::Attn,
    ) -> Result<NodeId> {
        let heads = self.params.config().heads;
        let q = self.linear(x, a.q)?;
        let k = self.linear(src, a.k)?;
        let v = self.linear(src, a.v)?;
        let att = self.tape.attention(q, k, v, heads, x_mask, src_mask)?;
        let out = self.linear(att, a.o)?;
        self.dropout(out)
    }

    /// Pre-norm block: self-attention, optional cross-attention, feed-forward.
    fn block(&mut self, x: NodeId, mask: &[bool], b: &Block, memory: Option<(NodeId, &[bool])>) -> Result<NodeId> {
        let h = self.norm(x, b.ln1)?;
        let a = self.attend(h, mask, h, mask, b.attn)?;
        let mut x = self.tape.add(x, a)?;
        if let (Some((ln, attn)), Some((mem, mem_mask))) = (b.cross, memory) {
            let h = self.norm(x, ln)?;
            let a = self.attend(h, mask, mem, mem_mask, attn)?;
            x = self.tape.add(x, a)?;
        }
        let h = self.norm(x, b.ln2)?;
        let h = self.linear(h, b.ff1)?;
        let h = self.tape.activation(h, self.params.config().activation);
        let h = self.linear(h, b.ff2)?;
        let h = self.dropout(h)?;
        self.tape.add(x, h)
    }

    fn stack(&mut self, x: NodeId, mask: &[bool], s: &Stack, memory: Option<(NodeId, &[bool])>) -> Result<NodeId> {
        let mut x = x;
        for b in &s.blocks {
            x = self.block(x, mask, b, memory)?;
        }
        self.norm(x, s.norm)
    }

    fn mlp(&mut self, x: NodeId, m: Mlp) -> Result<NodeId> {
        let h = self.linear(x, m.hidden)?;
        let h = self.tape.activation(h, crate::numerics::Activation::Relu);
        self.linear(h, m.out)
    }

    fn add_pe(&mut self, x: NodeId, positions: &[usize]) -> Result<NodeId> {
        let pe = self.tape.constant(pe_rows(positions, self.params.config().d_model)?);
        self.tape.add(x, pe)
    }

    fn check_query(&self, ids: &[u32], valid: usize) -> Result<()> {
        let cfg = self.params.config();
        if valid == 0 || valid > ids.len() {
            return Err(Error::domain(format!(
                "query needs 1..={} real phonemes, got {valid}",
                ids.len()
            )));
        }
        if ids.len() > cfg.max_phonemes {
            return Err(Error::domain(format!(
                "query of {} phonemes exceeds max_phonemes {}",
                ids.len(),
                cfg.max_phonemes
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::domain(format!(
                "phoneme id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn check_video(&self, feats: &Tensor<F>, valid: usize) -> Result<()> {
        let cfg = self.params.config();
        if feats.shape().len() != 2 || feats.cols() != cfg.input_dim {
            return Err(Error::shape(format!(
                "features {:?} do not have width {}",
                feats.shape(),
                cfg.input_dim
            )));
        }
        if valid == 0 || valid > feats.rows() {
            return Err(Error::domain(format!(
                "clip needs 1..={} real frames, got {valid}",
                feats.rows()
            )));
        }
        if feats.rows() > cfg.max_frames {
            return Err(Error::domain(format!(
                "clip of {} frames exceeds max_frames {}",
                feats.rows(),
                cfg.max_frames
            )));
        }
        Ok(())
    }

    fn embed(&mut self, ids: &[u32]) -> Result<NodeId> {
        let table = self.p(self.params.layout.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = self.tape.gather(table, &idx)?;
        Ok(self.input_scale(x))
    }

    /// Token inputs are scaled by `sqrt(d)` so that they are not swamped by
    /// the unit-amplitude positional encoding.
    fn input_scale(&mut self, x: NodeId) -> NodeId {
        let d = self.params.config().d_model as f64;
        self.tape.scale(x, F::lit(d.sqrt()))
    }

    fn project(&mut self, feats: &Tensor<F>) -> Result<NodeId> {
        let x = self.tape.constant(feats.clone());
        let x = self.linear(x, self.params.layout.proj)?;
        Ok(self.input_scale(x))
    }

    /// Text encoder over `ids`, of which the first `valid` are real.
    pub fn encode_text(&mut self, ids: &[u32], valid: usize) -> Result<NodeId> {
        self.check_query(ids, valid)?;
        let params = self.params;
        let stack = params
            .layout
            .text
            .as_ref()
            .ok_or_else(|| Error::Capability(format!("{} has no text encoder", params.config().variant)))?;
        let x = self.embed(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let x = self.add_pe(x, &positions)?;
        let x = self.dropout(x)?;
        self.stack(x, &prefix_mask(ids.len(), valid), stack, None)
    }

    /// Video encoder over `feats` (`T×d_in`), of which the first `valid` frames are real.
    pub fn encode_video(&mut self, feats: &Tensor<F>, valid: usize) -> Result<NodeId> {
        self.check_video(feats, valid)?;
        let params = self.params;
        let stack = params
            .layout
            .video
            .as_ref()
            .ok_or_else(|| Error::Capability(format!("{} has no video encoder", params.config().variant)))?;
        let x = self.project(feats)?;
        let positions: Vec<usize> = (0..feats.rows()).collect();
        let x = self.add_pe(x, &positions)?;
        let x = self.dropout(x)?;
        self.stack(x, &prefix_mask(feats.rows(), valid), stack, None)
    }

    fn heads(&mut self, z: NodeId, frames: usize) -> Result<Heads> {
        let params = self.params;
        let layout = &params.layout;
        let cls_row = self.tape.slice_rows(z, 0, 1)?;
        let logit = self.mlp(cls_row, layout.head_cls)?;
        let cls = self.tape.sigmoid(logit);
        let loc = if let Some(m) = layout.head_loc {
            let fr = self.tape.slice_rows(z, 1, 1 + frames)?;
            let logits = self.mlp(fr, m)?;
            Some(LocNodes::Frames(self.tape.sigmoid(logits)))
        } else if let Some((ms, me)) = layout.span {
            let fr = self.tape.slice_rows(z, 1, 1 + frames)?;
            let mut dist = |m: Mlp| -> Result<NodeId> {
                let l = self.mlp(fr, m)?;
                let l = self.tape.reshape(l, vec![1, frames])?;
                let p = self.tape.softmax(l)?;
                self.tape.reshape(p, vec![frames, 1])
            };
            let start = dist(ms)?;
            let end = dist(me)?;
            Some(LocNodes::Span { start, end })
        } else {
            None
        };
        Ok(Heads { cls, loc })
    }

    /// Joint encoder over `[CLS; V_enc; Q_enc]`. Phoneme outputs are dropped;
    /// localization covers the `v_valid` real frames.
    pub fn joint(&mut self, v_enc: NodeId, v_valid: usize, q_enc: NodeId, q_valid: usize) -> Result<Heads> {
        let params = self.params;
        if params.config().variant.is_decoder() {
            return Err(Error::Capability(format!(
                "{} has no joint encoder",
                params.config().variant
            )));
        }
        let (t, n) = (self.tape.value(v_enc).rows(), self.tape.value(q_enc).rows());
        if v_valid == 0 || v_valid > t || q_valid == 0 || q_valid > n {
            return Err(Error::shape(format!(
                "valid lengths {v_valid}/{q_valid} do not fit {t} frames / {n} phonemes"
            )));
        }
        let layout = &params.layout;
        let cls = self.p(layout.cls);
        let (mut v, mut q) = (v_enc, q_enc);
        if let Some(m) = layout.modality {
            let table = self.p(m);
            let mv = self.tape.slice_rows(table, 0, 1)?;
            let mq = self.tape.slice_rows(table, 1, 2)?;
            v = self.tape.add_row(v, mv)?;
            q = self.tape.add_row(q, mq)?;
        }
        let j = self.tape.concat_rows(&[cls, v, q])?;
        // Text slots continue right after the last real frame, so padding the
        // video does not shift the phonemes' positions.
        let positions: Vec<usize> = std::iter::once(0)
            .chain(1..=t)
            .chain((0..n).map(|i| 1 + v_valid + i))
            .collect();
        let j = self.add_pe(j, &positions)?;
        let mut mask = vec![true];
        mask.extend(prefix_mask(t, v_valid));
        mask.extend(prefix_mask(n, q_valid));
        let z = self.stack(j, &mask, &layout.joint, None)?;
        self.heads(z, v_valid)
    }

    /// Full forward pass for any variant, with optional padding on either input.
    pub fn forward_padded(&mut self, feats: &Tensor<F>, v_valid: usize, ids: &[u32], q_valid: usize) -> Result<Heads> {
        let params = self.params;
        let layout = &params.layout;
        match params.config().variant {
            Variant::Transpotter | Variant::TranspotterNoLoc => {
                let q = self.encode_text(ids, q_valid)?;
                let v = self.encode_video(feats, v_valid)?;
                self.joint(v, v_valid, q, q_valid)
            }
            Variant::EncVidDecText => {
                self.check_query(ids, q_valid)?;
                let v = self.encode_video(feats, v_valid)?;
                let cls = self.p(layout.cls);
                let e = self.embed(ids)?;
                let x = self.tape.concat_rows(&[cls, e])?;
                let positions: Vec<usize> = (0..=ids.len()).collect();
                let x = self.add_pe(x, &positions)?;
                let x = self.dropout(x)?;
                let mask = prefix_mask(1 + ids.len(), 1 + q_valid);
                let vmask = prefix_mask(feats.rows(), v_valid);
                let z = self.stack(x, &mask, &layout.joint, Some((v, &vmask)))?;
                self.heads(z, 0)
            }
            Variant::EncTextDecVid => {
                self.check_video(feats, v_valid)?;
                let q = self.encode_text(ids, q_valid)?;
                let cls = self.p(layout.cls);
                let f = self.project(feats)?;
                let x = self.tape.concat_rows(&[cls, f])?;
                let positions: Vec<usize> = (0..=feats.rows()).collect();
                let x = self.add_pe(x, &positions)?;
                let x = self.dropout(x)?;
                let mask = prefix_mask(1 + feats.rows(), 1 + v_valid);
                let qmask = prefix_mask(ids.len(), q_valid);
                let z = self.stack(x, &mask, &layout.joint, Some((q, &qmask)))?;
                self.heads(z, v_valid)
            }
        }
    }

    pub fn forward(&mut self, feats: &Tensor<F>, ids: &[u32]) -> Result<Heads> {
        self.forward_padded(feats, feats.rows(), ids, ids.len())
    }
}

/// Text encoder output for all `ids.len()` slots.
pub fn encode_text<F: Scalar>(params: &Parameters<F>, ids: &[u32], valid: usize) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let out = Graph::new(&mut tape, params).encode_text(ids, valid)?;
    Ok(tape.value(out).clone())
}

/// Video encoder output for all `feats.rows()` slots.
pub fn encode_video<F: Scalar>(params: &Parameters<F>, feats: &Tensor<F>, valid: usize) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let out = Graph::new(&mut tape, params).encode_video(feats, valid)?;
    Ok(tape.value(out).clone())
}

/// Joint encoder and heads over precomputed encodings.
pub fn joint_forward<F: Scalar>(
    params: &Parameters<F>,
    v_enc: &Tensor<F>,
    v_valid: usize,
    q_enc: &Tensor<F>,
    q_valid: usize,
) -> Result<Prediction<F>> {
    let d = params.config().d_model;
    if v_enc.cols() != d || q_enc.cols() != d {
        return Err(Error::shape(format!(
            "encodings {:?} / {:?} are not {d} wide",
            v_enc.shape(),
            q_enc.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(v_enc.clone());
    let q = tape.constant(q_enc.clone());
    let heads = Graph::new(&mut tape, params).joint(v, v_valid, q, q_valid)?;
    Ok(heads.read(&tape))
}

/// Inference on one unpadded (clip, query) pair.
pub fn forward<F: Scalar>(params: &Parameters<F>, feats: &Tensor<F>, ids: &[u32]) -> Result<Prediction<F>> {
    forward_padded(params, feats, feats.rows(), ids, ids.len())
}

/// Inference with trailing padding on either input.
pub fn forward_padded<F: Scalar>(
    params: &Parameters<F>,
    feats: &Tensor<F>,
    v_valid: usize,
    ids: &[u32],
    q_valid: usize,
) -> Result<Prediction<F>> {
    let mut tape = Tape::new();
    let heads = Graph::new(&mut tape, params).forward_padded(feats, v_valid, ids, q_valid)?;
    Ok(heads.read(&tape))
}
