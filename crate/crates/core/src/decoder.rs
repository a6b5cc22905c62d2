//! Pairwise multi-pattern interaction decoder. Every (pattern, human, object)
//! triple owns one query whose position is the sum of the three position
//! embeddings; queries cross-attend to the instance tokens, self-attend to
//! each other and are classified into verbs by a linear layer.

use candle_core::Tensor;

use crate::config::RunConfig;
use crate::cues::HEAD_STD;
use crate::encoder::InstanceTokens;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp, MultiHeadAttention};

/// `(pattern, human, object)` for each query, lexicographic.
pub fn index_map(patterns: usize, humans: usize, objects: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(patterns * humans * objects);
    for p in 0..patterns {
        for i in 0..humans {
            for j in 0..objects {
                out.push((p, i, j));
            }
        }
    }
    out
}

/// Query row of a triple in the lexicographic layout.
pub fn query_index(p: usize, i: usize, j: usize, humans: usize, objects: usize) -> usize {
    (p * humans + i) * objects + j
}

#[derive(Debug, Clone)]
pub struct InteractionQuerySet {
    /// `[N_a, D]`. Query content starts at zero, so only positions are stored.
    pub query_pos: Tensor,
    pub index_map: Vec<(usize, usize, usize)>,
}

impl InteractionQuerySet {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }
}

/// Position of `(p, i, j)` is `P_pattern[p] + P_h[i] + P_o[j]`.
pub fn build_queries(p_h: &Tensor, p_o: &Tensor, p_pattern: &Tensor) -> Result<InteractionQuerySet> {
    let (nh, d) = p_h.dims2()?;
    let (no, d_o) = p_o.dims2()?;
    let (np, d_p) = p_pattern.dims2()?;
    if d_o != d || d_p != d {
        return Err(Error::Shape(format!("position widths {d}, {d_o}, {d_p} differ")));
    }
    let pos = p_pattern
        .reshape((np, 1, 1, d))?
        .broadcast_add(&p_h.reshape((1, nh, 1, d))?)?
        .broadcast_add(&p_o.reshape((1, 1, no, d))?)?
        .reshape((np * nh * no, d))?;
    Ok(InteractionQuerySet {
        query_pos: pos,
        index_map: index_map(np, nh, no),
    })
}

/// Pre-norm layer: cross-attention to the memory, self-attention among the
/// queries, feed-forward; each with a residual connection.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let mut s = init.pp(name);
        Ok(DecoderLayer {
            norm_cross: LayerNorm::new(&mut s, "norm_cross", dim)?,
            cross: MultiHeadAttention::new(&mut s, "cross", dim, heads)?,
            norm_self: LayerNorm::new(&mut s, "norm_self", dim)?,
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", dim, heads)?,
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", dim)?,
            ffn: Mlp::new(&mut s, "ffn", &[dim, dim * ffn_mult, dim])?,
        })
    }

    /// `tgt: [B, N_a, D]`, `pos: [N_a, D]`, `memory: [B, M, D]`.
    pub fn forward(&self, tgt: &Tensor, pos: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let q = self.norm_cross.forward(tgt)?.broadcast_add(pos)?;
        let x = (tgt + self.cross.forward(&q, memory, memory)?)?;
        let h = self.norm_self.forward(&x)?;
        let q = h.broadcast_add(pos)?;
        let x = (&x + self.self_attn.forward(&q, &q, &h)?)?;
        let h = self.norm_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct InteractionDecoder {
    pub pos_human: Tensor,
    pub pos_object: Tensor,
    pub pos_pattern: Tensor,
    /// Separate memory position tables, present when positions are not shared.
    pub memory_pos: Option<(Tensor, Tensor)>,
    pub layers: Vec<DecoderLayer>,
    pub classifier: Linear,
}

/// Initial sigmoid output of the verb classifier.
pub const VERB_PRIOR: f64 = 0.01;

impl InteractionDecoder {
    pub fn new(init: &mut Init, cfg: &RunConfig) -> Result<Self> {
        let d = cfg.dim;
        let (nh, no) = cfg.centers_stage2;
        let mut s = init.pp("decoder");
        let pos_human = s.normal("pos_human", &[nh, d], 1.0)?;
        let pos_object = s.normal("pos_object", &[no, d], 1.0)?;
        let pos_pattern = s.normal("pos_pattern", &[cfg.patterns, d], 1.0)?;
        let memory_pos = if cfg.shared_decoder_pos {
            None
        } else {
            Some((s.normal("memory_pos_human", &[nh, d], 1.0)?, s.normal("memory_pos_object", &[no, d], 1.0)?))
        };
        let layers = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(&mut s, &format!("layer{l}"), d, cfg.heads, cfg.ffn_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(InteractionDecoder {
            pos_human,
            pos_object,
            pos_pattern,
            memory_pos,
            layers,
            classifier: Linear::normal(&mut s, "classifier", d, cfg.num_verbs(), HEAD_STD, -((1.0 - VERB_PRIOR) / VERB_PRIOR).ln())?,
        })
    }

    pub fn queries(&self) -> Result<InteractionQuerySet> {
        build_queries(&self.pos_human, &self.pos_object, &self.pos_pattern)
    }

    /// `[T_h + P_h; T_o + P_o]`, `[B, N_h + N_o, D]`.
    pub fn memory(&self, tokens: &InstanceTokens) -> Result<Tensor> {
        let (ph, po) = match &self.memory_pos {
            Some((h, o)) => (h, o),
            None => (&self.pos_human, &self.pos_object),
        };
        let (_, nh, d) = tokens.human.dims3()?;
        let (_, no, _) = tokens.object.dims3()?;
        if ph.dims() != [nh, d] || po.dims() != [no, d] {
            return Err(Error::Shape(format!(
                "memory tokens {:?}/{:?} vs positions {:?}/{:?}",
                tokens.human.dims(),
                tokens.object.dims(),
                ph.dims(),
                po.dims()
            )));
        }
        Ok(Tensor::cat(&[tokens.human.broadcast_add(ph)?, tokens.object.broadcast_add(po)?], 1)?)
    }

    /// Runs the layers from an explicit query content `tgt: [B, N_a, D]`.
    pub fn decode_from(&self, tgt: &Tensor, queries: &InteractionQuerySet, memory: &Tensor) -> Result<Tensor> {
        let mut x = tgt.clone();
        for layer in &self.layers {
            x = layer.forward(&x, &queries.query_pos, memory)?;
        }
        Ok(x)
    }

    /// Decodes from zero query content; returns `[B, N_a, D]`.
    pub fn decode(&self, tokens: &InstanceTokens) -> Result<(Tensor, InteractionQuerySet)> {
        let queries = self.queries()?;
        let memory = self.memory(tokens)?;
        let b = memory.dim(0)?;
        let d = memory.dim(2)?;
        let tgt = Tensor::zeros((b, queries.len(), d), memory.dtype(), memory.device())?;
        Ok((self.decode_from(&tgt, &queries, &memory)?, queries))
    }

    /// `[B, N_a, D]` -> `[B, N_a, N_verbs]` pre-sigmoid scores.
    pub fn classify(&self, decoded: &Tensor) -> Result<Tensor> {
        self.classifier.forward(decoded)
    }
}
