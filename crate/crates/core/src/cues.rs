//! Instance-level cues: pose, boxes and class distributions predicted from the
//! instance tokens, gated by class confidence, embedded and folded back into
//! the tokens.

use candle_core::{Tensor, D};
use serde::Serialize;

use crate::config::RunConfig;
use crate::encoder::InstanceTokens;
use crate::error::{Error, Result};
use crate::nn::{constant, sigmoid, softmax, to_f64_vec, Init, Linear, Mlp};
use crate::text::TextProvider;

pub const NUM_KEYPOINTS: usize = 17;

/// Raw cue predictions, batched.
#[derive(Debug, Clone)]
pub struct CueBundle {
    /// `[B, N_h, 17, 2]` in `[0, 1]`.
    pub keypoints: Tensor,
    /// `[B, N_h, 4]` as `(cx, cy, w, h)` in `[0, 1]`.
    pub human_boxes: Tensor,
    /// `[B, N_o, 4]`.
    pub object_boxes: Tensor,
    /// `[B, N_h, 2]`; index 1 is no-human.
    pub human_logits: Tensor,
    /// `[B, N_o, C + 1]`; index C is no-object.
    pub object_logits: Tensor,
    pub human_class: Tensor,
    pub object_class: Tensor,
}

#[derive(Debug, Clone)]
pub struct CueEmbeddings {
    pub e_pos: Tensor,
    pub e_h_spa: Tensor,
    pub e_o_spa: Tensor,
    pub e_cls: Tensor,
    /// Row-major `[B * N_h]`; `true` keeps the row.
    pub human_gate: Vec<bool>,
    pub object_gate: Vec<bool>,
}

/// Host copy of a [`CueBundle`] for diagnostics dumps.
#[derive(Debug, Clone, Serialize)]
pub struct CueRecord {
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub human_boxes: Vec<[f64; 4]>,
    pub object_boxes: Vec<[f64; 4]>,
    pub human_class: Vec<Vec<f64>>,
    pub object_class: Vec<Vec<f64>>,
}

/// Per-row gate: keep the row iff the largest real-class probability exceeds
/// `threshold`. `probs` is row-major with `width` columns of which the first
/// `real` are real classes.
pub fn gate_mask(probs: &[f64], width: usize, real: usize, threshold: f64) -> Vec<bool> {
    probs
        .chunks(width)
        .map(|row| row[..real].iter().cloned().fold(f64::NEG_INFINITY, f64::max) > threshold)
        .collect()
}

/// Multiplies `[B, N, W]` rows by a 0/1 mask.
pub fn apply_gate(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, n, _) = x.dims3()?;
    if mask.len() != b * n {
        return Err(Error::Shape(format!("gate of length {} for {b}x{n} rows", mask.len())));
    }
    let m = constant(mask.iter().map(|&k| f64::from(u8::from(k))).collect(), &[b, n, 1], x.dtype())?;
    Ok(x.broadcast_mul(&m)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct CueHead {
    pub pose: Mlp,
    pub boxes: Mlp,
    pub human_cls: Linear,
    pub object_cls: Linear,
    pub embed_pos: Mlp,
    pub embed_h_spa: Mlp,
    pub embed_o_spa: Mlp,
    pub embed_cls: Mlp,
    pub agg_human: Linear,
    pub agg_object: Linear,
    /// `[C, word_dim]` frozen word vectors of the object classes.
    pub word_table: Tensor,
    num_classes: usize,
}

/// Init std of the final layer of every prediction head.
pub const HEAD_STD: f64 = 1e-3;

impl CueHead {
    pub fn new(init: &mut Init, cfg: &RunConfig, text: &dyn TextProvider) -> Result<Self> {
        let d = cfg.dim;
        let c = cfg.num_object_classes();
        let mut s = init.pp("cues");
        let mut words = Vec::with_capacity(c * text.word_dim());
        for name in &cfg.object_classes {
            words.extend(text.word_vector(name)?);
        }
        let dtype = cfg.precision.dtype();
        Ok(CueHead {
            pose: Mlp::small_head(&mut s, "pose", &[d, d, d, d, d, NUM_KEYPOINTS * 2], HEAD_STD)?,
            boxes: Mlp::small_head(&mut s, "boxes", &[d, d, d, 4], HEAD_STD)?,
            human_cls: Linear::normal(&mut s, "human_cls", d, 2, HEAD_STD, 0.0)?,
            object_cls: Linear::normal(&mut s, "object_cls", d, c + 1, HEAD_STD, 0.0)?,
            embed_pos: Mlp::new(&mut s, "embed_pos", &[NUM_KEYPOINTS * 2, cfg.d_pos, cfg.d_pos])?,
            embed_h_spa: Mlp::new(&mut s, "embed_h_spa", &[4, cfg.d_spa, cfg.d_spa])?,
            embed_o_spa: Mlp::new(&mut s, "embed_o_spa", &[4, cfg.d_spa, cfg.d_spa])?,
            embed_cls: Mlp::new(&mut s, "embed_cls", &[text.word_dim(), cfg.d_cls, cfg.d_cls])?,
            agg_human: Linear::no_bias(&mut s, "agg_human", d + cfg.d_pos + cfg.d_spa, d)?,
            agg_object: Linear::no_bias(&mut s, "agg_object", d + cfg.d_cls + cfg.d_spa, d)?,
            word_table: constant(words, &[c, text.word_dim()], dtype)?,
            num_classes: c,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn extract_cues(&self, tokens: &InstanceTokens) -> Result<CueBundle> {
        let (b, nh, _) = tokens.human.dims3()?;
        let keypoints = sigmoid(&self.pose.forward(&tokens.human)?)?.reshape((b, nh, NUM_KEYPOINTS, 2))?;
        let human_boxes = sigmoid(&self.boxes.forward(&tokens.human)?)?;
        let object_boxes = sigmoid(&self.boxes.forward(&tokens.object)?)?;
        let human_logits = self.human_cls.forward(&tokens.human)?;
        let object_logits = self.object_cls.forward(&tokens.object)?;
        Ok(CueBundle {
            keypoints,
            human_boxes,
            object_boxes,
            human_class: softmax(&human_logits, 2)?,
            object_class: softmax(&object_logits, 2)?,
            human_logits,
            object_logits,
        })
    }

    /// Embeds the cues and zeroes the rows of instances whose best real-class
    /// probability is not above `threshold`. With `switch` off every row is kept.
    pub fn gate_and_embed(&self, bundle: &CueBundle, threshold: f64, switch: bool) -> Result<CueEmbeddings> {
        let (b, nh, _, _) = bundle.keypoints.dims4()?;
        let (_, no, width) = bundle.object_class.dims3()?;
        let hp = to_f64_vec(&bundle.human_class)?;
        let op = to_f64_vec(&bundle.object_class)?;
        let (human_gate, object_gate) = if switch {
            (gate_mask(&hp, 2, 1, threshold), gate_mask(&op, width, width - 1, threshold))
        } else {
            (vec![true; b * nh], vec![true; b * no])
        };
        let kp = bundle.keypoints.reshape((b, nh, NUM_KEYPOINTS * 2))?;
        let e_pos = apply_gate(&self.embed_pos.forward(&kp)?, &human_gate)?;
        let e_h_spa = apply_gate(&self.embed_h_spa.forward(&bundle.human_boxes)?, &human_gate)?;
        let e_o_spa = apply_gate(&self.embed_o_spa.forward(&bundle.object_boxes)?, &object_gate)?;
        let classes: Vec<u32> = op.chunks(width).map(|r| argmax(&r[..width - 1]) as u32).collect();
        let idx = Tensor::new(classes.as_slice(), self.word_table.device())?;
        let words = self.word_table.index_select(&idx, 0)?.reshape((b, no, self.word_table.dim(1)?))?;
        let e_cls = apply_gate(&self.embed_cls.forward(&words)?, &object_gate)?;
        Ok(CueEmbeddings {
            e_pos,
            e_h_spa,
            e_o_spa,
            e_cls,
            human_gate,
            object_gate,
        })
    }

    /// `T_h <- W_h [T_h; E_pos; E_h_spa]`, `T_o <- W_o [T_o; E_cls; E_o_spa]`.
    pub fn aggregate(&self, tokens: &InstanceTokens, emb: &CueEmbeddings) -> Result<InstanceTokens> {
        let cat = |parts: &[&Tensor]| -> Result<Tensor> {
            let b = parts[0].dim(0)?;
            let n = parts[0].dim(1)?;
            if parts.iter().any(|p| p.dims().len() != 3 || p.dim(0).ok() != Some(b) || p.dim(1).ok() != Some(n)) {
                return Err(Error::Shape("cue concatenation row mismatch".into()));
            }
            Ok(Tensor::cat(parts, D::Minus1)?)
        };
        let human = self.agg_human.forward(&cat(&[&tokens.human, &emb.e_pos, &emb.e_h_spa])?)?;
        let object = self.agg_object.forward(&cat(&[&tokens.object, &emb.e_cls, &emb.e_o_spa])?)?;
        Ok(InstanceTokens { human, object })
    }
}

impl CueBundle {
    /// Host copy of batch item `b`.
    pub fn record(&self, b: usize) -> Result<CueRecord> {
        let kp = to_f64_vec(&self.keypoints.get(b)?)?;
        let hb = to_f64_vec(&self.human_boxes.get(b)?)?;
        let ob = to_f64_vec(&self.object_boxes.get(b)?)?;
        let hc = to_f64_vec(&self.human_class.get(b)?)?;
        let oc = to_f64_vec(&self.object_class.get(b)?)?;
        let width = self.object_class.dim(2)?;
        let boxes = |v: &[f64]| v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect::<Vec<_>>();
        Ok(CueRecord {
            keypoints: kp
                .chunks(NUM_KEYPOINTS * 2)
                .map(|h| h.chunks(2).map(|p| [p[0], p[1]]).collect())
                .collect(),
            human_boxes: boxes(&hb),
            object_boxes: boxes(&ob),
            human_class: hc.chunks(2).map(|r| r.to_vec()).collect(),
            object_class: oc.chunks(width).map(|r| r.to_vec()).collect(),
        })
    }
}
