//! Training objective: text-guided instance matching, the token loss, the cue
//! regression loss, the interaction focal loss and their weighted sum.

use candle_core::{DType, Tensor, D};
use serde::Serialize;

use crate::config::{RunConfig, SimilarityMetric};
use crate::cues::{CueBundle, NUM_KEYPOINTS};
use crate::decoder::query_index;
use crate::encoder::InstanceTokens;
use crate::error::{Error, Result};
use crate::matching::{match_instances, min_cost_assignment, MatchAssignment};
use crate::nn::{constant, log_softmax, sigmoid, to_f64_vec, Init, Mlp};
use crate::scenes::{Interaction, SceneSample};
use crate::text::{prompt, TextProvider, HUMAN_CLASS};

/// Probability floor inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Norm floor of projected visual representations.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Class probability times cosine between visual and text representations.
pub fn similarity(class_prob: f64, r_vis: &[f64], r_txt: &[f64]) -> Result<f64> {
    Ok(class_prob * cosine(r_vis, r_txt)?)
}

/// Matching score under each metric variant.
pub fn matching_score(metric: SimilarityMetric, class_prob: f64, cos: f64) -> f64 {
    match metric {
        SimilarityMetric::Ce => class_prob,
        SimilarityMetric::Cos => cos,
        SimilarityMetric::CePlusCos => class_prob + cos,
        SimilarityMetric::Weighted => class_prob * cos,
    }
}

/// Trainable projector from instance tokens into the text space, plus the
/// frozen text embeddings of "human" and every object class.
#[derive(Debug, Clone)]
pub struct TextGuidance {
    pub projector: Mlp,
    pub human_text: Vec<f64>,
    pub object_text: Vec<Vec<f64>>,
}

impl TextGuidance {
    pub fn new(init: &mut Init, cfg: &RunConfig, text: &dyn TextProvider) -> Result<Self> {
        let mut s = init.pp("guidance");
        let human_text = text.embed(&prompt(HUMAN_CLASS)?)?.vector;
        let object_text = cfg
            .object_classes
            .iter()
            .map(|c| Ok(text.embed(&prompt(c)?)?.vector))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextGuidance {
            projector: Mlp::new(&mut s, "projector", &[cfg.dim, cfg.text_dim, cfg.text_dim])?,
            human_text,
            object_text,
        })
    }
}

/// `[M, T] x [M, T] -> [M]` cosine with the visual norm floored.
pub fn row_cosine(r_vis: &Tensor, r_txt: &Tensor) -> Result<Tensor> {
    let dot = (r_vis * r_txt)?.sum(D::Minus1)?;
    let nv = r_vis.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(NORM_FLOOR)?;
    let nt = r_txt.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(NORM_FLOOR)?;
    Ok(dot.div(&(nv * nt)?)?)
}

/// The two terms of the positive token loss, summed over matched instances.
#[derive(Debug, Clone)]
pub struct PositiveTerms {
    /// Cosine term, weighted by the (constant) class probability.
    pub cos_term: Tensor,
    /// Cross-entropy term, weighted by the (constant) cosine.
    pub ce_term: Tensor,
}

impl PositiveTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.cos_term + &self.ce_term)?)
    }
}

/// `log_prob: [M]` (log of the GT-class probability, already floored),
/// `cos: [M]`. Under the weighted metric the class probability weighting the
/// cosine term and the cosine weighting the cross-entropy term are detached.
pub fn loss_t_positive(log_prob: &Tensor, cos: &Tensor, metric: SimilarityMetric, clamp_cos_weight: bool) -> Result<PositiveTerms> {
    let (p, w) = stop_gradient_factors(log_prob, cos, clamp_cos_weight)?;
    loss_t_positive_with(log_prob, cos, metric, &p, &w)
}

/// Detached `(class probability, cosine weight)` of the weighted metric.
pub fn stop_gradient_factors(log_prob: &Tensor, cos: &Tensor, clamp_cos_weight: bool) -> Result<(Tensor, Tensor)> {
    let w = if clamp_cos_weight { cos.clamp(0.0, 1.0)? } else { cos.clone() };
    Ok((log_prob.exp()?.detach(), w.detach()))
}

/// [`loss_t_positive`] with the weighted metric's constant factors supplied.
pub fn loss_t_positive_with(log_prob: &Tensor, cos: &Tensor, metric: SimilarityMetric, p: &Tensor, w: &Tensor) -> Result<PositiveTerms> {
    let ce = log_prob.neg()?;
    Ok(match metric {
        SimilarityMetric::Weighted => PositiveTerms {
            cos_term: (p * cos.neg()?)?.sum_all()?,
            ce_term: (w * ce)?.sum_all()?,
        },
        SimilarityMetric::Ce => PositiveTerms {
            cos_term: cos.zeros_like()?.sum_all()?,
            ce_term: ce.sum_all()?,
        },
        SimilarityMetric::Cos | SimilarityMetric::CePlusCos => PositiveTerms {
            cos_term: cos.neg()?.sum_all()?,
            ce_term: ce.sum_all()?,
        },
    })
}

/// `-sum log p(nothing)` over predictions matched to padding.
pub fn loss_t_negative(log_prob_nothing: &Tensor) -> Result<Tensor> {
    Ok(log_prob_nothing.neg()?.sum_all()?)
}

/// `log sigmoid(x) = min(x, 0) - log(1 + exp(-|x|))`.
fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.minimum(0.0)? - soft)?)
}

/// Elementwise sigmoid focal loss. A negative `alpha` disables class weighting.
pub fn sigmoid_focal(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let ce = ((targets * log_sigmoid(logits)?)? + (&one_minus_t * log_sigmoid(&logits.neg()?)?)?)?.neg()?;
    let p = sigmoid(logits)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let miss = p_t.affine(-1.0, 1.0)?;
    let modulated = if gamma == 0.0 {
        ce
    } else if gamma == 2.0 {
        (miss.sqr()? * ce)?
    } else {
        (miss.powf(gamma)? * ce)?
    };
    if alpha < 0.0 {
        return Ok(modulated);
    }
    let a_t = ((targets * alpha)? + (one_minus_t * (1.0 - alpha))?)?;
    Ok((a_t * modulated)?)
}

/// Host version of [`sigmoid_focal`] for one logit.
pub fn sigmoid_focal_scalar(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let log_sig = |z: f64| z.min(0.0) - (-z.abs()).exp().ln_1p();
    let ce = -(t * log_sig(x) + (1.0 - t) * log_sig(-x));
    let p = 1.0 / (1.0 + (-x).exp());
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let m = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).powf(gamma) };
    let a = if alpha < 0.0 { 1.0 } else { alpha * t + (1.0 - alpha) * (1.0 - t) };
    a * m * ce
}

/// Focal loss summed over all entries, divided by the number of positive
/// targets (at least one).
pub fn loss_interactions(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let positives = to_f64_vec(targets)?.iter().sum::<f64>().max(1.0);
    Ok((sigmoid_focal(logits, targets, alpha, gamma)?.sum_all()? / positives)?)
}

/// Query layout needed to build interaction targets.
#[derive(Debug, Clone, Copy)]
pub struct QueryLayout {
    pub patterns: usize,
    pub humans: usize,
    pub objects: usize,
    pub verbs: usize,
}

/// Multi-hot targets `[N_a * V]` for one scene plus the number of verbs that
/// did not fit in the patterns of their pair.
///
/// Each GT interaction selects the pair `(sigma_h(g), sigma_o(o))`; its verbs
/// are spread over that pair's patterns by a minimum-cost assignment whose
/// cost is the focal loss of a one-verb target against the pattern's logits.
pub fn assign_interaction_targets(
    layout: QueryLayout,
    humans: &MatchAssignment,
    objects: &MatchAssignment,
    interactions: &[Interaction],
    logits: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<(Vec<f64>, usize)> {
    let QueryLayout {
        patterns,
        humans: nh,
        objects: no,
        verbs: nv,
    } = layout;
    if logits.len() != patterns * nh * no * nv {
        return Err(Error::Shape(format!("{} logits for layout {layout:?}", logits.len())));
    }
    let mut targets = vec![0.0; logits.len()];
    let mut overflow = 0;
    for it in interactions {
        if it.human_idx >= humans.matched_gt_count || it.object_idx >= objects.matched_gt_count {
            return Err(Error::Value(format!(
                "interaction ({}, {}) references an unmatched instance",
                it.human_idx, it.object_idx
            )));
        }
        let i = humans.sigma[it.human_idx];
        let j = objects.sigma[it.object_idx];
        let rows: Vec<usize> = (0..patterns).map(|p| query_index(p, i, j, nh, no)).collect();
        let fitted = it.verbs.len().min(patterns);
        let cost: Vec<Vec<f64>> = it.verbs[..fitted]
            .iter()
            .map(|&v| {
                rows.iter()
                    .map(|&r| {
                        (0..nv)
                            .map(|c| sigmoid_focal_scalar(logits[r * nv + c], f64::from(u8::from(c == v)), alpha, gamma))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let pattern_of = min_cost_assignment(&cost)?;
        for (k, &v) in it.verbs[..fitted].iter().enumerate() {
            targets[rows[pattern_of[k]] * nv + v] = 1.0;
        }
        if it.verbs.len() > patterns {
            let last = rows[pattern_of[fitted - 1]];
            for &v in &it.verbs[fitted..] {
                targets[last * nv + v] = 1.0;
            }
            overflow += it.verbs.len() - patterns;
            log::warn!(
                "pair ({}, {}) carries {} verbs but only {patterns} patterns; extra verbs share the last pattern",
                it.human_idx,
                it.object_idx,
                it.verbs.len()
            );
        }
    }
    Ok((targets, overflow))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_e: f64,
    pub l_t_pos_h: f64,
    pub l_t_neg_h: f64,
    pub l_t_pos_o: f64,
    pub l_t_neg_o: f64,
    pub l_t: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_interaction: f64,
    pub alpha_cue: f64,
    pub alpha_token: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            alpha_interaction: cfg.alpha_interaction,
            alpha_cue: cfg.alpha_cue,
            alpha_token: cfg.alpha_token,
            lambda: cfg.lambda,
        }
    }
}

/// Scalar composition of the loss components.
pub fn compose(w: &LossWeights, l_a: f64, l_e: f64, pos_h: f64, neg_h: f64, pos_o: f64, neg_o: f64) -> LossBreakdown {
    let l_t = w.lambda * pos_h + (1.0 - w.lambda) * neg_h + w.lambda * pos_o + (1.0 - w.lambda) * neg_o;
    LossBreakdown {
        l_a,
        l_e,
        l_t_pos_h: pos_h,
        l_t_neg_h: neg_h,
        l_t_pos_o: pos_o,
        l_t_neg_o: neg_o,
        l_t,
        total: w.alpha_interaction * l_a + w.alpha_cue * l_e + w.alpha_token * l_t,
    }
}

/// Both role matchings for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    pub humans: MatchAssignment,
    pub objects: MatchAssignment,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub matches: Vec<SceneMatch>,
    /// Values of the stop-gradient factors in this evaluation.
    pub frozen: FrozenFactors,
    pub capacity_overflows: usize,
}

/// Host values of the detached factors of the weighted metric, per role, in
/// matched-instance order. Feeding them back holds the factors constant, which
/// turns the loss into the surrogate whose exact gradient autodiff computes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenFactors {
    pub human: (Vec<f64>, Vec<f64>),
    pub object: (Vec<f64>, Vec<f64>),
}

fn scalar_zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &candle_core::Device::Cpu)?)
}

fn select_flat(t: &Tensor, idx: &[u32]) -> Result<Option<Tensor>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let i = Tensor::new(idx, t.device())?;
    Ok(Some(t.flatten_all()?.index_select(&i, 0)?))
}

fn select_rows(t: &Tensor, rows: &[u32]) -> Result<Tensor> {
    let w = t.dim(D::Minus1)?;
    let n = t.elem_count() / w;
    let i = Tensor::new(rows, t.device())?;
    Ok(t.reshape((n, w))?.index_select(&i, 0)?)
}

/// Per-role bookkeeping of matched (row, class, text) and unmatched rows.
#[derive(Default)]
struct RoleSelection {
    pos_rows: Vec<u32>,
    pos_flat: Vec<u32>,
    pos_text: Vec<f64>,
    neg_flat: Vec<u32>,
}

struct RoleView<'a> {
    n_pred: usize,
    width: usize,
    probs: Vec<f64>,
    r_vis: Vec<f64>,
    text_dim: usize,
    texts: &'a dyn Fn(usize) -> &'a [f64],
}

fn match_role(view: &RoleView, b: usize, gt_classes: &[usize], metric: SimilarityMetric, sel: &mut RoleSelection) -> Result<MatchAssignment> {
    let (n, w, t) = (view.n_pred, view.width, view.text_dim);
    let mut sim = Vec::with_capacity(gt_classes.len());
    for &c in gt_classes {
        let txt = (view.texts)(c);
        let row = (0..n)
            .map(|k| {
                let r = b * n + k;
                let cos = if metric.uses_text() {
                    let v = &view.r_vis[r * t..(r + 1) * t];
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                    v.iter().zip(txt).map(|(x, y)| x * y).sum::<f64>() / norm
                } else {
                    0.0
                };
                matching_score(metric, view.probs[r * w + c], cos)
            })
            .collect();
        sim.push(row);
    }
    let m = match_instances(&sim, n)?;
    for (g, &k) in m.matched().iter().enumerate() {
        let r = (b * n + k) as u32;
        sel.pos_rows.push(r);
        sel.pos_flat.push(r * w as u32 + gt_classes[g] as u32);
        sel.pos_text.extend_from_slice((view.texts)(gt_classes[g]));
    }
    for k in m.unmatched() {
        sel.neg_flat.push(((b * n + k) * w + w - 1) as u32);
    }
    Ok(m)
}

/// Positive and negative token losses for one role, already divided by the
/// batch size, plus the stop-gradient factor values used.
fn role_token_loss(
    logp: &Tensor,
    r_vis: &Tensor,
    sel: &RoleSelection,
    text_dim: usize,
    cfg: &RunConfig,
    batch: usize,
    frozen: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<(Tensor, Tensor, (Vec<f64>, Vec<f64>))> {
    let dtype = logp.dtype();
    let mut used = (Vec::new(), Vec::new());
    let pos = match select_flat(logp, &sel.pos_flat)? {
        Some(lp) => {
            let cos = if cfg.metric.uses_text() {
                let rv = select_rows(r_vis, &sel.pos_rows)?;
                let tx = constant(sel.pos_text.clone(), &[sel.pos_rows.len(), text_dim], dtype)?;
                row_cosine(&rv, &tx)?
            } else {
                lp.zeros_like()?
            };
            let (p, w) = match frozen {
                Some((p, w)) => {
                    let m = sel.pos_rows.len();
                    if p.len() != m || w.len() != m {
                        return Err(Error::Shape(format!("{} frozen factors for {m} matched instances", p.len())));
                    }
                    (constant(p.clone(), &[m], dtype)?, constant(w.clone(), &[m], dtype)?)
                }
                None => stop_gradient_factors(&lp, &cos, cfg.clamp_cos_weight)?,
            };
            used = (to_f64_vec(&p)?, to_f64_vec(&w)?);
            loss_t_positive_with(&lp, &cos, cfg.metric, &p, &w)?.total()?
        }
        None => scalar_zero(dtype)?,
    };
    let neg = match select_flat(logp, &sel.neg_flat)? {
        Some(lp) => loss_t_negative(&lp)?,
        None => scalar_zero(dtype)?,
    };
    Ok(((pos / batch as f64)?, (neg / batch as f64)?, used))
}

/// Box and visible-keypoint squared errors of matched instances: mean over
/// coordinates per instance, mean over matched instances per scene, mean over
/// the batch.
pub fn loss_cues(cues: &CueBundle, matches: &[SceneMatch], scenes: &[&SceneSample]) -> Result<Tensor> {
    let (batch, nh, _, _) = cues.keypoints.dims4()?;
    let no = cues.object_boxes.dim(1)?;
    let dtype = cues.keypoints.dtype();
    let (mut hb_w, mut hb_t) = (vec![0.0; batch * nh * 4], vec![0.0; batch * nh * 4]);
    let (mut ob_w, mut ob_t) = (vec![0.0; batch * no * 4], vec![0.0; batch * no * 4]);
    let kpn = NUM_KEYPOINTS * 2;
    let (mut kp_w, mut kp_t) = (vec![0.0; batch * nh * kpn], vec![0.0; batch * nh * kpn]);
    for (b, (m, s)) in matches.iter().zip(scenes).enumerate() {
        let count = m.humans.matched_gt_count + m.objects.matched_gt_count;
        if count == 0 {
            continue;
        }
        let inst = 1.0 / (count as f64 * batch as f64);
        for (g, &k) in m.humans.matched().iter().enumerate() {
            let h = &s.humans[g];
            let base = (b * nh + k) * 4;
            for c in 0..4 {
                hb_w[base + c] = inst / 4.0;
                hb_t[base + c] = h.bbox[c];
            }
            let visible = h.visibility.iter().filter(|&&v| v).count();
            if visible > 0 {
                let base = (b * nh + k) * kpn;
                for (p, (xy, &vis)) in h.keypoints.iter().zip(&h.visibility).enumerate() {
                    if vis {
                        for c in 0..2 {
                            kp_w[base + 2 * p + c] = inst / (2 * visible) as f64;
                            kp_t[base + 2 * p + c] = xy[c];
                        }
                    }
                }
            }
        }
        for (g, &k) in m.objects.matched().iter().enumerate() {
            let base = (b * no + k) * 4;
            for c in 0..4 {
                ob_w[base + c] = inst / 4.0;
                ob_t[base + c] = s.objects[g].bbox[c];
            }
        }
    }
    let term = |pred: &Tensor, w: Vec<f64>, t: Vec<f64>| -> Result<Tensor> {
        let shape = pred.dims().to_vec();
        let w = constant(w, &shape, dtype)?;
        let t = constant(t, &shape, dtype)?;
        Ok((pred - t)?.sqr()?.mul(&w)?.sum_all()?)
    };
    let kp = cues.keypoints.reshape((batch, nh, kpn))?;
    Ok((term(&cues.human_boxes, hb_w, hb_t)? + term(&cues.object_boxes, ob_w, ob_t)? + term(&kp, kp_w, kp_t)?)?)
}

/// Full objective for a batch. `tokens` are the encoder outputs (before cue
/// aggregation), `logits: [B, N_a, V]`.
pub fn total_loss(
    cfg: &RunConfig,
    guidance: &TextGuidance,
    tokens: &InstanceTokens,
    cues: &CueBundle,
    logits: &Tensor,
    scenes: &[&SceneSample],
) -> Result<LossOutput> {
    total_loss_with(cfg, guidance, tokens, cues, logits, scenes, None)
}

/// [`total_loss`] with the stop-gradient factors optionally held at given values.
pub fn total_loss_with(
    cfg: &RunConfig,
    guidance: &TextGuidance,
    tokens: &InstanceTokens,
    cues: &CueBundle,
    logits: &Tensor,
    scenes: &[&SceneSample],
    frozen: Option<&FrozenFactors>,
) -> Result<LossOutput> {
    let (batch, nh, _) = tokens.human.dims3()?;
    let no = tokens.object.dim(1)?;
    if scenes.len() != batch {
        return Err(Error::Shape(format!("{} scenes for a batch of {batch}", scenes.len())));
    }
    let dtype = tokens.human.dtype();
    let text_dim = cfg.text_dim;
    let c = cfg.num_object_classes();
    let floor = PROB_FLOOR.ln();
    let logp_h = log_softmax(&cues.human_logits, 2)?.maximum(floor)?;
    let logp_o = log_softmax(&cues.object_logits, 2)?.maximum(floor)?;
    let (rv_h, rv_o) = if cfg.metric.uses_text() {
        (guidance.projector.forward(&tokens.human)?, guidance.projector.forward(&tokens.object)?)
    } else {
        (tokens.human.clone(), tokens.object.clone())
    };
    let host = |t: &Tensor| -> Result<Vec<f64>> {
        if cfg.metric.uses_text() {
            to_f64_vec(t)
        } else {
            Ok(Vec::new())
        }
    };
    let human_text = |_: usize| guidance.human_text.as_slice();
    let object_text = |k: usize| guidance.object_text[k].as_slice();
    let hv = RoleView {
        n_pred: nh,
        width: 2,
        probs: to_f64_vec(&cues.human_class)?,
        r_vis: host(&rv_h)?,
        text_dim,
        texts: &human_text,
    };
    let ov = RoleView {
        n_pred: no,
        width: c + 1,
        probs: to_f64_vec(&cues.object_class)?,
        r_vis: host(&rv_o)?,
        text_dim,
        texts: &object_text,
    };
    let (mut sel_h, mut sel_o) = (RoleSelection::default(), RoleSelection::default());
    let mut matches = Vec::with_capacity(batch);
    for (b, s) in scenes.iter().enumerate() {
        let humans = match_role(&hv, b, &vec![0; s.humans.len()], cfg.metric, &mut sel_h)?;
        let classes: Vec<usize> = s.objects.iter().map(|o| o.class_id).collect();
        if classes.iter().any(|&k| k >= c) {
            return Err(Error::Dataset(format!("object class outside the {c}-class vocabulary")));
        }
        let objects = match_role(&ov, b, &classes, cfg.metric, &mut sel_o)?;
        matches.push(SceneMatch { humans, objects });
    }
    let (pos_h, neg_h, used_h) = role_token_loss(&logp_h, &rv_h, &sel_h, text_dim, cfg, batch, frozen.map(|f| &f.human))?;
    let (pos_o, neg_o, used_o) = role_token_loss(&logp_o, &rv_o, &sel_o, text_dim, cfg, batch, frozen.map(|f| &f.object))?;
    let lam = cfg.lambda;
    let l_t = ((((&pos_h * lam)? + (&neg_h * (1.0 - lam))?)? + (&pos_o * lam)?)? + (&neg_o * (1.0 - lam))?)?;

    let l_e = loss_cues(cues, &matches, scenes)?;

    let (_, na, nv) = logits.dims3()?;
    let layout = QueryLayout {
        patterns: cfg.patterns,
        humans: nh,
        objects: no,
        verbs: nv,
    };
    let host_logits = to_f64_vec(logits)?;
    let mut targets = Vec::with_capacity(batch * na * nv);
    let mut overflow = 0;
    for (b, (m, s)) in matches.iter().zip(scenes).enumerate() {
        let (t, o) = assign_interaction_targets(
            layout,
            &m.humans,
            &m.objects,
            &s.interactions,
            &host_logits[b * na * nv..(b + 1) * na * nv],
            cfg.focal_alpha,
            cfg.focal_gamma,
        )?;
        targets.extend(t);
        overflow += o;
    }
    let targets = constant(targets, &[batch, na, nv], dtype)?;
    let l_a = loss_interactions(logits, &targets, cfg.focal_alpha, cfg.focal_gamma)?;

    let total = (((&l_a * cfg.alpha_interaction)? + (&l_e * cfg.alpha_cue)?)? + (&l_t * cfg.alpha_token)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(to_f64_vec(t)?[0]) };
    let breakdown = compose(
        &LossWeights::from_config(cfg),
        scalar(&l_a)?,
        scalar(&l_e)?,
        scalar(&pos_h)?,
        scalar(&neg_h)?,
        scalar(&pos_o)?,
        scalar(&neg_o)?,
    );
    Ok(LossOutput {
        total,
        breakdown,
        matches,
        frozen: FrozenFactors {
            human: used_h,
            object: used_o,
        },
        capacity_overflows: overflow,
    })
}
