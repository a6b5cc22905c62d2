//! Two-stage instance encoder. Each stage runs self-attention over
//! `[human centers; object centers; image tokens]`, refreshes the centers by
//! attending over the image tokens, soft-assigns every image token to a center
//! with a Gumbel-softmax and merges the assigned tokens into grouped tokens.
//! Stage 1 consumes the patch tokens; stage 2 consumes the stage-1 groups, and
//! its human/object groups are the instance tokens.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::PatchTokenSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{constant, softmax, to_f64_vec, Init, LayerNorm, Linear, Mlp, SelfAttentionLayer};

/// Denominator guard for the merge step.
pub const MERGE_EPS: f64 = 1e-8;

/// How the assignment logits are perturbed.
pub enum AssignMode<'a> {
    /// Noise-free softmax.
    Eval,
    /// Gumbel(0, 1) noise drawn per (center, token) from the given generator.
    Train(&'a mut ChaCha8Rng),
}

impl AssignMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, AssignMode::Train(_))
    }

    /// Reborrows so a mode can be passed to several stages in turn.
    pub fn reborrow(&mut self) -> AssignMode<'_> {
        match self {
            AssignMode::Eval => AssignMode::Eval,
            AssignMode::Train(rng) => AssignMode::Train(rng),
        }
    }
}

/// Clustering centers entering a stage, batched: `[B, N, D]` per role.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub human_centers: Tensor,
    pub object_centers: Tensor,
    pub stage: usize,
}

/// Everything a stage produces.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub grouped_human: Tensor,
    pub grouped_object: Tensor,
    /// `[B, N_c, N_i]`, each column (fixed token) sums to one over centers.
    pub assignment: Tensor,
    pub updated_centers: Tensor,
}

/// Encoder output: `human: [B, N_h, D]`, `object: [B, N_o, D]`.
#[derive(Debug, Clone)]
pub struct InstanceTokens {
    pub human: Tensor,
    pub object: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderDiagnostics {
    pub stage1: StageOutput,
    pub stage2: StageOutput,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Token-mixing plus channel-mixing block over the stage-1 updated centers,
/// followed by per-role linear maps over the token axis that shrink the
/// stage-1 center counts to the stage-2 counts.
#[derive(Debug, Clone)]
pub struct CenterMixer {
    pub norm_tokens: LayerNorm,
    pub token_mlp: Mlp,
    pub norm_channels: LayerNorm,
    pub channel_mlp: Mlp,
    pub reduce_human: Linear,
    pub reduce_object: Linear,
    n_h1: usize,
}

impl CenterMixer {
    fn new(init: &mut Init, cfg: &RunConfig) -> Result<Self> {
        let mut s = init.pp("mixer");
        let (h1, o1) = cfg.centers_stage1;
        let (h2, o2) = cfg.centers_stage2;
        let n1 = h1 + o1;
        Ok(CenterMixer {
            norm_tokens: LayerNorm::new(&mut s, "norm_tokens", cfg.dim)?,
            token_mlp: Mlp::new(&mut s, "token_mlp", &[n1, n1, n1])?,
            norm_channels: LayerNorm::new(&mut s, "norm_channels", cfg.dim)?,
            channel_mlp: Mlp::new(&mut s, "channel_mlp", &[cfg.dim, cfg.dim, cfg.dim])?,
            reduce_human: Linear::new(&mut s, "reduce_human", h1, h2)?,
            reduce_object: Linear::new(&mut s, "reduce_object", o1, o2)?,
            n_h1: h1,
        })
    }

    /// `[B, N_h1 + N_o1, D]` -> (`[B, N_h2, D]`, `[B, N_o2, D]`).
    pub fn forward(&self, centers: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, n, _) = centers.dims3()?;
        let mixed = self
            .token_mlp
            .forward(&self.norm_tokens.forward(centers)?.transpose(1, 2)?.contiguous()?)?
            .transpose(1, 2)?;
        let x = (centers + mixed)?;
        let x = (&x + self.channel_mlp.forward(&self.norm_channels.forward(&x)?)?)?;
        let reduce = |part: Tensor, lin: &Linear| -> Result<Tensor> {
            Ok(lin.forward(&part.transpose(1, 2)?.contiguous()?)?.transpose(1, 2)?.contiguous()?)
        };
        let human = reduce(x.narrow(1, 0, self.n_h1)?, &self.reduce_human)?;
        let object = reduce(x.narrow(1, self.n_h1, n - self.n_h1)?, &self.reduce_object)?;
        Ok((human, object))
    }
}

/// Parameters of one clustering stage.
#[derive(Debug, Clone)]
pub struct ClusterStage {
    pub stage: usize,
    pub pos_human: Tensor,
    pub pos_object: Tensor,
    pub layers: Vec<SelfAttentionLayer>,
    /// Final norm of the pre-norm SA stack, applied before the center update.
    pub out_norm: LayerNorm,
    /// `W_c`: projects updated centers before the affinity product.
    pub proj_center: Linear,
    /// `W_i`: projects image tokens before the affinity product.
    pub proj_token: Linear,
    /// `W_v`: value map applied to tokens before merging.
    pub merge_value: Linear,
    /// `W_u`: output map applied to the merged mean.
    pub merge_out: Linear,
    pub temperature: f64,
    pub hard_assign: bool,
}

impl ClusterStage {
    fn new(init: &mut Init, cfg: &RunConfig, stage: usize) -> Result<Self> {
        let (n_h, n_o, n_layers) = match stage {
            1 => (cfg.centers_stage1.0, cfg.centers_stage1.1, cfg.sa_layers_stage1),
            2 => (cfg.centers_stage2.0, cfg.centers_stage2.1, cfg.sa_layers_stage2),
            _ => return Err(Error::Value(format!("stage must be 1 or 2, got {stage}"))),
        };
        let d = cfg.dim;
        let affinity_std = (d as f64).powf(-0.75);
        let mut s = init.pp(&format!("stage{stage}"));
        let layers = (0..n_layers)
            .map(|i| SelfAttentionLayer::new(&mut s, &format!("sa{i}"), d, cfg.heads, cfg.ffn_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterStage {
            stage,
            pos_human: s.normal("pos_human", &[n_h, d], 1.0)?,
            pos_object: s.normal("pos_object", &[n_o, d], 1.0)?,
            layers,
            out_norm: LayerNorm::new(&mut s, "out_norm", d)?,
            proj_center: Linear::no_bias_normal(&mut s, "proj_center", d, d, affinity_std)?,
            proj_token: Linear::no_bias_normal(&mut s, "proj_token", d, d, affinity_std)?,
            merge_value: Linear::no_bias(&mut s, "merge_value", d, d)?,
            merge_out: Linear::no_bias(&mut s, "merge_out", d, d)?,
            temperature: cfg.gumbel_temperature,
            hard_assign: cfg.hard_assign,
        })
    }

    pub fn num_human(&self) -> usize {
        self.pos_human.dims()[0]
    }

    pub fn num_object(&self) -> usize {
        self.pos_object.dims()[0]
    }
}

/// Centers are zeros plus the stage's learned position embedding; stage-2
/// centers additionally receive the mixer output of the stage-1 updated
/// centers.
pub fn init_centers(
    stage: &ClusterStage,
    mixer: Option<&CenterMixer>,
    prev_updated_centers: Option<&Tensor>,
    batch: usize,
) -> Result<CenterState> {
    let d = stage.pos_human.dims()[1];
    let expand = |pos: &Tensor| -> Result<Tensor> {
        let n = pos.dims()[0];
        Ok((pos.zeros_like()? + pos)?.unsqueeze(0)?.broadcast_as((batch, n, d))?.contiguous()?)
    };
    let human = expand(&stage.pos_human)?;
    let object = expand(&stage.pos_object)?;
    match stage.stage {
        1 => Ok(CenterState {
            human_centers: human,
            object_centers: object,
            stage: 1,
        }),
        2 => {
            let prev = prev_updated_centers
                .ok_or_else(|| Error::MissingInput("stage-2 centers need the stage-1 updated centers".into()))?;
            let mixer =
                mixer.ok_or_else(|| Error::MissingInput("stage-2 centers need the center mixer".into()))?;
            let (mh, mo) = mixer.forward(prev)?;
            Ok(CenterState {
                human_centers: (human + mh)?,
                object_centers: (object + mo)?,
                stage: 2,
            })
        }
        s => Err(Error::Value(format!("stage must be 1 or 2, got {s}"))),
    }
}

/// Self-attention over `[C_h; C_o; T_i]`, split back by the same ranges.
/// Returns `(centers_hat [B, N_c, D], tokens_hat [B, N_i, D])`.
pub fn run_sa_stack(
    centers: &CenterState,
    image_tokens: &Tensor,
    layers: &[SelfAttentionLayer],
) -> Result<(Tensor, Tensor)> {
    let (b, _, d) = centers.human_centers.dims3()?;
    let (bi, n_i, di) = image_tokens.dims3()?;
    if b != bi || d != di || centers.object_centers.dims3()?.2 != d {
        return Err(Error::Shape(format!(
            "centers {:?}/{:?} vs image tokens {:?}",
            centers.human_centers.dims(),
            centers.object_centers.dims(),
            image_tokens.dims()
        )));
    }
    let n_c = centers.human_centers.dims()[1] + centers.object_centers.dims()[1];
    let mut x = Tensor::cat(&[&centers.human_centers, &centers.object_centers, image_tokens], 1)?;
    for layer in layers {
        x = layer.forward(&x)?;
    }
    Ok((x.narrow(1, 0, n_c)?, x.narrow(1, n_c, n_i)?))
}

/// `softmax(C T^T / sqrt(D)) T`, softmax over image tokens, so every updated
/// center is a convex combination of the image tokens.
pub fn update_centers(centers_hat: &Tensor, tokens_hat: &Tensor) -> Result<Tensor> {
    let d = centers_hat.dim(D::Minus1)?;
    if tokens_hat.dim(D::Minus1)? != d {
        return Err(Error::Shape(format!(
            "centers {:?} and tokens {:?} differ in width",
            centers_hat.dims(),
            tokens_hat.dims()
        )));
    }
    let scores = (centers_hat.matmul(&tokens_hat.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
    Ok(softmax(&scores, 2)?.matmul(tokens_hat)?)
}

/// Draws i.i.d. Gumbel(0, 1) samples.
pub fn sample_gumbel(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Soft assignment `A: [B, N_c, N_i]` of image tokens to centers: a softmax
/// over centers of `(W_c c_k . W_i t_j + g_kj) / temperature`, with `g = 0`
/// in eval mode. With `hard`, the forward value is the one-hot argmax while
/// gradients follow the soft assignment (straight-through).
pub fn gumbel_assign(
    centers: &Tensor,
    tokens: &Tensor,
    proj_center: &Linear,
    proj_token: &Linear,
    temperature: f64,
    mode: AssignMode,
    hard: bool,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Value(format!("temperature must be positive, got {temperature}")));
    }
    let pc = proj_center.forward(centers)?;
    let pt = proj_token.forward(tokens)?;
    let mut logits = pc.matmul(&pt.transpose(1, 2)?.contiguous()?)?;
    if let AssignMode::Train(rng) = mode {
        let dims = logits.dims().to_vec();
        let noise = sample_gumbel(rng, dims.iter().product());
        logits = (logits + constant(noise, &dims, centers.dtype())?)?;
    }
    let soft = softmax(&(logits / temperature)?, 1)?;
    if !hard {
        return Ok(soft);
    }
    let idx = soft.argmax_keepdim(1)?;
    let ones = Tensor::ones(idx.dims(), soft.dtype(), soft.device())?;
    let one_hot = soft.zeros_like()?.scatter_add(&idx, &ones, 1)?;
    Ok(((one_hot - soft.detach())? + &soft)?)
}

/// `g_k = c_k + W_u (sum_j A_kj W_v t_j / sum_j A_kj)`. A center whose total
/// assignment mass is below [`MERGE_EPS`] gets the guard added to its
/// denominator (logged, never fatal).
pub fn merge_tokens(
    centers: &Tensor,
    tokens: &Tensor,
    assignment: &Tensor,
    merge_out: &Linear,
    merge_value: &Linear,
) -> Result<Tensor> {
    let (b, n_c, n_i) = assignment.dims3()?;
    if centers.dims3()?.1 != n_c || tokens.dims3()?.1 != n_i {
        return Err(Error::Shape(format!(
            "assignment {:?} vs centers {:?} / tokens {:?}",
            assignment.dims(),
            centers.dims(),
            tokens.dims()
        )));
    }
    let numer = assignment.matmul(&merge_value.forward(tokens)?)?;
    let mut denom = assignment.sum_keepdim(2)?;
    let mass = to_f64_vec(&denom)?;
    if mass.iter().any(|&m| m < MERGE_EPS) {
        let degenerate = mass.iter().filter(|&&m| m < MERGE_EPS).count();
        log::debug!("{degenerate} clustering center(s) received < {MERGE_EPS:e} assignment mass; guarding denominator");
        let guard: Vec<f64> = mass.iter().map(|&m| if m < MERGE_EPS { MERGE_EPS } else { 0.0 }).collect();
        denom = (denom + constant(guard, &[b, n_c, 1], assignment.dtype())?)?;
    }
    let mean = numer.broadcast_div(&denom)?;
    Ok((centers + merge_out.forward(&mean)?)?)
}

/// Runs one stage given its entering centers.
pub fn run_stage(
    stage: &ClusterStage,
    centers: &CenterState,
    image_tokens: &Tensor,
    mode: AssignMode,
) -> Result<StageOutput> {
    let (centers_hat, tokens_hat) = run_sa_stack(centers, image_tokens, &stage.layers)?;
    let centers_hat = stage.out_norm.forward(&centers_hat)?;
    let tokens_hat = stage.out_norm.forward(&tokens_hat)?;
    let updated = update_centers(&centers_hat, &tokens_hat)?;
    let assignment = gumbel_assign(
        &updated,
        &tokens_hat,
        &stage.proj_center,
        &stage.proj_token,
        stage.temperature,
        mode,
        stage.hard_assign,
    )?;
    let grouped = merge_tokens(&updated, &tokens_hat, &assignment, &stage.merge_out, &stage.merge_value)?;
    let n_h = stage.num_human();
    let n_c = grouped.dims()[1];
    Ok(StageOutput {
        grouped_human: grouped.narrow(1, 0, n_h)?,
        grouped_object: grouped.narrow(1, n_h, n_c - n_h)?,
        assignment,
        updated_centers: updated,
    })
}

#[derive(Debug, Clone)]
pub struct InstanceEncoder {
    pub stage1: ClusterStage,
    pub stage2: ClusterStage,
    pub mixer: CenterMixer,
}

impl InstanceEncoder {
    pub fn new(init: &mut Init, cfg: &RunConfig) -> Result<Self> {
        let mut s = init.pp("encoder");
        Ok(InstanceEncoder {
            stage1: ClusterStage::new(&mut s, cfg, 1)?,
            stage2: ClusterStage::new(&mut s, cfg, 2)?,
            mixer: CenterMixer::new(&mut s, cfg)?,
        })
    }

    pub fn encode(
        &self,
        patches: &PatchTokenSet,
        mut mode: AssignMode,
    ) -> Result<(InstanceTokens, EncoderDiagnostics)> {
        let batch = patches.tokens.dims3()?.0;
        let c1 = init_centers(&self.stage1, None, None, batch)?;
        let s1 = run_stage(&self.stage1, &c1, &patches.tokens, mode.reborrow())?;
        let tokens2 = Tensor::cat(&[&s1.grouped_human, &s1.grouped_object], 1)?;
        let c2 = init_centers(&self.stage2, Some(&self.mixer), Some(&s1.updated_centers), batch)?;
        let s2 = run_stage(&self.stage2, &c2, &tokens2, mode.reborrow())?;
        let tokens = InstanceTokens {
            human: s2.grouped_human.clone(),
            object: s2.grouped_object.clone(),
        };
        Ok((
            tokens,
            EncoderDiagnostics {
                stage1: s1,
                stage2: s2,
                grid_h: patches.grid_h,
                grid_w: patches.grid_w,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn tiny_cfg() -> RunConfig {
        RunConfig::tiny()
    }

    fn build(cfg: &RunConfig) -> (ParamStore, InstanceEncoder) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = InstanceEncoder::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (store, enc)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn identity_linear(d: usize) -> Linear {
        Linear {
            weight: Tensor::eye(d, DType::F64, &Device::Cpu).unwrap(),
            bias: None,
        }
    }

    #[test]
    fn stage1_centers_equal_embedding() {
        let cfg = tiny_cfg();
        let (_, enc) = build(&cfg);
        let c = init_centers(&enc.stage1, None, None, 2).unwrap();
        let want = to_f64_vec(&enc.stage1.pos_human).unwrap();
        let got = to_f64_vec(&c.human_centers.get(1).unwrap()).unwrap();
        assert_eq!(got, want);
        assert_eq!(c.object_centers.dims(), &[2, 3, 6]);
    }

    #[test]
    fn stage2_requires_previous_centers() {
        let (_, enc) = build(&tiny_cfg());
        let err = init_centers(&enc.stage2, Some(&enc.mixer), None, 1).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn stage2_with_zero_mixer_head_equals_embedding() {
        let (_, mut enc) = build(&tiny_cfg());
        for lin in [&mut enc.mixer.reduce_human, &mut enc.mixer.reduce_object] {
            lin.weight = lin.weight.zeros_like().unwrap();
            lin.bias = Some(lin.bias.as_ref().unwrap().zeros_like().unwrap());
        }
        let prev = Tensor::zeros((1, 5, 6), DType::F64, &Device::Cpu).unwrap();
        let c = init_centers(&enc.stage2, Some(&enc.mixer), Some(&prev), 1).unwrap();
        assert_eq!(
            to_f64_vec(&c.object_centers).unwrap(),
            to_f64_vec(&enc.stage2.pos_object).unwrap()
        );
    }

    #[test]
    fn default_center_counts() {
        let cfg = RunConfig::paper();
        assert_eq!((cfg.centers_stage1.0, cfg.centers_stage1.1), (16, 64));
        assert_eq!((cfg.centers_stage2.0, cfg.centers_stage2.1), (4, 8));
    }

    #[test]
    fn sa_stack_with_zero_output_projections_is_identity() {
        let (_, mut enc) = build(&tiny_cfg());
        for layer in &mut enc.stage1.layers {
            let out = &mut layer.attn.out;
            out.weight = out.weight.zeros_like().unwrap();
            let last = layer.ffn.layers.last_mut().unwrap();
            last.weight = last.weight.zeros_like().unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = init_centers(&enc.stage1, None, None, 1).unwrap();
        let tokens = rand_tensor(&mut rng, &[1, 4, 6]);
        let (c, t) = run_sa_stack(&centers, &tokens, &enc.stage1.layers).unwrap();
        assert_eq!(c.dims(), &[1, 5, 6]);
        assert_eq!(to_f64_vec(&t).unwrap(), to_f64_vec(&tokens).unwrap());
        let want = Tensor::cat(&[&centers.human_centers, &centers.object_centers], 1).unwrap();
        assert_eq!(to_f64_vec(&c).unwrap(), to_f64_vec(&want).unwrap());
    }

    #[test]
    fn sa_stack_shape_mismatch() {
        let (_, enc) = build(&tiny_cfg());
        let centers = init_centers(&enc.stage1, None, None, 1).unwrap();
        let tokens = Tensor::zeros((1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            run_sa_stack(&centers, &tokens, &enc.stage1.layers),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn update_with_single_token_copies_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = rand_tensor(&mut rng, &[1, 3, 4]);
        let t = rand_tensor(&mut rng, &[1, 1, 4]);
        let out = update_centers(&c, &t).unwrap();
        let tv = to_f64_vec(&t).unwrap();
        for row in to_f64_vec(&out).unwrap().chunks(4) {
            for (a, b) in row.iter().zip(&tv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_with_identical_tokens_returns_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = rand_tensor(&mut rng, &[1, 2, 4]);
        let v = [0.3, -0.2, 0.9, 0.1];
        let t = Tensor::from_vec(v.repeat(5), (1, 5, 4), &Device::Cpu).unwrap();
        for row in to_f64_vec(&update_centers(&c, &t).unwrap()).unwrap().chunks(4) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Dense attention written out with loops.
    fn dense_update_oracle(c: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = c[0].len() as f64;
        c.iter()
            .map(|ck| {
                let s: Vec<f64> = t
                    .iter()
                    .map(|tj| ck.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..t[0].len())
                    .map(|col| t.iter().zip(&e).map(|(tj, w)| w / z * tj[col]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn update_matches_dense_oracle() {
        let c = vec![vec![0.5, -1.0, 0.25, 2.0], vec![-0.3, 0.7, 1.1, 0.0]];
        let t = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let ct = Tensor::from_vec(c.concat(), (1, 2, 4), &Device::Cpu).unwrap();
        let tt = Tensor::from_vec(t.concat(), (1, 3, 4), &Device::Cpu).unwrap();
        let got = to_f64_vec(&update_centers(&ct, &tt).unwrap()).unwrap();
        let want: Vec<f64> = dense_update_oracle(&c, &t).concat();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn updated_centers_lie_in_convex_hull() {
        // tokens are affinely independent here, so barycentric weights are
        // recovered exactly by least squares against the token rows
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_tensor(&mut rng, &[1, 3, 4]);
        let t = rand_tensor(&mut rng, &[1, 3, 4]);
        let out = update_centers(&c, &t).unwrap();
        let scores = (c.matmul(&t.transpose(1, 2).unwrap()).unwrap() / 2.0).unwrap();
        let w = to_f64_vec(&softmax(&scores, 2).unwrap()).unwrap();
        for row in w.chunks(3) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let recon = Tensor::from_vec(w, (1, 3, 3), &Device::Cpu)
            .unwrap()
            .matmul(&t)
            .unwrap();
        for (a, b) in to_f64_vec(&recon).unwrap().iter().zip(to_f64_vec(&out).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_center_assignment_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = rand_tensor(&mut rng, &[1, 1, 4]);
        let t = rand_tensor(&mut rng, &[1, 6, 4]);
        let id = identity_linear(4);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(9);
        let a = gumbel_assign(&c, &t, &id, &id, 1.0, AssignMode::Train(&mut noise_rng), false).unwrap();
        assert!(to_f64_vec(&a).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn eval_ties_split_evenly() {
        let c = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], (1, 2, 2), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(vec![0.4, 0.9], (1, 1, 2), &Device::Cpu).unwrap();
        let id = identity_linear(2);
        let a = gumbel_assign(&c, &t, &id, &id, 1.0, AssignMode::Eval, false).unwrap();
        assert_eq!(to_f64_vec(&a).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn train_assignment_columns_normalized_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = rand_tensor(&mut rng, &[1, 3, 4]);
        let t = rand_tensor(&mut rng, &[1, 5, 4]);
        let id = identity_linear(4);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            to_f64_vec(&gumbel_assign(&c, &t, &id, &id, 1.0, AssignMode::Train(&mut r), false).unwrap()).unwrap()
        };
        let a = run(42);
        for j in 0..5 {
            let s: f64 = (0..3).map(|k| a[k * 5 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, run(42));
        assert_ne!(a, run(43));
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let c = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let id = identity_linear(2);
        for tau in [0.0, -1.0] {
            assert!(matches!(
                gumbel_assign(&c, &c, &id, &id, tau, AssignMode::Eval, false),
                Err(Error::Value(_))
            ));
        }
    }

    #[test]
    fn hard_assignment_is_one_hot_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = rand_tensor(&mut rng, &[2, 3, 4]);
        let t = rand_tensor(&mut rng, &[2, 5, 4]);
        let id = identity_linear(4);
        let a = to_f64_vec(&gumbel_assign(&c, &t, &id, &id, 1.0, AssignMode::Eval, true).unwrap()).unwrap();
        for (b, j) in (0..2).flat_map(|b| (0..5).map(move |j| (b, j))) {
            let col: Vec<f64> = (0..3).map(|k| a[b * 15 + k * 5 + j]).collect();
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(col.iter().filter(|&&v| (v - 1.0).abs() < 1e-12).count(), 1);
        }
    }

    #[test]
    fn merge_one_hot_adds_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = rand_tensor(&mut rng, &[1, 2, 3]);
        let t = rand_tensor(&mut rng, &[1, 4, 3]);
        // center 0 owns token 2 only, center 1 owns the rest
        let mut a = vec![0.0; 8];
        a[2] = 1.0;
        for j in [0, 1, 3] {
            a[4 + j] = 1.0;
        }
        let a = Tensor::from_vec(a, (1, 2, 4), &Device::Cpu).unwrap();
        let id = identity_linear(3);
        let g = to_f64_vec(&merge_tokens(&c, &t, &a, &id, &id).unwrap()).unwrap();
        let cv = to_f64_vec(&c).unwrap();
        let tv = to_f64_vec(&t).unwrap();
        for d in 0..3 {
            assert!((g[d] - (cv[d] + tv[2 * 3 + d])).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = rand_tensor(&mut rng, &[1, 2, 3]);
        let v = [0.1, 0.2, -0.7];
        let t = Tensor::from_vec(v.repeat(4), (1, 4, 3), &Device::Cpu).unwrap();
        let a = softmax(&rand_tensor(&mut rng, &[1, 2, 4]), 1).unwrap();
        let id = identity_linear(3);
        let g = to_f64_vec(&merge_tokens(&c, &t, &a, &id, &id).unwrap()).unwrap();
        let cv = to_f64_vec(&c).unwrap();
        for (k, row) in g.chunks(3).enumerate() {
            for d in 0..3 {
                assert!((row[d] - (cv[k * 3 + d] + v[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n_c, n_i, d) = (2, 4, 3);
        let c = rand_tensor(&mut rng, &[1, n_c, d]);
        let t = rand_tensor(&mut rng, &[1, n_i, d]);
        let a = softmax(&rand_tensor(&mut rng, &[1, n_c, n_i]), 1).unwrap();
        let wu = rand_tensor(&mut rng, &[d, d]);
        let wv = rand_tensor(&mut rng, &[d, d]);
        let lu = Linear { weight: wu.clone(), bias: None };
        let lv = Linear { weight: wv.clone(), bias: None };
        let got = to_f64_vec(&merge_tokens(&c, &t, &a, &lu, &lv).unwrap()).unwrap();

        let (cv, tv, av) = (to_f64_vec(&c).unwrap(), to_f64_vec(&t).unwrap(), to_f64_vec(&a).unwrap());
        let (wuv, wvv) = (to_f64_vec(&wu).unwrap(), to_f64_vec(&wv).unwrap());
        // row-vector convention: x W
        let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d).map(|o| (0..d).map(|i| x[i] * w[i * d + o]).sum()).collect()
        };
        for k in 0..n_c {
            let mut acc = vec![0.0; d];
            let mut mass = 0.0;
            for j in 0..n_i {
                let w = av[k * n_i + j];
                let vt = matvec(&wvv, &tv[j * d..(j + 1) * d]);
                for x in 0..d {
                    acc[x] += w * vt[x];
                }
                mass += w;
            }
            let mean: Vec<f64> = acc.iter().map(|x| x / mass).collect();
            let out = matvec(&wuv, &mean);
            for x in 0..d {
                assert!((got[k * d + x] - (cv[k * d + x] + out[x])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_guards_empty_cluster() {
        let c = Tensor::ones((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::ones((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let a = Tensor::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], (1, 2, 3), &Device::Cpu).unwrap();
        let id = identity_linear(2);
        let g = to_f64_vec(&merge_tokens(&c, &t, &a, &id, &id).unwrap()).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert_eq!(&g[2..], &[1.0, 1.0]);
    }

    #[test]
    fn encode_shapes_on_four_patches() {
        let cfg = RunConfig {
            precision: crate::config::Precision::F64,
            ..RunConfig::ablation()
        };
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = InstanceEncoder::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
        let patches = PatchTokenSet {
            tokens: rand_tensor(&mut rng, &[1, 4, cfg.dim]),
            grid_h: 2,
            grid_w: 2,
        };
        let (tokens, diag) = enc.encode(&patches, AssignMode::Eval).unwrap();
        assert_eq!(tokens.human.dims(), &[1, 4, cfg.dim]);
        assert_eq!(tokens.object.dims(), &[1, 8, cfg.dim]);
        assert_eq!(diag.stage1.assignment.dims(), &[1, 80, 4]);
        assert_eq!(diag.stage2.assignment.dims(), &[1, 12, 80]);
    }

    #[test]
    fn encode_is_seeded_deterministic() {
        let cfg = tiny_cfg();
        let (_, enc) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let patches = PatchTokenSet {
            tokens: rand_tensor(&mut rng, &[2, 4, 6]),
            grid_h: 2,
            grid_w: 2,
        };
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let (_, d) = enc.encode(&patches, AssignMode::Train(&mut r)).unwrap();
            (to_f64_vec(&d.stage1.assignment).unwrap(), to_f64_vec(&d.stage2.grouped_object).unwrap())
        };
        assert_eq!(run(), run());
    }
}
