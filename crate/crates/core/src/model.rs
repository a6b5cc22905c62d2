//! The assembled detector: backbone, two-stage instance encoder, cue head,
//! interaction decoder and the text-guidance projector, plus decoding of raw
//! outputs into scored detections and interaction triplets.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{stack_rasters, Backbone, PatchTokenSet};
use crate::config::RunConfig;
use crate::cues::{CueBundle, CueEmbeddings, CueHead};
use crate::decoder::InteractionDecoder;
use crate::encoder::{AssignMode, EncoderDiagnostics, InstanceEncoder, InstanceTokens};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with, FrozenFactors, LossOutput, TextGuidance};
use crate::metrics::{DetectionGroundTruth, DetectionPrediction, HoiGroundTruth, HoiPrediction};
use crate::nn::{sigmoid, to_f64_vec, Init, ParamStore};
use crate::scenes::SceneSample;
use crate::text::{HashTextProvider, TextProvider};

/// Detection category of humans; object class `c` is category `c + 1`.
pub const HUMAN_CATEGORY: usize = 0;

/// Offline text provider for the configured vocabulary.
pub fn default_text_provider(cfg: &RunConfig) -> Result<HashTextProvider> {
    HashTextProvider::new(cfg.text_seed, cfg.text_dim, cfg.word_dim, &cfg.object_classes)
}

#[derive(Debug, Clone)]
pub struct HoiModel {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: InstanceEncoder,
    pub cues: CueHead,
    pub decoder: InteractionDecoder,
    pub guidance: TextGuidance,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub patches: PatchTokenSet,
    /// Encoder output before cue aggregation.
    pub encoded: InstanceTokens,
    pub diagnostics: EncoderDiagnostics,
    pub cues: CueBundle,
    pub embeddings: CueEmbeddings,
    pub aggregated: InstanceTokens,
    /// `[B, N_a, V]` pre-sigmoid verb scores.
    pub logits: Tensor,
}

/// Host-side predictions for one batch.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub hoi: Vec<HoiPrediction>,
    pub detections: Vec<DetectionPrediction>,
}

impl HoiModel {
    /// Initializes every parameter from `cfg.seed`.
    pub fn new(cfg: &RunConfig, text: &dyn TextProvider) -> Result<Self> {
        cfg.validate()?;
        if text.text_dim() != cfg.text_dim || text.word_dim() != cfg.word_dim {
            return Err(Error::Config(format!(
                "text provider dims ({}, {}) differ from config ({}, {})",
                text.text_dim(),
                text.word_dim(),
                cfg.text_dim,
                cfg.word_dim
            )));
        }
        let mut store = ParamStore::new(cfg.precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut init, &cfg.stem_channels, &cfg.stem_strides, cfg.dim)?;
        let encoder = InstanceEncoder::new(&mut init, cfg)?;
        let cues = CueHead::new(&mut init, cfg, text)?;
        let decoder = InteractionDecoder::new(&mut init, cfg)?;
        let guidance = TextGuidance::new(&mut init, cfg, text)?;
        Ok(HoiModel {
            cfg: cfg.clone(),
            store,
            backbone,
            encoder,
            cues,
            decoder,
            guidance,
        })
    }

    /// Builds the model with [`default_text_provider`].
    pub fn with_default_text(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg, &default_text_provider(cfg)?)
    }

    pub fn images(&self, scenes: &[&SceneSample]) -> Result<Tensor> {
        let rasters: Vec<_> = scenes.iter().map(|s| s.to_raster()).collect();
        stack_rasters(&rasters, self.cfg.precision.dtype())
    }

    pub fn forward(&self, images: &Tensor, mode: AssignMode) -> Result<ForwardOutput> {
        let patches = self.backbone.forward(images)?;
        let (encoded, diagnostics) = self.encoder.encode(&patches, mode)?;
        let cues = self.cues.extract_cues(&encoded)?;
        let embeddings = self.cues.gate_and_embed(&cues, self.cfg.gate_threshold, self.cfg.cue_switch)?;
        let aggregated = self.cues.aggregate(&encoded, &embeddings)?;
        let (decoded, _) = self.decoder.decode(&aggregated)?;
        let logits = self.decoder.classify(&decoded)?;
        Ok(ForwardOutput {
            patches,
            encoded,
            diagnostics,
            cues,
            embeddings,
            aggregated,
            logits,
        })
    }

    pub fn forward_scenes(&self, scenes: &[&SceneSample], mode: AssignMode) -> Result<ForwardOutput> {
        self.forward(&self.images(scenes)?, mode)
    }

    pub fn loss(&self, out: &ForwardOutput, scenes: &[&SceneSample]) -> Result<LossOutput> {
        self.loss_with(out, scenes, None)
    }

    pub fn loss_with(&self, out: &ForwardOutput, scenes: &[&SceneSample], frozen: Option<&FrozenFactors>) -> Result<LossOutput> {
        total_loss_with(&self.cfg, &self.guidance, &out.encoded, &out.cues, &out.logits, scenes, frozen)
    }

    /// Scored detections and triplets; `first_scene` is the global index of batch item 0.
    ///
    /// A triplet's score is verb probability times human confidence times
    /// object confidence (best real class); the patterns of a pair are merged
    /// by keeping the highest score per verb.
    pub fn predict(&self, out: &ForwardOutput, first_scene: usize) -> Result<Predictions> {
        let (batch, nh, _) = out.encoded.human.dims3()?;
        let no = out.encoded.object.dim(1)?;
        let (_, na, nv) = out.logits.dims3()?;
        let width = self.cues.num_classes() + 1;
        let hp = to_f64_vec(&out.cues.human_class)?;
        let op = to_f64_vec(&out.cues.object_class)?;
        let hb = to_f64_vec(&out.cues.human_boxes)?;
        let ob = to_f64_vec(&out.cues.object_boxes)?;
        let verb = to_f64_vec(&sigmoid(&out.logits)?)?;
        let patterns = na / (nh * no);
        let bx = |v: &[f64], k: usize| [v[4 * k], v[4 * k + 1], v[4 * k + 2], v[4 * k + 3]];
        let mut preds = Predictions::default();
        for b in 0..batch {
            let scene = first_scene + b;
            let mut obj_conf = vec![0.0; no];
            for j in 0..no {
                let row = &op[(b * no + j) * width..(b * no + j + 1) * width];
                let (c, &p) = row[..width - 1]
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .ok_or_else(|| Error::Shape("no object classes".into()))?;
                obj_conf[j] = p;
                preds.detections.push(DetectionPrediction {
                    scene,
                    category: c + 1,
                    bbox: bx(&ob, b * no + j),
                    score: p,
                });
            }
            for i in 0..nh {
                preds.detections.push(DetectionPrediction {
                    scene,
                    category: HUMAN_CATEGORY,
                    bbox: bx(&hb, b * nh + i),
                    score: hp[(b * nh + i) * 2],
                });
            }
            for i in 0..nh {
                let h_conf = hp[(b * nh + i) * 2];
                for j in 0..no {
                    for v in 0..nv {
                        let best = (0..patterns)
                            .map(|p| verb[(b * na + (p * nh + i) * no + j) * nv + v])
                            .fold(0.0, f64::max);
                        preds.hoi.push(HoiPrediction {
                            scene,
                            human_box: bx(&hb, b * nh + i),
                            object_box: bx(&ob, b * no + j),
                            verb: v,
                            score: best * h_conf * obj_conf[j],
                        });
                    }
                }
            }
        }
        Ok(preds)
    }
}

/// Ground truth of consecutive scenes starting at global index `first_scene`.
pub fn ground_truth(scenes: &[SceneSample], first_scene: usize) -> (Vec<HoiGroundTruth>, Vec<DetectionGroundTruth>) {
    let mut hoi = Vec::new();
    let mut det = Vec::new();
    for (k, s) in scenes.iter().enumerate() {
        let scene = first_scene + k;
        for h in &s.humans {
            det.push(DetectionGroundTruth {
                scene,
                category: HUMAN_CATEGORY,
                bbox: h.bbox,
            });
        }
        for o in &s.objects {
            det.push(DetectionGroundTruth {
                scene,
                category: o.class_id + 1,
                bbox: o.bbox,
            });
        }
        for it in &s.interactions {
            for &v in &it.verbs {
                hoi.push(HoiGroundTruth {
                    scene,
                    human_box: s.humans[it.human_idx].bbox,
                    object_box: s.objects[it.object_idx].bbox,
                    verb: v,
                });
            }
        }
    }
    (hoi, det)
}
