//! Run configuration: every hyperparameter of the model, the loss, the
//! optimizer and the synthetic benchmark, parsed from a flat `key = value`
//! text file.
//!
//! Presets:
//! * [`RunConfig::paper`]: the published constants (batch 32, 150 epochs, ...).
//! * [`RunConfig::desk`]: the single-machine schedule used by default.
//! * [`RunConfig::ablation`]: a narrower model for multi-seed ablation sweeps.
//! * [`RunConfig::tiny`]: float64 toy sizes for finite-difference checks.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Numeric precision of parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Similarity metric used for instance matching and the positive token loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMetric {
    /// Class probability only; no text guidance.
    Ce,
    /// Cosine similarity to the text embedding only.
    Cos,
    /// Unweighted sum of the two.
    CePlusCos,
    /// Class probability times cosine, with stop-gradient cross weighting.
    Weighted,
}

impl SimilarityMetric {
    pub fn uses_text(self) -> bool {
        !matches!(self, SimilarityMetric::Ce)
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(u64, usize, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = f64::from_str(s).map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite number `{s}`"))
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| usize::from_str(p.trim()).map_err(|e| format!("`{p}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let names: Vec<String> = s.split(',').map(|p| p.trim().to_string()).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err("empty name in list".into());
        }
        Ok(names)
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

impl ConfigValue for (usize, usize) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<usize>::parse_value(s)?;
        match v.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(format!("expected `humans,objects`, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        format!("{},{}", self.0, self.1)
    }
}

impl ConfigValue for Precision {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        match self {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        }
    }
}

impl ConfigValue for SimilarityMetric {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(SimilarityMetric::Ce),
            "cos" => Ok(SimilarityMetric::Cos),
            "ce+cos" => Ok(SimilarityMetric::CePlusCos),
            "weighted" => Ok(SimilarityMetric::Weighted),
            _ => Err(format!("expected ce, cos, ce+cos or weighted, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        match self {
            SimilarityMetric::Ce => "ce".into(),
            SimilarityMetric::Cos => "cos".into(),
            SimilarityMetric::CePlusCos => "ce+cos".into(),
            SimilarityMetric::Weighted => "weighted".into(),
        }
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SimilarityMetric::parse_value(s).map_err(Error::Config)
    }
}

macro_rules! run_config {
    ($($(#[$doc:meta])* $field:ident : $ty:ty,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[$doc])* pub $field: $ty,)*
        }

        impl RunConfig {
            /// Sets one field from its textual form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// All fields as `(key, value)` pairs in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.render()),)*]
            }
        }
    };
}

run_config! {
    seed: u64,
    precision: Precision,

    // synthetic scenes
    image_size: usize,
    object_classes: Vec<String>,
    verbs: Vec<String>,
    scene_max_humans: usize,
    scene_min_objects: usize,
    scene_max_objects: usize,
    /// Sampling weight of the first verb relative to the others (1 = balanced).
    scene_rare_verb_ratio: f64,
    train_scenes: usize,
    test_scenes: usize,

    // backbone
    stem_channels: Vec<usize>,
    stem_strides: Vec<usize>,

    // instance encoder
    dim: usize,
    heads: usize,
    ffn_mult: usize,
    centers_stage1: (usize, usize),
    centers_stage2: (usize, usize),
    sa_layers_stage1: usize,
    sa_layers_stage2: usize,
    gumbel_temperature: f64,
    hard_assign: bool,

    // cues
    gate_threshold: f64,
    cue_switch: bool,
    d_pos: usize,
    d_spa: usize,
    d_cls: usize,

    // text guidance
    text_dim: usize,
    word_dim: usize,
    text_seed: u64,

    // interaction decoder
    decoder_layers: usize,
    patterns: usize,
    shared_decoder_pos: bool,

    // losses
    metric: SimilarityMetric,
    clamp_cos_weight: bool,
    lambda: f64,
    alpha_interaction: f64,
    alpha_cue: f64,
    alpha_token: f64,
    focal_alpha: f64,
    focal_gamma: f64,

    // optimization
    batch_size: usize,
    epochs: usize,
    lr_decay_epochs: Vec<usize>,
    lr_decay_factor: f64,
    lr_backbone: f64,
    lr_rest: f64,
    weight_decay: f64,
    grad_clip_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The published hyperparameters.
    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            image_size: 128,
            object_classes: ["ball", "cup", "kite", "bench", "umbrella"]
                .map(String::from)
                .to_vec(),
            verbs: ["hold", "ride", "kick", "next_to"].map(String::from).to_vec(),
            scene_max_humans: 1,
            scene_min_objects: 1,
            scene_max_objects: 3,
            scene_rare_verb_ratio: 1.0,
            train_scenes: 200,
            test_scenes: 50,
            stem_channels: vec![64, 128],
            stem_strides: vec![4, 4, 2],
            dim: 256,
            heads: 8,
            ffn_mult: 4,
            centers_stage1: (16, 64),
            centers_stage2: (4, 8),
            sa_layers_stage1: 4,
            sa_layers_stage2: 2,
            gumbel_temperature: 1.0,
            hard_assign: false,
            gate_threshold: 0.7,
            cue_switch: true,
            d_pos: 64,
            d_spa: 16,
            d_cls: 64,
            text_dim: 512,
            word_dim: 64,
            text_seed: 7,
            decoder_layers: 3,
            patterns: 3,
            shared_decoder_pos: true,
            metric: SimilarityMetric::Weighted,
            clamp_cos_weight: true,
            lambda: 0.75,
            alpha_interaction: 2.5,
            alpha_cue: 1.0,
            alpha_token: 1.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            batch_size: 32,
            epochs: 150,
            lr_decay_epochs: vec![80, 120],
            lr_decay_factor: 0.1,
            lr_backbone: 1e-5,
            lr_rest: 2.5e-4,
            weight_decay: 1e-4,
            grad_clip_norm: 0.1,
        }
    }

    /// Single-machine schedule: batch 8, 30 epochs decayed at 20 and 26,
    /// 200 train / 50 test scenes. The convolutional stem is trained from
    /// scratch, so it shares the learning rate of the rest of the model.
    pub fn desk() -> Self {
        RunConfig {
            batch_size: 8,
            epochs: 30,
            lr_decay_epochs: vec![20, 26],
            lr_backbone: 2.5e-4,
            ..Self::paper()
        }
    }

    /// Narrow model for repeated ablation runs (multi-seed sweeps).
    pub fn ablation() -> Self {
        RunConfig {
            dim: 128,
            heads: 4,
            stem_channels: vec![32, 64],
            text_dim: 256,
            train_scenes: 160,
            test_scenes: 40,
            epochs: 20,
            lr_decay_epochs: vec![14, 18],
            ..Self::desk()
        }
    }

    /// Toy float64 model used by finite-difference gradient checks.
    pub fn tiny() -> Self {
        RunConfig {
            precision: Precision::F64,
            image_size: 64,
            object_classes: ["ball", "cup"].map(String::from).to_vec(),
            verbs: ["hold", "ride"].map(String::from).to_vec(),
            stem_channels: vec![3, 4],
            stem_strides: vec![4, 4, 2],
            dim: 6,
            heads: 2,
            ffn_mult: 2,
            centers_stage1: (2, 3),
            centers_stage2: (1, 2),
            sa_layers_stage1: 1,
            sa_layers_stage2: 1,
            decoder_layers: 1,
            patterns: 2,
            d_pos: 4,
            d_spa: 2,
            d_cls: 4,
            text_dim: 8,
            scene_max_objects: 2,
            word_dim: 4,
            batch_size: 1,
            epochs: 1,
            lr_decay_epochs: vec![],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "ablation" => Ok(Self::ablation()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected paper, desk, ablation or tiny)"
            ))),
        }
    }

    /// Parses `key = value` lines on top of `base`. `#` starts a comment.
    /// A `preset = name` line, if present, must come first and resets the base.
    pub fn parse_with_base(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key == "preset" {
                cfg = Self::preset(value.trim())?;
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Self::desk())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Short stable digest of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stride_total(&self) -> usize {
        self.stem_strides.iter().product()
    }

    pub fn num_object_classes(&self) -> usize {
        self.object_classes.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    /// Number of interaction queries: patterns x humans x objects.
    pub fn num_queries(&self) -> usize {
        self.patterns * self.centers_stage2.0 * self.centers_stage2.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("image_size", self.image_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("centers_stage1.humans", self.centers_stage1.0),
            ("centers_stage1.objects", self.centers_stage1.1),
            ("centers_stage2.humans", self.centers_stage2.0),
            ("centers_stage2.objects", self.centers_stage2.1),
            ("sa_layers_stage1", self.sa_layers_stage1),
            ("sa_layers_stage2", self.sa_layers_stage2),
            ("decoder_layers", self.decoder_layers),
            ("patterns", self.patterns),
            ("d_pos", self.d_pos),
            ("d_spa", self.d_spa),
            ("d_cls", self.d_cls),
            ("text_dim", self.text_dim),
            ("word_dim", self.word_dim),
            ("batch_size", self.batch_size),
            ("scene_max_humans", self.scene_max_humans),
            ("scene_max_objects", self.scene_max_objects),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if self.object_classes.is_empty() {
            return bad("at least one object class is required".into());
        }
        if self.verbs.is_empty() {
            return bad("at least one verb is required".into());
        }
        if self.dim % 2 != 0 {
            return bad(format!("dim {} must be even", self.dim));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.stem_strides.len() != self.stem_channels.len() + 1 {
            return bad(format!(
                "stem_strides needs one more entry than stem_channels ({} vs {})",
                self.stem_strides.len(),
                self.stem_channels.len()
            ));
        }
        if self.stem_strides.iter().chain(&self.stem_channels).any(|&v| v == 0) {
            return bad("stem strides and channels must be positive".into());
        }
        if self.image_size % self.stride_total() != 0 {
            return bad(format!(
                "image_size {} is not divisible by total stride {}",
                self.image_size,
                self.stride_total()
            ));
        }
        if self.centers_stage2.0 > self.centers_stage1.0 || self.centers_stage2.1 > self.centers_stage1.1
        {
            return bad("center counts must not increase from stage 1 to stage 2".into());
        }
        if self.scene_max_humans > self.centers_stage2.0 {
            return bad("scenes may not contain more humans than human tokens".into());
        }
        if self.scene_max_objects > self.centers_stage2.1 {
            return bad("scenes may not contain more objects than object tokens".into());
        }
        if self.scene_min_objects > self.scene_max_objects {
            return bad("scene_min_objects exceeds scene_max_objects".into());
        }
        if !(0.0..1.0).contains(&self.gate_threshold) {
            return bad(format!("gate_threshold {} outside [0, 1)", self.gate_threshold));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        let reals = [
            ("gumbel_temperature", self.gumbel_temperature),
            ("lr_backbone", self.lr_backbone),
            ("lr_rest", self.lr_rest),
            ("lr_decay_factor", self.lr_decay_factor),
            ("scene_rare_verb_ratio", self.scene_rare_verb_ratio),
        ];
        for (name, v) in reals {
            if v <= 0.0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        let nonneg = [
            ("alpha_interaction", self.alpha_interaction),
            ("alpha_cue", self.alpha_cue),
            ("alpha_token", self.alpha_token),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in nonneg {
            if v < 0.0 {
                return bad(format!("`{name}` must be non-negative"));
            }
        }
        Ok(())
    }
}
