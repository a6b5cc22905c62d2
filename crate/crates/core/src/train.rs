//! Optimizer, learning-rate schedule, checkpoints and the training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoder::AssignMode;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::HoiModel;
use crate::nn::{to_f64_vec, ParamGroup, ParamStore};
use crate::scenes::{generate_split, load_dataset, save_dataset, SceneSample};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_SPLIT_FILE: &str = "train.jsonl";
pub const TEST_SPLIT_FILE: &str = "test.jsonl";
const CHECKPOINT_MAGIC: &[u8; 8] = b"HOICKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Learning rate of `group` during `epoch` (0-based): the base rate times
/// `lr_decay_factor` for every decay epoch already reached.
pub fn learning_rate(cfg: &RunConfig, group: ParamGroup, epoch: usize) -> f64 {
    let base = match group {
        ParamGroup::Backbone => cfg.lr_backbone,
        ParamGroup::Rest => cfg.lr_rest,
    };
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * cfg.lr_decay_factor.powi(decays as i32)
}

/// Digest of the keys that determine the generated scenes.
pub fn scene_config_hash(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in cfg.pairs() {
        if k == "seed" || k == "image_size" || k == "object_classes" || k == "verbs" || k.starts_with("scene_") || k.ends_with("_scenes") {
            h.update(format!("{k}={v}\n"));
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and test scenes.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl SplitData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(SplitData {
            train: generate_split(cfg, false)?,
            test: generate_split(cfg, true)?,
        })
    }

    pub fn save(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = scene_config_hash(cfg);
        save_dataset(&self.train, &hash, &dir.join(TRAIN_SPLIT_FILE))?;
        save_dataset(&self.test, &hash, &dir.join(TEST_SPLIT_FILE))
    }

    /// Loads both splits and checks they were generated with `cfg`'s scene settings.
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let expected = scene_config_hash(cfg);
        let split = |name: &str| -> Result<Vec<SceneSample>> {
            let path = dir.join(name);
            let (scenes, hash) = load_dataset(&path)?;
            if hash != expected {
                return Err(Error::Dataset(format!(
                    "{} was generated with scene settings {hash}, config expects {expected}",
                    path.display()
                )));
            }
            Ok(scenes)
        };
        Ok(SplitData {
            train: split(TRAIN_SPLIT_FILE)?,
            test: split(TEST_SPLIT_FILE)?,
        })
    }

    /// Loads from `dir` when it holds both splits, otherwise generates.
    pub fn load_or_generate(cfg: &RunConfig, dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) if d.join(TRAIN_SPLIT_FILE).exists() && d.join(TEST_SPLIT_FILE).exists() => Self::load(cfg, d),
            _ => Self::generate(cfg),
        }
    }
}

/// Decoupled-weight-decay Adam with per-group learning rates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += to_f64_vec(&g.sqr()?.sum_all()?)?[0];
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Gradients are rescaled to global norm `clip` first when
    /// `clip > 0`. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: impl Fn(ParamGroup) -> f64, clip: f64) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        let scale = if clip > 0.0 && norm > clip { clip / (norm + 1e-6) } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter() {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let lr = lr(p.group);
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let decayed = (p.var.as_tensor().detach() * (1.0 - lr * self.weight_decay))?;
            p.var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

fn f64_name() -> String {
    "f64".into()
}

fn element_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported element type `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub optimizer_step: u64,
    /// Stored element type, `f32` or `f64` (the model precision); absent in
    /// version-1 files written before f32 storage, which are all f64.
    #[serde(default = "f64_name")]
    pub dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Parameters and optimizer moments of a run; values are stored
/// little-endian in the model precision after a JSON header.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: BTreeMap<(String, String), (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(model: &HoiModel, opt: &AdamW, epochs_completed: usize) -> Result<Self> {
        let mut data = BTreeMap::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, kind: &str, t: &Tensor| -> Result<()> {
            tensors.push(TensorEntry {
                name: name.into(),
                kind: kind.into(),
                shape: t.dims().to_vec(),
            });
            data.insert((kind.to_string(), name.to_string()), (t.dims().to_vec(), to_f64_vec(t)?));
            Ok(())
        };
        for (name, p) in model.store.iter() {
            push(name, "param", p.var.as_tensor())?;
        }
        for (name, m) in &opt.m {
            push(name, "adam_m", m)?;
        }
        for (name, v) in &opt.v {
            push(name, "adam_v", v)?;
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                config_hash: model.cfg.hash(),
                config: model.cfg.to_text(),
                seed: model.cfg.seed,
                epochs_completed,
                optimizer_step: opt.step,
                dtype: if model.store.dtype() == candle_core::DType::F32 { "f32" } else { "f64" }.into(),
                tensors,
            },
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let single = element_bytes(&self.header.dtype)? == 4;
        for e in &self.header.tensors {
            let (_, values) = &self.data[&(e.kind.clone(), e.name.clone())];
            for &v in values {
                if single {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().map_err(|_| bad("truncated"))?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().map_err(|_| bad("truncated"))?) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let width = element_bytes(&header.dtype)?;
        let mut pos = 20 + hlen;
        let mut data = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + width * n).ok_or_else(|| bad("truncated tensor data"))?;
            let values = if width == 4 {
                raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk")))).collect()
            } else {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
            };
            data.insert((e.kind.clone(), e.name.clone()), (e.shape.clone(), values));
            pos += width * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The configuration the checkpoint was trained with.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.header.config)
    }

    fn tensor(&self, kind: &str, name: &str, dtype: candle_core::DType) -> Result<Option<Tensor>> {
        match self.data.get(&(kind.to_string(), name.to_string())) {
            Some((shape, values)) => Ok(Some(Tensor::from_vec(values.clone(), shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)),
            None => Ok(None),
        }
    }

    /// Loads parameters into `model`; the config hashes must agree.
    pub fn restore_model(&self, model: &HoiModel) -> Result<()> {
        let found = model.cfg.hash();
        if self.header.config_hash != found {
            return Err(Error::ResumeMismatch {
                expected: self.header.config_hash.clone(),
                found,
            });
        }
        let dtype = model.store.dtype();
        for (name, _) in model.store.iter() {
            let t = self
                .tensor("param", name, dtype)?
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            model.store.set(name, &t)?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, model: &HoiModel, opt: &mut AdamW) -> Result<()> {
        let dtype = model.store.dtype();
        opt.step = self.header.optimizer_step;
        opt.m.clear();
        opt.v.clear();
        for (name, _) in model.store.iter() {
            if let Some(m) = self.tensor("adam_m", name, dtype)? {
                opt.m.insert(name.to_string(), m);
            }
            if let Some(v) = self.tensor("adam_v", name, dtype)? {
                opt.v.insert(name.to_string(), v);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub steps: usize,
    pub loss: LossRecord,
    pub grad_norm: f64,
    pub capacity_overflows: usize,
}

/// Batch-averaged loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_a: f64,
    pub l_e: f64,
    pub l_t_pos_h: f64,
    pub l_t_neg_h: f64,
    pub l_t_pos_o: f64,
    pub l_t_neg_o: f64,
    pub l_t: f64,
    pub total: f64,
}

impl LossRecord {
    fn add(&mut self, b: &LossBreakdown, w: f64) {
        self.l_a += w * b.l_a;
        self.l_e += w * b.l_e;
        self.l_t_pos_h += w * b.l_t_pos_h;
        self.l_t_neg_h += w * b.l_t_neg_h;
        self.l_t_pos_o += w * b.l_t_pos_o;
        self.l_t_neg_o += w * b.l_t_neg_o;
        self.l_t += w * b.l_t;
        self.total += w * b.total;
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for the checkpoint, the log and the resolved config.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still follows `epochs`).
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: HoiModel,
    pub records: Vec<EpochRecord>,
    pub epochs_completed: usize,
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + purpose);
    rng
}

fn read_log(path: &Path, keep: usize) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: EpochRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            record: k + 1,
            message: e.to_string(),
        })?;
        if rec.epoch <= keep {
            out.push(rec);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Trains on `train` with the schedule of `cfg`. Every epoch is logged and,
/// with an output directory, checkpointed.
pub fn train(cfg: &RunConfig, train: &[SceneSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let model = HoiModel::with_default_text(cfg)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut start = 0;
    let mut records = Vec::new();
    if let Some(path) = &opts.resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.restore_model(&model)?;
        ckpt.restore_optimizer(&model, &mut opt)?;
        start = ckpt.header.epochs_completed;
        if let Some(dir) = &opts.out_dir {
            records = read_log(&dir.join(LOG_FILE), start)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        std::fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start..end {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let mut noise = epoch_rng(cfg.seed, epoch, 1);
        let (lr_b, lr_r) = (learning_rate(cfg, ParamGroup::Backbone, epoch), learning_rate(cfg, ParamGroup::Rest, epoch));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let w = 1.0 / batches.len() as f64;
        let mut loss = LossRecord::default();
        let (mut grad_norm, mut overflow) = (0.0, 0);
        for idx in &batches {
            let scenes: Vec<&SceneSample> = idx.iter().map(|&i| &train[i]).collect();
            let out = model.forward_scenes(&scenes, AssignMode::Train(&mut noise))?;
            let l = model.loss(&out, &scenes)?;
            if !l.breakdown.total.is_finite() {
                return Err(Error::Value(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            let grads = l.total.backward()?;
            let norm = opt.step(
                &model.store,
                &grads,
                |g| match g {
                    ParamGroup::Backbone => lr_b,
                    ParamGroup::Rest => lr_r,
                },
                cfg.grad_clip_norm,
            )?;
            loss.add(&l.breakdown, w);
            grad_norm += w * norm;
            overflow += l.capacity_overflows;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr_backbone: lr_b,
            lr_rest: lr_r,
            steps: batches.len(),
            loss,
            grad_norm,
            capacity_overflows: overflow,
        };
        log::info!("epoch {} loss {:.5} (L_a {:.4}, L_e {:.4}, L_t {:.4})", rec.epoch, loss.total, loss.l_a, loss.l_e, loss.l_t);
        records.push(rec);
        if let Some(dir) = &opts.out_dir {
            Checkpoint::capture(&model, &opt, epoch + 1)?.save(&dir.join(CHECKPOINT_FILE))?;
            write_log(&dir.join(LOG_FILE), &records)?;
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        epochs_completed: end.max(start),
    })
}

/// Rebuilds a model from a checkpoint using its stored config.
pub fn load_model(path: &Path) -> Result<HoiModel> {
    let ckpt = Checkpoint::load(path)?;
    let model = HoiModel::with_default_text(&ckpt.config()?)?;
    ckpt.restore_model(&model)?;
    Ok(model)
}
