//! Synthetic HOI scenes: stick-figure humans with 17 keypoints and
//! class-colored shapes, with verbs that are pure functions of the stored
//! geometry. Also the on-disk dataset format (JSON-lines annotations plus a
//! raw `u8` raster sidecar).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::RasterInput;
use crate::config::RunConfig;
use crate::cues::NUM_KEYPOINTS;
use crate::error::{Error, Result};
use crate::metrics::iou;

pub const FORMAT_NAME: &str = "hoi-scenes";
pub const FORMAT_VERSION: u32 = 1;

/// Verbs with a geometric rule.
pub const KNOWN_VERBS: [&str; 4] = ["hold", "ride", "kick", "next_to"];

// COCO keypoint order.
const NOSE: usize = 0;
const L_SHOULDER: usize = 5;
const R_SHOULDER: usize = 6;
const L_ELBOW: usize = 7;
const R_ELBOW: usize = 8;
const L_WRIST: usize = 9;
const R_WRIST: usize = 10;
const L_HIP: usize = 11;
const R_HIP: usize = 12;
const L_KNEE: usize = 13;
const R_KNEE: usize = 14;
const L_ANKLE: usize = 15;
const R_ANKLE: usize = 16;

const SKELETON: [(usize, usize); 14] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (0, 5),
    (0, 6),
];

/// `(cx, cy, w, h)`, normalized to the image.
pub type BoxCxCyWh = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Human {
    pub bbox: BoxCxCyWh,
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BoxCxCyWh,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub human_idx: usize,
    pub object_idx: usize,
    /// Sorted verb indices.
    pub verbs: Vec<usize>,
}

/// Channel-first RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Maps `v` to `v / 255 - 0.5`.
    pub fn to_raster(&self) -> RasterInput {
        RasterInput {
            channels: 3,
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f32::from(v) / 255.0 - 0.5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub humans: Vec<Human>,
    pub objects: Vec<Object>,
    pub interactions: Vec<Interaction>,
}

impl SceneSample {
    pub fn to_raster(&self) -> RasterInput {
        self.image.to_raster()
    }
}

pub fn corners(b: &BoxCxCyWh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxCxCyWh {
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn mid(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Contact radius for "hold" and "kick".
fn reach(o: &Object) -> f64 {
    0.5 * o.bbox[2].min(o.bbox[3]) + 0.03
}

/// Geometric verb rules. Every rule reads only the stored boxes and keypoints.
pub fn verb_rule(verb: &str, h: &Human, o: &Object) -> Result<bool> {
    let kp = &h.keypoints;
    let oc = [o.bbox[0], o.bbox[1]];
    let hip = mid(kp[L_HIP], kp[R_HIP]);
    let [ox0, oy0, ox1, _] = corners(&o.bbox);
    let [_, hy0, _, hy1] = corners(&h.bbox);
    Ok(match verb {
        "hold" => dist(oc, kp[L_WRIST]).min(dist(oc, kp[R_WRIST])) <= reach(o),
        "kick" => dist(oc, kp[L_ANKLE]).min(dist(oc, kp[R_ANKLE])) <= reach(o) && oc[1] >= hip[1],
        "ride" => {
            o.bbox[2] >= 0.25
                && (oy0 - hip[1]).abs() <= 0.04
                && (ox0..=ox1).contains(&hip[0])
                && (oc[0] - hip[0]).abs() <= 0.25 * o.bbox[2]
        }
        "next_to" => {
            let dx = (oc[0] - h.bbox[0]).abs();
            dx > h.bbox[2] / 2.0 && dx <= h.bbox[2] / 2.0 + 0.15 && (hy0..=hy1).contains(&oc[1])
        }
        other => return Err(Error::Config(format!("no geometric rule for verb `{other}`"))),
    })
}

/// Sorted indices of the verbs whose rule holds for the pair.
pub fn derive_verbs(verbs: &[String], h: &Human, o: &Object) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, v) in verbs.iter().enumerate() {
        if verb_rule(v, h, o)? {
            out.push(i);
        }
    }
    Ok(out)
}

/// All pairs with a nonempty verb set, ordered by (human, object).
pub fn derive_interactions(verbs: &[String], humans: &[Human], objects: &[Object]) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (hi, h) in humans.iter().enumerate() {
        for (oi, o) in objects.iter().enumerate() {
            let v = derive_verbs(verbs, h, o)?;
            if !v.is_empty() {
                out.push(Interaction {
                    human_idx: hi,
                    object_idx: oi,
                    verbs: v,
                });
            }
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn build_human(rng: &mut ChaCha8Rng) -> Human {
    let tall = uniform(rng, 0.42, 0.56);
    let x = uniform(rng, 0.25, 0.75);
    let hy = uniform(rng, 0.4, 0.68);
    let mut kp = vec![[0.0; 2]; NUM_KEYPOINTS];
    let sy = hy - 0.33 * tall;
    kp[NOSE] = [x, hy - 0.45 * tall];
    // Eyes and ears: the figure faces the viewer, so its left is image right.
    kp[1] = [x + 0.02 * tall, kp[NOSE][1] - 0.015 * tall];
    kp[2] = [x - 0.02 * tall, kp[NOSE][1] - 0.015 * tall];
    kp[3] = [x + 0.04 * tall, kp[NOSE][1] - 0.005 * tall];
    kp[4] = [x - 0.04 * tall, kp[NOSE][1] - 0.005 * tall];
    for (side, sh, el, wr, hp, kn, an) in [
        (1.0, L_SHOULDER, L_ELBOW, L_WRIST, L_HIP, L_KNEE, L_ANKLE),
        (-1.0, R_SHOULDER, R_ELBOW, R_WRIST, R_HIP, R_KNEE, R_ANKLE),
    ] {
        kp[sh] = [x + side * 0.11 * tall, sy];
        kp[hp] = [x + side * 0.07 * tall, hy];
        let a1 = uniform(rng, 10.0, 120.0).to_radians();
        let a2 = (a1 + uniform(rng, -30.0, 60.0).to_radians()).clamp(0.0, 170f64.to_radians());
        kp[el] = [kp[sh][0] + side * 0.16 * tall * a1.sin(), kp[sh][1] + 0.16 * tall * a1.cos()];
        kp[wr] = [kp[el][0] + side * 0.15 * tall * a2.sin(), kp[el][1] + 0.15 * tall * a2.cos()];
        let b1 = uniform(rng, 0.0, 30.0).to_radians();
        let b2 = (b1 + uniform(rng, -20.0, 10.0).to_radians()).max(-0.2);
        kp[kn] = [kp[hp][0] + side * 0.22 * tall * b1.sin(), kp[hp][1] + 0.22 * tall * b1.cos()];
        kp[an] = [kp[kn][0] + side * 0.22 * tall * b2.sin(), kp[kn][1] + 0.22 * tall * b2.cos()];
    }
    let r = head_radius(tall);
    let xs = kp.iter().map(|p| p[0]);
    let x0 = xs.clone().fold(kp[NOSE][0] - r, f64::min) - 0.01;
    let x1 = xs.fold(kp[NOSE][0] + r, f64::max) + 0.01;
    let y0 = kp[NOSE][1] - r - 0.01;
    let y1 = kp.iter().map(|p| p[1]).fold(f64::MIN, f64::max) + 0.01;
    let visibility = kp.iter().map(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])).collect();
    Human {
        bbox: from_corners(x0, y0, x1, y1),
        keypoints: kp,
        visibility,
    }
}

fn head_radius(tall: f64) -> f64 {
    0.07 * tall
}

fn inside_image(b: &BoxCxCyWh) -> bool {
    let [x0, y0, x1, y1] = corners(b);
    x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
}

/// `(w, h)` range for a class, by name.
fn class_size(rng: &mut ChaCha8Rng, name: &str) -> (f64, f64) {
    match name {
        "ball" => {
            let d = uniform(rng, 0.12, 0.16);
            (d, d)
        }
        "cup" => (uniform(rng, 0.09, 0.12), uniform(rng, 0.13, 0.17)),
        "kite" => (uniform(rng, 0.14, 0.18), uniform(rng, 0.18, 0.24)),
        "bench" => (uniform(rng, 0.3, 0.4), uniform(rng, 0.1, 0.14)),
        "umbrella" => (uniform(rng, 0.2, 0.26), uniform(rng, 0.12, 0.16)),
        _ => (uniform(rng, 0.12, 0.18), uniform(rng, 0.12, 0.18)),
    }
}

/// Whether a class may be the target of a verb during generation. Labels are
/// always re-derived by the rules; this only steers placement.
fn compatible(verb: &str, class: &str) -> bool {
    match verb {
        "ride" => class == "bench",
        "hold" => class != "bench",
        "kick" => !matches!(class, "umbrella" | "kite" | "bench"),
        _ => true,
    }
}

/// Candidate center for an object meant to satisfy `target` with human `h`.
fn propose_center(rng: &mut ChaCha8Rng, target: Option<&str>, h: &Human, w: f64, hh: f64) -> [f64; 2] {
    let kp = &h.keypoints;
    let jitter = |rng: &mut ChaCha8Rng, s: f64| [uniform(rng, -s, s), uniform(rng, -s, s)];
    match target {
        Some("hold") => {
            let wr = if rng.random_bool(0.5) { kp[L_WRIST] } else { kp[R_WRIST] };
            let j = jitter(rng, 0.3 * w.min(hh));
            [wr[0] + j[0], wr[1] + j[1]]
        }
        Some("kick") => {
            let (an, side) = if rng.random_bool(0.5) { (kp[L_ANKLE], 1.0) } else { (kp[R_ANKLE], -1.0) };
            let j = jitter(rng, 0.2 * w.min(hh));
            [an[0] + side * 0.3 * w + j[0], an[1] + j[1]]
        }
        Some("ride") => {
            let hip = mid(kp[L_HIP], kp[R_HIP]);
            [hip[0] + uniform(rng, -0.15, 0.15) * w, hip[1] - 0.01 + hh / 2.0 + uniform(rng, -0.02, 0.02)]
        }
        Some("next_to") => {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let [_, y0, _, y1] = corners(&h.bbox);
            [h.bbox[0] + side * (h.bbox[2] / 2.0 + uniform(rng, 0.02, 0.14)), uniform(rng, y0, y1)]
        }
        _ => [uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)],
    }
}

fn verb_weights(cfg: &RunConfig) -> Vec<f64> {
    let n = cfg.verbs.len();
    (0..n)
        .map(|i| if i + 1 == n && cfg.scene_rare_verb_ratio > 1.0 { 1.0 / cfg.scene_rare_verb_ratio } else { 1.0 })
        .collect()
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = uniform(rng, 0.0, total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Probability that an object is placed without any target verb.
const NONE_PROBABILITY: f64 = 0.15;
const PLACEMENT_ATTEMPTS: usize = 200;

fn check_generation_config(cfg: &RunConfig) -> Result<()> {
    if cfg.object_classes.is_empty() {
        return Err(Error::Config("scene generation needs at least one object class".into()));
    }
    if cfg.verbs.is_empty() {
        return Err(Error::Config("scene generation needs at least one verb".into()));
    }
    if let Some(v) = cfg.verbs.iter().find(|v| !KNOWN_VERBS.contains(&v.as_str())) {
        return Err(Error::Config(format!("no geometric rule for verb `{v}`")));
    }
    if cfg.scene_max_humans == 0 || cfg.scene_min_objects > cfg.scene_max_objects {
        return Err(Error::Config("scene counts are inconsistent".into()));
    }
    if cfg.scene_max_objects > cfg.object_classes.len() {
        return Err(Error::Config(format!(
            "{} objects per scene need as many distinct classes, only {} configured",
            cfg.scene_max_objects,
            cfg.object_classes.len()
        )));
    }
    if cfg.image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    Ok(())
}

/// One scene, fully determined by `seed` and the scene fields of `cfg`.
pub fn generate(seed: u64, cfg: &RunConfig) -> Result<SceneSample> {
    check_generation_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(s) = try_generate(&mut rng, cfg)? {
            return Ok(s);
        }
    }
}

fn try_generate(rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Result<Option<SceneSample>> {
    let n_h = rng.random_range(1..=cfg.scene_max_humans);
    let n_o = rng.random_range(cfg.scene_min_objects..=cfg.scene_max_objects);
    let mut humans: Vec<Human> = Vec::new();
    for _ in 0..PLACEMENT_ATTEMPTS {
        if humans.len() == n_h {
            break;
        }
        let h = build_human(rng);
        if inside_image(&h.bbox) && humans.iter().all(|o| iou(&o.bbox, &h.bbox) < 0.1) {
            humans.push(h);
        }
    }
    if humans.len() < n_h {
        return Ok(None);
    }
    let weights = verb_weights(cfg);
    let mut objects: Vec<Object> = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    for _ in 0..n_o {
        let target = if rng.random_bool(NONE_PROBABILITY) {
            None
        } else {
            Some(weighted_pick(rng, &weights))
        };
        let owner = rng.random_range(0..humans.len());
        let target_name = target.map(|v| cfg.verbs[v].as_str());
        let classes: Vec<usize> = (0..cfg.object_classes.len())
            .filter(|c| !used.contains(c))
            .filter(|&c| target_name.is_none_or(|v| compatible(v, &cfg.object_classes[c])))
            .collect();
        if classes.is_empty() {
            continue;
        }
        let class_id = classes[rng.random_range(0..classes.len())];
        let (w, hh) = class_size(rng, &cfg.object_classes[class_id]);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = propose_center(rng, target_name, &humans[owner], w, hh);
            let o = Object {
                bbox: [c[0], c[1], w, hh],
                class_id,
            };
            if !inside_image(&o.bbox) || objects.iter().any(|p| iou(&p.bbox, &o.bbox) > 0.0) {
                continue;
            }
            let mut ok = true;
            for (hi, h) in humans.iter().enumerate() {
                let v = derive_verbs(&cfg.verbs, h, &o)?;
                ok &= v.len() <= 2;
                ok &= match target {
                    Some(t) if hi == owner => v.contains(&t),
                    None => v.is_empty(),
                    _ => true,
                };
            }
            if ok {
                used.insert(class_id);
                objects.push(o);
                break;
            }
        }
    }
    if objects.len() < cfg.scene_min_objects {
        return Ok(None);
    }
    let interactions = derive_interactions(&cfg.verbs, &humans, &objects)?;
    let image = render(rng, cfg, &humans, &objects);
    Ok(Some(SceneSample {
        image,
        humans,
        objects,
        interactions,
    }))
}

/// Seed of scene `index` of a split; train and test never share seeds.
pub fn scene_seed(base: u64, test: bool, index: usize) -> u64 {
    let split = if test { 0x7e57_0000_0000 } else { 0 };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split ^ index as u64
}

pub fn generate_split(cfg: &RunConfig, test: bool) -> Result<Vec<SceneSample>> {
    let n = if test { cfg.test_scenes } else { cfg.train_scenes };
    (0..n).map(|i| generate(scene_seed(cfg.seed, test, i), cfg)).collect()
}

const BACKGROUND: [u8; 3] = [205, 205, 200];
const HEAD: [u8; 3] = [230, 180, 140];
const TORSO: [u8; 3] = [30, 30, 30];
const LEFT_LIMB: [u8; 3] = [40, 40, 150];
const RIGHT_LIMB: [u8; 3] = [150, 40, 40];

fn class_color(name: &str, id: usize) -> [u8; 3] {
    match name {
        "ball" => [225, 50, 40],
        "cup" => [40, 90, 225],
        "kite" => [235, 205, 30],
        "bench" => [125, 75, 30],
        "umbrella" => [200, 40, 200],
        _ => {
            let h = (id as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
    Diamond,
    Dome,
}

fn class_shape(name: &str, id: usize) -> Shape {
    match name {
        "ball" => Shape::Ellipse,
        "cup" | "bench" => Shape::Rect,
        "kite" => Shape::Diamond,
        "umbrella" => Shape::Dome,
        _ => [Shape::Ellipse, Shape::Rect, Shape::Diamond, Shape::Dome][id % 4],
    }
}

fn shape_contains(shape: Shape, b: &BoxCxCyWh, x: f64, y: f64) -> bool {
    let u = (x - b[0]) / (b[2] / 2.0);
    let v = (y - b[1]) / (b[3] / 2.0);
    match shape {
        Shape::Ellipse => u * u + v * v <= 1.0,
        Shape::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
        Shape::Diamond => u.abs() + v.abs() <= 1.0,
        // Canopy over the upper part of the box, handle below it.
        Shape::Dome => (v <= 0.2 && u * u + ((v - 0.2) / 1.2).powi(2) <= 1.0) || (u.abs() <= 0.08 && (0.2..=1.0).contains(&v)),
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

fn limb_color(a: usize, b: usize) -> [u8; 3] {
    let left = |k: usize| k >= 5 && k % 2 == 1;
    let right = |k: usize| k >= 5 && k % 2 == 0;
    if (a == L_HIP && b == R_HIP) || (a == L_SHOULDER && b == R_SHOULDER) || a == NOSE || (a == L_SHOULDER && b == L_HIP) || (a == R_SHOULDER && b == R_HIP) {
        TORSO
    } else if left(a) && left(b) {
        LEFT_LIMB
    } else if right(a) && right(b) {
        RIGHT_LIMB
    } else {
        TORSO
    }
}

fn render(rng: &mut ChaCha8Rng, cfg: &RunConfig, humans: &[Human], objects: &[Object]) -> Image {
    let (w, h) = (cfg.image_size, cfg.image_size);
    let mut pixels = vec![0u8; 3 * w * h];
    let plane = w * h;
    let noise: Vec<i16> = (0..plane).map(|_| rng.random_range(-6..=6)).collect();
    for y in 0..h {
        for x in 0..w {
            let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
            let mut color = BACKGROUND;
            for o in objects {
                let name = &cfg.object_classes[o.class_id];
                if shape_contains(class_shape(name, o.class_id), &o.bbox, p[0], p[1]) {
                    color = class_color(name, o.class_id);
                }
            }
            for hm in humans {
                let kp = &hm.keypoints;
                let tall = (kp[L_HIP][1] - kp[L_SHOULDER][1]) / 0.33;
                let thick = 0.045 * tall;
                for &(a, b) in &SKELETON {
                    if seg_dist(p, kp[a], kp[b]) <= thick {
                        color = limb_color(a, b);
                    }
                }
                if dist(p, kp[NOSE]) <= head_radius(tall) {
                    color = HEAD;
                }
            }
            let n = noise[y * w + x];
            for c in 0..3 {
                pixels[c * plane + y * w + x] = (i16::from(color[c]) + n).clamp(0, 255) as u8;
            }
        }
    }
    Image {
        width: w,
        height: h,
        pixels,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    count: usize,
    width: usize,
    height: usize,
    raster: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    index: usize,
    humans: Vec<Human>,
    objects: Vec<Object>,
    interactions: Vec<Interaction>,
}

/// Sidecar path used by [`save_dataset`] for an annotation file.
pub fn raster_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".raster");
    PathBuf::from(p)
}

/// Writes `path` (annotations) and `path.raster` (pixels).
pub fn save_dataset(samples: &[SceneSample], config_hash: &str, path: &Path) -> Result<()> {
    let (width, height) = samples.first().map_or((0, 0), |s| (s.image.width, s.image.height));
    if samples.iter().any(|s| (s.image.width, s.image.height) != (width, height)) {
        return Err(Error::Dataset("all scenes in a dataset must share the image size".into()));
    }
    let raster = raster_path(path);
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        count: samples.len(),
        width,
        height,
        raster: raster.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    let mut bin = BufWriter::new(File::create(&raster).map_err(|e| Error::io(&raster, e))?);
    for (index, s) in samples.iter().enumerate() {
        let rec = Record {
            index,
            humans: s.humans.clone(),
            objects: s.objects.clone(),
            interactions: s.interactions.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(io)?;
        bin.write_all(&s.image.pixels).map_err(|e| Error::io(&raster, e))?;
    }
    out.flush().map_err(io)?;
    bin.flush().map_err(|e| Error::io(&raster, e))?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Record numbers in errors are
/// 1-based line numbers of the annotation file (the header is record 1).
pub fn load_dataset(path: &Path) -> Result<(Vec<SceneSample>, String)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fail = |record: usize, message: String| Error::Format { record, message };
    let first = lines
        .next()
        .ok_or_else(|| fail(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| fail(1, e.to_string()))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(fail(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let raster = dir.join(&header.raster);
    let mut bin = Vec::new();
    if header.count > 0 {
        File::open(&raster)
            .and_then(|mut f| f.read_to_end(&mut bin))
            .map_err(|e| Error::io(&raster, e))?;
    }
    let size = 3 * header.width * header.height;
    let mut out = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let record = i + 2;
        let line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(fail(record, format!("file ends after {i} of {} scenes", header.count))),
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(record, e.to_string()))?;
        if rec.index != i {
            return Err(fail(record, format!("scene index {} out of order", rec.index)));
        }
        validate_record(&rec).map_err(|m| fail(record, m))?;
        let pixels = bin
            .get(i * size..(i + 1) * size)
            .ok_or_else(|| fail(record, "raster sidecar is truncated".into()))?
            .to_vec();
        out.push(SceneSample {
            image: Image {
                width: header.width,
                height: header.height,
                pixels,
            },
            humans: rec.humans,
            objects: rec.objects,
            interactions: rec.interactions,
        });
    }
    if let Some(extra) = lines.next() {
        let extra = extra.map_err(|e| Error::io(path, e))?;
        if !extra.trim().is_empty() {
            return Err(fail(header.count + 2, "more records than the header count".into()));
        }
    }
    Ok((out, header.config_hash))
}

fn validate_record(rec: &Record) -> std::result::Result<(), String> {
    for h in &rec.humans {
        if h.keypoints.len() != NUM_KEYPOINTS || h.visibility.len() != NUM_KEYPOINTS {
            return Err(format!("human needs {NUM_KEYPOINTS} keypoints and visibility bits"));
        }
    }
    for it in &rec.interactions {
        if it.human_idx >= rec.humans.len() || it.object_idx >= rec.objects.len() {
            return Err(format!("interaction ({}, {}) out of range", it.human_idx, it.object_idx));
        }
        if it.verbs.is_empty() {
            return Err("interaction with an empty verb set".into());
        }
    }
    Ok(())
}
