//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout. Set
//! `HOI_ACCEPTANCE=1,3,9` to run a subset. Criteria listed in
//! `KNOWN_FAILURES` are reported as FAIL but do not fail the target; if one of
//! them starts passing the target fails so the list gets updated.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use hoi_core::backbone::{stack_rasters, PatchTokenSet, RasterInput};
use hoi_core::complexity::{crossover, omega_agglomerative, omega_baseline, StageConstants};
use hoi_core::config::{RunConfig, SimilarityMetric};
use hoi_core::encoder::{AssignMode, InstanceEncoder};
use hoi_core::evaluate::evaluate;
use hoi_core::gradcheck::gradcheck;
use hoi_core::losses::{loss_t_positive, row_cosine};
use hoi_core::matching::{hungarian_match, total_similarity};
use hoi_core::metrics::{hoi_map, iou, HoiGroundTruth, HoiPrediction};
use hoi_core::model::HoiModel;
use hoi_core::nn::{log_softmax, to_f64_vec, Init, ParamStore};
use hoi_core::scenes::{generate, SceneSample};
use hoi_core::train::{train, SplitData, TrainOptions, CHECKPOINT_FILE, LOG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 6: the crossover root of the exact formulas is -65.09, outside -71 +/- 1.
/// 7: the desk model does not learn to localize (mAP ~0).
/// 8: with every ablation arm at mAP 0 no ordering can be shown.
const KNOWN_FAILURES: &[u32] = &[6, 7, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// `limit_secs == 0` means no runtime bound.
fn within(limit_secs: u64, elapsed: Duration, mut o: Outcome) -> Outcome {
    if limit_secs > 0 && elapsed > Duration::from_secs(limit_secs) {
        o.pass = false;
        o.detail.push_str(&format!("; runtime limit {limit_secs}s exceeded"));
    }
    o
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

fn c1_assignment_normalization() -> Outcome {
    let cfg = RunConfig::desk();
    let mut store = ParamStore::new(DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let encoder = InstanceEncoder::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let (gh, gw) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = [0.1, 1.0, 10.0][k % 3];
        let tokens = Tensor::from_vec(randn(&mut rng, gh * gw * cfg.dim, scale), (1, gh * gw, cfg.dim), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let patches = PatchTokenSet { tokens, grid_h: gh, grid_w: gw };
        let mut noise = ChaCha8Rng::seed_from_u64(k as u64);
        let mode = if k % 2 == 0 { AssignMode::Train(&mut noise) } else { AssignMode::Eval };
        let (_, diag) = encoder.encode(&patches, mode).unwrap();
        for a in [&diag.stage1.assignment, &diag.stage2.assignment] {
            for s in to_f64_vec(&a.sum(1).unwrap()).unwrap() {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    outcome(worst < 1e-5, format!("max |column sum - 1| = {worst:.2e} over 100 inputs"))
}

fn c2_token_budget() -> Outcome {
    let cfg = RunConfig::paper();
    let model = HoiModel::with_default_text(&cfg).unwrap();
    let mut seen = Vec::new();
    let mut ok = true;
    for res in [64, 128, 256, 640] {
        let images = stack_rasters(&[RasterInput::zeros(res, res)], DType::F32).unwrap();
        let out = model.forward(&images, AssignMode::Eval).unwrap();
        let stage2_input = out.diagnostics.stage2.assignment.dims3().unwrap().2;
        let memory = model.decoder.memory(&out.aggregated).unwrap().dim(1).unwrap();
        ok &= stage2_input == 80 && memory == 12;
        seen.push(format!("{res}px: {stage2_input}/{memory}"));
    }
    outcome(ok, format!("stage-2 input / decoder memory: {}", seen.join(", ")))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn c3_hungarian_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for n in 2..=7 {
        let perms = permutations(n);
        for _ in 0..200 {
            let sim: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut rng, n, 1.0)).collect();
            let m = hungarian_match(&sim).unwrap();
            let got = total_similarity(&sim, &m.sigma);
            let best = perms.iter().map(|p| total_similarity(&sim, p)).fold(f64::NEG_INFINITY, f64::max);
            if got != best {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 1200 matrices (sizes 2-7)"))
}

fn c4_gradients() -> Outcome {
    let scenes: Vec<SceneSample> = (0..2).map(|k| generate(k + 40, &RunConfig::tiny()).unwrap()).collect();
    let refs: Vec<&SceneSample> = scenes.iter().collect();
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    // The second variant opens every cue gate so the embedding paths carry gradient.
    for (label, cfg) in [
        ("default gates", RunConfig { batch_size: 2, ..RunConfig::tiny() }),
        ("open gates", RunConfig { batch_size: 2, gate_threshold: 0.0, ..RunConfig::tiny() }),
    ] {
        let model = HoiModel::with_default_text(&cfg).unwrap();
        let r = gradcheck(&model, &refs, 1e-5, 1e-5).unwrap();
        worst = worst.max(r.max_rel_error);
        details.push(format!("{label}: {} entries, max rel {:.2e} at {}", r.checked, r.max_rel_error, r.worst));
    }
    outcome(worst < 1e-4, details.join("; "))
}

fn c5_stop_gradient() -> Outcome {
    let dev = Device::Cpu;
    let logits = Var::from_tensor(&Tensor::new(&[[0.3f64, -0.2, 0.5], [0.7, 0.1, -0.4]], &dev).unwrap()).unwrap();
    let r_vis = Var::from_tensor(&Tensor::new(&[[0.5f64, 1.0, -0.3], [0.2, 0.1, 0.9]], &dev).unwrap()).unwrap();
    let txt = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 0.6, 0.8]], &dev).unwrap();
    let lp = log_softmax(logits.as_tensor(), 1).unwrap().narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
    let cos = row_cosine(r_vis.as_tensor(), &txt).unwrap();
    let terms = loss_t_positive(&lp, &cos, SimilarityMetric::Weighted, true).unwrap();
    let max_abs = |g: Option<&Tensor>| g.map_or(0.0, |t| to_f64_vec(t).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let live = |g: Option<&Tensor>| max_abs(g) > 1e-6;
    let g_cos = terms.cos_term.backward().unwrap();
    let g_ce = terms.ce_term.backward().unwrap();
    let leak_p = max_abs(g_cos.get(logits.as_tensor()));
    let leak_w = max_abs(g_ce.get(r_vis.as_tensor()));
    let pass = leak_p < 1e-12 && leak_w < 1e-12 && live(g_cos.get(r_vis.as_tensor())) && live(g_ce.get(logits.as_tensor()));
    outcome(pass, format!("gradient through sg(p): {leak_p:.1e}, through sg(w): {leak_w:.1e}"))
}

/// Term-by-term evaluation with the published constants written out.
fn oracle_baseline(n: u128, c: u128, q: u128) -> u128 {
    let encoder = 6 * (4 * n * c * c + 2 * n * n * c);
    let decoder_sa = 6 * (4 * q * c * c + 2 * q * q * c);
    let decoder_ca = 6 * (2 * q * c * c + 2 * n * c * c + n * q * c + n * n * c);
    encoder + decoder_sa + decoder_ca
}

fn oracle_agglomerative(n: u128, c: u128, q: u128) -> u128 {
    let stage1 = 4 * (4 * (n + 64 + 16) * c * c + 2 * (n + 80) * (n + 80) * c);
    let stage2 = 2 * (4 * 92 * c * c + 2 * 92 * 92 * c);
    let decoder_sa = 3 * (4 * q * c * c + 2 * q * q * c);
    let decoder_ca = 3 * (2 * q * c * c + 2 * 12 * c * c + 12 * q * c + 12 * 12 * c);
    stage1 + stage2 + decoder_sa + decoder_ca
}

fn c6_complexity() -> Outcome {
    let mut ok = true;
    for (n, c, qb, qa) in [(1u64, 1u64, 1u64, 1u64), (400, 256, 100, 36), (1600, 256, 100, 36)] {
        ok &= omega_baseline(n, c, qb).total == oracle_baseline(n.into(), c.into(), qb.into());
        ok &= omega_agglomerative(n, c, qa).total == oracle_agglomerative(n.into(), c.into(), qa.into());
    }
    let cross = crossover(256, 100, StageConstants::default()).unwrap();
    let root = cross.root.unwrap_or(f64::NAN);
    let root_ok = (root + 71.0).abs() <= 1.0;
    let cheaper = (1..=1_000_000u64).all(|n| omega_agglomerative(n, 256, 36).total < omega_baseline(n, 256, 100).total);
    outcome(
        ok && root_ok && cheaper,
        format!("oracle equality {ok}; root {root:.3} (expected -71 +/- 1: {root_ok}); cheaper for all N in [1, 1e6]: {cheaper}"),
    )
}

fn c7_desk_learnability() -> Outcome {
    let cfg = RunConfig::desk();
    let data = SplitData::generate(&cfg).unwrap();
    let run = train(&cfg, &data.train, &TrainOptions::default()).unwrap();
    let report = evaluate(&run.model, &data.test).unwrap();
    let last = run.records.last().map_or(f64::NAN, |r| r.loss.total);
    outcome(
        report.hoi_map >= 0.60 && report.instance_ap50 >= 0.70,
        format!(
            "HOI mAP {:.4} (>= 0.60), instance AP50 {:.4} (>= 0.70), final loss {last:.4}",
            report.hoi_map, report.instance_ap50
        ),
    )
}

fn c8_ablation_directions() -> Outcome {
    let base = RunConfig::ablation();
    let arms = [
        ("patterns=3 weighted", base.clone()),
        ("patterns=1", RunConfig { patterns: 1, ..base.clone() }),
        ("metric=ce", RunConfig { metric: SimilarityMetric::Ce, ..base.clone() }),
    ];
    let mut means = [0.0; 3];
    for seed in 0..3u64 {
        let data = SplitData::generate(&RunConfig { seed, ..base.clone() }).unwrap();
        for (k, (_, arm)) in arms.iter().enumerate() {
            let cfg = RunConfig { seed, ..arm.clone() };
            let run = train(&cfg, &data.train, &TrainOptions::default()).unwrap();
            means[k] += evaluate(&run.model, &data.test).unwrap().hoi_map / 3.0;
        }
    }
    let informative = means.iter().any(|&m| m > 0.0);
    let pass = informative && means[0] >= means[1] && means[0] >= means[2];
    let parts: Vec<String> = arms.iter().zip(means).map(|((l, _), m)| format!("{l}: {m:.4}")).collect();
    let note = if informative { "" } else { " (every arm scored 0, so no ordering is established)" };
    outcome(pass, format!("mean mAP over 3 seeds: {}{note}", parts.join(", ")))
}

fn naive_ap(scores_hits: &[(f64, bool)], num_gt: usize) -> f64 {
    let n = scores_hits.len();
    let precision: Vec<f64> = (0..n)
        .map(|k| scores_hits[..=k].iter().filter(|x| x.1).count() as f64 / (k + 1) as f64)
        .collect();
    (0..n)
        .filter(|&k| scores_hits[k].1)
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max) / num_gt as f64)
        .sum()
}

/// Exhaustive greedy matcher: visit predictions by descending score; each
/// claims the unclaimed same-scene, same-verb GT with the largest min-IoU above 0.5.
fn naive_hoi_map(preds: &[HoiPrediction], gts: &[HoiGroundTruth], num_verbs: usize) -> f64 {
    let mut aps = Vec::new();
    for v in 0..num_verbs {
        let num_gt = gts.iter().filter(|g| g.verb == v).count();
        if num_gt == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..preds.len()).filter(|&k| preds[k].verb == v).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
        let mut claimed = vec![false; gts.len()];
        let mut hits = Vec::new();
        for k in order {
            let p = &preds[k];
            let mut best = None;
            let mut best_overlap = 0.5;
            for (gi, g) in gts.iter().enumerate() {
                if g.verb != v || g.scene != p.scene || claimed[gi] {
                    continue;
                }
                let o = iou(&p.human_box, &g.human_box).min(iou(&p.object_box, &g.object_box));
                if o > best_overlap {
                    best_overlap = o;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                claimed[gi] = true;
            }
            hits.push((p.score, best.is_some()));
        }
        aps.push(naive_ap(&hits, num_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn c9_evaluation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let num_verbs = 4;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, b: [f64; 4], s: f64| -> [f64; 4] {
        [b[0] + rng.random_range(-s..s), b[1] + rng.random_range(-s..s), b[2] * rng.random_range(0.8..1.25), b[3] * rng.random_range(0.8..1.25)]
    };
    for scene in 0..20 {
        let n_pairs = rng.random_range(1..=4);
        for _ in 0..n_pairs {
            let h = [rng.random_range(20.0..100.0), rng.random_range(20.0..100.0), rng.random_range(10.0..40.0), rng.random_range(20.0..60.0)];
            let o = [rng.random_range(20.0..100.0), rng.random_range(20.0..100.0), rng.random_range(5.0..30.0), rng.random_range(5.0..30.0)];
            for v in 0..num_verbs {
                if rng.random_bool(0.4) {
                    gts.push(HoiGroundTruth { scene, human_box: h, object_box: o, verb: v });
                }
                for _ in 0..rng.random_range(0..3) {
                    preds.push(HoiPrediction {
                        scene,
                        human_box: jitter(&mut rng, h, 6.0),
                        object_box: jitter(&mut rng, o, 4.0),
                        verb: v,
                        score: rng.random(),
                    });
                }
            }
        }
    }
    let got = hoi_map(&preds, &gts, num_verbs, 0.5).map;
    let want = naive_hoi_map(&preds, &gts, num_verbs);
    outcome((got - want).abs() < 1e-9, format!("hoi_map {got:.12} vs oracle {want:.12} ({} preds, {} GT)", preds.len(), gts.len()))
}

fn run_twice(cfg: &RunConfig, data: &SplitData, dir: &Path) -> (Vec<u8>, Vec<u8>) {
    train(cfg, &data.train, &TrainOptions { out_dir: Some(dir.to_path_buf()), ..TrainOptions::default() }).unwrap();
    (std::fs::read(dir.join(CHECKPOINT_FILE)).unwrap(), std::fs::read(dir.join(LOG_FILE)).unwrap())
}

fn c10_determinism() -> Outcome {
    let cfg = RunConfig { epochs: 2, train_scenes: 16, test_scenes: 4, lr_decay_epochs: vec![1], ..RunConfig::desk() };
    let data = SplitData::generate(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let a = run_twice(&cfg, &data, &tmp.path().join("a"));
    let b = run_twice(&cfg, &data, &tmp.path().join("b"));
    let log_lines = String::from_utf8_lossy(&a.1).lines().count();
    outcome(
        a.0 == b.0 && a.1 == b.1 && log_lines == 2,
        format!("checkpoint {} bytes identical: {}; log ({log_lines} records) identical: {}", a.0.len(), a.0 == b.0, a.1 == b.1),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("HOI_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "assignment normalization", 10, c1_assignment_normalization),
        (2, "token-budget invariant", 30, c2_token_budget),
        (3, "hungarian oracle", 60, c3_hungarian_oracle),
        (4, "gradient suite", 300, c4_gradients),
        (5, "stop-gradient contract", 60, c5_stop_gradient),
        (6, "complexity claims", 5, c6_complexity),
        (7, "desk-scale learnability", 1800, c7_desk_learnability),
        (8, "ablation directions", 0, c8_ablation_directions),
        (9, "evaluation oracle", 60, c9_evaluation_oracle),
        (10, "determinism", 0, c10_determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, limit, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let o = within(limit, elapsed, o);
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known failure)",
            (false, true) => "FAIL (known, see notes)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {name:<26} {tag}: {} [{:.1}s]", o.detail, elapsed.as_secs_f64());
        if o.pass == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
