//! Test-split evaluation, cluster inspection and one-axis ablation sweeps.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::encoder::AssignMode;
use crate::error::{Error, Result};
use crate::metrics::{cell_owners, compose_assignments, coverage_rate, hoi_map, instance_ap50, instance_mask, REFERENCE_PART_COVERAGE};
use crate::model::{ground_truth, HoiModel, Predictions};
use crate::nn::to_f64_vec;
use crate::scenes::SceneSample;
use crate::train::{train, SplitData, TrainOptions};

pub const PROTOCOL_NOTE: &str = "default protocol only: synthetic test scenes always contain the target objects";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub hoi_map: f64,
    pub per_verb_ap: Vec<Option<f64>>,
    pub excluded_verbs: Vec<String>,
    pub instance_ap50: f64,
    pub per_category_ap50: Vec<Option<f64>>,
    /// Mean fraction of a matched instance's grid cells owned by its token.
    pub mean_coverage: Option<f64>,
    pub reference_part_coverage: f64,
    pub protocol: &'static str,
}

/// Coverage of every GT instance by the stage-2 token it was matched to.
fn coverage(model: &HoiModel, out: &crate::model::ForwardOutput, scenes: &[&SceneSample]) -> Result<Vec<f64>> {
    let loss = model.loss(out, scenes)?;
    let d = &out.diagnostics;
    let cells = d.grid_h * d.grid_w;
    let (_, n1, _) = d.stage1.assignment.dims3()?;
    let (_, n2, _) = d.stage2.assignment.dims3()?;
    let nh = out.encoded.human.dim(1)?;
    let mut rates = Vec::new();
    for (b, s) in scenes.iter().enumerate() {
        let a1 = to_f64_vec(&d.stage1.assignment.get(b)?)?;
        let a2 = to_f64_vec(&d.stage2.assignment.get(b)?)?;
        let owners = cell_owners(&compose_assignments(&a1, &a2, n1, n2, cells), n2, cells);
        let m = &loss.matches[b];
        for (g, &k) in m.humans.matched().iter().enumerate() {
            rates.extend(coverage_rate(&owners, &instance_mask(&s.humans[g].bbox, d.grid_h, d.grid_w), k));
        }
        for (g, &k) in m.objects.matched().iter().enumerate() {
            rates.extend(coverage_rate(&owners, &instance_mask(&s.objects[g].bbox, d.grid_h, d.grid_w), nh + k));
        }
    }
    Ok(rates)
}

/// Noise-free evaluation over `scenes` in batches of `cfg.batch_size`.
pub fn evaluate(model: &HoiModel, scenes: &[SceneSample]) -> Result<EvalReport> {
    let cfg = &model.cfg;
    let mut preds = Predictions::default();
    let mut rates = Vec::new();
    let batch = cfg.batch_size.max(1);
    for (k, chunk) in scenes.chunks(batch).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let out = model.forward_scenes(&refs, AssignMode::Eval)?;
        let p = model.predict(&out, k * batch)?;
        preds.hoi.extend(p.hoi);
        preds.detections.extend(p.detections);
        rates.extend(coverage(model, &out, &refs)?);
    }
    let (hoi_gt, det_gt) = ground_truth(scenes, 0);
    let hoi = hoi_map(&preds.hoi, &hoi_gt, cfg.num_verbs(), 0.5);
    let (ap50, per_cat) = instance_ap50(&preds.detections, &det_gt, cfg.num_object_classes() + 1);
    Ok(EvalReport {
        scenes: scenes.len(),
        hoi_map: hoi.map,
        per_verb_ap: hoi.per_verb,
        excluded_verbs: hoi.excluded_verbs.iter().map(|&v| cfg.verbs[v].clone()).collect(),
        instance_ap50: ap50,
        per_category_ap50: per_cat,
        mean_coverage: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        reference_part_coverage: REFERENCE_PART_COVERAGE,
        protocol: PROTOCOL_NOTE,
    })
}

/// Stage-wise argmax owners of every grid cell for one scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterMaps {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Stage-1 center owning each cell.
    pub stage1: Vec<usize>,
    /// Stage-2 instance token owning each cell (through stage 1).
    pub stage2: Vec<usize>,
    pub stage2_humans: usize,
}

pub fn cluster_maps(model: &HoiModel, scene: &SceneSample) -> Result<ClusterMaps> {
    let out = model.forward_scenes(&[scene], AssignMode::Eval)?;
    let d = &out.diagnostics;
    let cells = d.grid_h * d.grid_w;
    let (_, n1, _) = d.stage1.assignment.dims3()?;
    let (_, n2, _) = d.stage2.assignment.dims3()?;
    let a1 = to_f64_vec(&d.stage1.assignment.get(0)?)?;
    let a2 = to_f64_vec(&d.stage2.assignment.get(0)?)?;
    Ok(ClusterMaps {
        grid_h: d.grid_h,
        grid_w: d.grid_w,
        stage1: cell_owners(&a1, n1, cells),
        stage2: cell_owners(&compose_assignments(&a1, &a2, n1, n2, cells), n2, cells),
        stage2_humans: out.encoded.human.dim(1)?,
    })
}

impl ClusterMaps {
    /// Text grids; stage-2 human tokens print as `H<k>`, object tokens as `O<k>`.
    pub fn render(&self) -> String {
        let mut s = String::from("stage 1 centers\n");
        for r in 0..self.grid_h {
            let row: Vec<String> = (0..self.grid_w).map(|c| format!("{:>3}", self.stage1[r * self.grid_w + c])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s.push_str("stage 2 instance tokens\n");
        for r in 0..self.grid_h {
            let row: Vec<String> = (0..self.grid_w)
                .map(|c| {
                    let k = self.stage2[r * self.grid_w + c];
                    if k < self.stage2_humans {
                        format!("H{k:<2}")
                    } else {
                        format!("O{:<2}", k - self.stage2_humans)
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// Config keys an ablation may vary.
pub const ABLATION_AXES: [&str; 4] = ["patterns", "centers", "metric", "cue_switch"];

fn apply_axis(cfg: &RunConfig, axis: &str, value: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        "patterns" => c.set("patterns", value)?,
        "centers" => c.set("centers_stage2", value)?,
        "metric" => c.set("metric", value)?,
        "cue_switch" => c.set("cue_switch", value)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation axis `{axis}` (expected one of {})",
                ABLATION_AXES.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub hoi_map: f64,
    pub instance_ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub runs: Vec<AblationRun>,
    pub mean_map: f64,
    pub mean_ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | seeds | HOI mAP | instance AP50 |\n|---|---|---|---|\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", r.value, r.runs.len(), r.mean_map, r.mean_ap50);
        }
        s
    }
}

/// Trains and evaluates once per `(value, seed)`; scenes are regenerated per
/// seed so every arm of a seed sees the same data. Runs are written below
/// `out_dir/<axis>_<value>_seed<seed>` when given.
pub fn ablate(cfg: &RunConfig, axis: &str, values: &[String], seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and one seed".into()));
    }
    let arms = values.iter().map(|v| apply_axis(cfg, axis, v)).collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<AblationRow> = values
        .iter()
        .map(|v| AblationRow {
            value: v.clone(),
            runs: Vec::new(),
            mean_map: 0.0,
            mean_ap50: 0.0,
        })
        .collect();
    for &seed in seeds {
        let data = SplitData::generate(&RunConfig { seed, ..cfg.clone() })?;
        for (k, arm) in arms.iter().enumerate() {
            let arm = RunConfig { seed, ..arm.clone() };
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("{axis}_{}_seed{seed}", values[k].replace([',', ' ', '(', ')'], "")))),
                ..TrainOptions::default()
            };
            let outcome = train(&arm, &data.train, &opts)?;
            let report = evaluate(&outcome.model, &data.test)?;
            log::info!("ablation {axis}={} seed {seed}: mAP {:.4} AP50 {:.4}", values[k], report.hoi_map, report.instance_ap50);
            rows[k].runs.push(AblationRun {
                seed,
                hoi_map: report.hoi_map,
                instance_ap50: report.instance_ap50,
            });
        }
    }
    for r in &mut rows {
        let n = r.runs.len() as f64;
        r.mean_map = r.runs.iter().map(|x| x.hoi_map).sum::<f64>() / n;
        r.mean_ap50 = r.runs.iter().map(|x| x.instance_ap50).sum::<f64>() / n;
    }
    Ok(AblationTable { axis: axis.to_string(), rows })
}
