//! `hoi` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hoi_core::complexity::{self, StageConstants, BASELINE_QUERIES, CAVEAT};
use hoi_core::config::RunConfig;
use hoi_core::evaluate::{ablate, cluster_maps, evaluate};
use hoi_core::model::HoiModel;
use hoi_core::scenes::generate_split;
use hoi_core::train::{load_model, train, SplitData, TrainOptions, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "hoi", version, about = "Agglomerative HOI detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base preset: paper, desk, ablation or tiny.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Directory holding train.jsonl / test.jsonl; scenes are generated when absent.
    #[arg(long, env = "HOI_DATA_ROOT")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train a model; writes checkpoint.bin, train_log.jsonl and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the test (or train) split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate across the values of one config axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// patterns, centers, metric or cue_switch.
        #[arg(long)]
        axis: String,
        /// Values separated by `;` (e.g. `1;3`, `4,8;2,4`, `ce;weighted`).
        #[arg(long)]
        values: String,
        /// Number of seeds, counted up from the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Attention FLOP counts of the baseline and the agglomerative pipeline.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Square input resolution in pixels.
        #[arg(long, default_value_t = 640)]
        resolution: u64,
        /// Token width (defaults to the config `dim`).
        #[arg(long)]
        dim: Option<u64>,
        /// Baseline query count.
        #[arg(long, default_value_t = BASELINE_QUERIES)]
        queries: u64,
        /// Resolution sweep `start:stop:step`, written as CSV.
        #[arg(long)]
        sweep: Option<String>,
        /// Also write an SVG plot of the sweep.
        #[arg(long)]
        plot: bool,
    },
    /// Print stage-wise cluster ownership maps for one test scene.
    InspectClusters {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to inspect; an untrained model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test scene index.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let base = RunConfig::preset(&c.preset)?;
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse_with_base(&text, base)?
        }
        None => base,
    };
    for kv in &c.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not key=value");
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, data } => {
            let cfg = resolve_config(&common)?;
            let dir = common.out.or(data.data).unwrap_or_else(|| PathBuf::from("data"));
            let split = SplitData::generate(&cfg)?;
            split.save(&cfg, &dir)?;
            println!("wrote {} train / {} test scenes to {}", split.train.len(), split.test.len(), dir.display());
        }
        Command::Train { common, data, resume, stop_after } => {
            let cfg = resolve_config(&common)?;
            let split = SplitData::load_or_generate(&cfg, data.data.as_deref())?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("runs/train"));
            let outcome = train(&cfg, &split.train, &TrainOptions {
                out_dir: Some(out.clone()),
                resume,
                stop_after,
            })?;
            if let Some(last) = outcome.records.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss.total);
            }
            println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { common, data, checkpoint, split } => {
            let train_split = match split.as_str() {
                "test" => false,
                "train" => true,
                other => bail!("unknown split `{other}` (expected test or train)"),
            };
            let model = load_model(&checkpoint)?;
            // Scene settings come from the checkpoint unless a config is given.
            let mut cfg = match common.config {
                Some(_) => resolve_config(&common)?,
                None => model.cfg.clone(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let scenes = match data.data.as_deref() {
                Some(d) => {
                    let s = SplitData::load_or_generate(&cfg, Some(d))?;
                    if train_split { s.train } else { s.test }
                }
                None => generate_split(&cfg, !train_split)?,
            };
            let report = evaluate(&model, &scenes)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(out) = common.out {
                write(&out.join("eval.json"), &json)?;
            }
        }
        Command::Ablate { common, axis, values, seeds } => {
            let cfg = resolve_config(&common)?;
            let values: Vec<String> = values.split(';').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let table = ablate(&cfg, &axis, &values, &seeds, common.out.as_deref())?;
            let md = table.to_markdown();
            print!("{md}");
            if let Some(out) = common.out {
                write(&out.join(format!("ablation_{axis}.md")), &md)?;
                write(&out.join(format!("ablation_{axis}.json")), &serde_json::to_string_pretty(&table)?)?;
            }
        }
        Command::Flops { common, resolution, dim, queries, sweep, plot } => {
            let cfg = resolve_config(&common)?;
            let dim = dim.unwrap_or(cfg.dim as u64);
            let stride = cfg.stride_total() as u64;
            let stages = StageConstants {
                stage1_human: cfg.centers_stage1.0 as u64,
                stage1_object: cfg.centers_stage1.1 as u64,
                stage2_human: cfg.centers_stage2.0 as u64,
                stage2_object: cfg.centers_stage2.1 as u64,
                patterns: cfg.patterns as u64,
            };
            let side = resolution / stride;
            let n = side * side;
            let base = complexity::omega_baseline(n, dim, queries);
            let aggl = complexity::omega_agglomerative_with(n, dim, stages.queries(), stages);
            let cross = complexity::crossover(dim, queries, stages)?;
            for r in [&base, &aggl] {
                println!("{:?}: N={} C={} Nq={} total={}", r.architecture, r.tokens, r.dim, r.queries, r.total);
                for t in &r.terms {
                    println!("  {:<12} {}", t.name, t.flops);
                }
            }
            println!(
                "difference = {}N^2 + {}N + {}; roots {:?}; agglomerative cheaper for all N >= 1: {}",
                cross.a, cross.b, cross.c, cross.roots, cross.agglomerative_cheaper_for_all
            );
            println!("note: {CAVEAT}");
            let summary = serde_json::json!({ "baseline": base, "agglomerative": aggl, "crossover": cross });
            if let Some(out) = &common.out {
                write(&out.join("flops.json"), &serde_json::to_string_pretty(&summary)?)?;
            }
            if let Some(spec) = sweep {
                let (start, stop, step) = complexity::parse_sweep(&spec)?;
                let rows = complexity::sweep(start, stop, step, stride, dim, queries, stages);
                let out = common.out.unwrap_or_else(|| PathBuf::from("."));
                write(&out.join("flops_sweep.csv"), &complexity::sweep_csv(&rows))?;
                if plot {
                    write(&out.join("flops_sweep.svg"), &complexity::sweep_svg(&rows))?;
                }
                println!("sweep of {} resolutions written to {}", rows.len(), out.display());
            } else if plot {
                bail!("--plot needs --sweep");
            }
        }
        Command::InspectClusters { common, checkpoint, scene } => {
            let model = match &checkpoint {
                Some(p) => load_model(p)?,
                None => HoiModel::with_default_text(&resolve_config(&common)?)?,
            };
            let test = generate_split(&model.cfg, true)?;
            let Some(sample) = test.get(scene) else {
                bail!("scene {scene} out of range ({} test scenes)", test.len());
            };
            let maps = cluster_maps(&model, sample)?;
            let text = maps.render();
            print!("{text}");
            if let Some(out) = common.out {
                write(&out.join(format!("clusters_scene{scene}.txt")), &text)?;
                write(&out.join(format!("clusters_scene{scene}.json")), &serde_json::to_string_pretty(&maps)?)?;
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
