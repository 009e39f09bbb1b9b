use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use deformsynth::conditions::{generate_parameters, Condition, Difficulty};
use deformsynth::config::RunConfig;
use deformsynth::dataset::{generate_data, read_manifest, GenerateSpec};
use deformsynth::detector::{external, BuiltinDetector, DetectorSpec};
use deformsynth::eval::{evaluate_predictions, Detection, EvalConfig};
use deformsynth::orchestrator::{build_standard_test_set, RunContext, RUN_LOG};
use deformsynth::procedural::ProceduralAssets;
use deformsynth::{seed, Error, Result};

/// Synthetic data for deformable textured objects, and the experiments
/// that train detectors on it.
#[derive(Parser)]
#[command(name = "deformsynth", version)]
struct Cli {
    /// Worker threads for rendering and detection (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Asset folder holding textures/, backgrounds/ and optionally occluders/.
    #[arg(long)]
    assets: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Thresholds {
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value_t = 0.8)]
    conf: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render `count` samples per object for one condition and difficulty.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_condition)]
        condition: Condition,
        #[arg(long, value_parser = parse_difficulty, default_value = "easy")]
        difficulty: Difficulty,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
    },
    /// Score a detections file against a manifest.
    Eval {
        /// JSON array or JSON lines of {image_id, class_id, box, score}.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Run the active-learning loop.
    ActiveLearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: Option<DetectorSpec>,
        /// Restrict the schedule to one condition.
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
        /// Restrict the schedule to one difficulty.
        #[arg(long, value_parser = parse_difficulty)]
        difficulty: Option<Difficulty>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        conf: Option<f64>,
        /// Continue from the run log found in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the fixed-length learnability protocol for one condition.
    Learnability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: Option<DetectorSpec>,
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
        #[arg(long, value_parser = parse_difficulty)]
        difficulty: Option<Difficulty>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Render the standard test set of the active-learning configuration.
    StandardTestset {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the builtin detector over the worker protocol on stdin/stdout.
    ServeWorker {
        /// Directory for the worker's models.
        #[arg(long)]
        models: PathBuf,
    },
    /// Write a procedural asset folder usable with --assets.
    DemoAssets {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = 4)]
        backgrounds: usize,
        #[arg(long, default_value_t = 3)]
        occluders: usize,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 480)]
        height: usize,
    },
}

fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_difficulty(s: &str) -> std::result::Result<Difficulty, String> {
    match s.parse() {
        Ok(Difficulty::Canonical) => Err("canonical is not a schedulable difficulty".into()),
        Ok(d) => Ok(d),
        Err(e) => Err(Error::to_string(&e)),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(a) = &common.assets {
        cfg.assets.root = Some(a.clone());
        cfg.assets.textures = None;
        cfg.assets.backgrounds = None;
        cfg.assets.occluders = None;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn override_eval(eval: &mut EvalConfig, iou: Option<f64>, conf: Option<f64>) {
    if let Some(v) = iou {
        eval.iou_threshold = v;
    }
    if let Some(v) = conf {
        eval.confidence_threshold = v;
    }
}

fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        });
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<Value> {
    match cmd {
        Cmd::Gen {
            common,
            condition,
            difficulty,
            count,
        } => {
            let cfg = load_config(&common)?;
            let out = cfg.out_dir()?;
            let registry = cfg.assets.load(cfg.render.image_size)?;
            registry.validate(condition == Condition::ExternalOcclusion)?;
            let base = cfg.active_learning.master_seed;
            let thetas = generate_parameters(
                condition,
                difficulty,
                count as usize,
                seed::derive(base, &["gen".into()]),
            )?;
            let objects = if cfg.active_learning.objects.is_empty() {
                registry.object_ids()
            } else {
                cfg.active_learning.objects.clone()
            };
            let spec = GenerateSpec {
                prefix: format!("{}-{}-", condition.tag(), difficulty.name()),
                ..GenerateSpec::default()
            };
            let m = generate_data(
                &thetas,
                &objects,
                &registry,
                out,
                seed::derive(base, &["gen-render".into()]),
                &cfg.render,
                &spec,
            )?;
            Ok(json!({ "manifest": out.join(&spec.manifest_name), "samples": m.len() }))
        }
        Cmd::Eval {
            detections,
            manifest,
            thresholds,
        } => {
            let eval = EvalConfig {
                iou_threshold: thresholds.iou,
                confidence_threshold: thresholds.conf,
            };
            eval.validate()?;
            let dets = read_detections(&detections)?;
            let m = read_manifest(&manifest)?;
            Ok(serde_json::to_value(evaluate_predictions(
                &dets,
                &m.ground_truth(),
                &eval,
            )?)?)
        }
        Cmd::ActiveLearn {
            common,
            detector,
            condition,
            difficulty,
            iou,
            conf,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = detector {
                cfg.detector = d;
            }
            let al = &mut cfg.active_learning;
            if let Some(c) = condition {
                al.conditions = vec![c];
            }
            if let Some(d) = difficulty {
                al.difficulties = vec![d];
            }
            override_eval(&mut al.eval, iou, conf);
            let out = cfg.out_dir()?.to_path_buf();
            let (best, log) = cfg.run_active_learning(resume)?;
            let blocks: Vec<Value> = log
                .blocks
                .iter()
                .map(|b| {
                    json!({
                        "condition": b.condition, "difficulty": b.difficulty,
                        "increments": b.increments, "best_k": b.best_k,
                        "best_map": b.best_map, "reason": b.reason,
                    })
                })
                .collect();
            Ok(json!({
                "final_model": best,
                "increments": log.records.len(),
                "blocks": blocks,
                "run_log": out.join(RUN_LOG),
            }))
        }
        Cmd::Learnability {
            common,
            detector,
            condition,
            difficulty,
            iou,
            conf,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = detector {
                cfg.detector = d;
            }
            let condition = condition
                .or(cfg.condition)
                .ok_or_else(|| Error::InvalidArgument("learnability needs --condition".into()))?;
            let lc = &mut cfg.learnability;
            if let Some(d) = difficulty {
                lc.difficulties = vec![d];
            }
            override_eval(&mut lc.eval, iou, conf);
            let out = cfg.out_dir()?.to_path_buf();
            let r = cfg.run_learnability(condition)?;
            Ok(json!({
                "condition": r.condition,
                "difficulties": r.difficulties,
                "scores": r.scores,
                "final_model": r.final_model,
                "run_log": out.join(format!("learnability-{}", condition.tag())).join(RUN_LOG),
            }))
        }
        Cmd::StandardTestset { common } => {
            let cfg = load_config(&common)?;
            let out = cfg.out_dir()?;
            let registry = cfg.assets.load(cfg.render.image_size)?;
            let ctx = RunContext {
                registry: &registry,
                render: &cfg.render,
                out_dir: out,
            };
            let (m, path) = build_standard_test_set(&cfg.active_learning, &ctx)?;
            Ok(json!({ "manifest": path, "samples": m.len() }))
        }
        Cmd::ServeWorker { models } => {
            let mut det = BuiltinDetector::new(&models);
            external::serve(io::stdin().lock(), io::stdout().lock(), &mut det)?;
            Ok(Value::Null)
        }
        Cmd::DemoAssets {
            out,
            seed,
            objects,
            backgrounds,
            occluders,
            width,
            height,
        } => {
            let spec = ProceduralAssets {
                objects,
                backgrounds,
                occluders,
                image_size: (width, height),
                ..ProceduralAssets::default()
            };
            if objects == 0 || backgrounds == 0 {
                return Err(Error::InvalidArgument(
                    "need at least one object and one background".into(),
                ));
            }
            spec.write(&out, seed)?;
            Ok(json!({ "assets": out }))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::UnknownCondition(_) | Error::UnknownDifficulty(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            let mut out = io::stdout().lock();
            let _ = serde_json::to_writer_pretty(&mut out, &v);
            let _ = writeln!(out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
