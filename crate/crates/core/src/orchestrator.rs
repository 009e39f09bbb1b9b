//! Experiment drivers: the active-learning loop with its windowed plateau
//! stop, and the fixed-length learnability protocol.
//!
//! Both loops are sequential. Data generation and detection inside one
//! increment fan out through rayon; only one training call is ever running.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditions::{generate_parameters, Condition, Difficulty};
use crate::dataset::{
    generate_data, read_manifest, render_jobs, write_manifest, AssetRegistry, DatasetManifest, GenerateSpec,
    RenderSettings, SampleJob, Split,
};
use crate::detector::{Detector, ModelHandle, TrainRequest, TrainStep};
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, EvalConfig, MapScore};
use crate::seed;

pub const RUN_LOG: &str = "runlog.jsonl";
pub const MANIFEST: &str = "manifest.jsonl";
/// Cumulative training manifest written under the increment policy.
pub const CUMULATIVE: &str = "cumulative.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// `best_index` counts from the start of the final `M + N` window.
    Stop {
        best_index: usize,
    },
}

/// Index of the earliest maximum.
fn earliest_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Plateau test over the block's score history: stop once the best of the
/// last `m` scores is within `tau` of the best of the `n` scores before them.
pub fn stopping_check(p: &[f64], m: usize, n: usize, tau: f64) -> StopDecision {
    if m == 0 || n == 0 || p.len() < m + n {
        return StopDecision::Continue;
    }
    let window = &p[p.len() - m - n..];
    let max = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (prior, recent) = window.split_at(n);
    if (max(recent) - max(prior)).abs() <= tau {
        StopDecision::Stop {
            best_index: earliest_argmax(window),
        }
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainsetPolicy {
    /// Fresh S_tr every increment.
    #[default]
    Reset,
    /// S_tr grows by each increment's samples.
    Increment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub conditions: Vec<Condition>,
    pub difficulties: Vec<Difficulty>,
    /// Recent-window size.
    #[serde(rename = "M")]
    pub recent_window: usize,
    /// Prior-window size.
    #[serde(rename = "N")]
    pub prior_window: usize,
    pub tau: f64,
    /// Training images per object per increment.
    pub m: usize,
    /// Test images per (condition, difficulty) per object.
    pub n: usize,
    /// Training budget per increment.
    pub t: usize,
    /// Empty means every object of the registry.
    pub objects: Vec<u32>,
    pub trainset_policy: TrainsetPolicy,
    pub master_seed: u64,
    /// Initialise every increment from the block's starting model instead
    /// of the previous increment's model.
    pub train_from_block_start: bool,
    pub eval: EvalConfig,
    /// Safety cap on increments per block; `None` runs until the plateau.
    pub max_increments: Option<usize>,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            difficulties: Difficulty::TRAINING.to_vec(),
            recent_window: 3,
            prior_window: 8,
            tau: 0.02,
            m: 10,
            n: 30,
            t: 1000,
            objects: Vec::new(),
            trainset_policy: TrainsetPolicy::Reset,
            master_seed: 0,
            train_from_block_start: false,
            eval: EvalConfig::default(),
            max_increments: None,
        }
    }
}

fn check_difficulties(ds: &[Difficulty]) -> Result<()> {
    if ds.is_empty() || ds.contains(&Difficulty::Canonical) {
        return Err(Error::invalid(
            "difficulties must be a non-empty list of easy/medium/hard",
        ));
    }
    Ok(())
}

fn resolve_objects(objects: &[u32], registry: &AssetRegistry) -> Result<Vec<u32>> {
    let objs = if objects.is_empty() {
        registry.object_ids()
    } else {
        objects.to_vec()
    };
    if objs.is_empty() {
        return Err(Error::AssetMissing("no object textures".into()));
    }
    for &o in &objs {
        registry.texture(o)?;
    }
    Ok(objs)
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recent_window < 1 || self.prior_window < 1 {
            return Err(Error::invalid("M and N must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.m < 1 || self.n < 1 || self.t < 1 {
            return Err(Error::invalid("m, n and t must be at least 1"));
        }
        if self.conditions.is_empty() {
            return Err(Error::invalid("no conditions scheduled"));
        }
        check_difficulties(&self.difficulties)?;
        if self.max_increments == Some(0) {
            return Err(Error::invalid("max_increments must be at least 1"));
        }
        self.eval.validate()
    }
}

/// Where a run reads assets from and writes everything it produces.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub registry: &'a AssetRegistry,
    pub render: &'a RenderSettings,
    pub out_dir: &'a Path,
}

/// One trained and evaluated increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRecord {
    pub condition: Condition,
    pub difficulty: Difficulty,
    pub k: usize,
    pub model_id: String,
    pub map: MapScore,
    pub train_manifest: PathBuf,
    pub train_size: usize,
    /// Seconds spent on generation, training and evaluation.
    pub wall_time: f64,
    pub model: ModelHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockEnd {
    Plateau,
    /// `max_increments` reached before a plateau.
    Capped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub condition: Condition,
    pub difficulty: Difficulty,
    pub increments: usize,
    pub best_k: usize,
    pub best_map: f64,
    pub reason: BlockEnd,
    pub best_model: ModelHandle,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Increment(IncrementRecord),
    Block(BlockSummary),
    Final { model: ModelHandle },
}

// Derived internally tagged decoding buffers map keys as strings, which
// breaks the integer-keyed per-class AP map, so dispatch on the tag by hand.
impl<'de> Deserialize<'de> for LogEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        struct Final {
            model: ModelHandle,
        }
        let mut v = serde_json::Value::deserialize(d)?;
        let tag = v
            .as_object_mut()
            .and_then(|o| o.remove("event"))
            .ok_or_else(|| D::Error::missing_field("event"))?;
        match tag.as_str() {
            Some("increment") => serde_json::from_value(v).map(LogEvent::Increment),
            Some("block") => serde_json::from_value(v).map(LogEvent::Block),
            Some("final") => serde_json::from_value::<Final>(v).map(|f| LogEvent::Final { model: f.model }),
            _ => {
                return Err(D::Error::unknown_variant(
                    &tag.to_string(),
                    &["increment", "block", "final"],
                ))
            }
        }
        .map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<IncrementRecord>,
    pub blocks: Vec<BlockSummary>,
    pub final_model: Option<ModelHandle>,
}

/// Parses log events; a torn last line from an interrupted write is
/// ignored, anything else malformed is an error.
fn read_events(path: &Path) -> Result<Vec<LogEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.len();
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) if i + 1 == last => break,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}

impl RunLog {
    pub fn read(path: &Path) -> Result<Self> {
        let mut log = RunLog::default();
        for ev in read_events(path)? {
            log.push(ev);
        }
        Ok(log)
    }

    fn push(&mut self, ev: LogEvent) {
        match ev {
            LogEvent::Increment(r) => self.records.push(r),
            LogEvent::Block(b) => self.blocks.push(b),
            LogEvent::Final { model } => self.final_model = Some(model),
        }
    }

    /// Scores of one block in increment order.
    pub fn scores(&self, c: Condition, d: Difficulty) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.condition == c && r.difficulty == d)
            .map(|r| r.map.map)
            .collect()
    }
}

/// Appends events to the log file as they happen, keeping the in-memory copy.
struct LogWriter {
    path: PathBuf,
    file: File,
    log: RunLog,
}

impl LogWriter {
    fn open(path: &Path, resume: bool) -> Result<Self> {
        let events = if resume && path.exists() {
            read_events(path)?
        } else {
            Vec::new()
        };
        // Rewrite the parsed events so a torn tail is dropped.
        let mut buf = Vec::new();
        for ev in &events {
            serde_json::to_writer(&mut buf, ev)?;
            buf.push(b'\n');
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = RunLog::default();
        for ev in events {
            log.push(ev);
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            log,
        })
    }

    fn append(&mut self, ev: LogEvent) -> Result<()> {
        let mut line = serde_json::to_vec(&ev)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.log.push(ev);
        Ok(())
    }
}

/// Samples of the standard test set: `n` per (condition, difficulty,
/// object), all other conditions canonical.
pub fn standard_test_jobs(cfg: &ALConfig, objects: &[u32]) -> Result<Vec<SampleJob>> {
    if cfg.n < 1 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_difficulties(&cfg.difficulties)?;
    let mut jobs = Vec::new();
    for &c in &cfg.conditions {
        for &d in &cfg.difficulties {
            let tags =
                |kind: &'static str| seed::derive(cfg.master_seed, &[kind.into(), c.tag().into(), d.name().into()]);
            let thetas = generate_parameters(c, d, cfg.n, tags("test"))?;
            let render_seed = tags("test-render");
            for (i, theta) in thetas.into_iter().enumerate() {
                for &obj in objects {
                    jobs.push(SampleJob {
                        image_id: format!("te-{}-{}-{i:05}-o{obj}", c.tag(), d.name()),
                        theta,
                        object_id: obj,
                        seed: seed::derive(render_seed, &[i.into(), obj.into()]),
                    });
                }
            }
        }
    }
    Ok(jobs)
}

/// Renders (or reloads, when already on disk) the standard test set under
/// `out_dir/test`.
pub fn build_standard_test_set(cfg: &ALConfig, ctx: &RunContext<'_>) -> Result<(DatasetManifest, PathBuf)> {
    let objects = resolve_objects(&cfg.objects, ctx.registry)?;
    let jobs = standard_test_jobs(cfg, &objects)?;
    let dir = ctx.out_dir.join("test");
    let path = dir.join(MANIFEST);
    if path.exists() {
        let m = read_manifest(&path)?;
        let same = m.len() == jobs.len()
            && m.records
                .iter()
                .zip(&jobs)
                .all(|(r, j)| r.image_id == j.image_id && r.seed == j.seed);
        if same {
            return Ok((m, path));
        }
    }
    ctx.registry
        .validate(cfg.conditions.contains(&Condition::ExternalOcclusion))?;
    let m = render_jobs(&jobs, ctx.registry, ctx.render, &dir, Split::Test)?;
    write_manifest(&m, &path)?;
    Ok((m, path))
}

/// Training data of one increment: `m` samples per object for `(c, d)`.
fn increment_data(
    cfg_seed: u64,
    c: Condition,
    d: Difficulty,
    k: usize,
    m: usize,
    objects: &[u32],
    ctx: &RunContext<'_>,
) -> Result<(DatasetManifest, PathBuf)> {
    let tags = |kind: &'static str| seed::derive(cfg_seed, &[kind.into(), c.tag().into(), d.name().into(), k.into()]);
    let thetas = generate_parameters(c, d, m, tags("train"))?;
    let dir = ctx
        .out_dir
        .join("train")
        .join(format!("{}-{}-k{k:03}", c.tag(), d.name()));
    let spec = GenerateSpec {
        prefix: format!("tr-{}-{}-k{k:03}-", c.tag(), d.name()),
        split: Split::Train,
        manifest_name: MANIFEST.into(),
    };
    let manifest = generate_data(
        &thetas,
        objects,
        ctx.registry,
        &dir,
        tags("train-render"),
        ctx.render,
        &spec,
    )?;
    Ok((manifest, dir.join(MANIFEST)))
}

/// Writes the union of `acc` and `fresh` next to `fresh`'s manifest.
fn accumulate(acc: &mut DatasetManifest, fresh: &DatasetManifest, fresh_path: &Path) -> Result<PathBuf> {
    let dir = fresh_path.parent().unwrap_or(Path::new("."));
    acc.rebase(dir);
    acc.extend_from(fresh);
    acc.check_unique_ids()?;
    let path = dir.join(CUMULATIVE);
    write_manifest(acc, &path)?;
    // Relative paths now resolve against the cumulative file's directory.
    *acc = read_manifest(&path)?;
    Ok(path)
}

fn evaluate(
    detector: &mut dyn Detector,
    model: &ModelHandle,
    test: &DatasetManifest,
    test_path: &Path,
    eval: &EvalConfig,
) -> Result<MapScore> {
    let dets = detector.detect(model, test, test_path, eval.confidence_threshold)?;
    evaluate_predictions(&dets, &test.ground_truth(), eval)
}

fn model_id(c: Condition, d: Difficulty, k: usize) -> String {
    format!("{}-{}-k{k:03}", c.tag(), d.name())
}

/// Active learning over every scheduled (condition, difficulty) block.
///
/// Each event is appended to `out_dir/runlog.jsonl` as soon as it happens,
/// so a failure leaves a usable partial log. With `resume`, completed
/// increments found in that log are not redone.
pub fn active_learn(
    cfg: &ALConfig,
    detector: &mut dyn Detector,
    ctx: &RunContext<'_>,
    resume: bool,
) -> Result<(ModelHandle, RunLog)> {
    cfg.validate()?;
    let objects = resolve_objects(&cfg.objects, ctx.registry)?;
    ctx.registry
        .validate(cfg.conditions.contains(&Condition::ExternalOcclusion))?;
    fs::create_dir_all(ctx.out_dir).map_err(|e| Error::io(ctx.out_dir, e))?;
    let mut writer = LogWriter::open(&ctx.out_dir.join(RUN_LOG), resume)?;
    if let Some(m) = &writer.log.final_model {
        return Ok((m.clone(), writer.log));
    }
    let (test, test_path) = build_standard_test_set(cfg, ctx)?;

    let mut omega_in: Option<ModelHandle> = None;
    for &c in &cfg.conditions {
        for &d in &cfg.difficulties {
            if let Some(b) = writer.log.blocks.iter().find(|b| b.condition == c && b.difficulty == d) {
                omega_in = Some(b.best_model.clone());
                continue;
            }
            let done: Vec<IncrementRecord> = writer
                .log
                .records
                .iter()
                .filter(|r| r.condition == c && r.difficulty == d)
                .cloned()
                .collect();
            let summary = run_block(
                cfg,
                detector,
                ctx,
                &objects,
                (c, d),
                omega_in.as_ref(),
                done,
                &test,
                &test_path,
                &mut writer,
            )?;
            omega_in = Some(summary.best_model.clone());
            writer.append(LogEvent::Block(summary))?;
        }
    }
    let final_model = omega_in.ok_or_else(|| Error::invalid("no block was run"))?;
    writer.append(LogEvent::Final {
        model: final_model.clone(),
    })?;
    Ok((final_model, writer.log))
}

#[allow(clippy::too_many_arguments)]
fn run_block(
    cfg: &ALConfig,
    detector: &mut dyn Detector,
    ctx: &RunContext<'_>,
    objects: &[u32],
    (c, d): (Condition, Difficulty),
    omega_in: Option<&ModelHandle>,
    done: Vec<IncrementRecord>,
    test: &DatasetManifest,
    test_path: &Path,
    writer: &mut LogWriter,
) -> Result<BlockSummary> {
    let (mw, nw) = (cfg.recent_window, cfg.prior_window);
    let mut scores: Vec<f64> = done.iter().map(|r| r.map.map).collect();
    let mut models: Vec<ModelHandle> = done.iter().map(|r| r.model.clone()).collect();
    let mut acc = match (cfg.trainset_policy, done.last()) {
        (TrainsetPolicy::Increment, Some(r)) => read_manifest(&r.train_manifest)?,
        _ => DatasetManifest::default(),
    };

    let finish = |scores: &[f64], models: &[ModelHandle], reason: BlockEnd, best_in_window: usize| {
        let start = scores.len().saturating_sub(mw + nw);
        let best = start + best_in_window;
        BlockSummary {
            condition: c,
            difficulty: d,
            increments: scores.len(),
            best_k: best + 1,
            best_map: scores[best],
            reason,
            best_model: models[best].clone(),
        }
    };
    // A resumed block may already satisfy the stop rule.
    if let StopDecision::Stop { best_index } = stopping_check(&scores, mw, nw, cfg.tau) {
        return Ok(finish(&scores, &models, BlockEnd::Plateau, best_index));
    }

    loop {
        let k = scores.len() + 1;
        if cfg.max_increments.is_some_and(|cap| k > cap) {
            let start = scores.len().saturating_sub(mw + nw);
            let best = earliest_argmax(&scores[start..]);
            return Ok(finish(&scores, &models, BlockEnd::Capped, best));
        }
        let started = Instant::now();
        let (fresh, fresh_path) = increment_data(cfg.master_seed, c, d, k, cfg.m, objects, ctx)?;
        let (train_set, train_path) = match cfg.trainset_policy {
            TrainsetPolicy::Reset => (fresh, fresh_path),
            TrainsetPolicy::Increment => {
                let p = accumulate(&mut acc, &fresh, &fresh_path)?;
                (acc.clone(), p)
            }
        };
        let init = if cfg.train_from_block_start {
            omega_in
        } else {
            models.last().or(omega_in)
        };
        let model = detector.train(&TrainRequest {
            training_set: &train_set,
            manifest_path: &train_path,
            init_model: init,
            budget: cfg.t,
            out_model: model_id(c, d, k),
            step: TrainStep::new(c, d, k),
        })?;
        let map = evaluate(detector, &model, test, test_path, &cfg.eval)?;
        scores.push(map.map);
        models.push(model.clone());
        writer.append(LogEvent::Increment(IncrementRecord {
            condition: c,
            difficulty: d,
            k,
            model_id: model.model_id.clone(),
            map,
            train_manifest: train_path,
            train_size: train_set.len(),
            wall_time: started.elapsed().as_secs_f64(),
            model,
        }))?;
        if let StopDecision::Stop { best_index } = stopping_check(&scores, mw, nw, cfg.tau) {
            return Ok(finish(&scores, &models, BlockEnd::Plateau, best_index));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnabilityConfig {
    /// Increments per difficulty.
    pub kappa: usize,
    /// Training images per increment, spread over the objects in turn.
    pub m: usize,
    /// Test images per difficulty, spread over the objects in turn.
    pub n_test: usize,
    /// Keep earlier increments' images in the training set.
    pub retain_training: bool,
    pub t: usize,
    pub difficulties: Vec<Difficulty>,
    pub objects: Vec<u32>,
    pub master_seed: u64,
    pub eval: EvalConfig,
}

impl Default for LearnabilityConfig {
    fn default() -> Self {
        Self {
            kappa: 10,
            m: 25,
            n_test: 330,
            retain_training: true,
            t: 1000,
            difficulties: Difficulty::TRAINING.to_vec(),
            objects: Vec::new(),
            master_seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl LearnabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa < 1 || self.m < 1 || self.n_test < 1 || self.t < 1 {
            return Err(Error::invalid("kappa, m, n_test and t must be at least 1"));
        }
        check_difficulties(&self.difficulties)?;
        self.eval.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityResult {
    pub condition: Condition,
    pub difficulties: Vec<Difficulty>,
    /// `scores[i][k - 1]`: mAP after increment `k` of `difficulties[i]`.
    pub scores: Vec<Vec<f64>>,
    pub records: Vec<IncrementRecord>,
    pub final_model: ModelHandle,
}

/// `count` jobs for `(c, d)`, objects assigned in turn.
fn round_robin_jobs(
    c: Condition,
    d: Difficulty,
    count: usize,
    objects: &[u32],
    base: u64,
    prefix: &str,
) -> Result<Vec<SampleJob>> {
    let thetas = generate_parameters(c, d, count, seed::derive(base, &["theta".into()]))?;
    let render = seed::derive(base, &["render".into()]);
    Ok(thetas
        .into_iter()
        .enumerate()
        .map(|(i, theta)| {
            let obj = objects[i % objects.len()];
            SampleJob {
                image_id: format!("{prefix}{i:05}-o{obj}"),
                theta,
                object_id: obj,
                seed: seed::derive(render, &[i.into(), obj.into()]),
            }
        })
        .collect())
}

/// Fixed-length training for one condition across difficulties, scored on
/// a test set of that condition only. The model carries over between
/// increments and difficulties; no stopping rule applies.
pub fn learnability(
    cfg: &LearnabilityConfig,
    condition: Condition,
    detector: &mut dyn Detector,
    ctx: &RunContext<'_>,
) -> Result<LearnabilityResult> {
    cfg.validate()?;
    let objects = resolve_objects(&cfg.objects, ctx.registry)?;
    ctx.registry.validate(condition == Condition::ExternalOcclusion)?;
    let root = ctx.out_dir.join(format!("learnability-{}", condition.tag()));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let c = condition;

    let mut test_jobs = Vec::new();
    for &d in &cfg.difficulties {
        let base = seed::derive(cfg.master_seed, &["learn-test".into(), c.tag().into(), d.name().into()]);
        test_jobs.extend(round_robin_jobs(
            c,
            d,
            cfg.n_test,
            &objects,
            base,
            &format!("te-{}-{}-", c.tag(), d.name()),
        )?);
    }
    let test_dir = root.join("test");
    let test = render_jobs(&test_jobs, ctx.registry, ctx.render, &test_dir, Split::Test)?;
    let test_path = test_dir.join(MANIFEST);
    write_manifest(&test, &test_path)?;

    let mut writer = LogWriter::open(&root.join(RUN_LOG), false)?;
    let mut acc = DatasetManifest::default();
    let mut current: Option<ModelHandle> = None;
    let mut scores = Vec::new();
    for &d in &cfg.difficulties {
        let mut row = Vec::with_capacity(cfg.kappa);
        for k in 1..=cfg.kappa {
            let started = Instant::now();
            let base = seed::derive(
                cfg.master_seed,
                &["learn-train".into(), c.tag().into(), d.name().into(), k.into()],
            );
            let tag = format!("{}-{}-k{k:03}", c.tag(), d.name());
            let jobs = round_robin_jobs(c, d, cfg.m, &objects, base, &format!("tr-{tag}-"))?;
            let dir = root.join("train").join(&tag);
            let fresh = render_jobs(&jobs, ctx.registry, ctx.render, &dir, Split::Train)?;
            let fresh_path = dir.join(MANIFEST);
            write_manifest(&fresh, &fresh_path)?;
            let (train_set, train_path) = if cfg.retain_training {
                let p = accumulate(&mut acc, &fresh, &fresh_path)?;
                (acc.clone(), p)
            } else {
                (fresh, fresh_path)
            };
            let model = detector.train(&TrainRequest {
                training_set: &train_set,
                manifest_path: &train_path,
                init_model: current.as_ref(),
                budget: cfg.t,
                out_model: format!("learn-{tag}"),
                step: TrainStep::new(c, d, k),
            })?;
            let map = evaluate(detector, &model, &test, &test_path, &cfg.eval)?;
            row.push(map.map);
            writer.append(LogEvent::Increment(IncrementRecord {
                condition: c,
                difficulty: d,
                k,
                model_id: model.model_id.clone(),
                map,
                train_manifest: train_path,
                train_size: train_set.len(),
                wall_time: started.elapsed().as_secs_f64(),
                model: model.clone(),
            }))?;
            current = Some(model);
        }
        scores.push(row);
    }
    let final_model = current.expect("kappa >= 1 and at least one difficulty");
    writer.append(LogEvent::Final {
        model: final_model.clone(),
    })?;
    Ok(LearnabilityResult {
        condition,
        difficulties: cfg.difficulties.clone(),
        scores,
        records: writer.log.records,
        final_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_guard_and_plateau() {
        assert_eq!(stopping_check(&[0.5; 10], 3, 8, 0.02), StopDecision::Continue);
        assert_eq!(
            stopping_check(&[0.5; 11], 3, 8, 0.02),
            StopDecision::Stop { best_index: 0 }
        );
        let ramp: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(stopping_check(&ramp, 3, 8, 0.02), StopDecision::Continue);
    }

    #[test]
    fn only_the_final_window_counts() {
        // an early high score outside the window does not block the stop
        let mut p = vec![0.9];
        p.extend([0.4; 11]);
        assert_eq!(stopping_check(&p, 3, 8, 0.02), StopDecision::Stop { best_index: 0 });
        // a dip then recovery: best is the earliest maximum of the window
        let p = [0.1, 0.3, 0.6, 0.6, 0.5, 0.6, 0.6, 0.6, 0.61, 0.6, 0.6];
        assert_eq!(stopping_check(&p, 3, 8, 0.02), StopDecision::Stop { best_index: 8 });
    }

    #[test]
    fn log_events_round_trip() {
        let model = ModelHandle {
            model_id: "fb-easy-k001".into(),
            kind: crate::detector::DetectorKind::Mock,
            lineage: vec![TrainStep::new(Condition::FocusBlur, Difficulty::Easy, 1)],
            storage_path: PathBuf::from("models/fb-easy-k001"),
        };
        let ev = LogEvent::Increment(IncrementRecord {
            condition: Condition::FocusBlur,
            difficulty: Difficulty::Easy,
            k: 1,
            model_id: model.model_id.clone(),
            map: MapScore {
                per_class_ap: [(0, 1.0 / 3.0), (3, 0.1 + 0.2)].into_iter().collect(),
                map: (1.0 / 3.0 + 0.1 + 0.2) / 2.0,
                precision: 1.0,
                recall: 0.5,
            },
            train_manifest: PathBuf::from("t/manifest.jsonl"),
            train_size: 10,
            wall_time: 123.456_789_012_345_67,
            model: model.clone(),
        });
        for ev in [ev, LogEvent::Final { model }] {
            let line = serde_json::to_string(&ev).unwrap();
            assert_eq!(serde_json::from_str::<LogEvent>(&line).unwrap(), ev);
        }
        assert!(serde_json::from_str::<LogEvent>(r#"{"event":"other"}"#).is_err());
        assert!(serde_json::from_str::<LogEvent>(r#"{"model":{}}"#).is_err());
    }

    #[test]
    fn config_json_uses_window_names() {
        let cfg: ALConfig = serde_json::from_str(r#"{"M":2,"N":4,"conditions":["fb","sc"]}"#).unwrap();
        assert_eq!((cfg.recent_window, cfg.prior_window), (2, 4));
        assert_eq!(cfg.conditions, vec![Condition::FocusBlur, Condition::Scale]);
        assert!(serde_json::from_str::<ALConfig>(r#"{"tau":-1}"#)
            .unwrap()
            .validate()
            .is_err());
        assert!(serde_json::from_str::<ALConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn standard_test_cardinality() {
        let cfg = ALConfig::default();
        assert_eq!(standard_test_jobs(&cfg, &[0, 1, 2, 3, 4]).unwrap().len(), 3150);
        let small = ALConfig {
            conditions: vec![Condition::Scale],
            n: 2,
            ..ALConfig::default()
        };
        assert_eq!(standard_test_jobs(&small, &[0]).unwrap().len(), 6);
        let none = ALConfig {
            n: 0,
            ..ALConfig::default()
        };
        assert!(matches!(
            standard_test_jobs(&none, &[0]),
            Err(Error::InvalidArgument(_))
        ));
    }
}
