//! The alternating training loop and checkpoint evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, CenterBank, CenterMeta, ClusterOutcome};
use crate::data::{self, Scene};
use crate::error::{Error, Result};
use crate::losses::{self, PpcDenominator, PpcOptions, Term};
use crate::memory::MemoryBank;
use crate::metrics;
use crate::model::{Activation, Model, ModelShape};
use crate::numerics::{axpy, Matrix};
use crate::sinkhorn::SolverSettings;

pub const TRACE_VERSION: u32 = 1;
pub const SEED_ENV: &str = "OTSEG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Subclasses per class (M).
    pub clusters_per_class: usize,
    /// Center momentum.
    pub mu: f64,
    /// Sinkhorn kernel exponent.
    pub lambda: f64,
    pub tau: f64,
    /// Weight of the two contrast terms.
    pub alpha: f64,
    /// Features kept per (subclass, scene) in the memory bank (K).
    pub per_scene_cap: usize,
    /// Scenes per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub disable_ppc: bool,
    pub disable_pcc: bool,
    pub disable_bank: bool,
    pub ppc_denominator_mode: PpcDenominator,
    /// Also backpropagate through the batch's own pool entries, not only
    /// through the anchors. Bank rows never receive gradient.
    pub ppc_pool_gradients: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tolerance: f64,
    /// Upper bound on bank rows joining the contrast pool each step; 0 keeps
    /// them all.
    pub negative_cap: usize,
    /// Steps before the contrast terms switch on. Clustering and center
    /// updates run from step 0 regardless.
    pub warmup_steps: usize,
    /// Threads for the per-class solves. Only 1 is bitwise reproducible.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clusters_per_class: cluster::DEFAULT_CLUSTERS_PER_CLASS,
            mu: cluster::DEFAULT_MOMENTUM,
            lambda: crate::sinkhorn::DEFAULT_LAMBDA,
            tau: losses::DEFAULT_TAU,
            alpha: losses::DEFAULT_ALPHA,
            per_scene_cap: crate::memory::DEFAULT_PER_SCENE_CAP,
            batch_size: 2,
            epochs: 30,
            learning_rate: 0.05,
            seed: 0,
            disable_ppc: false,
            disable_pcc: false,
            disable_bank: false,
            ppc_denominator_mode: PpcDenominator::default(),
            ppc_pool_gradients: true,
            hidden: vec![64, 64],
            embed_dim: 16,
            activation: Activation::Relu,
            sinkhorn_iters: crate::sinkhorn::DEFAULT_MAX_ITERS,
            sinkhorn_tolerance: crate::sinkhorn::DEFAULT_TOLERANCE,
            negative_cap: 0,
            warmup_steps: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// The contrast-free arm: cross-entropy only, no clustering, no bank.
    pub fn baseline() -> Self {
        TrainConfig {
            alpha: 0.0,
            disable_bank: true,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `OTSEG_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clusters_per_class == 0 {
            return fail("clusters_per_class must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return fail("layer widths must be at least 1".into());
        }
        if self.sinkhorn_iters == 0 {
            return fail("sinkhorn_iters must be at least 1".into());
        }
        if !(self.sinkhorn_tolerance > 0.0 && self.sinkhorn_tolerance.is_finite()) {
            return fail(format!("sinkhorn_tolerance must be positive, got {}", self.sinkhorn_tolerance));
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Whether phase 1 runs at all.
    pub fn clustering_enabled(&self) -> bool {
        self.alpha > 0.0 && !(self.disable_ppc && self.disable_pcc)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            lambda: self.lambda,
            max_iters: self.sinkhorn_iters,
            tolerance: self.sinkhorn_tolerance,
        }
    }
}

/// One optimization step. Holds nothing time-dependent so that traces from
/// identical runs compare byte for byte; wall times go to [`StepTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub v: u32,
    pub step: usize,
    pub epoch: usize,
    pub scenes: Vec<u32>,
    pub points: usize,
    pub ce: f64,
    pub ppc: f64,
    pub pcc: f64,
    pub total: f64,
    pub alpha: f64,
    pub contrast_active: bool,
    /// Per class, points assigned to each subclass; empty when clustering is off.
    pub occupancy: Vec<Vec<usize>>,
    pub unconverged_solves: usize,
    pub skipped_anchors: usize,
    pub pool_size: usize,
    pub bank_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub v: u32,
    pub step: usize,
    pub clustering_secs: f64,
    pub step_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: Model,
    pub centers: CenterBank,
    pub bank: MemoryBank,
    pub traces: Vec<StepTrace>,
    pub timings: Vec<StepTiming>,
}

impl TrainRun {
    pub fn steps(&self) -> usize {
        self.traces.len()
    }
}

/// Independent sub-seed for one consumer of the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn check_scenes(scenes: &[Scene]) -> Result<(usize, usize)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one scene"))?;
    let (classes, aux) = (first.class_count, first.aux_channels());
    let mut ids = std::collections::BTreeSet::new();
    for s in scenes {
        s.validate()?;
        if s.class_count != classes || s.aux_channels() != aux {
            return Err(Error::invalid(format!(
                "scene {} has {} classes / {} aux channels, expected {classes} / {aux}",
                s.id,
                s.class_count,
                s.aux_channels()
            )));
        }
        if !ids.insert(s.id) {
            return Err(Error::invalid(format!("duplicate scene id {}", s.id)));
        }
    }
    Ok((classes, 3 + aux))
}

fn stack(batch: &[&Scene]) -> Result<(Matrix, Vec<usize>, Vec<u32>)> {
    let mut points = batch[0].points.clone();
    for s in &batch[1..] {
        points = points.vstack(&s.points)?;
    }
    let labels = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let owners = batch
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.id, s.len()))
        .collect();
    Ok((points, labels, owners))
}

/// Trainer state between steps.
struct Session<'a> {
    config: &'a TrainConfig,
    model: Model,
    centers: CenterBank,
    bank: MemoryBank,
    rng: ChaCha8Rng,
    traces: Vec<StepTrace>,
    timings: Vec<StepTiming>,
}

impl Session<'_> {
    fn step(&mut self, epoch: usize, batch: &[&Scene]) -> Result<()> {
        let cfg = self.config;
        let step = self.traces.len();
        let started = Instant::now();
        let (points, labels, owners) = stack(batch)?;
        let fwd = self.model.forward(&points)?;
        let (n, d) = (fwd.embeddings.rows(), fwd.embeddings.cols());

        let mut clustering_secs = 0.0;
        let outcome: Option<ClusterOutcome> = if cfg.clustering_enabled() {
            let t = Instant::now();
            let o = cluster::assign_subclass_labels(
                &fwd.embeddings,
                &labels,
                &self.centers,
                cfg.solver_settings(),
                cfg.workers,
            )?;
            clustering_secs = t.elapsed().as_secs_f64();
            Some(o)
        } else {
            None
        };

        let ce = losses::ce_loss(&fwd.logits, &labels)?;
        let active = outcome.is_some() && step >= cfg.warmup_steps;
        let mut ppc = None;
        let mut pcc = None;
        let mut skipped_anchors = 0;
        let mut pool_size = 0;
        if let (true, Some(o)) = (active, &outcome) {
            if !cfg.disable_ppc {
                let (bank_rows, bank_labels) = self.contrast_bank();
                let pool = fwd.embeddings.vstack(&bank_rows)?;
                let mut pool_labels = o.subclass_labels.clone();
                pool_labels.extend(bank_labels);
                pool_size = pool.rows();
                let out = losses::ppc_loss(
                    &fwd.embeddings,
                    &o.subclass_labels,
                    &pool,
                    &pool_labels,
                    PpcOptions {
                        tau: cfg.tau,
                        denominator: cfg.ppc_denominator_mode,
                        anchors_lead_pool: true,
                    },
                )?;
                let mut grad = out.grad_anchors;
                if cfg.ppc_pool_gradients {
                    axpy(1.0, &out.grad_pool.as_slice()[..n * d], grad.as_mut_slice());
                }
                skipped_anchors = out.skipped_anchors;
                ppc = Some(Term { value: out.value, grad });
            }
            if !cfg.disable_pcc {
                pcc = Some(losses::pcc_loss(
                    &fwd.embeddings,
                    &o.subclass_labels,
                    self.centers.all_centers(),
                    cfg.tau,
                )?);
            }
        }
        let report = losses::total_loss(ce, ppc, pcc, cfg.alpha, cfg.tau, (n, d))?;
        let grads = self.model.backward(&fwd, &report.grad_embeddings, &report.grad_logits)?;
        self.model.sgd_step(&grads, cfg.learning_rate)?;

        let mut occupancy = Vec::new();
        let mut unconverged_solves = 0;
        if let Some(o) = &outcome {
            if !cfg.disable_ppc && !cfg.disable_bank {
                let mut groups: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
                for (i, (&scene, &g)) in owners.iter().zip(&o.subclass_labels).enumerate() {
                    groups.entry((scene, g)).or_default().push(i);
                }
                for ((scene, g), idx) in groups {
                    self.bank.push(scene, g, &fwd.embeddings.select_rows(&idx))?;
                }
            }
            self.centers.momentum_update(o, cfg.mu)?;
            occupancy = o.occupancy(cfg.clusters_per_class);
            unconverged_solves = o.unconverged();
        }

        self.traces.push(StepTrace {
            v: TRACE_VERSION,
            step,
            epoch,
            scenes: batch.iter().map(|s| s.id).collect(),
            points: n,
            ce: report.ce,
            ppc: report.ppc,
            pcc: report.pcc,
            total: report.total,
            alpha: report.alpha,
            contrast_active: active,
            occupancy,
            unconverged_solves,
            skipped_anchors,
            pool_size,
            bank_rows: self.bank.len(),
        });
        self.timings.push(StepTiming {
            v: TRACE_VERSION,
            step,
            clustering_secs,
            step_secs: started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// Bank rows from earlier steps, uniformly subsampled to the negative cap.
    fn contrast_bank(&mut self) -> (Matrix, Vec<usize>) {
        if self.config.disable_bank {
            return (Matrix::zeros(0, self.bank.dim()), Vec::new());
        }
        let (rows, labels) = self.bank.gather_all();
        let cap = self.config.negative_cap;
        if cap == 0 || rows.rows() <= cap {
            return (rows, labels);
        }
        let mut idx = rand::seq::index::sample(&mut self.rng, rows.rows(), cap).into_vec();
        idx.sort_unstable();
        let picked = idx.iter().map(|&i| labels[i]).collect();
        (rows.select_rows(&idx), picked)
    }
}

/// Trains in memory. Deterministic for a fixed config when `workers == 1`.
pub fn train_scenes(config: &TrainConfig, scenes: &[Scene]) -> Result<TrainRun> {
    config.validate()?;
    let (classes, input_dim) = check_scenes(scenes)?;
    let shape = ModelShape {
        input_dim,
        hidden: config.hidden.clone(),
        embed_dim: config.embed_dim,
        classes,
        activation: config.activation,
    };
    let seed = config.seed;
    let mut session = Session {
        config,
        model: Model::random(&shape, sub_seed(seed, 0))?,
        centers: CenterBank::init(classes, config.clusters_per_class, config.embed_dim, sub_seed(seed, 1))?,
        bank: MemoryBank::new(
            classes * config.clusters_per_class,
            config.embed_dim,
            if config.disable_bank { 0 } else { config.per_scene_cap },
            sub_seed(seed, 2),
        ),
        rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, 3)),
        traces: Vec::new(),
        timings: Vec::new(),
    };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut session.rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let step = session.traces.len();
            session.step(epoch, &batch).map_err(|e| Error::Step {
                step,
                source: Box::new(e),
            })?;
        }
    }
    Ok(TrainRun {
        config: config.clone(),
        model: session.model,
        centers: session.centers,
        bank: session.bank,
        traces: session.traces,
        timings: session.timings,
    })
}

/// Checkpoint sidecar, written next to the model as `<model>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classes: usize,
}

/// Files produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub centers: PathBuf,
    pub memory: PathBuf,
    pub trace: PathBuf,
    pub timing: PathBuf,
    pub config: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            checkpoint: dir.join("model.tmdl"),
            centers: dir.join("centers.cbnk"),
            memory: dir.join("memory.mbnk"),
            trace: dir.join("trace.jsonl"),
            timing: dir.join("timing.jsonl"),
            config: dir.join("config.toml"),
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Trains on every scene file in `scene_dir` and writes all artifacts to `out`.
pub fn train(config: &TrainConfig, scene_dir: &Path, out: &Path) -> Result<(TrainRun, TrainOutputs)> {
    config.validate()?;
    let scenes = data::read_scene_dir(scene_dir)?;
    if scenes.is_empty() {
        return Err(Error::invalid(format!("no scene files in {}", scene_dir.display())));
    }
    let run = train_scenes(config, &scenes)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = TrainOutputs::in_dir(out);
    save_run(&run, &files)?;
    Ok((run, files))
}

pub fn save_run(run: &TrainRun, files: &TrainOutputs) -> Result<()> {
    let cfg = &run.config;
    run.model.save(&files.checkpoint)?;
    let shape = run.model.shape();
    let meta = CheckpointMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: run.steps(),
        input_dim: shape.input_dim,
        hidden: shape.hidden,
        embed_dim: shape.embed_dim,
        classes: shape.classes,
    };
    let sidecar = sidecar(&files.checkpoint);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    run.centers.save(
        &files.centers,
        &CenterMeta {
            seed: cfg.seed,
            step: run.steps() as u64,
        },
    )?;
    run.bank.save(&files.memory)?;
    write_jsonl(&files.trace, &run.traces)?;
    write_jsonl(&files.timing, &run.timings)?;
    fs::write(&files.config, cfg.to_toml()).map_err(|e| Error::io(&files.config, e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Argmax of the logits, lowest class on ties.
pub fn predict(model: &Model, points: &Matrix) -> Result<Vec<usize>> {
    let fwd = model.forward(points)?;
    Ok(fwd
        .logits
        .iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub scenes: usize,
    pub points: usize,
}

/// Pooled metrics over all points of all scenes.
pub fn evaluate_scenes(model: &Model, scenes: &[Scene]) -> Result<EvalReport> {
    let classes = model.classes();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in scenes {
        if s.class_count > classes {
            return Err(Error::invalid(format!(
                "scene {} has {} classes but the checkpoint predicts {classes}",
                s.id, s.class_count
            )));
        }
        pred.extend(predict(model, &s.points)?);
        truth.extend_from_slice(&s.labels);
    }
    let iou = metrics::miou(&pred, &truth, classes)?;
    Ok(EvalReport {
        miou: iou.miou,
        macc: metrics::macc(&pred, &truth, classes)?,
        per_class_iou: iou.per_class,
        scenes: scenes.len(),
        points: pred.len(),
    })
}

/// Reads only the checkpoint and the scenes.
pub fn evaluate(checkpoint: &Path, scene_dir: &Path) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    let scenes = data::read_scene_dir(scene_dir)?;
    if scenes.is_empty() {
        return Err(Error::invalid(format!("no scene files in {}", scene_dir.display())));
    }
    evaluate_scenes(&model, &scenes)
}
