//! Pretext pretraining, segmentation fine-tuning, evaluation and the
//! initialization comparison.

pub mod optim;
mod state;

pub use optim::{clip_grad_norm, Optimizer, PlateauScheduler, RmsReading};
pub use state::{load_outcome, save_outcome};

use crate::checkpoint::CheckpointMeta;
use crate::dataset::{self, DatasetManifest, ManifestEntry, NoiseSpec, NormMode, Split, Target, Task};
use crate::dem_synth;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, PerceptualExtractor};
use crate::metrics::{MetricRow, MetricsReport, SegScores};
use crate::model::{self, Head, ModelParameters, Mode, Provenance};
use crate::nn::Tensor;
use crate::raster::{Grid, Mask};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Loss the plateau schedule watches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Validation,
    Training,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Proxy,
    Terrain,
}

impl InitKind {
    pub const ALL: [InitKind; 3] = [InitKind::Random, InitKind::Proxy, InitKind::Terrain];

    pub fn provenance(self) -> Provenance {
        match self {
            InitKind::Random => Provenance::Random,
            InitKind::Proxy => Provenance::ProxyPretrained,
            InitKind::Terrain => Provenance::TerrainPretrained,
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Random => "random",
            InitKind::Proxy => "proxy",
            InitKind::Terrain => "terrain",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitKind::Random),
            "proxy" => Ok(InitKind::Proxy),
            "terrain" => Ok(InitKind::Terrain),
            o => Err(Error::Config(format!("unknown init `{o}` (expected random, proxy or terrain)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Adam step size. Long full-scale runs use 1e-6; the desk budget needs
    /// a larger step.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub eval_batch: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            weight_decay: 1e-8,
            batch: 4,
            eval_batch: 8,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_delta: 1e-5,
            clip_norm: 1.0,
            epochs: 60,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("pretrain.lr = {} must be finite and ≥ 0", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("pretrain.clip_norm must be > 0".into()));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("pretrain batch sizes must be ≥ 1".into()));
        }
        PlateauScheduler::new(self.plateau_factor, self.plateau_patience, self.min_delta).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// RMSprop step size. The early steps of an α = 0.999 accumulator are
    /// about 30× lr, so 1e-3 wipes out a pretrained body at desk scale.
    pub lr: f64,
    pub weight_decay: f64,
    /// RMS-style "momentum" value; see [`RmsReading`].
    pub rms_value: f64,
    pub rms_reading: RmsReading,
    pub batch: usize,
    pub eval_batch: usize,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
    /// Optional global-norm clip; off unless set.
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    pub label_fraction: f64,
    pub init: InitKind,
    pub boundary_d: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            weight_decay: 1e-8,
            rms_value: 0.999,
            rms_reading: RmsReading::Smoothing,
            batch: 4,
            eval_batch: 8,
            decay_factor: 0.1,
            decay_patience: 15,
            min_delta: 1e-5,
            monitor: Monitor::Validation,
            clip_norm: None,
            epochs: 40,
            label_fraction: 1.0,
            init: InitKind::Terrain,
            boundary_d: 2,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("finetune.lr = {} must be finite and ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rms_value) {
            return Err(Error::Config("finetune.rms_value must lie in [0, 1)".into()));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("finetune batch sizes must be ≥ 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("finetune.clip_norm must be > 0".into()));
            }
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {} outside (0, 1]", self.label_fraction)));
        }
        if self.boundary_d == 0 {
            return Err(Error::Config("finetune.boundary_d must be ≥ 1".into()));
        }
        PlateauScheduler::new(self.decay_factor, self.decay_patience, self.min_delta).map(|_| ())
    }
}

/// Mutable loop state; round-trips through [`save_outcome`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: Optimizer,
    pub scheduler: PlateauScheduler,
    pub history: MetricsReport,
}

impl TrainState {
    pub fn lr(&self) -> f64 {
        self.optimizer.lr()
    }
}

/// Result of a training run: best-validation and final parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: ModelParameters<f32>,
    pub best_meta: CheckpointMeta,
    pub last: ModelParameters<f32>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history(&self) -> &MetricsReport {
        &self.state.history
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_LABELS: u64 = 3;

// ---------------------------------------------------------------------------
// Samples and objectives
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum SampleTarget {
    Terrain(Vec<f32>),
    Mask { mask: Vec<u8>, clean: Vec<u8> },
}

#[derive(Clone, Debug)]
struct Sample {
    tile_id: String,
    input: Vec<f32>,
    target: SampleTarget,
    scale: f32,
}

fn to_sample(e: &ManifestEntry) -> Result<Sample> {
    let rec = if e.record.norm.is_some() {
        e.record.clone()
    } else {
        dataset::normalize_tile(&e.record, NormMode::PerTileMinshift)?
    };
    let target = match &rec.target {
        Target::Terrain(g) => SampleTarget::Terrain(g.data.clone()),
        Target::Footprint { mask, clean } => SampleTarget::Mask { mask: mask.data.clone(), clean: clean.data.clone() },
    };
    Ok(Sample { tile_id: rec.tile_id.clone(), input: rec.input.data, target, scale: rec.norm.unwrap().scale })
}

struct SampleSet {
    items: Vec<Sample>,
    h: usize,
    w: usize,
}

fn sample_set<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> Result<SampleSet> {
    let mut items = Vec::new();
    let mut hw = None;
    for e in entries {
        let shape = e.record.size();
        match hw {
            None => hw = Some(shape),
            Some(s) if s != shape => {
                return Err(Error::Data(format!("tile {} is {:?}, expected {:?}", e.record.tile_id, shape, s)));
            }
            _ => {}
        }
        items.push(to_sample(e)?);
    }
    let (h, w) = hw.unwrap_or((0, 0));
    Ok(SampleSet { items, h, w })
}

/// Training objective with everything needed to score a batch.
pub enum Objective {
    Reconstruction { weights: LossWeights, extractor: PerceptualExtractor, boundary_d: usize },
    Segmentation { weights: LossWeights, class_weights: [f64; 2], boundary_d: usize },
}

/// Height difference that separates structure from terrain when scoring
/// reconstruction output, in meters.
pub const STRUCTURE_THRESHOLD_M: f32 = 1.0;

/// Structure masks implied by a predicted DTM: `|dsm − pred| > 1 m` versus
/// `|dsm − dtm| > 1 m`, with values in the normalized frame.
pub fn structure_masks(input: &[f32], pred: &[f32], target: &[f32], scale: f32, h: usize, w: usize) -> (Mask, Mask) {
    let mk = |other: &[f32]| {
        Mask::new(h, w, input.iter().zip(other).map(|(a, b)| ((a - b).abs() * scale > STRUCTURE_THRESHOLD_M) as u8).collect())
    };
    (mk(pred), mk(target))
}

fn argmax_mask(logits: &Tensor<f32>, i: usize) -> Vec<u8> {
    let plane = logits.plane();
    let s = logits.sample(i);
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..logits.c {
                if s[c * plane + p] > s[best * plane + p] {
                    best = c;
                }
            }
            (best != 0) as u8
        })
        .collect()
}

struct BatchEval {
    loss: LossSumm,
    scores: Vec<SegScores>,
    clean: Vec<SegScores>,
    grad: Option<Tensor<f32>>,
}

struct LossSumm {
    value: f64,
    n: usize,
}

fn batch_input(items: &[&Sample], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(items.len() * h * w);
    for s in items {
        data.extend_from_slice(&s.input);
    }
    Tensor::from_vec(items.len(), 1, h, w, data)
}

fn score_batch(obj: &Objective, logits: &Tensor<f32>, items: &[&Sample], with_grad: bool) -> Result<BatchEval> {
    let (h, w) = (logits.h, logits.w);
    let mut scores = Vec::with_capacity(items.len());
    let mut clean = Vec::with_capacity(items.len());
    let lg = match obj {
        Objective::Reconstruction { weights, extractor, boundary_d } => {
            let mut t = Vec::with_capacity(logits.data.len());
            for s in items {
                match &s.target {
                    SampleTarget::Terrain(v) => t.extend_from_slice(v),
                    SampleTarget::Mask { .. } => return Err(Error::Contract("reconstruction needs terrain targets".into())),
                }
            }
            let target = Tensor::from_vec(items.len(), 1, h, w, t);
            let lg = losses::reconstruction_loss(&target, logits, weights, extractor)?;
            for (i, s) in items.iter().enumerate() {
                let (p, g) = structure_masks(&s.input, logits.sample(i), target.sample(i), s.scale, h, w);
                let sc = SegScores::of(&p, &g, *boundary_d)?;
                scores.push(sc);
                clean.push(sc);
            }
            lg
        }
        Objective::Segmentation { weights, class_weights, boundary_d } => {
            let mut t = Vec::with_capacity(items.len() * h * w);
            for s in items {
                match &s.target {
                    SampleTarget::Mask { mask, .. } => t.extend_from_slice(mask),
                    SampleTarget::Terrain(_) => return Err(Error::Contract("segmentation needs mask targets".into())),
                }
            }
            let lg = losses::segmentation_loss(logits, &t, class_weights, weights)?;
            for (i, s) in items.iter().enumerate() {
                let pred = Mask::new(h, w, argmax_mask(logits, i));
                if let SampleTarget::Mask { mask, clean: cm } = &s.target {
                    scores.push(SegScores::of(&pred, &Mask::new(h, w, mask.clone()), *boundary_d)?);
                    clean.push(SegScores::of(&pred, &Mask::new(h, w, cm.clone()), *boundary_d)?);
                }
            }
            lg
        }
    };
    if !lg.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {} at batch of {}", lg.value, items.len())));
    }
    let grad = with_grad.then(|| Tensor::from_vec(logits.n, logits.c, h, w, lg.grad));
    Ok(BatchEval { loss: LossSumm { value: lg.value, n: items.len() }, scores, clean, grad })
}

/// Eval-mode pass over a sample set: mean loss, per-tile noisy and clean scores.
fn eval_set(params: &ModelParameters<f32>, obj: &Objective, set: &SampleSet, batch: usize) -> Result<(f64, Vec<SegScores>, Vec<SegScores>)> {
    let mut total = 0.0;
    let mut scores = Vec::new();
    let mut clean = Vec::new();
    let refs: Vec<&Sample> = set.items.iter().collect();
    for chunk in refs.chunks(batch) {
        let x = batch_input(chunk, set.h, set.w);
        let pass = model::forward(params, &x, Mode::Eval)?;
        let be = score_batch(obj, &pass.logits, chunk, false)?;
        total += be.loss.value * be.loss.n as f64;
        scores.extend(be.scores);
        clean.extend(be.clean);
    }
    Ok((total / set.items.len().max(1) as f64, scores, clean))
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct LoopSpec<'a> {
    obj: &'a Objective,
    train: &'a SampleSet,
    val: &'a SampleSet,
    batch: usize,
    eval_batch: usize,
    clip: Option<f64>,
    monitor: Monitor,
    epochs: usize,
    tag: Option<Provenance>,
}

fn run_loop(
    spec: &LoopSpec<'_>,
    mut params: ModelParameters<f32>,
    mut best: Option<(ModelParameters<f32>, CheckpointMeta)>,
    mut state: TrainState,
) -> Result<TrainOutcome> {
    if spec.train.items.is_empty() {
        return Err(Error::Config("no training tiles".into()));
    }
    let n = spec.train.items.len();
    while state.epoch < spec.epochs {
        state.epoch += 1;
        let lr = state.lr();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut train_scores = Vec::with_capacity(n);
        for chunk in order.chunks(spec.batch) {
            let items: Vec<&Sample> = chunk.iter().map(|i| &spec.train.items[*i]).collect();
            let x = batch_input(&items, spec.train.h, spec.train.w);
            let pass = model::forward(&params, &x, Mode::Train)?;
            let be = score_batch(spec.obj, &pass.logits, &items, true)
                .map_err(|e| annotate(e, state.epoch, state.step))?;
            let mut grads = model::backward(&params, &pass, be.grad.as_ref().unwrap())?;
            if let Some(c) = spec.clip {
                clip_grad_norm(&mut grads, c);
            }
            if !grads.global_norm().is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {} step {}", state.epoch, state.step)));
            }
            state.optimizer.step(&mut params, &grads)?;
            params.apply_bn_stats(&pass.bn_updates);
            state.step += 1;
            loss_sum += be.loss.value * be.loss.n as f64;
            train_scores.extend(be.scores);
        }
        let train_loss = loss_sum / n as f64;
        let ts = SegScores::mean(&train_scores);
        state.history.push(row("train", state.epoch, state.step, lr, train_loss, ts));
        let val_loss = if spec.val.items.is_empty() {
            train_loss
        } else {
            let (vl, vs, _) = eval_set(&params, spec.obj, spec.val, spec.eval_batch)?;
            if !vl.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss at epoch {}", state.epoch)));
            }
            state.history.push(row("val", state.epoch, state.step, lr, vl, SegScores::mean(&vs)));
            vl
        };
        if val_loss < state.best_val || best.is_none() {
            state.best_val = val_loss;
            state.best_epoch = state.epoch;
            let mut b = params.clone();
            if let Some(tag) = spec.tag {
                b.set_provenance(tag)?;
            }
            let mut meta = CheckpointMeta { epoch: state.epoch, step: state.step, ..Default::default() };
            meta.metrics.insert("train_loss".into(), train_loss);
            meta.metrics.insert("val_loss".into(), val_loss);
            best = Some((b, meta));
        }
        let monitored = match spec.monitor {
            Monitor::Validation => val_loss,
            Monitor::Training => train_loss,
        };
        let next = state.scheduler.observe(monitored, lr);
        state.optimizer.set_lr(next);
        log::info!("epoch {} step {} lr {lr:e} train {train_loss:.6} val {val_loss:.6}", state.epoch, state.step);
    }
    let (best, best_meta) = best.unwrap_or_else(|| (params.clone(), CheckpointMeta::default()));
    let mut last = params;
    if let Some(tag) = spec.tag {
        last.set_provenance(tag)?;
    }
    Ok(TrainOutcome { best, best_meta, last, state })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, step {step})")),
        other => other,
    }
}

fn row(split: &str, epoch: usize, step: usize, lr: f64, loss: f64, s: SegScores) -> MetricRow {
    MetricRow { split: split.into(), epoch, step, lr, loss, iou: s.iou, biou: s.biou, score: s.score }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Pretext objective with the default perceptual extractor.
pub fn reconstruction_objective(weights: &LossWeights, boundary_d: usize) -> Result<Objective> {
    weights.validate()?;
    Ok(Objective::Reconstruction { weights: weights.clone(), extractor: PerceptualExtractor::default(), boundary_d })
}

fn fresh_pretrain_state(params: &ModelParameters<f32>, config: &PretrainConfig) -> Result<TrainState> {
    Ok(TrainState {
        epoch: 0,
        step: 0,
        best_val: f64::INFINITY,
        best_epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE)),
        optimizer: Optimizer::adam(params, config.lr, config.weight_decay),
        scheduler: PlateauScheduler::new(config.plateau_factor, config.plateau_patience, config.min_delta)?,
        history: MetricsReport::default(),
    })
}

fn pretrain_tagged(
    model: ModelParameters<f32>,
    resume: Option<TrainOutcome>,
    manifest: &DatasetManifest,
    config: &PretrainConfig,
    weights: &LossWeights,
    tag: Provenance,
) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.task != Task::Pretext {
        return Err(Error::Config("pretraining needs a pretext manifest".into()));
    }
    if model.config.head != Head::Reconstruction {
        return Err(Error::Config("pretraining needs a reconstruction head".into()));
    }
    if model.provenance() != Provenance::Random && model.provenance() != tag {
        return Err(Error::Contract(format!("cannot pretrain a {}-tagged model as {tag}", model.provenance())));
    }
    let obj = reconstruction_objective(weights, 2)?;
    let train = sample_set(manifest.split(Split::Train))?;
    let val = sample_set(manifest.split(Split::Val))?;
    let spec = LoopSpec {
        obj: &obj,
        train: &train,
        val: &val,
        batch: config.batch,
        eval_batch: config.eval_batch,
        clip: Some(config.clip_norm),
        monitor: Monitor::Validation,
        epochs: config.epochs,
        tag: Some(tag),
    };
    match resume {
        None => {
            let state = fresh_pretrain_state(&model, config)?;
            run_loop(&spec, model, None, state)
        }
        Some(o) => run_loop(&spec, o.last, Some((o.best, o.best_meta)), o.state),
    }
}

/// DSM→DTM pretraining; the best-validation parameters are tagged
/// `terrain-pretrained`.
pub fn pretrain(
    model: ModelParameters<f32>,
    manifest: &DatasetManifest,
    config: &PretrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    pretrain_tagged(model, None, manifest, config, weights, Provenance::TerrainPretrained)
}

/// Continues a pretraining run up to `config.epochs`.
pub fn resume_pretrain(
    outcome: TrainOutcome,
    manifest: &DatasetManifest,
    config: &PretrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    let tag = outcome.best.provenance();
    let model = outcome.last.clone();
    pretrain_tagged(model, Some(outcome), manifest, config, weights, tag)
}

/// Texture tiles mirroring `like` one-to-one (same ids, splits and tile
/// size), set up as an identity reconstruction task.
pub fn texture_manifest(like: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(like.entries.len());
    for (i, e) in like.entries.iter().enumerate() {
        let (h, w) = e.record.size();
        if h != w {
            return Err(Error::Data("texture tiles must be square".into()));
        }
        let tex = dem_synth::shuffled_texture(h, derive_seed(seed, 1000 + i as u64));
        let rec = dataset::TileRecord {
            tile_id: format!("tex-{i}"),
            scene_id: format!("tex-{}", e.record.scene_id),
            row: e.record.row,
            col: e.record.col,
            target: Target::Terrain(tex.clone()),
            input: tex,
            norm: None,
        };
        let rec = dataset::normalize_tile(&rec, NormMode::PerTileMinshift)?;
        entries.push(ManifestEntry { record: rec, split: e.split, labeled: e.labeled });
    }
    Ok(DatasetManifest { task: Task::Pretext, seed, entries, label_fraction: 1.0, noise: Vec::new() })
}

/// Trains the same architecture to reproduce shuffled-texture tiles; the
/// result is tagged `proxy-pretrained`. The input skip is switched off so
/// the identity target is not free.
pub fn make_proxy_init(
    mut model: ModelParameters<f32>,
    texture: &DatasetManifest,
    config: &PretrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    model.config.input_skip = false;
    pretrain_tagged(model, None, texture, config, weights, Provenance::ProxyPretrained)
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Segmentation starting point for `init`. Pretrained inits keep their body
/// and receive a fresh head drawn from `seed`.
pub fn init_model(
    kind: InitKind,
    source: Option<&ModelParameters<f32>>,
    seg_config: &model::ModelConfig,
    seed: u64,
) -> Result<ModelParameters<f32>> {
    let head_seed = derive_seed(seed, STREAM_HEAD);
    match kind {
        InitKind::Random => model::build_model(&seg_config.with_head(Head::Segmentation), head_seed),
        _ => {
            let src = source.ok_or_else(|| Error::Config(format!("init `{kind}` needs a pretrained checkpoint")))?;
            if src.provenance() != kind.provenance() {
                return Err(Error::Contract(format!(
                    "init `{kind}` expects provenance {}, checkpoint is {}",
                    kind.provenance(),
                    src.provenance()
                )));
            }
            model::check_transfer_compatible(&src.config, seg_config)?;
            model::transfer_weights(src, Head::Segmentation, head_seed)
        }
    }
}

fn seg_objective(train: &SampleSet, weights: &LossWeights, boundary_d: usize) -> Result<Objective> {
    weights.validate()?;
    let class_weights = match weights.class_weights {
        Some(w) => w,
        None => {
            let masks: Vec<&[u8]> = train
                .items
                .iter()
                .filter_map(|s| match &s.target {
                    SampleTarget::Mask { mask, .. } => Some(mask.as_slice()),
                    SampleTarget::Terrain(_) => None,
                })
                .collect();
            losses::inverse_frequency_weights(&masks)
        }
    };
    Ok(Objective::Segmentation { weights: weights.clone(), class_weights, boundary_d })
}

fn fresh_finetune_state(params: &ModelParameters<f32>, config: &FinetuneConfig) -> Result<TrainState> {
    Ok(TrainState {
        epoch: 0,
        step: 0,
        best_val: f64::INFINITY,
        best_epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE)),
        optimizer: Optimizer::rmsprop(params, config.lr, config.weight_decay, config.rms_value, config.rms_reading),
        scheduler: PlateauScheduler::new(config.decay_factor, config.decay_patience, config.min_delta)?,
        history: MetricsReport::default(),
    })
}

fn finetune_inner(
    init: ModelParameters<f32>,
    resume: Option<TrainOutcome>,
    manifest: &DatasetManifest,
    config: &FinetuneConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.task != Task::Segmentation {
        return Err(Error::Config("fine-tuning needs a segmentation manifest".into()));
    }
    if init.config.head != Head::Segmentation {
        return Err(Error::Config("fine-tuning needs a segmentation head".into()));
    }
    let train = sample_set(manifest.split(Split::Train).filter(|e| e.labeled))?;
    if train.items.is_empty() {
        return Err(Error::Config("labeled training subset is empty".into()));
    }
    let val = sample_set(manifest.split(Split::Val))?;
    let obj = seg_objective(&train, weights, config.boundary_d)?;
    let spec = LoopSpec {
        obj: &obj,
        train: &train,
        val: &val,
        batch: config.batch,
        eval_batch: config.eval_batch,
        clip: config.clip_norm,
        monitor: config.monitor,
        epochs: config.epochs,
        tag: None,
    };
    match resume {
        None => {
            let state = fresh_finetune_state(&init, config)?;
            run_loop(&spec, init, None, state)
        }
        Some(o) => run_loop(&spec, o.last, Some((o.best, o.best_meta)), o.state),
    }
}

/// Full fine-tuning on the labeled train tiles of `manifest`.
pub fn finetune(
    init: ModelParameters<f32>,
    manifest: &DatasetManifest,
    config: &FinetuneConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    finetune_inner(init, None, manifest, config, weights)
}

pub fn resume_finetune(
    outcome: TrainOutcome,
    manifest: &DatasetManifest,
    config: &FinetuneConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    let init = outcome.last.clone();
    finetune_inner(init, Some(outcome), manifest, config, weights)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TileScore {
    pub tile_id: String,
    pub noisy: SegScores,
    pub clean: SegScores,
}

/// Per-tile and aggregate scores against the (possibly noisy) labels and the
/// clean masks they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub loss: f64,
    pub tiles: Vec<TileScore>,
    pub noisy: SegScores,
    pub clean: SegScores,
}

impl EvalReport {
    pub fn to_metrics(&self, epoch: usize, step: usize) -> MetricsReport {
        let mut r = MetricsReport::default();
        let name = self.split.to_string();
        r.push(row(&name, epoch, step, 0.0, self.loss, self.noisy));
        r.push(row(&format!("{name}-clean"), epoch, step, 0.0, self.loss, self.clean));
        r
    }
}

fn eval_samples(manifest: &DatasetManifest, split: Split) -> Result<SampleSet> {
    if manifest.count(split) == 0 {
        return Err(Error::Config(format!("manifest has no `{split}` tiles")));
    }
    sample_set(manifest.split(split))
}

fn finish_report(split: Split, loss: f64, ids: Vec<String>, noisy: Vec<SegScores>, clean: Vec<SegScores>) -> EvalReport {
    let tiles = ids
        .into_iter()
        .zip(noisy.iter().zip(&clean))
        .map(|(tile_id, (n, c))| TileScore { tile_id, noisy: *n, clean: *c })
        .collect();
    EvalReport { split, loss, tiles, noisy: SegScores::mean(&noisy), clean: SegScores::mean(&clean) }
}

/// Scores a segmentation model on one split. With `noise`, the labels are
/// corrupted first and scores are reported against both label sets.
pub fn evaluate(
    params: &ModelParameters<f32>,
    manifest: &DatasetManifest,
    split: Split,
    noise: Option<&NoiseSpec>,
    boundary_d: usize,
    weights: &LossWeights,
) -> Result<EvalReport> {
    if params.config.head != Head::Segmentation {
        return Err(Error::Config("evaluation needs a segmentation head".into()));
    }
    let noised;
    let manifest = match noise {
        Some(spec) => {
            noised = dataset::inject_label_noise(manifest, spec)?;
            &noised
        }
        None => manifest,
    };
    let set = eval_samples(manifest, split)?;
    let labeled = sample_set(manifest.split(Split::Train).filter(|e| e.labeled))?;
    let obj = seg_objective(if labeled.items.is_empty() { &set } else { &labeled }, weights, boundary_d)?;
    let (loss, noisy, clean) = eval_set(params, &obj, &set, 8)?;
    Ok(finish_report(split, loss, set.items.iter().map(|s| s.tile_id.clone()).collect(), noisy, clean))
}

/// Scores the labels against themselves; every score is 1.
pub fn evaluate_oracle(manifest: &DatasetManifest, split: Split, boundary_d: usize) -> Result<EvalReport> {
    let set = eval_samples(manifest, split)?;
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    for s in &set.items {
        let SampleTarget::Mask { mask, clean: cm } = &s.target else {
            return Err(Error::Config("oracle evaluation needs a segmentation manifest".into()));
        };
        let m = Mask::new(set.h, set.w, mask.clone());
        noisy.push(SegScores::of(&m, &m, boundary_d)?);
        clean.push(SegScores::of(&m, &Mask::new(set.h, set.w, cm.clone()), boundary_d)?);
    }
    Ok(finish_report(split, 0.0, set.items.iter().map(|s| s.tile_id.clone()).collect(), noisy, clean))
}

/// Reconstruction loss and structure-mask agreement of a pretext model.
pub fn evaluate_pretext(
    params: &ModelParameters<f32>,
    manifest: &DatasetManifest,
    split: Split,
    weights: &LossWeights,
) -> Result<EvalReport> {
    if manifest.task != Task::Pretext || params.config.head != Head::Reconstruction {
        return Err(Error::Config("pretext evaluation needs a pretext manifest and reconstruction head".into()));
    }
    let set = eval_samples(manifest, split)?;
    let obj = reconstruction_objective(weights, 2)?;
    let (loss, s, c) = eval_set(params, &obj, &set, 8)?;
    Ok(finish_report(split, loss, set.items.iter().map(|s| s.tile_id.clone()).collect(), s, c))
}

/// Predicted DTM (meters) for one pretext tile, plus the input DSM.
pub fn predict_terrain(params: &ModelParameters<f32>, tile: &dataset::TileRecord) -> Result<Grid> {
    let rec = match tile.norm {
        Some(_) => tile.clone(),
        None => dataset::normalize_tile(tile, NormMode::PerTileMinshift)?,
    };
    let norm = rec.norm.unwrap();
    let (h, w) = rec.size();
    let x = Tensor::from_vec(1, 1, h, w, rec.input.data.clone());
    let pass = model::forward(params, &x, Mode::Eval)?;
    Ok(Grid::new(h, w, pass.logits.data.iter().map(|v| v * norm.scale + norm.offset).collect()))
}

/// Predicted footprint mask for one segmentation tile.
pub fn predict_mask(params: &ModelParameters<f32>, tile: &dataset::TileRecord) -> Result<Mask> {
    let rec = match tile.norm {
        Some(_) => tile.clone(),
        None => dataset::normalize_tile(tile, NormMode::PerTileMinshift)?,
    };
    let (h, w) = rec.size();
    let x = Tensor::from_vec(1, 1, h, w, rec.input.data.clone());
    let pass = model::forward(params, &x, Mode::Eval)?;
    Ok(Mask::new(h, w, argmax_mask(&pass.logits, 0)))
}

// ---------------------------------------------------------------------------
// Initialization comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub init: InitKind,
    pub fraction: f64,
    pub seed: u64,
    pub labeled_tiles: usize,
    pub history: MetricsReport,
    pub test: EvalReport,
}

impl RunSummary {
    /// Training loss per epoch.
    pub fn train_losses(&self) -> Vec<f64> {
        self.history.split("train").map(|r| r.loss).collect()
    }
}

/// One `(init, fraction)` cell: medians over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub init: InitKind,
    pub fraction: f64,
    pub seeds: usize,
    pub iou: f64,
    pub biou: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonReport {
    pub runs: Vec<RunSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl ComparisonReport {
    pub fn runs_for(&self, init: InitKind, fraction: f64) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.init == init && r.fraction == fraction)
    }

    /// Rows ordered by fraction then init; Score is the mean of the two
    /// median columns.
    pub fn table(&self) -> Vec<TableRow> {
        let cells: Vec<_> = self.runs.iter().map(|r| (r.init, r.fraction, r.test.noisy.iou, r.test.noisy.biou)).collect();
        crate::report::summarize(&cells)
    }

    /// Median over seeds of a per-epoch training-loss curve.
    pub fn median_train_curve(&self, init: InitKind, fraction: f64) -> Vec<f64> {
        let curves: Vec<Vec<f64>> = self.runs_for(init, fraction).map(|r| r.train_losses()).collect();
        let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        (0..len).map(|e| median(&curves.iter().map(|c| c[e]).collect::<Vec<_>>())).collect()
    }
}

/// Pretrained starting points for the comparison.
#[derive(Clone, Debug, Default)]
pub struct InitSources {
    pub proxy: Option<ModelParameters<f32>>,
    pub terrain: Option<ModelParameters<f32>>,
}

impl InitSources {
    pub fn get(&self, kind: InitKind) -> Option<&ModelParameters<f32>> {
        match kind {
            InitKind::Random => None,
            InitKind::Proxy => self.proxy.as_ref(),
            InitKind::Terrain => self.terrain.as_ref(),
        }
    }
}

/// One fine-tuning run: label subset, init and training all derived from `seed`.
pub fn run_cell(
    init: InitKind,
    sources: &InitSources,
    seg_config: &model::ModelConfig,
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
    config: &FinetuneConfig,
    weights: &LossWeights,
) -> Result<(RunSummary, TrainOutcome)> {
    let labeled = dataset::subsample_labels(manifest, fraction, derive_seed(seed, STREAM_LABELS))?;
    let start = init_model(init, sources.get(init), seg_config, seed)?;
    let cfg = FinetuneConfig { seed, label_fraction: fraction, init, ..config.clone() };
    let out = finetune(start, &labeled, &cfg, weights)?;
    let test = evaluate(&out.best, &labeled, Split::Test, None, cfg.boundary_d, weights)?;
    let summary = RunSummary {
        init,
        fraction,
        seed,
        labeled_tiles: labeled.labeled().count(),
        history: out.state.history.clone(),
        test,
    };
    Ok((summary, out))
}

/// Identical fine-tuning for every init × fraction × seed.
pub fn compare_inits(
    inits: &[InitKind],
    sources: &InitSources,
    seg_config: &model::ModelConfig,
    manifest: &DatasetManifest,
    fractions: &[f64],
    seeds: &[u64],
    config: &FinetuneConfig,
    weights: &LossWeights,
) -> Result<ComparisonReport> {
    let mut report = ComparisonReport::default();
    for &fraction in fractions {
        for &init in inits {
            for &seed in seeds {
                let (s, _) = run_cell(init, sources, seg_config, manifest, fraction, seed, config, weights)?;
                log::info!("{init} @ {fraction}: seed {seed} test IoU {:.4}", s.test.noisy.iou);
                report.runs.push(s);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dem_synth::{generate_scene, SynthConfig};
    use crate::model::{build_model, ModelConfig};

    fn small_scene(seed: u64) -> dem_synth::SceneBundle {
        let cfg = SynthConfig {
            size_px: 64,
            seed,
            terrain_amplitude_m: 6.0,
            building_density: 900.0,
            building_size_m: [6.0, 14.0],
            ..Default::default()
        };
        generate_scene(&cfg).unwrap()
    }

    fn manifest(task: Task, scenes: u64) -> DatasetManifest {
        let recs = (0..scenes)
            .flat_map(|i| {
                let s = small_scene(40 + i);
                dataset::tile_scene(&s, 32, 32, task).unwrap()
            })
            .map(|t| dataset::normalize_tile(&t, NormMode::PerTileMinshift).unwrap())
            .collect();
        dataset::make_splits(recs, [0.5, 0.25, 0.25], task, 1).unwrap()
    }

    fn tiny(head: Head) -> ModelConfig {
        ModelConfig { base_width: 4, depth: 2, se_reduction: 2, head, ..Default::default() }
    }

    fn pre_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig { epochs, batch: 2, ..Default::default() }
    }

    fn ft_cfg(epochs: usize) -> FinetuneConfig {
        FinetuneConfig { epochs, batch: 2, ..Default::default() }
    }

    fn trainable_bits(p: &ModelParameters<f32>) -> Vec<Vec<u32>> {
        p.tensors.iter().filter(|t| t.role.trainable()).map(|t| t.data.iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn zero_lr_fixes_parameters() {
        let m = manifest(Task::Pretext, 4);
        let start = build_model(&tiny(Head::Reconstruction), 3).unwrap();
        let out = pretrain(start.clone(), &m, &PretrainConfig { lr: 0.0, ..pre_cfg(2) }, &LossWeights::default()).unwrap();
        assert_eq!(trainable_bits(&out.last), trainable_bits(&start));
        let seg = manifest(Task::Segmentation, 4);
        let init = build_model(&tiny(Head::Segmentation), 3).unwrap();
        let out = finetune(init.clone(), &seg, &FinetuneConfig { lr: 0.0, ..ft_cfg(2) }, &LossWeights::default()).unwrap();
        assert_eq!(trainable_bits(&out.last), trainable_bits(&init));
    }

    #[test]
    fn pretrain_tags_and_rejects_wrong_inputs() {
        let m = manifest(Task::Pretext, 4);
        let out = pretrain(build_model(&tiny(Head::Reconstruction), 3).unwrap(), &m, &pre_cfg(1), &LossWeights::default()).unwrap();
        assert_eq!(out.best.provenance(), Provenance::TerrainPretrained);
        assert_eq!(out.history().split("val").count(), 1);
        let seg = manifest(Task::Segmentation, 4);
        assert!(pretrain(build_model(&tiny(Head::Reconstruction), 3).unwrap(), &seg, &pre_cfg(1), &LossWeights::default()).is_err());
        assert!(pretrain(build_model(&tiny(Head::Segmentation), 3).unwrap(), &m, &pre_cfg(1), &LossWeights::default()).is_err());
    }

    #[test]
    fn resume_is_bit_exact() {
        let m = manifest(Task::Pretext, 4);
        let w = LossWeights::default();
        let start = build_model(&tiny(Head::Reconstruction), 5).unwrap();
        let straight = pretrain(start.clone(), &m, &pre_cfg(4), &w).unwrap();
        let half = pretrain(start, &m, &pre_cfg(2), &w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_outcome(&half, dir.path()).unwrap();
        let loaded = load_outcome(dir.path()).unwrap();
        assert_eq!(loaded, half);
        let resumed = resume_pretrain(loaded, &m, &pre_cfg(4), &w).unwrap();
        assert_eq!(resumed.history(), straight.history());
        assert_eq!(resumed.last, straight.last);
        assert_eq!(resumed.best, straight.best);

        let seg = manifest(Task::Segmentation, 4);
        let init = build_model(&tiny(Head::Segmentation), 6).unwrap();
        let straight = finetune(init.clone(), &seg, &ft_cfg(4), &w).unwrap();
        let half = finetune(init, &seg, &ft_cfg(2), &w).unwrap();
        save_outcome(&half, dir.path()).unwrap();
        let resumed = resume_finetune(load_outcome(dir.path()).unwrap(), &seg, &ft_cfg(4), &w).unwrap();
        assert_eq!(resumed.history(), straight.history());
        assert_eq!(resumed.last, straight.last);
    }

    #[test]
    fn finetune_ignores_unlabeled_tiles() {
        let seg = manifest(Task::Segmentation, 6);
        let labeled = dataset::subsample_labels(&seg, 0.5, 2).unwrap();
        let mut pruned = labeled.clone();
        pruned.entries.retain(|e| e.split != Split::Train || e.labeled);
        let init = build_model(&tiny(Head::Segmentation), 7).unwrap();
        let w = LossWeights::default();
        let a = finetune(init.clone(), &labeled, &ft_cfg(2), &w).unwrap();
        let b = finetune(init.clone(), &pruned, &ft_cfg(2), &w).unwrap();
        assert_eq!(a.history(), b.history());
        let again = finetune(init.clone(), &labeled, &ft_cfg(2), &w).unwrap();
        assert_eq!(a.history(), again.history());
        let mut none = labeled.clone();
        none.entries.iter_mut().for_each(|e| e.labeled = false);
        assert!(matches!(finetune(init, &none, &ft_cfg(1), &w), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_edge_cases() {
        let seg = manifest(Task::Segmentation, 4);
        let oracle = evaluate_oracle(&seg, Split::Test, 2).unwrap();
        assert_eq!((oracle.noisy.iou, oracle.noisy.biou, oracle.noisy.score), (1.0, 1.0, 1.0));
        let mut p = build_model(&tiny(Head::Segmentation), 1).unwrap();
        p.zero_head();
        let bias = p.tensors.iter_mut().find(|t| t.name == "head.seg_logits.bias").unwrap();
        bias.data = vec![10.0, -10.0];
        let mut only_buildings = seg.clone();
        only_buildings.entries.retain(|e| e.record.mask().unwrap().count() > 0);
        let rep = evaluate(&p, &only_buildings, Split::Test, None, 2, &LossWeights::default()).unwrap();
        assert!(!rep.tiles.is_empty());
        assert_eq!(rep.noisy.iou, 0.0);
        let mut no_test = seg.clone();
        no_test.entries.retain(|e| e.split != Split::Test);
        assert!(matches!(evaluate(&p, &no_test, Split::Test, None, 2, &LossWeights::default()), Err(Error::Config(_))));
    }

    #[test]
    fn proxy_init_moves_weights() {
        let pre = manifest(Task::Pretext, 4);
        let tex = texture_manifest(&pre, 3).unwrap();
        assert_eq!(tex.count(Split::Train), pre.count(Split::Train));
        let start = build_model(&tiny(Head::Reconstruction), 8).unwrap();
        let out = make_proxy_init(start.clone(), &tex, &pre_cfg(1), &LossWeights::default()).unwrap();
        assert_eq!(out.best.provenance(), Provenance::ProxyPretrained);
        let (mut moved, mut total) = (0, 0);
        for (a, b) in start.tensors.iter().zip(&out.best.tensors).filter(|(a, _)| a.role.trainable()) {
            total += a.data.len();
            moved += a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
        }
        assert!(moved as f64 > 0.99 * total as f64, "{moved}/{total}");
        let seg = init_model(InitKind::Proxy, Some(&out.best), &tiny(Head::Reconstruction), 1).unwrap();
        assert_eq!(seg.provenance(), Provenance::ProxyPretrained);
        assert!(init_model(InitKind::Terrain, Some(&out.best), &tiny(Head::Reconstruction), 1).is_err());
        assert!(init_model(InitKind::Terrain, None, &tiny(Head::Reconstruction), 1).is_err());
    }

    #[test]
    fn comparison_table_shape() {
        let seg = manifest(Task::Segmentation, 6);
        let pre = manifest(Task::Pretext, 4);
        let w = LossWeights::default();
        let terrain = pretrain(build_model(&tiny(Head::Reconstruction), 2).unwrap(), &pre, &pre_cfg(1), &w).unwrap().best;
        let tex = texture_manifest(&pre, 2).unwrap();
        let proxy = make_proxy_init(build_model(&tiny(Head::Reconstruction), 2).unwrap(), &tex, &pre_cfg(1), &w).unwrap().best;
        let sources = InitSources { proxy: Some(proxy), terrain: Some(terrain) };
        let fractions = [0.25, 0.5, 1.0];
        let rep = compare_inits(&InitKind::ALL, &sources, &tiny(Head::Reconstruction), &seg, &fractions, &[0], &ft_cfg(1), &w).unwrap();
        let table = rep.table();
        assert_eq!(table.len(), 9);
        for r in &table {
            assert_eq!(r.score, (r.iou + r.biou) / 2.0);
        }
        assert_eq!(rep.median_train_curve(InitKind::Terrain, 1.0).len(), 1);
    }
}
