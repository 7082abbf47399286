//! Two-stage training and the ablation benchmark.
//!
//! Stage one fits the shape generator on high-contrast masks (see
//! [`crate::generator`]). Stage two trains a segmentation network on 2D
//! slices pooled from whole training cases, with the generator frozen.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgmnet_nn::{mix64, stream_seed, Adam, AdamConfig, Graph, Mode, ParamStore};
use log::{info, warn};
use ndarray::{s, Array2, Array3, Array4, ArrayD, Ix2, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{build_model, ArchError, Model, ModelSpec, Variant};
use crate::checkpoint::{self, CheckpointError};
use crate::generator::{self, Generator, GeneratorError, GeneratorReport, GeneratorTrainConfig};
use crate::landmarks::{encode_landmarks, extract_landmarks, LandmarkError};
use crate::losses::{total_loss, LandmarkTerms, LossBreakdown, LossConfig, LossError};
use crate::metrics::{evaluate_cases, Aggregate, CaseSegmenter, MetricReport};
use crate::phantoms::{Manifest, PhantomError};
use crate::preprocess::{geometric, intensity_stats, IntensityStats, NormalizationScope, PreprocessConfig, PreprocessError, preprocess_pair};
use crate::volume::{CaseRecord, Kind, Modality, Volume};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training slices")]
    EmptyPool,
    #[error("variant {0} needs a trained generator")]
    MissingGenerator(Variant),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss:?}")]
    NonFinite { epoch: usize, batch: usize, loss: LossBreakdown },
    #[error("generator parameters changed during training ({before} -> {after})")]
    GeneratorChanged { before: String, after: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generator,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub variant: Variant,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub rng_seed: u64,
    pub loss: LossConfig,
    pub early_stop_patience: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Full,
            variant: Variant::DgmNet,
            learning_rate: 1e-3,
            batch_size: 10,
            epochs: 100,
            validation_fraction: 0.25,
            test_fraction: 0.25,
            rng_seed: 0,
            loss: LossConfig::default(),
            early_stop_patience: 15,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return bad(format!("validation_fraction {} must be in (0, 0.5]", self.validation_fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} must be in (0, 1)", self.test_fraction));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.dice_epsilon > 0.0) {
            return bad("loss.lambda must be >= 0 and loss.dice_epsilon > 0".into());
        }
        Ok(())
    }
}

/// One case after preprocessing, with its landmark target vector.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    pub image: Volume,
    pub mask: Volume,
    pub landmarks: Vec<f32>,
}

/// Intensity statistics used for dataset-scope normalization, computed
/// over the geometrically preprocessed training images.
pub fn dataset_stats(cases: &[CaseRecord], pre: &PreprocessConfig) -> Result<Option<IntensityStats>, TrainError> {
    if pre.normalization_scope != NormalizationScope::Dataset {
        return Ok(None);
    }
    let imgs = cases.iter().map(|c| geometric(&c.image, pre)).collect::<Result<Vec<_>, _>>()?;
    Ok(Some(intensity_stats(&imgs)))
}

pub fn prepare_cases(
    cases: &[CaseRecord],
    pre: &PreprocessConfig,
    stats: Option<IntensityStats>,
    max_slices: usize,
) -> Result<Vec<PreparedCase>, TrainError> {
    cases
        .iter()
        .map(|c| {
            let (image, mask) = preprocess_pair(&c.image, &c.mask, pre, stats)?;
            let landmarks = encode_landmarks(&extract_landmarks(&mask)?, max_slices)?;
            Ok(PreparedCase { case_id: c.case_id.clone(), image, mask, landmarks })
        })
        .collect()
}

/// A mini-batch of 2D slices.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (case index, slice index) per sample.
    pub members: Vec<(usize, usize)>,
    pub images: Array4<f32>,
    pub masks: Array4<f64>,
    /// Whole-volume landmark vector of each sample's case, (N, S·9).
    pub landmarks: Array2<f64>,
    /// zᵘ of each sample's own slice.
    pub presence: Vec<f64>,
    pub slice_index: Vec<usize>,
    /// Slice index divided by `max_slices − 1`.
    pub position: Vec<f32>,
}

/// Seeded permutation of every (case, slice) pair for one epoch.
pub fn epoch_order(cases: &[PreparedCase], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut pool: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.image.depth()).map(move |u| (i, u)))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("slices.epoch{epoch}"))));
    pool
}

fn assemble(cases: &[PreparedCase], members: &[(usize, usize)], max_slices: usize) -> Batch {
    let (h, w) = (cases[0].image.height(), cases[0].image.width());
    let n = members.len();
    let ld = cases[0].landmarks.len();
    let mut images = Array4::zeros((n, 1, h, w));
    let mut masks = Array4::zeros((n, 1, h, w));
    let mut landmarks = Array2::zeros((n, ld));
    let mut presence = Vec::with_capacity(n);
    for (k, &(ci, u)) in members.iter().enumerate() {
        let c = &cases[ci];
        images.slice_mut(s![k, 0, .., ..]).assign(&c.image.slice(u));
        masks.slice_mut(s![k, 0, .., ..]).assign(&c.mask.slice(u).mapv(f64::from));
        for (j, &v) in c.landmarks.iter().enumerate() {
            landmarks[[k, j]] = v as f64;
        }
        presence.push(c.landmarks[u * crate::landmarks::SLICE_STRIDE] as f64);
    }
    let slice_index: Vec<usize> = members.iter().map(|m| m.1).collect();
    let position = slice_index.iter().map(|&u| generator::slice_position(u, max_slices)).collect();
    Batch { members: members.to_vec(), images, masks, landmarks, presence, slice_index, position }
}

/// All slices of all cases, shuffled by `(seed, epoch)`, in batches of
/// `batch_size` (the last one may be short).
pub fn make_slice_batches(
    cases: &[PreparedCase],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    max_slices: usize,
) -> Result<Vec<Batch>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let order = epoch_order(cases, seed, epoch);
    if order.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    Ok(order.chunks(batch_size).map(|m| assemble(cases, m, max_slices)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Case-level train / validation / test assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn fraction_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

impl Split {
    /// Seeded split: `test_fraction` of all cases go to test, then
    /// `validation_fraction` of the remainder to validation.
    pub fn new(case_ids: &[String], test_fraction: f64, validation_fraction: f64, seed: u64) -> Result<Self, TrainError> {
        let mut ids = case_ids.to_vec();
        ids.sort();
        ids.dedup();
        if ids.len() < 3 {
            return Err(TrainError::Config(format!("need at least 3 cases to split, got {}", ids.len())));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "split")));
        let n_test = fraction_count(ids.len(), test_fraction);
        let rest = ids.split_off(n_test);
        let n_val = fraction_count(rest.len(), validation_fraction);
        let mut test = ids;
        let mut val = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        test.sort();
        val.sort();
        train.sort();
        Ok(Self { train, val, test })
    }

    pub fn of(&self, id: &str) -> Option<SplitName> {
        if self.train.iter().any(|c| c == id) {
            Some(SplitName::Train)
        } else if self.val.iter().any(|c| c == id) {
            Some(SplitName::Val)
        } else if self.test.iter().any(|c| c == id) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&str, &str)> = Vec::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            rows.extend(ids.iter().map(|id| (id.as_str(), name)));
        }
        rows.sort();
        let mut s = String::from("case_id,split\n");
        for (id, name) in rows {
            s.push_str(&format!("{id},{name}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some("case_id,split") {
            return Err(TrainError::Config("split file lacks the `case_id,split` header".into()));
        }
        let mut out = Self { train: vec![], val: vec![], test: vec![] };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (id, which) = line
                .split_once(',')
                .ok_or_else(|| TrainError::Config(format!("bad split row `{line}`")))?;
            match which {
                "train" => out.train.push(id.to_string()),
                "val" => out.val.push(id.to_string()),
                "test" => out.test.push(id.to_string()),
                other => return Err(TrainError::Config(format!("unknown split `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    /// Cases of `which`, in split order.
    pub fn select(&self, cases: &[CaseRecord], which: SplitName) -> Vec<CaseRecord> {
        let ids = self.ids(which);
        ids.iter().filter_map(|id| cases.iter().find(|c| &c.case_id == id).cloned()).collect()
    }
}

/// Slice-by-slice inference over a preprocessed volume.
pub struct ModelSegmenter<'a> {
    pub model: &'a Model,
    pub batch_size: usize,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, batch_size: 16 }
    }

    pub fn predict_volume(&self, image: &Volume) -> Result<Array3<f32>, TrainError> {
        let (c, h, w) = (image.depth(), image.height(), image.width());
        let mut out = Array3::zeros((c, h, w));
        let slices: Vec<usize> = (0..c).collect();
        for chunk in slices.chunks(self.batch_size.max(1)) {
            let mut x = Array4::zeros((chunk.len(), 1, h, w));
            for (k, &u) in chunk.iter().enumerate() {
                x.slice_mut(s![k, 0, .., ..]).assign(&image.slice(u));
            }
            let mut g = Graph::new(&self.model.store, Mode::Eval, 0);
            let xv = g.input(x.into_dyn());
            let o = self.model.forward(&mut g, xv, Some(chunk))?;
            let p = g.value(o.mask).view().into_dimensionality::<Ix4>().expect("rank 4");
            for (k, &u) in chunk.iter().enumerate() {
                out.slice_mut(s![u, .., ..]).assign(&p.slice(s![k, 0, .., ..]));
            }
        }
        Ok(out)
    }
}

impl CaseSegmenter for ModelSegmenter<'_> {
    fn segment(&self, _case_id: &str, image: &Volume) -> Result<Volume, String> {
        let p = self.predict_volume(image).map_err(|e| e.to_string())?;
        Volume::new(p, image.spacing(), Kind::Image).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_dsc: f64,
    pub seconds: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,total,mask,dice,ce,cls,lnd,val_dsc,seconds";

pub fn loss_log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in history {
        let l = &e.loss;
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.3}\n",
            e.epoch, l.total, l.mask, l.dice, l.ce, l.cls, l.lnd, e.val_dsc, e.seconds
        ));
    }
    s
}

/// Persisted summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub preprocess: PreprocessConfig,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
    pub split_hash: Option<String>,
    pub generator_hash: Option<String>,
    pub deterministic: bool,
    pub final_report: Option<MetricReport>,
}

impl RunRecord {
    pub fn val_curve(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.val_dsc).collect()
    }
}

/// Result of [`train_full`]: the best-validation model and its record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub intensity: Option<IntensityStats>,
}

#[derive(Clone, Default)]
pub struct TrainOptions<'a> {
    /// Run directory; when set, logs and checkpoints are written there.
    pub run_dir: Option<&'a Path>,
    /// Continue from `run_dir/last` if it exists.
    pub resume: bool,
    pub split_hash: Option<String>,
    /// Observer called after every optimizer step with the store.
    pub on_step: Option<&'a dyn Fn(usize, usize, &ParamStore)>,
    /// Replaces the landmark targets of each batch before the loss.
    pub landmark_override: Option<&'a dyn Fn(&mut Array2<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    epochs_done: usize,
    best_epoch: usize,
    best_val_dsc: f64,
    since_best: usize,
    history: Vec<EpochLog>,
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

fn notes(pairs: &[(&str, serde_json::Value)]) -> serde_json::Map<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn stats_notes(stats: Option<IntensityStats>) -> Vec<(&'static str, serde_json::Value)> {
    match stats {
        Some(s) => vec![("intensity_mean", s.mean.into()), ("intensity_std", s.std.into())],
        None => vec![],
    }
}

/// Intensity statistics stored with a checkpoint, if any.
pub fn checkpoint_stats(man: &checkpoint::CheckpointManifest) -> Option<IntensityStats> {
    let mean = man.notes.get("intensity_mean")?.as_f64()?;
    let std = man.notes.get("intensity_std")?.as_f64()?;
    Some(IntensityStats { mean, std })
}

fn mean_dsc(report: &MetricReport) -> f64 {
    if report.rows.is_empty() {
        0.0
    } else {
        report.dsc().mean
    }
}

/// One optimizer step on a batch; returns the loss breakdown and the
/// running-statistics updates to apply.
fn train_step(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    graph_seed: u64,
    landmark_override: Option<&dyn Fn(&mut Array2<f64>)>,
) -> Result<(LossBreakdown, dgmnet_nn::Gradients, Vec<(dgmnet_nn::ParamId, ArrayD<f32>)>), TrainError> {
    let mut g = Graph::new(&model.store, Mode::Train, graph_seed);
    let x = g.input(batch.images.clone().into_dyn());
    let out = model.forward(&mut g, x, Some(&batch.slice_index))?;
    let pred = g.value(out.mask).view().into_dimensionality::<Ix4>().expect("rank 4").mapv(f64::from);
    let lm_pred = out
        .landmarks
        .map(|l| g.value(l).view().into_dimensionality::<Ix2>().expect("rank 2").mapv(f64::from));
    let mut truth = batch.landmarks.clone();
    if let Some(f) = landmark_override {
        f(&mut truth);
    }
    let terms = lm_pred.as_ref().map(|p| LandmarkTerms { pred: p.view(), truth: truth.view() });
    let (loss, grads) = total_loss(pred.view(), batch.masks.view(), terms, &cfg.loss)?;
    let mut seeds = vec![(out.mask, grads.mask.mapv(|v| v as f32).into_dyn())];
    if let (Some(l), Some(gl)) = (out.landmarks, grads.landmarks) {
        seeds.push((l, gl.mapv(|v| v as f32).into_dyn()));
    }
    let param_grads = if loss.is_finite() { g.backward(&seeds).map_err(ArchError::from)? } else { Default::default() };
    Ok((loss, param_grads, g.take_bn_updates()))
}

/// Train a segmentation network on slices of `train`, selecting the
/// epoch with the best mean validation DSC on `val`.
pub fn train_full(
    train: &[CaseRecord],
    val: &[CaseRecord],
    spec: &ModelSpec,
    generator: Option<&Generator>,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    pre.validate()?;
    if spec.variant != cfg.variant {
        return Err(TrainError::Config(format!("model variant {} differs from train.variant {}", spec.variant, cfg.variant)));
    }
    if pre.target_size != (spec.input_size.1, spec.input_size.0) {
        return Err(TrainError::Config(format!(
            "preprocess target_size {:?} does not match model input {:?}",
            pre.target_size, spec.input_size
        )));
    }
    let start = Instant::now();
    let mut model = build_model(spec, stream_seed(cfg.rng_seed, "model"))?;
    if spec.generator.is_some() {
        let gen = generator.ok_or(TrainError::MissingGenerator(spec.variant))?;
        if !gen.is_frozen() {
            return Err(GeneratorError::NotFrozen.into());
        }
        model.load_generator(gen)?;
    }
    let gen_hash = model.generator_hash();
    let stats = dataset_stats(train, pre)?;
    let cases = prepare_cases(train, pre, stats, spec.max_slices)?;
    if cases.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let mut state = ResumeState { epochs_done: 0, best_epoch: 0, best_val_dsc: f64::NEG_INFINITY, since_best: 0, history: vec![] };
    let mut best_store = model.store.clone();

    if let (true, Some(dir)) = (opts.resume, opts.run_dir) {
        let last = dir.join(LAST_DIR);
        if last.join(checkpoint::MANIFEST).exists() {
            let (m, _) = checkpoint::load_model(&last)?;
            model.store = m.store;
            adam.state = checkpoint::load_optimizer(&last)?;
            let text = fs::read_to_string(last.join("state.json")).map_err(io_err(&last))?;
            state = serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("bad resume state: {e}")))?;
            let best = dir.join(BEST_DIR);
            if best.join(checkpoint::MANIFEST).exists() {
                best_store = checkpoint::load_model(&best)?.0.store;
            }
            info!("resuming {} after epoch {}", spec.variant, state.epochs_done);
        }
    }

    let seed = cfg.rng_seed;
    for epoch in state.epochs_done..cfg.epochs {
        if state.since_best >= cfg.early_stop_patience && epoch > 0 {
            info!("{}: early stop after epoch {epoch}", spec.variant);
            break;
        }
        let t0 = Instant::now();
        let batches = make_slice_batches(&cases, cfg.batch_size, seed, epoch, spec.max_slices)?;
        let mut agg = LossBreakdown::default();
        for (bi, batch) in batches.iter().enumerate() {
            let graph_seed = mix64(stream_seed(seed, "graph") ^ ((epoch as u64) << 32) ^ bi as u64);
            let (loss, grads, updates) = train_step(&model, batch, cfg, graph_seed, opts.landmark_override)?;
            if !loss.is_finite() {
                if let Some(dir) = opts.run_dir {
                    write_json(
                        &dir.join("nan_abort.json"),
                        &serde_json::json!({ "epoch": epoch, "batch": bi, "loss": loss, "members": batch.members }),
                    )?;
                }
                return Err(TrainError::NonFinite { epoch, batch: bi, loss });
            }
            agg.accumulate_mean(&loss, bi + 1);
            adam.step(&mut model.store, &grads);
            for (id, v) in updates {
                model.store.get_mut(id).value = v;
            }
            if let Some(f) = opts.on_step {
                f(epoch, bi, &model.store);
            }
        }
        let report = evaluate_cases(&ModelSegmenter::new(&model), val, pre, stats);
        let val_dsc = mean_dsc(&report);
        let log = EpochLog { epoch: epoch + 1, loss: agg, val_dsc, seconds: t0.elapsed().as_secs_f64() };
        info!(
            "{} epoch {}: loss {:.4} (mask {:.4}, cls {:.4}, lnd {:.4}) val DSC {:.4} [{:.1}s]",
            spec.variant, log.epoch, agg.total, agg.mask, agg.cls, agg.lnd, val_dsc, log.seconds
        );
        state.history.push(log);
        state.epochs_done = epoch + 1;
        if val_dsc > state.best_val_dsc {
            state.best_val_dsc = val_dsc;
            state.best_epoch = epoch + 1;
            state.since_best = 0;
            best_store = model.store.clone();
            if let Some(dir) = opts.run_dir {
                let mut n = stats_notes(stats);
                n.push(("epoch", (epoch + 1).into()));
                n.push(("val_dsc", val_dsc.into()));
                checkpoint::save_model(&model, &dir.join(BEST_DIR), None, notes(&n))?;
            }
        } else {
            state.since_best += 1;
        }
        if let Some(dir) = opts.run_dir {
            let last = dir.join(LAST_DIR);
            checkpoint::save_model(&model, &last, None, notes(&stats_notes(stats)))?;
            checkpoint::save_optimizer(&adam.state, &last)?;
            write_json(&last.join("state.json"), &state)?;
            write_file(&dir.join("loss_log.csv"), loss_log_csv(&state.history))?;
        }
    }

    let after = model.generator_hash();
    if after != gen_hash {
        return Err(TrainError::GeneratorChanged {
            before: gen_hash.unwrap_or_default(),
            after: after.unwrap_or_default(),
        });
    }
    model.store = best_store;
    let record = RunRecord {
        config: cfg.clone(),
        model: spec.clone(),
        preprocess: pre.clone(),
        history: state.history,
        best_epoch: state.best_epoch,
        best_val_dsc: state.best_val_dsc.max(0.0),
        best_checkpoint: opts.run_dir.map(|d| d.join(BEST_DIR)),
        wall_clock_s: start.elapsed().as_secs_f64(),
        split_hash: opts.split_hash.clone(),
        generator_hash: gen_hash,
        deterministic: cfg.deterministic,
        final_report: None,
    };
    Ok(TrainOutcome { model, record, intensity: stats })
}

/// Write the run record, the split file and the environment flags.
pub fn write_run_record(dir: &Path, record: &RunRecord, split: Option<&Split>) -> Result<(), TrainError> {
    write_json(&dir.join("run_record.json"), record)?;
    write_json(&dir.join("config.json"), &serde_json::json!({ "train": record.config, "model": record.model, "preprocess": record.preprocess }))?;
    write_file(&dir.join("loss_log.csv"), loss_log_csv(&record.history))?;
    if let Some(s) = split {
        write_file(&dir.join("split.csv"), s.to_csv())?;
    }
    if let Some(r) = &record.final_report {
        write_file(&dir.join("metrics.csv"), r.to_csv())?;
    }
    write_json(
        &dir.join("environment.json"),
        &serde_json::json!({
            "deterministic": record.deterministic,
            "threads": 1,
            "package_version": env!("CARGO_PKG_VERSION"),
            "split_hash": record.split_hash,
            "generator_hash": record.generator_hash,
        }),
    )
}

pub fn read_run_record(dir: &Path) -> Result<RunRecord, TrainError> {
    let path = dir.join("run_record.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
}

/// Preprocessed masks of `cases`, as the generator sees them.
pub fn generator_masks(cases: &[CaseRecord], pre: &PreprocessConfig) -> Result<Vec<Volume>, TrainError> {
    Ok(cases.iter().map(|c| geometric(&c.mask, pre)).collect::<Result<Vec<_>, _>>()?)
}

/// Knobs of the ablation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub generator: GeneratorTrainConfig,
    pub max_slices: usize,
    pub variants: Vec<Variant>,
    /// Also train and test DGMNet on the high-contrast modality.
    pub high_contrast_row: bool,
    /// DGMNet spec whose widths every variant shares; desk scale when
    /// absent.
    pub model: Option<ModelSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig { target_size: (64, 64), ..Default::default() },
            train: TrainConfig::default(),
            generator: GeneratorTrainConfig::default(),
            max_slices: 16,
            variants: Variant::ALL.to_vec(),
            high_contrast_row: true,
            model: None,
        }
    }
}

impl AblationConfig {
    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        let template = self.model.clone().unwrap_or_else(|| {
            let mut spec = ModelSpec::desk(Variant::DgmNet, self.max_slices);
            spec.input_size = (self.preprocess.target_size.1, self.preprocess.target_size.0);
            if let Some(g) = spec.generator.as_mut() {
                *g = generator::GeneratorSpec::for_output(self.max_slices, g.projection.0, g.upconv_stages, spec.input_size);
            }
            spec
        });
        ModelSpec {
            variant,
            generator: if variant == Variant::DgmNet { template.generator.clone() } else { None },
            ..template
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub modality: Modality,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub split_hash: String,
    pub generator_fold_dsc: Vec<f64>,
    /// Wall-clock seconds spent on generator cross-validation and fitting.
    #[serde(default)]
    pub generator_seconds: f64,
    pub rows: Vec<AblationRow>,
}

pub const TABLE_HEADER: &str = "method,modality,dsc_mean,dsc_std,sen_mean,sen_std,asd_mean,asd_std,ppv_mean,ppv_std";

impl AblationReport {
    pub fn row(&self, method: &str, modality: Modality) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.modality == modality)
    }

    pub fn dsc(&self, variant: Variant, modality: Modality) -> Option<f64> {
        self.row(&variant.to_string(), modality)?.report.as_ref().map(|r| r.dsc().mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TABLE_HEADER);
        s.push('\n');
        for r in &self.rows {
            match &r.report {
                Some(rep) => {
                    let f = |a: Aggregate| format!("{:.6},{:.6}", a.mean, a.std);
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.method,
                        r.modality,
                        f(rep.dsc()),
                        f(rep.sen()),
                        f(rep.asd()),
                        f(rep.ppv())
                    ));
                }
                None => s.push_str(&format!("{},{},NA,NA,NA,NA,NA,NA,NA,NA\n", r.method, r.modality)),
            }
        }
        s
    }

    /// Fixed-width table with `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:<14} {:<13} {:<13} {:<13} {:<13}\n", "Method", "Modality", "DSC", "Sen", "ASD (mm)", "PPV");
        for r in &self.rows {
            let cells = match &r.report {
                Some(rep) => [rep.dsc().cell(), rep.sen().cell(), rep.asd().cell(), rep.ppv().cell()],
                None => {
                    let e = format!("failed: {}", r.error.as_deref().unwrap_or("unknown"));
                    [e, String::new(), String::new(), String::new()]
                }
            };
            s.push_str(&format!(
                "{:<12} {:<14} {:<13} {:<13} {:<13} {:<13}\n",
                r.method, r.modality, cells[0], cells[1], cells[2], cells[3]
            ));
        }
        s
    }

    /// Rebuild from a directory written by [`run_ablation`], reading each
    /// row's metrics from its run directory.
    pub fn from_runs(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join("ablation.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut rep: AblationReport = serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        for row in &mut rep.rows {
            let Some(run) = &row.run_dir else { continue };
            let m = dir.join(run).join("metrics.csv");
            if let Ok(text) = fs::read_to_string(&m) {
                row.report = Some(MetricReport::from_csv(&text).map_err(|e| TrainError::Config(format!("{}: {e}", m.display())))?);
            }
        }
        Ok(rep)
    }

    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        write_json(&dir.join("ablation.json"), self)?;
        write_file(&dir.join("ablation.csv"), self.to_csv())?;
        write_file(&dir.join("ablation.txt"), self.to_table())
    }
}

/// Train the generator on the non-test high-contrast cases of `split`.
pub fn train_split_generator(
    high: &[CaseRecord],
    split: &Split,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<GeneratorReport, TrainError> {
    let mut pool = split.select(high, SplitName::Train);
    pool.extend(split.select(high, SplitName::Val));
    let masks = generator_masks(&pool, &cfg.preprocess)?;
    let gspec = cfg
        .model_spec(Variant::DgmNet)
        .generator
        .expect("DGMNet spec carries a generator");
    let gcfg = GeneratorTrainConfig { seed, ..cfg.generator };
    Ok(generator::train_generator(&masks, &gspec, &gcfg)?)
}

/// Train one variant on `modality` and score it on the test split.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    cases: &[CaseRecord],
    split: &Split,
    variant: Variant,
    generator: Option<&Generator>,
    cfg: &AblationConfig,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<(TrainOutcome, MetricReport), TrainError> {
    let train = split.select(cases, SplitName::Train);
    let val = split.select(cases, SplitName::Val);
    let test = split.select(cases, SplitName::Test);
    let spec = cfg.model_spec(variant);
    let tcfg = TrainConfig { variant, rng_seed: seed, ..cfg.train.clone() };
    let opts = TrainOptions { run_dir, split_hash: Some(split.hash()), ..Default::default() };
    let mut outcome = train_full(&train, &val, &spec, generator, &cfg.preprocess, &tcfg, &opts)?;
    let report = evaluate_cases(&ModelSegmenter::new(&outcome.model), &test, &cfg.preprocess, outcome.intensity);
    outcome.record.final_report = Some(report.clone());
    if let Some(dir) = run_dir {
        write_run_record(dir, &outcome.record, Some(split))?;
    }
    Ok((outcome, report))
}

/// Ablation benchmark: every variant on the low-contrast modality
/// plus DGMNet on the high-contrast one, with a shared split and one
/// generator trained on the non-test high-contrast cases.
pub fn run_ablation(manifest: &Manifest, cfg: &AblationConfig, seed: u64, out_dir: Option<&Path>) -> Result<AblationReport, TrainError> {
    let low = manifest.load(Modality::LowContrast)?;
    let high = manifest.load(Modality::HighContrast)?;
    let split = Split::new(&manifest.case_ids(), cfg.train.test_fraction, cfg.train.validation_fraction, seed)?;
    info!("ablation seed {seed}: split {} train / {} val / {} test", split.train.len(), split.val.len(), split.test.len());
    if let Some(dir) = out_dir {
        write_file(&dir.join("split.csv"), split.to_csv())?;
    }
    let needs_generator = cfg.variants.contains(&Variant::DgmNet) || cfg.high_contrast_row;
    let t0 = Instant::now();
    let (generator, folds) = if needs_generator {
        let rep = train_split_generator(&high, &split, cfg, seed)?;
        info!("generator mean fold DSC {:.4}", rep.mean_dsc());
        if let Some(dir) = out_dir {
            write_file(&dir.join("generator").join("folds.csv"), rep.to_csv())?;
            checkpoint::save_generator(&rep.generator, &dir.join("generator"), Some(Modality::HighContrast))?;
        }
        let folds = rep.folds.iter().map(|f| f.dsc).collect();
        (Some(rep.generator), folds)
    } else {
        (None, vec![])
    };
    let generator_seconds = t0.elapsed().as_secs_f64();
    let mut jobs: Vec<(Variant, Modality)> = cfg.variants.iter().map(|&v| (v, Modality::LowContrast)).collect();
    if cfg.high_contrast_row {
        jobs.push((Variant::DgmNet, Modality::HighContrast));
    }
    let mut rows = Vec::new();
    for (variant, modality) in jobs {
        let cases = if modality == Modality::LowContrast { &low } else { &high };
        let rel = PathBuf::from(format!("{}_{}", variant.key(), modality));
        let run_dir = out_dir.map(|d| d.join(&rel));
        let gen = (variant == Variant::DgmNet).then_some(generator.as_ref()).flatten();
        let result = run_variant(cases, &split, variant, gen, cfg, seed, run_dir.as_deref());
        let row = match result {
            Ok((_, report)) => {
                info!("{variant} on {modality}: test DSC {}", report.dsc().cell());
                AblationRow { method: variant.to_string(), modality, report: Some(report), error: None, run_dir: out_dir.map(|_| rel) }
            }
            Err(e) => {
                warn!("{variant} on {modality} failed: {e}");
                AblationRow { method: variant.to_string(), modality, report: None, error: Some(e.to_string()), run_dir: None }
            }
        };
        rows.push(row);
    }
    let report = AblationReport { seed, split_hash: split.hash(), generator_fold_dsc: folds, generator_seconds, rows };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Mean test DSC per (method, modality) over several ablation reports.
pub fn mean_over_seeds(reports: &[AblationReport]) -> BTreeMap<(String, Modality), f64> {
    let mut acc: BTreeMap<(String, Modality), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            if let Some(rep) = &row.report {
                acc.entry((row.method.clone(), row.modality)).or_default().push(rep.dsc().mean);
            }
        }
    }
    acc.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect()
}
