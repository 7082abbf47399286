//! Shape generator: the landmark entries of one slice plus its normalized
//! position in, that slice's 2D shape map out.
//!
//! Callers hold whole-volume landmark vectors; the generator reads the
//! nine entries of the requested slice from it.
//!
//! FC projection → reshape → `upconv_stages` × [LeakyReLU(0.2) → BN → 2×2
//! transposed conv], halving channels per stage and ending at a single
//! channel, then a sigmoid.

use dgmnet_nn::{Adam, AdamConfig, Graph, Mode, NnError, ParamStore, Var};
use log::info;
use ndarray::{s, Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::{encode_landmarks, extract_landmarks, LandmarkError, SLICE_STRIDE};
use crate::layers::{BatchNorm, Dense, UpConv};
use crate::losses::bce_loss;
use crate::metrics::overlap_metrics;
use crate::volume::{Kind, Volume};

pub const PREFIX: &str = "generator";
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("landmark vector has length {actual}, expected {expected}")]
    VectorLength { expected: usize, actual: usize },
    #[error("generator must be frozen before use")]
    NotFrozen,
    #[error("need at least {folds} cases for {folds}-fold validation, got {cases}")]
    TooFewCases { folds: usize, cases: usize },
    #[error("case {0} has an empty mask")]
    EmptyMask(usize),
    #[error("mask size {actual:?} does not match generator output {expected:?}")]
    MaskSize { expected: (usize, usize), actual: (usize, usize) },
    #[error("non-finite loss in generator training at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub landmark_dim: usize,
    /// (channels, h, w) after the FC projection.
    pub projection: (usize, usize, usize),
    pub upconv_stages: usize,
    /// (H, W)
    pub output_size: (usize, usize),
}

impl GeneratorSpec {
    /// Spec whose projection grid doubles up to `output_size`.
    pub fn for_output(max_slices: usize, channels: usize, stages: usize, output_size: (usize, usize)) -> Self {
        let f = 1 << stages;
        Self {
            landmark_dim: max_slices * SLICE_STRIDE,
            projection: (channels, output_size.0 / f, output_size.1 / f),
            upconv_stages: stages,
            output_size,
        }
    }

    pub fn max_slices(&self) -> usize {
        self.landmark_dim / SLICE_STRIDE
    }

    /// FC input width: one slice's landmark entries plus its position.
    pub fn input_dim(&self) -> usize {
        SLICE_STRIDE + 1
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let (c, h, w) = self.projection;
        let bad = |m: String| Err(GeneratorError::Spec(m));
        if self.landmark_dim == 0 || self.landmark_dim % SLICE_STRIDE != 0 {
            return bad(format!("landmark_dim {} is not a positive multiple of {SLICE_STRIDE}", self.landmark_dim));
        }
        if h < 4 || w < 4 {
            return bad(format!("projection grid {h}x{w} smaller than 4x4"));
        }
        if self.upconv_stages < 2 {
            return bad(format!("upconv_stages {} < 2", self.upconv_stages));
        }
        if self.upconv_stages >= 31 {
            return bad("too many stages".into());
        }
        let f = 1usize << self.upconv_stages;
        if h * f != self.output_size.0 || w * f != self.output_size.1 {
            return bad(format!(
                "projection {h}x{w} with {} stages gives {}x{}, not {:?}",
                self.upconv_stages,
                h * f,
                w * f,
                self.output_size
            ));
        }
        if c == 0 {
            return bad("zero projection channels".into());
        }
        Ok(())
    }

    /// Channels entering each stage plus the final 1.
    pub fn stage_channels(&self) -> Vec<usize> {
        let mut ch = vec![self.projection.0];
        for i in 1..self.upconv_stages {
            ch.push((self.projection.0 >> i).max(1));
        }
        ch.push(1);
        ch
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (c, h, w) = self.projection;
        let mut n = self.input_dim() * c * h * w + c * h * w;
        let ch = self.stage_channels();
        for s in 0..self.upconv_stages {
            n += 2 * ch[s]; // bn gamma, beta
            n += ch[s] * ch[s + 1] * 4 + ch[s + 1];
        }
        n
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorNet {
    spec: GeneratorSpec,
    proj: Dense,
    stages: Vec<(BatchNorm, UpConv)>,
}

impl GeneratorNet {
    /// Register the generator's entries under `generator.` in `store`.
    pub fn build(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Self, GeneratorError> {
        spec.validate()?;
        let (c, h, w) = spec.projection;
        let proj = Dense::new(store, &format!("{PREFIX}.proj"), spec.input_dim(), c * h * w);
        let ch = spec.stage_channels();
        let stages = (0..spec.upconv_stages)
            .map(|s| {
                (
                    BatchNorm::new(store, &format!("{PREFIX}.stage{s}.bn"), ch[s]),
                    UpConv::new(store, &format!("{PREFIX}.stage{s}.up"), ch[s], ch[s + 1]),
                )
            })
            .collect();
        Ok(Self { spec: spec.clone(), proj, stages })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// `input` is (N, 10) rows from [`slot_input`]; returns (N, 1, H, W)
    /// in (0, 1).
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var, GeneratorError> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim() {
            return Err(GeneratorError::VectorLength {
                expected: self.spec.input_dim(),
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let (c, h, w) = self.spec.projection;
        let x = self.proj.forward(g, input)?;
        let mut x = g.reshape(x, &[shape[0], c, h, w])?;
        for (bn, up) in &self.stages {
            x = g.leaky_relu(x, LEAKY_SLOPE);
            x = bn.forward(g, x)?;
            x = up.forward(g, x)?;
        }
        Ok(g.sigmoid(x))
    }
}

/// Normalized slice position u / (max_slices - 1).
pub fn slice_position(slice_index: usize, max_slices: usize) -> f32 {
    if max_slices <= 1 {
        0.0
    } else {
        slice_index as f32 / (max_slices - 1) as f32
    }
}

/// Generator input for slice `u`: its nine landmark entries followed by
/// the normalized slice position.
pub fn slot_input(landmark_vec: &[f32], u: usize, max_slices: usize) -> Vec<f32> {
    let mut row = landmark_vec[u * SLICE_STRIDE..(u + 1) * SLICE_STRIDE].to_vec();
    row.push(slice_position(u, max_slices));
    row
}

fn rows(inputs: &[&[f32]]) -> Array2<f32> {
    let d = inputs.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((inputs.len(), d), |(i, j)| inputs[i][j])
}

/// A standalone generator with its own store.
#[derive(Debug, Clone)]
pub struct Generator {
    pub store: ParamStore,
    pub net: GeneratorNet,
}

pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator, GeneratorError> {
    let mut store = ParamStore::new(seed);
    let net = GeneratorNet::build(&mut store, spec)?;
    Ok(Generator { store, net })
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        self.net.spec()
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_count() == 0
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn hash(&self) -> String {
        self.store.hash_prefix(PREFIX)
    }

    /// Evaluation-mode forward over a batch of input rows.
    pub fn predict(&self, inputs: &Array2<f32>) -> Result<Array4<f32>, GeneratorError> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let x = g.input(inputs.clone().into_dyn());
        let y = self.net.forward(&mut g, x)?;
        Ok(g.value(y).clone().into_dimensionality().expect("rank 4"))
    }

    /// One shape map for slice `slice_index` of the volume described by
    /// `landmark_vec`.
    pub fn generate_shape(&self, landmark_vec: &[f32], slice_index: usize) -> Result<Array2<f32>, GeneratorError> {
        if !self.is_frozen() {
            return Err(GeneratorError::NotFrozen);
        }
        self.check_vector(landmark_vec, slice_index + 1)?;
        let row = slot_input(landmark_vec, slice_index, self.spec().max_slices());
        let out = self.predict(&rows(&[&row]))?;
        Ok(out.slice(s![0, 0, .., ..]).to_owned())
    }

    fn check_vector(&self, landmark_vec: &[f32], depth: usize) -> Result<(), GeneratorError> {
        let spec = self.spec();
        if landmark_vec.len() != spec.landmark_dim {
            return Err(GeneratorError::VectorLength {
                expected: spec.landmark_dim,
                actual: landmark_vec.len(),
            });
        }
        if depth > spec.max_slices() {
            return Err(GeneratorError::Spec(format!("slice {} beyond {} slices", depth - 1, spec.max_slices())));
        }
        Ok(())
    }

    /// Generated maps for slices `0..depth`, (depth, 1, H, W).
    pub fn generate_volume(&self, landmark_vec: &[f32], depth: usize) -> Result<Array4<f32>, GeneratorError> {
        self.check_vector(landmark_vec, depth)?;
        let ms = self.spec().max_slices();
        let inputs: Vec<Vec<f32>> = (0..depth).map(|u| slot_input(landmark_vec, u, ms)).collect();
        let refs: Vec<&[f32]> = inputs.iter().map(|r| &r[..]).collect();
        self.predict(&rows(&refs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            epochs: 120,
            batch_size: 10,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_cases: usize,
    pub held_out_cases: usize,
    /// Mean 3D reconstruction Dice over held-out cases.
    pub dsc: f64,
}

/// Seeded fold index for each of `n` cases; sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(dgmnet_nn::stream_seed(seed, "generator.folds")));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank % folds;
    }
    out
}

struct Sample {
    input: Vec<f32>,
    target: Array2<f32>,
}

fn case_samples(mask: &Volume, spec: &GeneratorSpec) -> Result<Vec<Sample>, GeneratorError> {
    let ms = spec.max_slices();
    let vec = encode_landmarks(&extract_landmarks(mask)?, ms)?;
    Ok((0..mask.depth())
        .map(|u| Sample {
            input: slot_input(&vec, u, ms),
            target: mask.slice(u).to_owned(),
        })
        .collect())
}

fn check_masks(masks: &[Volume], spec: &GeneratorSpec) -> Result<(), GeneratorError> {
    for (i, m) in masks.iter().enumerate() {
        if m.foreground_count() == 0 {
            return Err(GeneratorError::EmptyMask(i));
        }
        if m.depth() > spec.max_slices() {
            return Err(GeneratorError::Spec(format!("case {i} has {} slices, more than {}", m.depth(), spec.max_slices())));
        }
        let size = (m.height(), m.width());
        if size != spec.output_size {
            return Err(GeneratorError::MaskSize { expected: spec.output_size, actual: size });
        }
    }
    Ok(())
}

/// Fit a fresh generator on `masks` with pixel-wise BCE. Returns the
/// unfrozen generator.
pub fn fit_generator(masks: &[&Volume], spec: &GeneratorSpec, cfg: &GeneratorTrainConfig, seed: u64) -> Result<Generator, GeneratorError> {
    let owned: Vec<Volume> = masks.iter().map(|m| (*m).clone()).collect();
    check_masks(&owned, spec)?;
    let mut gen = build_generator(spec, seed)?;
    let mut samples = Vec::new();
    for m in masks {
        samples.extend(case_samples(m, spec)?);
    }
    let (h, w) = spec.output_size;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(dgmnet_nn::stream_seed(seed, &format!("generator.epoch{epoch}"))));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| &samples[i].input[..]).collect();
            let x = rows(&inputs);
            let mut target = Array4::<f64>::zeros((chunk.len(), 1, h, w));
            for (k, &i) in chunk.iter().enumerate() {
                target.slice_mut(s![k, 0, .., ..]).assign(&samples[i].target.mapv(f64::from));
            }
            let graph_seed = dgmnet_nn::mix64(seed ^ ((epoch as u64) << 32) ^ bi as u64);
            let (loss, grads, updates) = {
                let mut g = Graph::new(&gen.store, Mode::Train, graph_seed);
                let xv = g.input(x.into_dyn());
                let y = gen.net.forward(&mut g, xv)?;
                let pred = g.value(y).view().into_dimensionality::<ndarray::Ix4>().expect("rank 4").mapv(f64::from);
                let (loss, dy) = bce_loss(pred.view(), target.view()).expect("shapes agree");
                let seed_grad: ArrayD<f32> = dy.mapv(|v| v as f32).into_dyn();
                let grads = g.backward(&[(y, seed_grad)])?;
                (loss, grads, g.take_bn_updates())
            };
            if !loss.is_finite() {
                return Err(GeneratorError::NonFinite(epoch));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut gen.store, &grads);
            for (id, v) in updates {
                gen.store.get_mut(id).value = v;
            }
        }
        if epoch % 10 == 9 || epoch + 1 == cfg.epochs {
            info!("generator epoch {}: bce {:.4}", epoch + 1, epoch_loss / samples.len() as f64);
        }
    }
    Ok(gen)
}

/// 3D Dice between the generator's reconstruction from true landmarks and
/// the mask itself.
pub fn reconstruction_dsc(gen: &Generator, mask: &Volume) -> Result<f64, GeneratorError> {
    let vec = encode_landmarks(&extract_landmarks(mask)?, gen.spec().max_slices())?;
    let out = gen.generate_volume(&vec, mask.depth())?;
    let pred = out.index_axis(Axis(1), 0).mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
    let pred = Volume::new(pred, mask.spacing(), Kind::Mask).expect("binary");
    Ok(overlap_metrics(&pred, mask).expect("same dims").dsc)
}

#[derive(Debug, Clone)]
pub struct GeneratorReport {
    pub generator: Generator,
    pub folds: Vec<FoldResult>,
}

impl GeneratorReport {
    pub fn mean_dsc(&self) -> f64 {
        self.folds.iter().map(|f| f.dsc).sum::<f64>() / self.folds.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,train_cases,held_out_cases,dsc\n");
        for f in &self.folds {
            s.push_str(&format!("{},{},{},{:.6}\n", f.fold, f.train_cases, f.held_out_cases, f.dsc));
        }
        s
    }
}

/// k-fold cross-validated training on preprocessed masks, then a final fit
/// on every case. The returned generator is fully frozen.
pub fn train_generator(masks: &[Volume], spec: &GeneratorSpec, cfg: &GeneratorTrainConfig) -> Result<GeneratorReport, GeneratorError> {
    spec.validate()?;
    if cfg.folds < 2 || masks.len() < cfg.folds {
        return Err(GeneratorError::TooFewCases { folds: cfg.folds, cases: masks.len() });
    }
    check_masks(masks, spec)?;
    let assign = fold_assignment(masks.len(), cfg.folds, cfg.seed);
    let mut folds = Vec::with_capacity(cfg.folds);
    for k in 0..cfg.folds {
        let train: Vec<&Volume> = masks.iter().zip(&assign).filter(|(_, &f)| f != k).map(|(m, _)| m).collect();
        let held: Vec<&Volume> = masks.iter().zip(&assign).filter(|(_, &f)| f == k).map(|(m, _)| m).collect();
        let mut gen = fit_generator(&train, spec, cfg, dgmnet_nn::stream_seed(cfg.seed, &format!("fold{k}")))?;
        gen.freeze();
        let dsc = held.iter().map(|m| reconstruction_dsc(&gen, m)).collect::<Result<Vec<_>, _>>()?;
        let mean = dsc.iter().sum::<f64>() / dsc.len() as f64;
        info!("generator fold {k}: held-out reconstruction DSC {mean:.4}");
        folds.push(FoldResult {
            fold: k,
            train_cases: train.len(),
            held_out_cases: held.len(),
            dsc: mean,
        });
    }
    let all: Vec<&Volume> = masks.iter().collect();
    let mut generator = fit_generator(&all, spec, cfg, dgmnet_nn::stream_seed(cfg.seed, "final"))?;
    generator.freeze();
    Ok(GeneratorReport { generator, folds })
}


