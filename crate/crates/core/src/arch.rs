//! The five segmentation networks.
//!
//! All share one U-shaped trunk. Encoder level `i` has `base · 2^i`
//! channels, the bottleneck `base · 2^levels`. A block is
//! [3×3 conv → ReLU → BN] ×2, optionally followed by squeeze-and-excitation,
//! optionally summed with a batch-normalized 1×1 projection of its input. DGMNet adds a
//! model path (bottleneck → global pool → FC → ReLU → FC) that predicts
//! the whole-volume landmark vector. The entries for the current slice
//! drive a frozen shape generator, and the generated map is added to the
//! final decoder features before one more block and the head.

use std::fmt;

use dgmnet_nn::{Graph, NnError, ParamStore, Var};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{self, Generator, GeneratorError, GeneratorNet, GeneratorSpec};
use crate::landmarks::SLICE_STRIDE;
use crate::layers::{BatchNorm, Conv, Dense, SqueezeExcite, UpConv};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input shape {actual:?}, expected (N, 1, {}, {})", expected.0, expected.1)]
    InputShape { expected: (usize, usize), actual: Vec<usize> },
    #[error("DGMNet forward needs one slice index per sample")]
    MissingSliceIndices,
    #[error("generator spec {0:?} does not match the model")]
    GeneratorMismatch(Box<GeneratorSpec>),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "resunet")]
    ResUnet,
    #[serde(rename = "se_resunet")]
    SeResUnet,
    #[serde(rename = "se_unet")]
    SeUnet,
    #[serde(rename = "dgmnet")]
    DgmNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Unet, Variant::ResUnet, Variant::SeResUnet, Variant::SeUnet, Variant::DgmNet];

    pub fn has_se(self) -> bool {
        matches!(self, Variant::SeResUnet | Variant::SeUnet | Variant::DgmNet)
    }

    pub fn residual(self) -> bool {
        matches!(self, Variant::ResUnet | Variant::SeResUnet)
    }

    /// Config / file-name form.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::ResUnet => "resunet",
            Variant::SeResUnet => "se_resunet",
            Variant::SeUnet => "se_unet",
            Variant::DgmNet => "dgmnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|v| v.key() == norm || v.to_string().to_ascii_lowercase().replace('-', "_") == norm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Variant::Unet => "Unet",
            Variant::ResUnet => "ResUnet",
            Variant::SeResUnet => "SE-ResUnet",
            Variant::SeUnet => "SE-Unet",
            Variant::DgmNet => "DGMNet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub levels: usize,
    pub base_filters: usize,
    pub se_reduction: usize,
    pub dropout_rate: f32,
    /// (H, W)
    pub input_size: (usize, usize),
    pub max_slices: usize,
    pub model_path_pool: PoolKind,
    pub fc_hidden: usize,
    /// Required for DGMNet, forbidden otherwise.
    pub generator: Option<GeneratorSpec>,
}

impl ModelSpec {
    /// Small configuration used for phantom experiments.
    pub fn desk(variant: Variant, max_slices: usize) -> Self {
        let generator = (variant == Variant::DgmNet).then(|| GeneratorSpec::for_output(max_slices, 16, 3, (64, 64)));
        Self {
            variant,
            levels: 3,
            base_filters: 8,
            se_reduction: 4,
            dropout_rate: 0.5,
            input_size: (64, 64),
            max_slices,
            model_path_pool: PoolKind::Avg,
            fc_hidden: 256,
            generator,
        }
    }

    /// Four pooling levels on 256×256 slices: base 64 for the plain
    /// U-Net family, base 14 for DGMNet.
    pub fn full_scale(variant: Variant, max_slices: usize) -> Self {
        let mut s = Self::desk(variant, max_slices);
        s.levels = 4;
        s.input_size = (256, 256);
        s.se_reduction = 16;
        s.base_filters = if variant == Variant::DgmNet { 14 } else { 64 };
        if variant == Variant::DgmNet {
            s.generator = Some(GeneratorSpec::for_output(max_slices, 64, 4, (128, 128)));
        }
        s
    }

    pub fn landmark_dim(&self) -> usize {
        self.max_slices * SLICE_STRIDE
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |m: String| Err(ArchError::Spec(m));
        if self.levels < 3 {
            return bad(format!("levels {} < 3", self.levels));
        }
        if self.base_filters < 4 {
            return bad(format!("base_filters {} < 4", self.base_filters));
        }
        if self.se_reduction < 2 {
            return bad(format!("se_reduction {} < 2", self.se_reduction));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let f = 1usize << self.levels.min(30);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("input size {h}x{w} not divisible by 2^{}", self.levels));
        }
        if self.max_slices == 0 || self.fc_hidden == 0 {
            return bad("max_slices and fc_hidden must be positive".into());
        }
        match (&self.generator, self.variant) {
            (None, Variant::DgmNet) => return bad("DGMNet requires a generator spec".into()),
            (Some(_), v) if v != Variant::DgmNet => return bad(format!("{v} does not take a generator")),
            (Some(g), _) => {
                g.validate()?;
                if g.landmark_dim != self.landmark_dim() {
                    return Err(ArchError::GeneratorMismatch(Box::new(g.clone())));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Closed-form trainable parameter count (the frozen generator is not
    /// included).
    pub fn parameter_count(&self) -> usize {
        let v = self.variant;
        let mut n = 0;
        let mut cin = 1;
        for i in 0..self.levels {
            n += block_parameter_count(cin, self.channels(i), v, self.se_reduction);
            cin = self.channels(i);
        }
        n += block_parameter_count(cin, self.channels(self.levels), v, self.se_reduction);
        for i in (0..self.levels).rev() {
            let (up_in, c) = (self.channels(i + 1), self.channels(i));
            n += up_in * c * 4 + c;
            n += block_parameter_count(2 * c, c, v, self.se_reduction);
        }
        n += self.base_filters + 1;
        if v == Variant::DgmNet {
            let bott = self.channels(self.levels);
            n += bott * self.fc_hidden + self.fc_hidden;
            n += self.fc_hidden * self.landmark_dim() + self.landmark_dim();
            n += block_parameter_count(self.base_filters, self.base_filters, v, self.se_reduction);
        }
        n
    }
}

/// 2·C²/r weights plus biases for an SE stage on `c` channels.
pub fn se_parameter_count(c: usize, reduction: usize) -> usize {
    let m = (c / reduction).max(1);
    2 * c * m + m + c
}

pub fn block_parameter_count(cin: usize, cout: usize, variant: Variant, reduction: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let mut n = conv(cin, cout, 3) + conv(cout, cout, 3) + 4 * cout;
    if variant.has_se() {
        n += se_parameter_count(cout, reduction);
    }
    if variant.residual() {
        n += conv(cin, cout, 1) + 2 * cout;
    }
    n
}

/// Double convolution with optional SE and projected residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub se: Option<SqueezeExcite>,
    /// 1×1 projection followed by batch norm.
    pub skip: Option<(Conv, BatchNorm)>,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, variant: Variant, reduction: usize) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            se: variant.has_se().then(|| SqueezeExcite::new(store, &format!("{name}.se"), cout, reduction)),
            skip: variant.residual().then(|| {
                (
                    Conv::new(store, &format!("{name}.skip"), cin, cout, 1),
                    BatchNorm::new(store, &format!("{name}.skip_bn"), cout),
                )
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.bn1.forward(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h);
        let mut h = self.bn2.forward(g, h)?;
        if let Some(se) = &self.se {
            h = se.forward(g, h)?;
        }
        if let Some(s) = self.project(g, x)? {
            h = g.add(h, s)?;
        }
        Ok(h)
    }

    /// The residual path alone, if the block has one.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Option<Var>, NnError> {
        match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                Ok(Some(bn.forward(g, s)?))
            }
            None => Ok(None),
        }
    }
}

/// Encoder block followed by 2×2 max-pool; returns (pre-pool, pooled).
pub fn encoder_step(block: &Block, g: &mut Graph, x: Var) -> Result<(Var, Var), NnError> {
    let f = block.forward(g, x)?;
    let p = g.max_pool2(f)?;
    Ok((f, p))
}

#[derive(Debug, Clone)]
pub struct DecoderStep {
    pub up: UpConv,
    pub block: Block,
}

impl DecoderStep {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, skip_ch: usize, cout: usize, variant: Variant, reduction: usize) -> Self {
        let half = cin / 2;
        Self {
            up: UpConv::new(store, &format!("{name}.up"), cin, half),
            block: Block::new(store, &format!("{name}.block"), half + skip_ch, cout, variant, reduction),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, skip: Var) -> Result<Var, NnError> {
        let u = self.up.forward(g, x)?;
        if g.shape(u)[2..] != g.shape(skip)[2..] {
            return Err(NnError::Shape(format!(
                "upsampled {:?} does not match skip {:?}",
                g.shape(u),
                g.shape(skip)
            )));
        }
        let c = g.concat1(&[u, skip])?;
        self.block.forward(g, c)
    }
}

#[derive(Debug, Clone)]
struct ModelPath {
    fc1: Dense,
    fc2: Dense,
    generator: GeneratorNet,
    extra: Block,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    encoders: Vec<Block>,
    bottleneck: Block,
    decoders: Vec<DecoderStep>,
    head: Conv,
    path: Option<ModelPath>,
}

/// Forward results. `mask` holds probabilities in (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub mask: Var,
    pub landmarks: Option<Var>,
    pub shape_map: Option<Var>,
}

/// Build a model. For DGMNet the generator entries are registered under
/// `generator.` and frozen; load trained values with
/// [`Model::load_generator`].
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ArchError> {
    spec.validate()?;
    let mut store = ParamStore::new(seed);
    let v = spec.variant;
    let r = spec.se_reduction;
    let mut encoders = Vec::new();
    let mut cin = 1;
    for i in 0..spec.levels {
        encoders.push(Block::new(&mut store, &format!("enc{i}"), cin, spec.channels(i), v, r));
        cin = spec.channels(i);
    }
    let bottleneck = Block::new(&mut store, "bottleneck", cin, spec.channels(spec.levels), v, r);
    let mut decoders = Vec::new();
    for i in (0..spec.levels).rev() {
        let c = spec.channels(i);
        decoders.push(DecoderStep::new(&mut store, &format!("dec{i}"), spec.channels(i + 1), c, c, v, r));
    }
    let path = match &spec.generator {
        Some(gspec) => {
            let bott = spec.channels(spec.levels);
            let fc1 = Dense::new(&mut store, "model_path.fc1", bott, spec.fc_hidden);
            let fc2 = Dense::with_init(
                &mut store,
                "model_path.fc2",
                spec.fc_hidden,
                spec.landmark_dim(),
                dgmnet_nn::Init::Normal((1.0 / spec.fc_hidden as f32).sqrt()),
            );
            let generator = GeneratorNet::build(&mut store, gspec)?;
            let extra = Block::new(&mut store, "fusion", spec.base_filters, spec.base_filters, v, r);
            store.freeze_prefix(generator::PREFIX);
            Some(ModelPath { fc1, fc2, generator, extra })
        }
        None => None,
    };
    let head = Conv::new(&mut store, "head", spec.base_filters, 1, 1);
    Ok(Model {
        spec: spec.clone(),
        store,
        encoders,
        bottleneck,
        decoders,
        head,
        path,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn generator_hash(&self) -> Option<String> {
        self.path.as_ref().map(|_| self.store.hash_prefix(generator::PREFIX))
    }

    /// Copy trained generator values in; the entries stay frozen.
    pub fn load_generator(&mut self, gen: &Generator) -> Result<(), ArchError> {
        match &self.spec.generator {
            Some(s) if s == gen.spec() => {}
            _ => return Err(ArchError::GeneratorMismatch(Box::new(gen.spec().clone()))),
        }
        let copied = self.store.copy_matching_from(&gen.store);
        debug_assert_eq!(copied, gen.store.len());
        self.store.freeze_prefix(generator::PREFIX);
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize, ArchError> {
        let s = g.shape(x);
        let (h, w) = self.spec.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(ArchError::InputShape { expected: (h, w), actual: s.to_vec() });
        }
        Ok(s[0])
    }

    /// Encoder, dropout-regularized bottleneck and decoder. Returns the
    /// final decoder features (N, base, H, W) and the bottleneck.
    pub fn trunk(&self, g: &mut Graph, x: Var) -> Result<(Var, Var), ArchError> {
        self.check_input(g, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for enc in &self.encoders {
            let (f, p) = encoder_step(enc, g, h)?;
            skips.push(f);
            h = p;
        }
        let bott = self.bottleneck.forward(g, h)?;
        let mut h = g.dropout(bott, self.spec.dropout_rate);
        for (dec, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            h = dec.forward(g, h, *skip)?;
        }
        Ok((h, bott))
    }

    /// Landmark prediction (N, landmark_dim) from the bottleneck, with a
    /// sigmoid on the presence entries.
    pub fn landmark_head(&self, g: &mut Graph, bottleneck: Var) -> Result<Option<Var>, ArchError> {
        let Some(path) = &self.path else { return Ok(None) };
        let pooled = match self.spec.model_path_pool {
            PoolKind::Avg => g.global_avg_pool(bottleneck),
            PoolKind::Max => g.global_max_pool(bottleneck),
        };
        let h = path.fc1.forward(g, pooled)?;
        let h = g.relu(h);
        let out = path.fc2.forward(g, h)?;
        Ok(Some(g.sigmoid_every(out, SLICE_STRIDE, 0)))
    }

    /// Generator output for each sample's own slice, resized to the
    /// input size, (N, 1, H, W).
    pub fn shape_map(&self, g: &mut Graph, landmarks: Var, slices: &[usize]) -> Result<Var, ArchError> {
        let path = self.path.as_ref().ok_or_else(|| ArchError::Spec("no model path".into()))?;
        let n = g.shape(landmarks)[0];
        if slices.len() != n {
            return Err(ArchError::MissingSliceIndices);
        }
        let ms = self.spec.max_slices;
        let pos: Vec<f32> = slices.iter().map(|&u| generator::slice_position(u, ms)).collect();
        let pos = g.input(Array2::from_shape_vec((n, 1), pos).expect("n rows").into_dyn());
        let own = g.select_slots(landmarks, SLICE_STRIDE, slices)?;
        let gin = g.concat1(&[own, pos])?;
        let s = path.generator.forward(g, gin)?;
        let (h, w) = self.spec.input_size;
        Ok(g.resize(s, h, w))
    }

    /// Fuse an optional shape map into decoder features and apply the
    /// head.
    pub fn finish(&self, g: &mut Graph, features: Var, shape: Option<Var>) -> Result<Var, ArchError> {
        let mut h = features;
        if let Some(path) = &self.path {
            if let Some(s) = shape {
                h = g.add_channel_broadcast(h, s)?;
            }
            h = path.extra.forward(g, h)?;
        }
        let logits = self.head.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Full forward. `slices` holds each sample's slice index within its
    /// volume and is required for DGMNet.
    pub fn forward(&self, g: &mut Graph, x: Var, slices: Option<&[usize]>) -> Result<Outputs, ArchError> {
        self.forward_inner(g, x, slices, false)
    }

    /// DGMNet forward with the generated shape map replaced by zeros.
    pub fn forward_zero_shape(&self, g: &mut Graph, x: Var, slices: Option<&[usize]>) -> Result<Outputs, ArchError> {
        self.forward_inner(g, x, slices, true)
    }

    fn forward_inner(&self, g: &mut Graph, x: Var, slices: Option<&[usize]>, zero_shape: bool) -> Result<Outputs, ArchError> {
        let (features, bott) = self.trunk(g, x)?;
        let landmarks = self.landmark_head(g, bott)?;
        let shape_map = match landmarks {
            Some(lm) => {
                let idx = slices.ok_or(ArchError::MissingSliceIndices)?;
                if idx.iter().any(|&u| u >= self.spec.max_slices) {
                    return Err(ArchError::Spec(format!("slice index beyond max_slices {}", self.spec.max_slices)));
                }
                let s = self.shape_map(g, lm, idx)?;
                Some(if zero_shape {
                    let shape = g.shape(s).to_vec();
                    g.input(ArrayD::zeros(shape))
                } else {
                    s
                })
            }
            None => None,
        };
        let mask = self.finish(g, features, shape_map)?;
        Ok(Outputs { mask, landmarks, shape_map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgmnet_nn::Mode;
    use ndarray::Array4;

    fn run(model: &Model, x: Array4<f32>) -> (ArrayD<f32>, Option<ArrayD<f32>>) {
        let mut g = Graph::new(&model.store, Mode::Eval, 0);
        let n = x.dim().0;
        let xv = g.input(x.into_dyn());
        let pos = vec![3; n];
        let out = model.forward(&mut g, xv, Some(&pos)).unwrap();
        (g.value(out.mask).clone(), out.landmarks.map(|l| g.value(l).clone()))
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.key()), Some(v));
            assert_eq!(Variant::parse(&v.to_string()), Some(v));
            assert_eq!(serde_json::to_value(v).unwrap(), serde_json::Value::String(v.key().into()));
        }
    }

    #[test]
    fn counts_match_closed_form() {
        for v in Variant::ALL {
            let spec = ModelSpec::desk(v, 16);
            let m = build_model(&spec, 1).unwrap();
            assert_eq!(m.parameter_count(), spec.parameter_count(), "{v}");
        }
    }

    #[test]
    fn generator_spec_rules() {
        let mut s = ModelSpec::desk(Variant::SeUnet, 16);
        s.generator = ModelSpec::desk(Variant::DgmNet, 16).generator;
        assert!(build_model(&s, 0).is_err());
        let mut s = ModelSpec::desk(Variant::DgmNet, 16);
        s.generator = None;
        assert!(build_model(&s, 0).is_err());
    }

    #[test]
    fn bad_input_size() {
        let m = build_model(&ModelSpec::desk(Variant::Unet, 16), 0).unwrap();
        let mut g = Graph::new(&m.store, Mode::Eval, 0);
        let x = g.input(ArrayD::zeros(ndarray::IxDyn(&[1, 1, 32, 32])));
        assert!(matches!(m.forward(&mut g, x, None), Err(ArchError::InputShape { .. })));
    }

    #[test]
    fn dgmnet_outputs() {
        let m = build_model(&ModelSpec::desk(Variant::DgmNet, 16), 3).unwrap();
        let (mask, lm) = run(&m, Array4::zeros((2, 1, 64, 64)));
        assert!(mask.iter().all(|&p| p > 0.0 && p < 1.0));
        let lm = lm.unwrap();
        assert_eq!(lm.shape(), &[2, 144]);
        for (i, &v) in lm.iter().enumerate() {
            assert!(v.is_finite());
            if (i % 144) % 9 == 0 {
                assert!(v > 0.0 && v < 1.0);
            }
        }
        let mut g = Graph::new(&m.store, Mode::Eval, 0);
        let x = g.input(ArrayD::zeros(ndarray::IxDyn(&[1, 1, 64, 64])));
        assert!(matches!(m.forward(&mut g, x, None), Err(ArchError::MissingSliceIndices)));
    }
}
