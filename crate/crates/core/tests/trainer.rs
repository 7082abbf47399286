mod common;

use std::cell::Cell;

use common::*;
use dgmnet::arch::{ModelSpec, Variant};
use dgmnet::cli::evaluate_into;
use dgmnet::generator::{fit_generator, GeneratorTrainConfig};
use dgmnet::losses::LossConfig;
use dgmnet::metrics::CaseSegmenter;
use dgmnet::preprocess::PreprocessConfig;
use dgmnet::trainer::*;
use dgmnet::volume::{Kind, Volume};
use proptest::prelude::*;
use rand::Rng;

fn pre() -> PreprocessConfig {
    PreprocessConfig { target_size: (64, 64), ..Default::default() }
}

fn small_generator(high: &[dgmnet::volume::CaseRecord]) -> dgmnet::generator::Generator {
    let masks = generator_masks(high, &pre()).unwrap();
    let refs: Vec<&Volume> = masks.iter().collect();
    let spec = ModelSpec::desk(Variant::DgmNet, 16).generator.unwrap();
    let cfg = GeneratorTrainConfig { epochs: 2, ..Default::default() };
    let mut gen = fit_generator(&refs, &spec, &cfg, 0).unwrap();
    gen.freeze();
    gen
}

fn short(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig { variant, epochs, early_stop_patience: 100, ..Default::default() }
}

#[test]
fn generator_stays_frozen_through_training() {
    let (high, low) = phantom_cases(4, 0);
    let gen = small_generator(&high);
    let before = gen.hash();
    let spec = ModelSpec::desk(Variant::DgmNet, 16);
    let steps = Cell::new(0);
    let check = |_: usize, _: usize, store: &dgmnet_nn::ParamStore| {
        assert_eq!(store.hash_prefix("generator"), before);
        steps.set(steps.get() + 1);
    };
    let opts = TrainOptions { on_step: Some(&check), ..Default::default() };
    let out = train_full(&low[..3], &low[3..], &spec, Some(&gen), &pre(), &short(Variant::DgmNet, 2), &opts).unwrap();
    assert!(steps.get() > 0);
    assert_eq!(out.model.generator_hash().unwrap(), before);
    assert_eq!(out.record.generator_hash.as_deref(), Some(before.as_str()));

    let prepared = prepare_cases(&low[..3], &pre(), out.intensity, 16).unwrap();
    let batch = &make_slice_batches(&prepared, 10, 0, 0, 16).unwrap()[0];
    let probe = probe_gradients(&out.model, batch);
    assert!(probe.generator_entries > 0);
    assert_eq!(probe.generator_nonzero, 0);
    assert!(probe.other_nonzero > 0);
}

#[test]
fn dgmnet_requires_a_frozen_generator() {
    let (high, low) = phantom_cases(3, 1);
    let spec = ModelSpec::desk(Variant::DgmNet, 16);
    let cfg = short(Variant::DgmNet, 1);
    let err = train_full(&low[..2], &low[2..], &spec, None, &pre(), &cfg, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::MissingGenerator(Variant::DgmNet)));
    let masks = generator_masks(&high, &pre()).unwrap();
    let refs: Vec<&Volume> = masks.iter().collect();
    let cfg_g = GeneratorTrainConfig { epochs: 1, ..Default::default() };
    let unfrozen = fit_generator(&refs, spec.generator.as_ref().unwrap(), &cfg_g, 0).unwrap();
    assert!(train_full(&low[..2], &low[2..], &spec, Some(&unfrozen), &pre(), &cfg, &TrainOptions::default()).is_err());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (_, low) = phantom_cases(4, 2);
    let spec = ModelSpec::desk(Variant::SeUnet, 16);
    let full_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let run = |epochs, dir: &std::path::Path, resume| {
        let opts = TrainOptions { run_dir: Some(dir), resume, ..Default::default() };
        train_full(&low[..3], &low[3..], &spec, None, &pre(), &short(Variant::SeUnet, epochs), &opts).unwrap()
    };
    let full = run(3, full_dir.path(), false);
    run(2, split_dir.path(), false);
    let resumed = run(3, split_dir.path(), true);
    assert_eq!(resumed.record.history.len(), 3);
    for (a, b) in full.record.history.iter().zip(&resumed.record.history) {
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.val_dsc, b.val_dsc);
    }
    assert_eq!(full.model.store.content_hash(), resumed.model.store.content_hash());
}

#[test]
fn lambda_zero_ignores_landmark_targets() {
    let (high, low) = phantom_cases(4, 3);
    let gen = small_generator(&high);
    let spec = ModelSpec::desk(Variant::DgmNet, 16);
    let cfg = TrainConfig { loss: LossConfig { lambda: 0.0, ..Default::default() }, ..short(Variant::DgmNet, 1) };
    let scramble = |t: &mut ndarray::Array2<f64>| {
        let mut r = rng(t.len() as u64);
        for (j, v) in t.iter_mut().enumerate() {
            // presence entries must stay binary labels
            *v = if j % 9 == 0 { r.random_bool(0.5) as u8 as f64 } else { r.random_range(0.0..1.0) };
        }
    };
    let plain = train_full(&low[..3], &low[3..], &spec, Some(&gen), &pre(), &cfg, &TrainOptions::default()).unwrap();
    let opts = TrainOptions { landmark_override: Some(&scramble), ..Default::default() };
    let noisy = train_full(&low[..3], &low[3..], &spec, Some(&gen), &pre(), &cfg, &opts).unwrap();
    assert_eq!(plain.record.history[0].loss.mask, noisy.record.history[0].loss.mask);
    assert_ne!(plain.record.history[0].loss.lnd, noisy.record.history[0].loss.lnd);
    assert_eq!(plain.model.store.content_hash(), noisy.model.store.content_hash());
}

struct Oracle<'a>(&'a [(String, Volume)]);

impl CaseSegmenter for Oracle<'_> {
    fn segment(&self, case_id: &str, _image: &Volume) -> Result<Volume, String> {
        let m = &self.0.iter().find(|(id, _)| id == case_id).ok_or("unknown case")?.1;
        Volume::new(m.data().clone(), m.spacing(), Kind::Image).map_err(|e| e.to_string())
    }
}

#[test]
fn evaluation_with_perfect_predictions() {
    let (_, low) = phantom_cases(3, 4);
    let truths: Vec<(String, Volume)> = low
        .iter()
        .map(|c| (c.case_id.clone(), dgmnet::preprocess::geometric(&c.mask, &pre()).unwrap()))
        .collect();
    let expected_overlays: usize = truths
        .iter()
        .map(|(_, m)| (0..m.depth()).filter(|&z| m.slice(z).iter().any(|&v| v > 0.5)).count())
        .sum();
    let dir = tempfile::tempdir().unwrap();
    let (report, overlays) = evaluate_into(&Oracle(&truths), &low, &pre(), None, dir.path()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.dsc == 1.0 && r.asd_mm == Some(0.0)));
    assert_eq!(overlays, expected_overlays);
    assert_eq!(std::fs::read_dir(dir.path().join("overlays")).unwrap().count(), expected_overlays);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(dgmnet::metrics::MetricReport::from_csv(&csv).unwrap().rows, report.rows);
}

proptest! {
    #[test]
    fn split_partitions_cases(n in 4usize..80, seed in 0u64..1000) {
        let ids: Vec<String> = (0..n).map(|i| format!("case_{i:03}")).collect();
        let s = Split::new(&ids, 0.25, 0.25, seed).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        prop_assert_eq!(&all, &ids);
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        prop_assert_eq!(Split::new(&ids, 0.25, 0.25, seed).unwrap().hash(), s.hash());
        prop_assert_eq!(Split::from_csv(&s.to_csv()).unwrap(), s);
    }
}
