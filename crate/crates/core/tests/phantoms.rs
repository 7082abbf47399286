mod common;

use common::*;
use dgmnet::landmarks::extract_landmarks;
use dgmnet::phantoms::*;
use dgmnet::volume::Modality;

#[test]
fn regeneration_is_byte_identical() {
    let cfg = PhantomConfig { n_cases: 5, rng_seed: 17, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, a.path()).unwrap();
    generate_dataset(&cfg, b.path()).unwrap();
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 5 * 4 + 2);
    assert_eq!(ta, tree_bytes(b.path()));
    assert!(verify_dataset(a.path()).unwrap().is_empty());
    let other = tempfile::tempdir().unwrap();
    generate_dataset(&PhantomConfig { rng_seed: 18, ..cfg }, other.path()).unwrap();
    assert_ne!(ta, tree_bytes(other.path()));
}

#[test]
fn tampering_is_detected() {
    let cfg = PhantomConfig { n_cases: 2, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    let victim = dir.path().join(&m.rows[1].image_path);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert_eq!(verify_dataset(dir.path()).unwrap(), vec![victim]);
}

#[test]
fn modalities_share_masks_and_differ_in_contrast() {
    let (high, low) = phantom_cases(6, 0);
    for (h, l) in high.iter().zip(&low) {
        assert_eq!(h.mask, l.mask);
        assert!(cnr(&h.image, &h.mask) > 2.0 * cnr(&l.image, &l.mask));
        let ls = extract_landmarks(&h.mask).unwrap();
        assert!(ls.records.iter().any(|r| r.present));
        assert!(ls.records.iter().any(|r| !r.present));
    }
}

#[test]
fn manifest_lists_both_modalities() {
    let cfg = PhantomConfig { n_cases: 3, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, dir.path()).unwrap();
    let m = Manifest::read(dir.path()).unwrap();
    assert_eq!(m.case_ids().len(), 3);
    assert_eq!(m.load(Modality::HighContrast).unwrap().len(), 3);
    assert_eq!(m.load(Modality::LowContrast).unwrap().len(), 3);
}
