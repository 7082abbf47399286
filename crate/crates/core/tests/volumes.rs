mod common;

use common::*;
use dgmnet::volume::*;
use proptest::prelude::*;

#[test]
fn dgmv_properties_hold() {
    dgmv_property_suite(512).unwrap();
}

#[test]
fn header_layout() {
    let v = Volume::new(ndarray::Array3::from_elem((1, 1, 1), 2.5), [0.5, 0.7, 1.25], Kind::Image).unwrap();
    let b = encode_volume(&v);
    assert_eq!(b.len(), 34);
    assert_eq!(&b[..4], MAGIC);
    assert_eq!(b[4], FORMAT_VERSION);
    assert_eq!(&b[HEADER_LEN..], &2.5f32.to_le_bytes());
}

proptest! {
    #[test]
    fn file_round_trip(v in arb_volume()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.dgmv");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(encode_volume(&back), encode_volume(&v));
    }
}
