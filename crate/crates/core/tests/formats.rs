mod support;

use std::path::Path;

use proptest::prelude::*;
use sanet::codec::{seal, unseal};
use sanet::dataset::Dataset;

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    support::checkpoint_roundtrip(dir.path()).unwrap();
}

#[test]
fn checkpoint_truncations_rejected() {
    support::checkpoint_truncations(500, 1).unwrap();
}

#[test]
fn dataset_corruption_rejected() {
    support::dataset_corruption(500, 2).unwrap();
}

#[test]
fn dataset_save_open_roundtrip() {
    let ds = support::small_dataset(25);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.sand");
    ds.save(&p).unwrap();
    let back = Dataset::open(&p).unwrap();
    assert_eq!(back.to_bytes(), ds.to_bytes());
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(support::small_dataset(30).to_bytes(), support::small_dataset(30).to_bytes());
}

proptest! {
    #[test]
    fn sealed_roundtrip(body in proptest::collection::vec(any::<u8>(), 0..256), version in 0u32..4) {
        let b = seal(b"TEST", version, &body);
        prop_assert_eq!(unseal(Path::new("t"), &b, b"TEST", version).unwrap(), &body[..]);
    }

    #[test]
    fn sealed_rejects_any_truncation(body in proptest::collection::vec(any::<u8>(), 0..128), cut in any::<prop::sample::Index>()) {
        let b = seal(b"TEST", 1, &body);
        let len = cut.index(b.len());
        prop_assert!(unseal(Path::new("t"), &b[..len], b"TEST", 1).is_err());
    }

    #[test]
    fn sealed_rejects_any_bit_flip(body in proptest::collection::vec(any::<u8>(), 1..128), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut b = seal(b"TEST", 1, &body);
        let i = at.index(b.len());
        b[i] ^= 1 << bit;
        prop_assert!(unseal(Path::new("t"), &b, b"TEST", 1).is_err());
    }
}
