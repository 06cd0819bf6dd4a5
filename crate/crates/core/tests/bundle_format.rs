//! Tensor bundle round trips and rejection of damaged files.

use proptest::prelude::*;
use synwarp_core::bundle::{Bundle, MAGIC, VERSION};
use synwarp_core::model::{Model, ModelConfig};
use synwarp_core::rng::Rng;
use synwarp_core::{Error, Tensor32, Tensor64};

fn sample() -> Bundle {
    let mut rng = Rng::new(3);
    let mut b = Bundle::new();
    b.insert("a.weight", rng.uniform_tensor::<f32>(&[2, 3, 4], -1.0, 1.0));
    b.insert("b.bias", rng.uniform_tensor::<f64>(&[5], -1.0, 1.0));
    b
}

#[test]
pub fn round_trip_is_bit_exact_in_both_precisions() {
    let b = sample();
    let back = Bundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
    let (a, a2): (Tensor32, Tensor32) = (b.tensor("a.weight").unwrap(), back.tensor("a.weight").unwrap());
    assert_eq!(a.shape(), a2.shape());
    assert!(a.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let (c, c2): (Tensor64, Tensor64) = (b.tensor("b.bias").unwrap(), back.tensor("b.bias").unwrap());
    assert!(c.data().iter().zip(c2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
pub fn corrupted_magic_is_rejected() {
    let mut bytes = sample().to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[0] ^= 0xff;
    assert!(matches!(Bundle::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
pub fn unknown_version_is_rejected() {
    let mut bytes = sample().to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Bundle::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
pub fn truncated_file_is_rejected() {
    let bytes = sample().to_bytes().unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(Bundle::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
pub fn model_parameters_survive_save_and_load() {
    let model: Model<f32> = Model::new(ModelConfig::micro(), &mut Rng::new(1)).unwrap();
    let mut b = Bundle::new();
    model.params.write_into(&mut b);
    let dir = tempdir();
    let path = dir.join("m.swnb");
    b.save(&path).unwrap();
    let mut other: Model<f32> = Model::new(ModelConfig::micro(), &mut Rng::new(2)).unwrap();
    other.params.read_from(&Bundle::load(&path).unwrap()).unwrap();
    assert!(synwarp_core::train::changed_params(&model.params, &other.params).is_empty());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
pub fn overflowing_shape_is_rejected() {
    let mut b = Bundle::new();
    b.insert("x", Tensor64::new(&[1, 1, 1], vec![0.5]).unwrap());
    let mut bytes = b.to_bytes().unwrap();
    // Header (12 bytes), name length and name (3), dtype and rank (2), then the dims.
    for d in 0..3 {
        bytes[17 + 4 * d..21 + 4 * d].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(Bundle::from_bytes(&bytes), Err(Error::Format(_))));
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("swn-bundle-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(data in proptest::collection::vec(-1e30f64..1e30, 1..64)) {
        let n = data.len();
        let mut b = Bundle::new();
        b.insert("x", Tensor64::new(&[n], data.clone()).unwrap());
        let back: Tensor64 = Bundle::from_bytes(&b.to_bytes().unwrap()).unwrap().tensor("x").unwrap();
        prop_assert_eq!(back.data(), data.as_slice());
    }

    #[test]
    fn random_byte_flips_never_panic(pos in 0usize..200, flip in 1u8..=255) {
        let mut bytes = sample().to_bytes().unwrap();
        let i = pos % bytes.len();
        bytes[i] ^= flip;
        let _ = Bundle::from_bytes(&bytes);
    }
}
