use damm_core::numerics::io::{
    decode_pack, decode_tensor, encode_pack, encode_tensor, read_pack, read_tensor, write_pack, write_tensor,
};
use damm_core::{Error, ParamStore, Tensor};
use proptest::prelude::*;

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn odd_values() -> Tensor {
    let v = vec![0.0, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, -f32::MAX, f32::INFINITY, f32::NAN, 1.0 / 3.0, -7.25, 2.0, 3.0];
    Tensor::new(&[3, 2, 2], v).unwrap()
}

#[test]
fn tensor_layout_is_byte_exact() {
    let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
    let mut b = Vec::new();
    encode_tensor(&t, &mut b);
    let mut expect = b"DTNSR1".to_vec();
    expect.push(2);
    expect.extend_from_slice(&2u32.to_le_bytes());
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&1.0f32.to_le_bytes());
    expect.extend_from_slice(&(-2.5f32).to_le_bytes());
    assert_eq!(b, expect);
}

#[test]
fn special_floats_survive_a_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dtnsr");
    let t = odd_values();
    write_tensor(&path, &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(bits(&back), bits(&t));
}

#[test]
fn pack_keeps_names_order_and_bits() {
    let mut s = ParamStore::new();
    s.insert("enc.conv.weight", odd_values()).unwrap();
    s.insert("bn.running_mean", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
    s.insert("µ", Tensor::zeros(&[2, 3])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.dpack");
    write_pack(&path, &s).unwrap();
    let back = read_pack(&path).unwrap();
    let a: Vec<_> = s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), bits(t))).collect();
    let b: Vec<_> = back.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), bits(t))).collect();
    assert_eq!(a, b);
    assert_eq!(encode_pack(&back), std::fs::read(&path).unwrap());
}

#[test]
fn bad_magic_is_reported_at_offset_zero() {
    let mut b = Vec::new();
    encode_tensor(&odd_values(), &mut b);
    b[0] = b'X';
    match decode_tensor(&b) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut p = encode_pack(&ParamStore::new());
    p[5] = b'9';
    assert!(matches!(decode_pack(&p), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn every_truncation_is_an_error() {
    let mut s = ParamStore::new();
    s.insert("a", odd_values()).unwrap();
    s.insert("b", Tensor::ones(&[2])).unwrap();
    let full = encode_pack(&s);
    for cut in 0..full.len() {
        match decode_pack(&full[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("cut {cut}: expected a format error, got {other:?}"),
        }
    }
    let mut extra = full.clone();
    extra.push(0);
    assert!(decode_pack(&extra).is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_roundtrip(dims in prop::collection::vec(1usize..4, 1..5), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503))).collect();
        let t = Tensor::new(&dims, data).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        let back = decode_tensor(&b).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }
}
