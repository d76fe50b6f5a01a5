use super::checkpoint::{decode_checkpoint, encode_checkpoint};
use super::idx::{parse_idx_images, parse_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};
use super::*;
use crate::nn::build_arch;
use crate::rng::stream;

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_images_parse() {
    let bytes = idx_bytes(IMAGES_MAGIC, &[2, 2, 3], &[0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 6]);
    let t = parse_idx_images(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 1, 2, 3]);
    assert_eq!(t.data()[1], 1.0);
    assert!((t.data()[2] - 0.2).abs() < 1e-15);
}

#[test]
fn idx_rejects_wrong_magic_with_found_value() {
    let bytes = idx_bytes(LABELS_MAGIC, &[3], &[1, 2, 3]);
    let err = parse_idx_images(&bytes).unwrap_err();
    assert!(err.to_string().contains("0x00000801"), "{err}");
    assert!(parse_idx_labels(&bytes).is_ok());
}

#[test]
fn idx_rejects_truncation() {
    let bytes = idx_bytes(IMAGES_MAGIC, &[2, 2, 2], &[0; 7]);
    assert!(matches!(parse_idx_images(&bytes), Err(Error::Truncated { .. })));
}

#[test]
fn cifar_records() {
    let mut rec = vec![7u8];
    rec.extend((0..3072).map(|i| (i % 256) as u8));
    let (px, labels) = cifar::parse_cifar_records(&rec).unwrap();
    assert_eq!(labels, vec![7]);
    assert_eq!(px.len(), 3072);
    assert!(cifar::parse_cifar_records(&rec[..3000]).is_err());
}

#[test]
fn normalization_standardizes_channels() {
    let x = Tensor::randn(&[50, 2, 3, 3], 1.0, &mut stream(0, "x")).map(|v| 3.0 * v + 1.0);
    let norm = Normalization::fit(&x);
    let mut y = x.clone();
    norm.apply(&mut y);
    let again = Normalization::fit(&y);
    for c in 0..2 {
        assert!(again.mean[c].abs() < 1e-12);
        assert!((again.std[c] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = stream(1, "ckpt");
    let sections = vec![
        Section::tensor("a", Tensor::randn(&[3, 4], 1.0, &mut rng)),
        Section::tensor("scalar", Tensor::scalar(-0.0)),
        Section {
            name: "f32".into(),
            payload: Payload::F32 {
                shape: vec![2],
                data: vec![1.5, -2.25],
            },
        },
        Section::bytes("json", b"{}".to_vec()),
    ];
    let bytes = encode_checkpoint(&sections);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back, sections);
}

#[test]
fn empty_checkpoint_is_valid() {
    let bytes = encode_checkpoint(&[]);
    assert_eq!(bytes.len(), 16);
    assert!(decode_checkpoint(&bytes).unwrap().is_empty());
}

#[test]
fn payload_corruption_fails_crc() {
    let bytes = encode_checkpoint(&[Section::tensor("w", Tensor::ones(&[4]))]);
    let mut bad = bytes.clone();
    let payload_byte = bytes.len() - 4 - 3;
    bad[payload_byte] ^= 0x10;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum { .. })));
}

#[test]
fn header_errors_are_distinct() {
    let bytes = encode_checkpoint(&[Section::tensor("w", Tensor::ones(&[4]))]);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::BadMagic { .. })));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(decode_checkpoint(&bad_version), Err(Error::BadVersion { found: 9, .. })));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
}

#[test]
fn network_checkpoint_round_trip() {
    let net = build_arch("resnet-tiny", &[3, 8, 8], 10, &mut stream(0, "init")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_network(&path, &net).unwrap();
    assert_eq!(load_network(&path).unwrap(), net);
}

#[test]
fn planted_labels_follow_signal_only() {
    let p = make_planted_dataset(3, 500, 4, 4).unwrap();
    let sig = p.signal_channels();
    assert_eq!(sig.len(), 4);
    let x = p.dataset.images.data();
    for i in 0..p.dataset.len() {
        let s: Vec<f64> = sig.iter().map(|&c| x[i * 8 + c]).collect();
        assert_eq!(synthetic::planted_label(&s), p.dataset.labels[i]);
    }
}

#[test]
fn planted_layout_varies_with_seed() {
    let masks: std::collections::HashSet<Vec<bool>> =
        (0..10).map(|s| make_planted_dataset(s, 10, 4, 4).unwrap().signal_mask).collect();
    assert!(masks.len() > 1);
}

#[test]
fn synthetic_images_are_bounded_and_reproducible() {
    let a = make_synthetic_images(5, 20, [1, 6, 6], 3, 0.2, Split::Train).unwrap();
    let b = make_synthetic_images(5, 20, [1, 6, 6], 3, 0.2, Split::Train).unwrap();
    assert_eq!(a, b);
    assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
