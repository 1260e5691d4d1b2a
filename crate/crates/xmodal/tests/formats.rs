use std::path::Path;

use proptest::prelude::*;
use xmodal::formats::{ckpt, emb, ppm};
use xmodal::XmodalError;
use xmodal_core::autodiff::Tensor;
use xmodal_core::colorshapes::RgbImage;
use xmodal_core::eval::LabeledEmbeddings;

fn p() -> &'static Path {
    Path::new("mem.bin")
}

fn format_offset(e: XmodalError) -> (u64, String) {
    match e {
        XmodalError::Format { offset, detail, .. } => (offset, detail),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn ppm_black_and_white_map_to_the_tensor_endpoints() {
    let mut img = RgbImage::filled(2, 1, [0, 0, 0]);
    img.data[3..].copy_from_slice(&[255, 255, 255]);
    let bytes = ppm::encode(&img);
    assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
    let back = ppm::decode(&bytes, p()).unwrap();
    let t = back.to_tensor();
    // Channel-major layout: pixel 0 is black, pixel 1 white in every channel.
    for ch in 0..3 {
        assert_eq!(t.values()[ch * 2], -1.0);
        assert_eq!(t.values()[ch * 2 + 1], 1.0);
    }
    assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
}

#[test]
fn ppm_header_comments_are_skipped() {
    let mut bytes = b"P6 # made by hand\n1 # w\n1\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3]);
    let img = ppm::decode(&bytes, p()).unwrap();
    assert_eq!(img.data, vec![1, 2, 3]);
}

#[test]
fn ppm_errors_carry_byte_offsets() {
    let (off, detail) = format_offset(ppm::decode(b"P5\n1 1\n255\n\0", p()).unwrap_err());
    assert_eq!(off, 0);
    assert!(detail.contains("magic"));

    let (off, detail) = format_offset(ppm::decode(b"P6\n1 1\n65535\n\0\0\0", p()).unwrap_err());
    assert_eq!(off, 7);
    assert!(detail.contains("maxval"));

    let (_, detail) = format_offset(ppm::decode(b"P6\n2 2\n255\n\0\0\0", p()).unwrap_err());
    assert!(detail.contains("expected 12 bytes"), "{detail}");
    assert!(detail.contains("found 3"), "{detail}");

    let (_, detail) = format_offset(ppm::decode(b"P6\n0 2\n255\n", p()).unwrap_err());
    assert!(detail.contains("zero"));
}

#[test]
fn ppm_file_round_trip_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ppm");
    let img = RgbImage::filled(3, 2, [10, 20, 30]);
    ppm::write(&img, &path).unwrap();
    assert_eq!(ppm::read(&path).unwrap(), img);
    std::fs::write(&path, b"P6\n3 2\n255\n\x01").unwrap();
    assert_eq!(ppm::read(&path).unwrap_err().exit_code(), 3);
    assert_eq!(
        ppm::read(&dir.path().join("missing.ppm"))
            .unwrap_err()
            .exit_code(),
        3
    );
}

#[test]
fn emb_round_trip_is_bit_exact() {
    let set = LabeledEmbeddings::new(
        vec![vec![1.5, -0.0, f64::MIN_POSITIVE], vec![1e300, 2.0, -3.25]],
        vec![7, 0],
    )
    .unwrap();
    let file = emb::EmbeddingFile::from_set(&set);
    let bytes = emb::encode(&file);
    assert_eq!(bytes.len(), 12 + 2 * 3 * 8 + 2 * 4);
    let back = emb::decode(&bytes, p()).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.rows[0][1].to_bits(), (-0.0f64).to_bits());
    assert_eq!(back.to_set().unwrap(), set);
}

#[test]
fn emb_empty_set_is_a_valid_file() {
    let file = emb::EmbeddingFile {
        dim: 4,
        rows: vec![],
        labels: vec![],
    };
    let bytes = emb::encode(&file);
    assert_eq!(bytes.len(), 12);
    assert_eq!(emb::decode(&bytes, p()).unwrap(), file);
}

#[test]
fn emb_truncation_names_expected_and_actual_length() {
    let set = LabeledEmbeddings::new(vec![vec![1.0, 2.0]], vec![1]).unwrap();
    let bytes = emb::encode(&emb::EmbeddingFile::from_set(&set));
    let (_, detail) = format_offset(emb::decode(&bytes[..bytes.len() - 1], p()).unwrap_err());
    assert!(detail.contains("need 32 bytes"), "{detail}");
    assert!(detail.contains("has 31"), "{detail}");
    let (off, _) = format_offset(emb::decode(b"EMBX\0\0\0\0\0\0\0\0", p()).unwrap_err());
    assert_eq!(off, 0);
}

fn sample_tensors() -> Vec<(String, Tensor)> {
    vec![
        (
            "w".to_string(),
            Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, -7.0]).unwrap(),
        ),
        ("b".to_string(), Tensor::new(&[1], vec![0.25]).unwrap()),
    ]
}

#[test]
fn ckpt_round_trip_preserves_names_order_and_values() {
    let t = sample_tensors();
    let bytes = ckpt::encode(&t).unwrap();
    let back = ckpt::decode(&bytes, p()).unwrap();
    assert_eq!(back.len(), 2);
    for ((n0, t0), (n1, t1)) in t.iter().zip(&back) {
        assert_eq!(n0, n1);
        assert_eq!(t0.shape(), t1.shape());
        assert_eq!(t0.values(), t1.values());
    }
    assert_eq!(ckpt::encode(&back).unwrap(), bytes);
}

#[test]
fn ckpt_detects_corruption_and_truncation() {
    let bytes = ckpt::encode(&sample_tensors()).unwrap();
    for at in [5, 20, bytes.len() - 10] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        let (_, detail) = format_offset(ckpt::decode(&bad, p()).unwrap_err());
        assert!(detail.contains("CRC"), "{detail}");
    }
    let cut = &bytes[..bytes.len() - 9];
    assert!(ckpt::decode(cut, p()).is_err());
    assert!(ckpt::decode(b"CKP", p()).is_err());
}

#[test]
fn ckpt_rejects_duplicate_names() {
    let mut t = sample_tensors();
    t[1].0 = "w".into();
    assert!(ckpt::encode(&t).is_err());
}

#[test]
fn ckpt_write_replaces_atomically_and_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt::write(&sample_tensors(), &path).unwrap();
    let mut other = sample_tensors();
    other.pop();
    ckpt::write(&other, &path).unwrap();
    assert_eq!(ckpt::read(&path).unwrap().len(), 1);
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec![std::ffi::OsString::from("m.ckpt")]);
}

#[test]
fn ckpt_import_into_a_different_architecture_fails_cleanly() {
    use rand::SeedableRng;
    use xmodal_core::mapper::MapperGenerator;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let a = MapperGenerator::new(4, 6, 8, &mut rng).unwrap();
    let mut b = MapperGenerator::new(4, 6, 16, &mut rng).unwrap();
    let bytes = ckpt::encode(&a.store.export()).unwrap();
    let named = ckpt::decode(&bytes, p()).unwrap();
    let before = b.store.export();
    let err = b.store.import("", &named).unwrap_err();
    assert_eq!(XmodalError::from(err).exit_code(), 3);
    // A failed import leaves the destination untouched.
    for ((_, x), (_, y)) in before.iter().zip(b.store.export().iter()) {
        assert_eq!(x.values(), y.values());
    }
}

proptest! {
    #[test]
    fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
        let data: Vec<u8> = (0..w * h * 3)
            .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as u8)
            .collect();
        let img = RgbImage { width: w, height: h, data };
        prop_assert_eq!(ppm::decode(&ppm::encode(&img), p()).unwrap(), img);
    }

    #[test]
    fn emb_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..8)) {
        let labels = (0..rows.len() as u32).collect();
        let file = emb::EmbeddingFile { dim: 3, rows, labels };
        prop_assert_eq!(emb::decode(&emb::encode(&file), p()).unwrap(), file);
    }

    #[test]
    fn ckpt_any_single_bit_flip_is_detected(bit in 0usize..(8 * 80)) {
        let bytes = ckpt::encode(&sample_tensors()).unwrap();
        let mut bad = bytes.clone();
        let at = (bit / 8) % bytes.len();
        bad[at] ^= 1 << (bit % 8);
        prop_assert!(ckpt::decode(&bad, p()).is_err());
    }
}
