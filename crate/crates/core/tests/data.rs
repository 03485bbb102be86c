use std::fs;

use dsr_core::data::{
    augment, encode_static, load_cifar_binary, load_frame_dataset, load_frames, load_idx, read_snnf,
    write_cifar_binary, write_idx, write_snnf, AugmentConfig, Dataset, Split,
};
use dsr_core::neuron::NeuronModel;
use dsr_core::representation::rep_input;
use dsr_core::{DsrError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn is_format<T: std::fmt::Debug>(r: dsr_core::Result<T>) -> bool {
    matches!(r, Err(DsrError::Format(_)))
}

#[test]
fn idx_single_white_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&img, &lab, &[255], 1, 1, &[3]).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    assert_eq!(d.samples().data(), &[1.0]);
    assert_eq!(d.labels(), &[3]);
    assert_eq!(d.classes(), 4);
}

#[test]
fn idx_round_trip_two_images() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|v| (v * 10) as u8).collect();
    write_idx(&img, &lab, &pixels, 3, 4, &[0, 1]).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    assert_eq!(d.samples().shape(), &[2, 1, 3, 4]);
    let expect: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    assert_eq!(d.samples().data(), expect.as_slice());
}

#[test]
fn idx_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&img, &lab, &[1, 2, 3, 4], 2, 2, &[0]).unwrap();
    let other = dir.path().join("l2");
    let img2 = dir.path().join("i2");
    write_idx(&img2, &other, &[1, 2, 3, 4, 5, 6, 7, 8], 2, 2, &[0, 1]).unwrap();
    assert!(is_format(load_idx(&img, &other)));

    let bytes = fs::read(&img).unwrap();
    for cut in [0, 3, 10, bytes.len() - 1] {
        fs::write(&img2, &bytes[..cut]).unwrap();
        assert!(is_format(load_idx(&img2, &lab)), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[3] = 0x01;
    fs::write(&img2, &bad).unwrap();
    assert!(is_format(load_idx(&img2, &lab)));
    assert!(is_format(load_idx(&lab, &lab)));
}

#[test]
fn cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    write_cifar_binary(&path, &[7], &[0; 3072]).unwrap();
    let d = load_cifar_binary(&path).unwrap();
    assert_eq!(d.labels(), &[7]);
    assert_eq!(d.samples().shape(), &[1, 3, 32, 32]);
    assert!(d.samples().data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pixels: Vec<u8> = (0..2 * 3072).map(|_| rng.random()).collect();
    write_cifar_binary(&path, &[2, 9], &pixels).unwrap();
    let d = load_cifar_binary(&path).unwrap();
    assert_eq!(d.labels(), &[2, 9]);
    let back: Vec<u8> = d.samples().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    // red plane first, then green
    assert_eq!(d.samples().data()[1024], pixels[1024] as f64 / 255.0);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..3073 + 100]).unwrap();
    assert!(is_format(load_cifar_binary(&path)));
    fs::write(&path, []).unwrap();
    assert!(is_format(load_cifar_binary(&path)));
}

#[test]
fn snnf_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.snnf");
    write_snnf(&path, &Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    let f = load_frames(&path).unwrap();
    assert_eq!(f.frame_count(), 1);
    assert!(f.frames().data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..20 * 2 * 4 * 4)
        .map(|_| rng.random_range(0.0f32..3.0) as f64)
        .collect();
    let t = Tensor::new(vec![20, 2, 4, 4], data).unwrap();
    write_snnf(&path, &t).unwrap();
    let f = load_frames(&path).unwrap();
    assert_eq!(f.frames(), &t);
    assert_eq!(f.frames().shape(), &[20, 2, 4, 4]);

    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"SNNF");
    assert_eq!(bytes.len(), 4 + 4 + 4 * 4 + 4 * t.numel());
    for cut in [2, 7, 20, bytes.len() - 2] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(is_format(read_snnf(&path)), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(is_format(read_snnf(&path)));
    let mut bad = bytes;
    bad[4] = 0;
    fs::write(&path, &bad).unwrap();
    assert!(is_format(read_snnf(&path)));
}

#[test]
fn frame_dataset_pairs_sequences_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, img, lab) = (dir.path().join("f"), dir.path().join("i"), dir.path().join("l"));
    write_snnf(&frames, &Tensor::full(&[3, 5, 2, 2, 2], 0.5)).unwrap();
    write_idx(&img, &lab, &[0; 3], 1, 1, &[1, 0, 1]).unwrap();
    let d = load_frame_dataset(&frames, &lab).unwrap();
    assert!(d.is_temporal());
    assert_eq!(d.len(), 3);
    let (batch, labels) = d.batch::<ChaCha8Rng>(&[2, 0], 8, None).unwrap();
    assert_eq!(batch.shape(), &[8, 2, 2, 2, 2]);
    assert_eq!(labels, [1, 1]);
    write_idx(&img, &lab, &[0; 2], 1, 1, &[1, 0]).unwrap();
    assert!(is_format(load_frame_dataset(&frames, &lab)));
}

#[test]
fn dataset_rejects_out_of_range_labels() {
    let r = Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![0, 3], 3, Split::Train, false);
    assert!(r.is_err());
}

#[test]
fn normalised_dataset_has_zero_channel_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(
        vec![10, 3, 4, 4],
        (0..480).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let d = Dataset::new(x, vec![0; 10], 1, Split::Train, false).unwrap();
    let (mean, std) = d.channel_stats();
    let (m2, s2) = d.normalized(&mean, &std).unwrap().channel_stats();
    assert!(m2.iter().all(|m| m.abs() < 1e-6));
    assert!(s2.iter().all(|s| (s - 1.0).abs() < 1e-6));
}

proptest! {
    #[test]
    fn static_encoding_then_input_rep_is_identity(
        pixels in proptest::collection::vec(0.0f64..1.0, 12),
        n in 1usize..12,
    ) {
        let x = Tensor::new(vec![3, 2, 2], pixels.clone()).unwrap();
        let frames = encode_static(&x, n).unwrap();
        prop_assert_eq!(frames.shape(), &[n, 3, 2, 2]);
        let flat = frames.clone().reshape(&[n, 12]).unwrap();
        let rep = rep_input(&flat, NeuronModel::If, 1.0, 1.0).unwrap();
        for (a, b) in rep.data().iter().zip(&pixels) {
            prop_assert!((a - b).abs() <= 1e-15 * n as f64);
        }
        let dt = 0.05;
        let lambda = (-dt / 1.0f64).exp();
        let rep = rep_input(&flat, NeuronModel::Lif, lambda, dt).unwrap();
        for (a, b) in rep.data().iter().zip(&pixels) {
            prop_assert!((a - b / dt).abs() <= 1e-12 * (1.0 + b / dt));
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_is_seeded(seed in 0u64..1000, pad in 0usize..4, flip in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![2, 5, 6], (0..60).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let cfg = AugmentConfig { crop_pad: pad, hflip_prob: flip };
        let a = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.shape(), x.shape());
        prop_assert_eq!(a, b);

        let d = Dataset::new(x.clone().reshape(&[1, 2, 5, 6]).unwrap(), vec![4], 5, Split::Train, false).unwrap();
        let (batch, labels) = d.batch(&[0], 3, Some((&cfg, &mut rng))).unwrap();
        prop_assert_eq!(batch.shape(), &[3, 1, 2, 5, 6]);
        prop_assert_eq!(labels, vec![4]);
    }
}
