use dsr_core::network::{build_network, preact_resnet, LayerSpec, Mode, Network, NetworkSpec, ParamKind, Trace};
use dsr_core::neuron::{simulate_layer, NeuronConfig, NeuronModel, NeuronParams, NeuronState, SpikeTrain};
use dsr_core::representation::rep_lif;
use dsr_core::{DsrError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn if_config(v_th: f64, alpha: f64) -> NeuronConfig {
    NeuronConfig {
        v_th_init: v_th,
        alpha,
        ..NeuronConfig::defaults(NeuronModel::If, 10)
    }
}

fn spec(input: Vec<usize>, classes: usize, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec { input, classes, layers }
}

fn set(net: &mut Network, name: &str, data: Vec<f64>) {
    let p = net.params_mut().iter_mut().find(|p| p.name == name).unwrap();
    assert_eq!(p.value.numel(), data.len(), "{name}");
    p.value.data_mut().copy_from_slice(&data);
}

fn constant_frames(n: usize, b: usize, x: &[f64]) -> Tensor {
    let data = (0..n * b).flat_map(|_| x.iter().copied()).collect();
    Tensor::new(vec![n, b, x.len()], data).unwrap()
}

#[test]
fn minimal_spec_has_one_weight_and_one_threshold() {
    let s = spec(
        vec![784],
        10,
        vec![LayerSpec::fc(784, 10), LayerSpec::bn(), LayerSpec::spiking()],
    );
    let net = build_network(&s, &if_config(6.0, 0.5), 0).unwrap();
    let count = |k| net.params().iter().filter(|p| p.kind == k).count();
    assert_eq!(count(ParamKind::Weight), 1);
    assert_eq!(count(ParamKind::Threshold), 1);
    assert_eq!(net.param("layers.0.weight").unwrap().value.shape(), &[10, 784]);
    assert_eq!(net.thresholds(), vec![6.0]);
}

#[test]
fn preact_resnet_20_has_three_groups_of_three_blocks() {
    let s = preact_resnet(20, &[3, 32, 32], 10).unwrap();
    let blocks: Vec<&LayerSpec> = s
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::ResidualBlock { .. }))
        .collect();
    assert_eq!(blocks.len(), 9);
    let widths: Vec<usize> = blocks
        .iter()
        .map(|b| match b {
            LayerSpec::ResidualBlock { body, .. } => body
                .iter()
                .rev()
                .find_map(|l| match l {
                    LayerSpec::Conv {
                        out_channels, kernel, ..
                    } => {
                        assert_eq!(*kernel, 3);
                        Some(*out_channels)
                    }
                    _ => None,
                })
                .unwrap(),
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(widths, [16, 16, 16, 32, 32, 32, 64, 64, 64]);
    let net = build_network(&s, &if_config(6.0, 0.5), 0).unwrap();
    assert_eq!(net.param("layers.0.weight").unwrap().value.shape(), &[16, 3, 3, 3]);
}

#[test]
fn mismatched_fc_is_a_spec_error() {
    let s = spec(
        vec![10],
        5,
        vec![LayerSpec::fc(10, 20), LayerSpec::fc(30, 5), LayerSpec::spiking()],
    );
    assert!(matches!(
        build_network(&s, &if_config(1.0, 1.0), 0),
        Err(DsrError::Spec(_))
    ));
    let s = spec(vec![10], 4, vec![LayerSpec::fc(10, 5), LayerSpec::spiking()]);
    assert!(matches!(
        build_network(&s, &if_config(1.0, 1.0), 0),
        Err(DsrError::Spec(_))
    ));
}

#[test]
fn spiking_layers_follow_pooling_and_classifier() {
    let s = spec(
        vec![1, 4, 4],
        3,
        vec![
            LayerSpec::conv(1, 2, 3, 1, 1),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::avgpool(2),
            LayerSpec::Flatten,
            LayerSpec::fc(8, 3),
        ],
    );
    let net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    assert_eq!(net.spiking_layer_names(), ["layers.2", "layers.4", "layers.7"]);
}

#[test]
fn half_current_fires_twice_in_five_steps() {
    let s = spec(vec![1], 1, vec![LayerSpec::fc(1, 1), LayerSpec::spiking()]);
    let mut net = build_network(&s, &if_config(1.0, 1.0), 0).unwrap();
    set(&mut net, "layers.0.weight", vec![1.0]);
    let frames = constant_frames(5, 1, &[0.5]);
    let rec = net.forward_keep_spikes(&frames, Mode::Eval, None).unwrap();
    let p = NeuronParams::integrate_and_fire(1.0, 1.0).unwrap();
    let (oracle, _) = simulate_layer(
        &NeuronState::zeros(&[1]),
        &Tensor::new(vec![5, 1], vec![0.5; 5]).unwrap(),
        &p,
    )
    .unwrap();
    assert_eq!(rec.spikes[0].data(), oracle.tensor().data());
    assert_eq!(oracle.count(), 2);
    assert!((rec.logits().item() - 0.4).abs() < 1e-12);
}

#[test]
fn saturating_current_fires_every_step() {
    let s = spec(vec![3], 3, vec![LayerSpec::fc(3, 3), LayerSpec::spiking()]);
    let mut net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    set(
        &mut net,
        "layers.0.weight",
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    );
    let frames = constant_frames(7, 2, &[3.0, 1.5, 9.0]);
    let rec = net.forward_keep_spikes(&frames, Mode::Eval, None).unwrap();
    assert!(rec.spikes[0].data().iter().all(|&s| s == 1.0));
    assert!(rec.logits().data().iter().all(|&o| o == 1.0));
}

#[test]
fn zero_input_gives_no_spikes_anywhere() {
    let s = spec(
        vec![4],
        3,
        vec![
            LayerSpec::fc(4, 6),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::fc(6, 3),
            LayerSpec::bn(),
            LayerSpec::spiking(),
        ],
    );
    let net = build_network(&s, &if_config(1.0, 0.5), 3).unwrap();
    let frames = Tensor::zeros(&[6, 5, 4]);
    for mode in [Mode::Train, Mode::Eval] {
        let rec = net.forward_keep_spikes(&frames, mode, None).unwrap();
        assert!(rec.spikes.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
        assert!(rec.representations().iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
    }
}

/// With a single step every layer acts once: affine map, batch norm over the
/// batch, then a threshold test against `alpha·V_th`.
#[test]
fn single_step_matches_joint_layer_application() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = spec(
        vec![5],
        3,
        vec![
            LayerSpec::fc(5, 4),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::fc(4, 3),
            LayerSpec::spiking(),
        ],
    );
    let (v1, v2, alpha) = (0.7, 0.9, 0.5);
    let mut net = build_network(&s, &if_config(1.0, alpha), 5).unwrap();
    set(&mut net, "layers.2.threshold", vec![v1]);
    set(&mut net, "layers.4.threshold", vec![v2]);
    let b = 6;
    let x: Vec<f64> = (0..b * 5).map(|_| rng.random_range(-1.0..2.0)).collect();
    let frames = Tensor::new(vec![1, b, 5], x.clone()).unwrap();
    let rec = net.forward(&frames, Mode::Train, None).unwrap();

    let w1 = net.param("layers.0.weight").unwrap().value.data().to_vec();
    let w2 = net.param("layers.3.weight").unwrap().value.data().to_vec();
    let h: Vec<Vec<f64>> = (0..b)
        .map(|r| {
            (0..4)
                .map(|o| (0..5).map(|i| w1[o * 5 + i] * x[r * 5 + i]).sum())
                .collect()
        })
        .collect();
    let mut o1 = vec![vec![0.0; 4]; b];
    for c in 0..4 {
        let mean = h.iter().map(|r| r[c]).sum::<f64>() / b as f64;
        let var = h.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / b as f64;
        for r in 0..b {
            let y = (h[r][c] - mean) / (var + 1e-5).sqrt();
            o1[r][c] = if y >= alpha * v1 { v1 } else { 0.0 };
        }
    }
    let mut o2 = Vec::new();
    for r in 0..b {
        for k in 0..3 {
            let z: f64 = (0..4).map(|c| w2[k * 4 + c] * o1[r][c]).sum();
            o2.push(if z >= alpha * v2 { v2 } else { 0.0 });
        }
    }
    assert!(o1.concat().iter().any(|&v| v > 0.0) && o1.concat().iter().any(|&v| v == 0.0));
    let reps = rec.representations();
    assert_eq!(reps[0].data(), o1.concat().as_slice());
    assert_eq!(reps[1].data(), o2.as_slice());
}

#[test]
fn membrane_state_does_not_leak_between_passes() {
    let s = spec(
        vec![3],
        2,
        vec![
            LayerSpec::fc(3, 5),
            LayerSpec::spiking(),
            LayerSpec::fc(5, 2),
            LayerSpec::spiking(),
        ],
    );
    let net = build_network(&s, &if_config(1.0, 0.5), 2).unwrap();
    let frames = constant_frames(4, 3, &[0.3, 0.9, 0.6]);
    let a = net.forward_keep_spikes(&frames, Mode::Eval, None).unwrap();
    let _ = net
        .forward(&constant_frames(4, 3, &[5.0, 5.0, 5.0]), Mode::Eval, None)
        .unwrap();
    let b = net.forward_keep_spikes(&frames, Mode::Eval, None).unwrap();
    assert_eq!(a.spikes, b.spikes);
    assert_eq!(a.traces, b.traces);
}

#[test]
fn lif_layer_matches_simulation_and_weighted_rate() {
    let cfg = NeuronConfig::defaults(NeuronModel::Lif, 10);
    let s = spec(vec![2], 2, vec![LayerSpec::fc(2, 2), LayerSpec::spiking()]);
    let mut net = build_network(&s, &cfg, 0).unwrap();
    set(&mut net, "layers.0.weight", vec![1.0, 0.0, 0.5, 0.5]);
    let n = 10;
    let x = [0.2, 0.6];
    let rec = net
        .forward_keep_spikes(&constant_frames(n, 1, &x), Mode::Eval, None)
        .unwrap();
    let p = cfg.params(cfg.v_th_init, cfg.alpha);
    let cur = [x[0] / cfg.dt, 0.5 * (x[0] + x[1]) / cfg.dt];
    let currents = Tensor::new(vec![n, 2], (0..n).flat_map(|_| cur).collect()).unwrap();
    let (train, _) = simulate_layer(&NeuronState::zeros(&[2]), &currents, &p).unwrap();
    assert_eq!(
        rec.spikes[0].clone().reshape(&[n, 2]).unwrap().data(),
        train.tensor().data()
    );
    assert!(train.count() > 0);
    let oracle = rep_lif(&train, p.v_th, p.lambda(), p.dt).unwrap();
    assert!(rec.logits().max_abs_diff(&oracle.o.clone().reshape(&[1, 2]).unwrap()) < 1e-12);
}

#[test]
fn dropout_mask_is_shared_across_steps() {
    let s = spec(
        vec![2],
        2,
        vec![
            LayerSpec::fc(2, 16),
            LayerSpec::Dropout { p: 0.5 },
            LayerSpec::spiking(),
            LayerSpec::fc(16, 2),
            LayerSpec::spiking(),
        ],
    );
    let mut net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    set(&mut net, "layers.0.weight", vec![1.0; 32]);
    let (n, b) = (6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rec = net
        .forward_keep_spikes(&constant_frames(n, b, &[2.0, 2.0]), Mode::Train, Some(&mut rng))
        .unwrap();
    let Some(Trace::Dropout { mask: Some(mask) }) = rec.traces.iter().find(|t| matches!(t, Trace::Dropout { .. }))
    else {
        panic!("no dropout mask recorded");
    };
    let spikes = rec.spikes[0].data();
    for (j, &m) in mask.data().iter().enumerate() {
        for step in 0..n {
            assert_eq!(spikes[step * b * 16 + j] == 1.0, m != 0.0);
        }
    }
    assert!(matches!(
        net.forward(&constant_frames(n, b, &[2.0, 2.0]), Mode::Train, None),
        Err(DsrError::Usage(_))
    ));
}

#[test]
fn frame_shape_is_checked() {
    let s = spec(vec![3], 2, vec![LayerSpec::fc(3, 2), LayerSpec::spiking()]);
    let net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros(&[2, 1, 4]), Mode::Eval, None),
        Err(DsrError::Dimension(_))
    ));
}

#[test]
fn running_stats_follow_batch_moments() {
    let s = spec(
        vec![2],
        2,
        vec![LayerSpec::fc(2, 2), LayerSpec::bn(), LayerSpec::spiking()],
    );
    let mut net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    set(&mut net, "layers.0.weight", vec![1.0, 0.0, 0.0, 1.0]);
    let frames = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let rec = net.forward(&frames, Mode::Train, None).unwrap();
    net.commit_running_stats(&rec).unwrap();
    let rm = net.param("layers.1.running_mean").unwrap().value.data().to_vec();
    let rv = net.param("layers.1.running_var").unwrap().value.data().to_vec();
    // means (2, 4), unbiased variances (2, 8)
    assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.4).abs() < 1e-12);
    assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12 && (rv[1] - (0.9 + 0.8)).abs() < 1e-12);
}

#[test]
fn spike_trains_are_binary_and_reps_bounded() {
    let s = spec(
        vec![1, 6, 6],
        4,
        dsr_core::network::digits_conv(&[1, 8, 8], 4).unwrap().layers,
    );
    assert!(build_network(&s, &if_config(1.0, 0.5), 0).is_err());
    let s = dsr_core::network::digits_conv(&[1, 8, 8], 4).unwrap();
    let net = build_network(&s, &if_config(1.0, 0.5), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = Tensor::new(
        vec![3, 2, 1, 8, 8],
        (0..384).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let rec = net.forward_keep_spikes(&frames, Mode::Train, None).unwrap();
    for (s, rep) in rec.spikes.iter().zip(rec.representations()) {
        assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(rep.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let train = SpikeTrain::new(s.clone()).unwrap();
        assert_eq!(train.time_steps(), 3);
    }
}
