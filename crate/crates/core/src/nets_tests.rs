use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::random_tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval_forward(net: &Network<f64>, input: &Tensor<f64>) -> Tensor<f64> {
    net.infer(input).unwrap()
}

#[test]
fn classifier_maps_to_probabilities_of_input_size() {
    let net = build_classifier::<f64>(UNetConfig::classifier(2, 1, 2), 3).unwrap();
    let out = eval_forward(&net, &random_tensor(&[1, 2, 8, 8], &mut rng(0)));
    assert_eq!(out.shape(), &[1, 1, 8, 8]);
    assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn distinct_seeds_give_distinct_parameters() {
    let a = build_classifier::<f64>(UNetConfig::classifier(2, 2, 4), 1).unwrap();
    let b = build_classifier::<f64>(UNetConfig::classifier(2, 2, 4), 2).unwrap();
    let c = build_classifier::<f64>(UNetConfig::classifier(2, 2, 4), 1).unwrap();
    assert_ne!(a.param_hash(), b.param_hash());
    assert_eq!(a, c);
}

/// Counts parameters by listing every layer of the depth-1 network.
#[test]
fn parameter_count_matches_layer_enumeration() {
    // (cin, cout, kernel, followed by batch norm)
    let layers = [
        (2, 2, 3, true), // enc0.0
        (2, 2, 3, true), // enc0.1
        (2, 4, 3, true), // bottleneck.0
        (4, 4, 3, true), // bottleneck.1
        (4, 2, 3, true), // up0
        (4, 2, 3, true), // dec0.0 (up + skip channels)
        (2, 2, 3, true), // dec0.1
        (2, 1, 1, false), // head
    ];
    let expected: usize = layers
        .iter()
        .map(|&(cin, cout, k, bn)| cout * cin * k * k + cout + if bn { 2 * cout } else { 0 })
        .sum();
    assert_eq!(expected, 525);
    let net = build_classifier::<f64>(UNetConfig::classifier(2, 1, 2), 0).unwrap();
    assert_eq!(net.num_parameters(), expected);
    assert_eq!(net.running_stats().len(), 7);
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = UNetConfig::classifier(1, 3, 4);
    let a = build_classifier::<f64>(cfg, 1).unwrap();
    let b = build_classifier::<f32>(cfg, 99).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
}

#[test]
fn generator_preserves_shape_and_admits_negative_output() {
    let net = build_generator::<f64>(UNetConfig::generator(2, 4), 5).unwrap();
    let out = eval_forward(&net, &random_tensor(&[1, 1, 16, 16], &mut rng(1)));
    assert_eq!(out.shape(), &[1, 1, 16, 16]);
    assert!(out.data().iter().any(|&v| v < 0.0));
    assert!(out.data().iter().any(|&v| v > 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_depth = UNetConfig {
        depth: 0,
        ..UNetConfig::classifier(2, 1, 2)
    };
    assert!(build_classifier::<f64>(bad_depth, 0).is_err());
    assert!(build_classifier::<f64>(UNetConfig::classifier(3, 1, 2), 0).is_err());
    assert!(build_classifier::<f64>(UNetConfig::generator(1, 2), 0).is_err());
    assert!(build_generator::<f64>(UNetConfig::classifier(1, 1, 2), 0).is_err());
    let two_in = UNetConfig {
        in_channels: 2,
        ..UNetConfig::generator(1, 2)
    };
    assert!(build_generator::<f64>(two_in, 0).is_err());
}

#[test]
fn indivisible_input_names_required_divisor() {
    let net = build_classifier::<f64>(UNetConfig::classifier(1, 3, 2), 0).unwrap();
    let err = net.infer(&Tensor::zeros(&[1, 1, 12, 16])).unwrap_err();
    assert!(matches!(err, Error::Indivisible { size: 12, divisor: 8, .. }), "{err}");
    let err = net.infer(&Tensor::zeros(&[1, 2, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { dim: "input channels", .. }));
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let net = build_classifier::<f64>(UNetConfig::classifier(2, 2, 3), 4).unwrap();
    let single = random_tensor(&[1, 2, 8, 8], &mut rng(2));
    let mut pair_data = single.data().to_vec();
    pair_data.extend_from_slice(single.data());
    let pair = Tensor::new(&[2, 2, 8, 8], pair_data).unwrap();
    let a = eval_forward(&net, &single);
    let b = eval_forward(&net, &single);
    assert_eq!(a.data(), b.data());
    let p = eval_forward(&net, &pair);
    assert_eq!(&p.data()[..64], a.data());
    assert_eq!(&p.data()[64..], a.data());
}

#[test]
fn eval_forward_never_mutates_state() {
    let mut net = build_classifier::<f64>(UNetConfig::classifier(1, 2, 2), 4).unwrap();
    net.set_mode(NetMode::Eval);
    let before = net.state_hash();
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[3, 1, 8, 8], &mut rng(3)));
    let bound = net.bind(&mut tape, false);
    net.forward(&mut tape, x, &bound).unwrap();
    assert_eq!(before, net.state_hash());
}

#[test]
fn train_forward_updates_running_statistics_only() {
    let mut net = build_classifier::<f64>(UNetConfig::classifier(1, 2, 2), 4).unwrap();
    let (params, stats) = (net.param_hash(), net.state_hash());
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[3, 1, 8, 8], &mut rng(3)));
    let bound = net.bind(&mut tape, false);
    net.forward(&mut tape, x, &bound).unwrap();
    assert_eq!(params, net.param_hash());
    assert_ne!(stats, net.state_hash());
}

#[test]
fn output_spatial_dims_equal_input_dims() {
    for (depth, base, size) in [(1, 2, 4), (2, 3, 8), (3, 2, 24), (1, 1, 6)] {
        let net = build_generator::<f64>(UNetConfig::generator(depth, base), 0).unwrap();
        let out = eval_forward(&net, &random_tensor(&[2, 1, size, size * 2], &mut rng(4)));
        assert_eq!(out.shape(), &[2, 1, size, size * 2]);
    }
}

#[test]
fn ablating_any_skip_connection_changes_output() {
    for seed in 0..3 {
        let net = build_classifier::<f64>(UNetConfig::classifier(2, 3, 2), seed).unwrap();
        let input = random_tensor(&[1, 2, 16, 16], &mut rng(seed + 10));
        let full = eval_forward(&net, &input);
        for level in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let bound = net.bind(&mut tape, false);
            let mut stats = net.running_stats().to_vec();
            let y = net
                .run(&mut tape, x, &bound, &mut stats, BatchNormMode::Eval, Some(level))
                .unwrap();
            assert_ne!(tape.value(y).data(), full.data(), "seed {seed}, level {level}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut net = build_generator::<f64>(UNetConfig::generator(2, 3), 8).unwrap();
    // move running stats away from their defaults
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[2, 1, 8, 8], &mut rng(5)));
    let bound = net.bind(&mut tape, false);
    net.forward(&mut tape, x, &bound).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    net.save(&path).unwrap();
    let mut loaded = Network::<f64>::load(&path).unwrap();
    loaded.set_mode(NetMode::Train);
    assert_eq!(loaded.to_bytes(), net.to_bytes());
    assert_eq!(loaded.state_hash(), net.state_hash());
    let input = random_tensor(&[1, 1, 8, 8], &mut rng(6));
    assert_eq!(eval_forward(&loaded, &input).data(), eval_forward(&net, &input).data());

    let bytes = net.to_bytes();
    assert_eq!(&bytes[..4], b"JSYN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let net = build_classifier::<f64>(UNetConfig::classifier(2, 1, 2), 0).unwrap();
    let mut bytes = net.to_bytes();
    let p = Path::new("mem");
    assert!(matches!(
        Network::<f64>::from_bytes(&bytes[..bytes.len() - 3], p),
        Err(Error::Truncated { .. })
    ));
    bytes[0] = b'X';
    assert!(matches!(Network::<f64>::from_bytes(&bytes, p), Err(Error::BadMagic { .. })));
}

#[test]
fn f32_network_runs() {
    let net = build_classifier::<f32>(UNetConfig::classifier(2, 2, 2), 0).unwrap();
    let input = random_tensor(&[1, 2, 8, 8], &mut rng(0)).cast::<f32>();
    let out = net.infer(&input).unwrap();
    assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
}
