use jsynth::data::{generate_phantom, plan_folds, FoldPlan, Modality, PhantomSpec, Subject, Volume};
use jsynth::metrics::{confusion, dice};
use jsynth::nets::{build_classifier, NetMode, Network, UNetConfig};
use jsynth::train::{
    epoch_batches, joint_trainer, predict, probabilities, synthesize, threshold, train, Regime, RunSeeds, SliceSet,
    SynthesisTrainer, TrainConfig,
};

fn cohort(n: usize) -> Vec<Subject<f64>> {
    generate_phantom(&PhantomSpec {
        n_subjects: n,
        slices: 2,
        height: 16,
        width: 16,
        lesion_radius: (1.0, 2.0),
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn tiny(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        epochs: 2,
        batch_size: 2,
        lr: 1e-3,
        slice: (16, 16),
        depth: 1,
        base_filters: 2,
        ..TrainConfig::default()
    }
}

fn fold(subjects: &[Subject<f64>]) -> FoldPlan {
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    plan_folds(&ids, 2, ids.len() / 2, 1, 0).unwrap().remove(0)
}

#[test]
fn every_regime_completes_with_finite_losses() {
    let subjects = cohort(6);
    let plan = fold(&subjects);
    for regime in Regime::ALL {
        let r = train(&subjects, &plan, &tiny(regime)).unwrap();
        assert_eq!(r.curves.len(), 2);
        assert!((1..=2).contains(&r.selected_epoch));
        for c in &r.curves {
            assert!(c.l_c.unwrap().is_finite());
            assert!(c.val_dice.is_some_and(|d| (0.0..=1.0).contains(&d)));
        }
        assert_eq!(r.generator.is_some(), regime.has_generator());
        assert_eq!(r.classifier.config().in_channels, if regime == Regime::Unimodal { 1 } else { 2 });
    }
}

#[test]
fn single_epoch_on_two_subjects() {
    let subjects = cohort(2);
    let plan = FoldPlan {
        fold: 0,
        train: vec![subjects[0].id.clone()],
        val: vec![],
        test: vec![subjects[1].id.clone()],
    };
    let r = train(&subjects, &plan, &TrainConfig { epochs: 1, ..tiny(Regime::Unimodal) }).unwrap();
    assert!(r.curves[0].l_c.unwrap().is_finite());
    assert_eq!(r.curves[0].val_dice, None);
}

#[test]
fn training_is_bitwise_reproducible() {
    let subjects = cohort(4);
    let plan = fold(&subjects);
    for regime in [Regime::Unimodal, Regime::Joint] {
        let a = train(&subjects, &plan, &tiny(regime)).unwrap();
        let b = train(&subjects, &plan, &tiny(regime)).unwrap();
        assert_eq!(a.classifier.to_bytes(), b.classifier.to_bytes());
        assert_eq!(a.generator.map(|g| g.to_bytes()), b.generator.map(|g| g.to_bytes()));
        assert_eq!(a.curves, b.curves);
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let subjects = cohort(2);
    let plan = FoldPlan {
        fold: 0,
        train: vec![],
        val: vec![],
        test: vec![subjects[0].id.clone()],
    };
    assert!(train(&subjects, &plan, &tiny(Regime::Joint)).is_err());
    let bad = TrainConfig { batch_size: 1, ..tiny(Regime::Joint) };
    let four = cohort(4);
    assert!(train(&four, &fold(&four), &bad).is_err());
}

#[test]
fn joint_without_segmentation_term_follows_pure_l2_trajectory() {
    let subjects = cohort(4);
    let refs: Vec<&Subject<f64>> = subjects.iter().collect();
    let set = SliceSet::from_subjects(&refs, (16, 16)).unwrap();
    let config = TrainConfig {
        lambda_seg: 0.0,
        ..tiny(Regime::Joint)
    };
    let seeds = RunSeeds::derive(config.seed);
    let mut joint = joint_trainer::<f64>(&config).unwrap();
    let mut offline = SynthesisTrainer::new(joint.generator.clone(), config.lr);
    let mut rng = seeds.schedule_rng();
    let mut steps = 0;
    while steps < 10 {
        for idx in epoch_batches(set.len(), 2, &mut rng).unwrap() {
            let batch = set.batch(&idx);
            let c_before = joint.classifier.param_hash();
            joint.step(&batch).unwrap();
            assert_ne!(c_before, joint.classifier.param_hash());
            offline.step(&batch).unwrap();
            assert_eq!(joint.generator.params(), offline.generator.params());
            steps += 1;
        }
    }
}

#[test]
fn segmentation_term_changes_generator_gradient() {
    let subjects = cohort(2);
    let refs: Vec<&Subject<f64>> = subjects.iter().collect();
    let set = SliceSet::from_subjects(&refs, (16, 16)).unwrap();
    let mut joint = joint_trainer::<f64>(&tiny(Regime::Joint)).unwrap();
    let batch = set.range_batch(0..4);
    let with = joint.generator_gradient(&batch, 1.0).unwrap();
    let without = joint.generator_gradient(&batch, 0.0).unwrap();
    let diff: f64 = with
        .iter()
        .flatten()
        .zip(without.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(diff > 1e-12, "difference norm {diff}");
}

/// Classifier whose output is the second input channel pushed through a
/// steep sigmoid.
fn label_copying_classifier() -> Network<f64> {
    let mut net = build_classifier::<f64>(UNetConfig::classifier(2, 1, 2), 0).unwrap();
    let names: Vec<String> = net.param_names().to_vec();
    for (p, name) in net.params_mut().iter_mut().zip(&names) {
        let fill = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        p.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let mut set = |name: &str, at: usize, value: f64| {
        let i = net.param_index(name).unwrap();
        net.params_mut()[i].data_mut()[at] = value;
    };
    // weight layout [out, in, 3, 3]; centre tap is index 4
    set("enc0.0.weight", 9 + 4, 1.0); // out 0 <- in 1 (label channel)
    set("enc0.1.weight", 4, 1.0);
    set("dec0.0.weight", 2 * 9 + 4, 1.0); // out 0 <- skip channel 0
    set("dec0.1.weight", 4, 1.0);
    set("head.weight", 0, 20.0);
    set("head.bias", 0, -10.0);
    net.set_mode(NetMode::Eval);
    net
}

#[test]
fn label_copying_classifier_scores_perfect_dice() {
    let s = &cohort(1)[0];
    assert!(s.label.positives() > 0);
    let net = label_copying_classifier();
    let pred = predict(&net, &s.t1, Some(&s.label), (16, 16)).unwrap();
    let c = confusion(pred.voxels(), s.label.voxels()).unwrap();
    assert_eq!(dice(&c), 1.0);
}

#[test]
fn predictions_are_binary_and_monotone_in_threshold() {
    let subjects = cohort(4);
    let r = train(&subjects, &fold(&subjects), &tiny(Regime::Offline)).unwrap();
    let s = &subjects[3];
    let synth = synthesize(r.generator.as_ref().unwrap(), &s.t1, (16, 16)).unwrap();
    assert_eq!(synth.dims(), s.t1.dims());
    assert_eq!(synth.modality(), Modality::SynthFlair);
    assert_eq!(synth, synthesize(r.generator.as_ref().unwrap(), &s.t1, (16, 16)).unwrap());
    let pred = predict(&r.classifier, &s.t1, Some(&synth), (16, 16)).unwrap();
    assert!(pred.voxels().iter().all(|&v| v == 0.0 || v == 1.0));
    let probs = probabilities(&r.classifier, &s.t1, Some(&synth), (16, 16)).unwrap();
    let mut last = usize::MAX;
    for level in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
        let n = threshold(&probs, level).iter().filter(|&&v| v == 1.0).count();
        assert!(n <= last);
        last = n;
    }
    assert!(predict(&r.classifier, &s.t1, None, (16, 16)).is_err());
}

#[test]
fn inference_maps_back_to_original_slice_size() {
    let s = &cohort(1)[0];
    // 16x16 volumes padded to 24x24 and cropped to 8x8
    let mut g = jsynth::nets::build_generator::<f64>(UNetConfig::generator(1, 2), 0).unwrap();
    g.set_mode(NetMode::Eval);
    for slice in [(24, 24), (8, 8)] {
        let synth = synthesize(&g, &s.t1, slice).unwrap();
        assert_eq!(synth.dims(), s.t1.dims());
    }
    let odd = Volume::new([1, 5, 7], (0..35).map(|i| 1.0 + i as f64).collect(), Modality::T1).unwrap();
    assert_eq!(synthesize(&g, &odd, (8, 8)).unwrap().dims(), [1, 5, 7]);
}
