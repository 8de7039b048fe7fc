use proptest::prelude::*;

use rose_core::experiment::{run_probe, ProbeProtocol, ProbeStrategy, SurfaceBaseline};
use rose_core::model::{init_params, Activation, DropoutSites, ModelSpec};
use rose_core::probe::{
    dropout_inconsistency_ratio, generate_probe_task, mcc, perturb, perturbation_eval,
    Perturbation, ProbeTaskSpec, SurfaceKind,
};

#[test]
fn training_split_is_ambiguous() {
    for kind in [SurfaceKind::Indicator, SurfaceKind::Magnitude] {
        let (train, test) = generate_probe_task(&ProbeTaskSpec::new(kind, 1)).unwrap();
        assert!(train
            .surface_cue
            .iter()
            .zip(&train.labels)
            .all(|(c, l)| *c == (*l == 1)));
        let ones = train.labels.iter().filter(|l| **l == 1).count() as f64 / train.len() as f64;
        assert!((ones - 0.5).abs() <= 0.02);
        assert_eq!(test.len(), 1024);
    }
}

#[test]
fn test_split_is_disambiguating() {
    let spec = ProbeTaskSpec {
        test_size: 10_000,
        ..ProbeTaskSpec::new(SurfaceKind::Indicator, 7)
    };
    let (_, test) = generate_probe_task(&spec).unwrap();
    let agree = test
        .surface_cue
        .iter()
        .zip(&test.labels)
        .filter(|(c, l)| **c == (**l == 1))
        .count();
    let rate = agree as f64 / 1e4;
    assert!((0.47..=0.53).contains(&rate), "{rate}");
    // the core signs still decide the label
    for r in 0..test.len() {
        let x = test.inputs.row(r);
        assert_eq!(test.labels[r], usize::from((x[0] > 0.0) == (x[1] > 0.0)));
    }
}

#[test]
fn surface_baseline_is_a_shortcut() {
    for kind in [SurfaceKind::Indicator, SurfaceKind::Magnitude] {
        let (train, test) = generate_probe_task(&ProbeTaskSpec::new(kind, 2)).unwrap();
        let base = SurfaceBaseline::fit(&train).unwrap();
        assert!(base.accuracy(&train).unwrap() >= 0.99, "{kind:?}");
        let clean = base.accuracy(&test).unwrap();
        assert!((clean - 0.5).abs() < 0.05, "{kind:?} {clean}");
        let flipped = base
            .accuracy(&perturb(&test, Perturbation::SurfaceFlip, 0).unwrap())
            .unwrap();
        assert!((flipped - (1.0 - clean)).abs() < 0.01, "{kind:?}");
    }
    let p = ProbeProtocol::default_for(SurfaceKind::Indicator);
    let row = run_probe(&p, ProbeStrategy::SurfaceBaseline, 3)
        .unwrap()
        .row;
    assert!(row.mcc.abs() < 0.1);
}

fn spec(rate: f64) -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        hidden_dims: vec![64],
        classes: 2,
        activation: Activation::Relu,
        dropout_rate: rate,
        dropout_sites: DropoutSites::AfterEachHidden,
    }
}

#[test]
fn perturbation_identities() {
    let (_, test) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 3)).unwrap();
    let s = spec(0.1);
    let mut params = init_params(&s, 1).unwrap();
    let clean =
        perturbation_eval(&s, &params, &test, Perturbation::Gaussian { sigma: 0.0 }, 4).unwrap();
    let direct =
        rose_core::probe::accuracy(&s.predict(&params, &test.inputs).unwrap(), &test.labels);
    assert_eq!(clean, direct);
    // zero the weights reading the surface coordinate
    let w = params.get_mut("layer0.weight").unwrap();
    let cols = w.shape()[1];
    w.data_mut()[4 * cols..5 * cols]
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let before =
        perturbation_eval(&s, &params, &test, Perturbation::Gaussian { sigma: 0.0 }, 0).unwrap();
    let after = perturbation_eval(&s, &params, &test, Perturbation::SurfaceFlip, 0).unwrap();
    assert_eq!(before, after);
    assert_eq!(
        perturb(&test, Perturbation::SurfaceFlip, 0)
            .unwrap()
            .inputs
            .data()[..4],
        test.inputs.data()[..4]
    );
}

#[test]
fn inconsistency_ratio_behaviour() {
    let (train, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 3)).unwrap();
    let batches = train.epoch_batches(256, 1, 0).unwrap();
    let mut positive = 0;
    for seed in 0..20 {
        let params = init_params(&spec(0.5), seed).unwrap();
        if dropout_inconsistency_ratio(&spec(0.5), &params, &batches, 1..3, seed).unwrap() > 0.0 {
            positive += 1;
        }
    }
    assert_eq!(positive, 20);
    let params = init_params(&spec(1e-9), 0).unwrap();
    assert_eq!(
        dropout_inconsistency_ratio(&spec(1e-9), &params, &batches, 1..3, 0).unwrap(),
        0.0
    );
    assert!(dropout_inconsistency_ratio(&spec(0.0), &params, &batches, 1..3, 0).is_err());
}

proptest! {
    #[test]
    fn mcc_bounds_and_relabel_symmetry(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..200)) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = mcc(&pred, &labels);
        prop_assert!((-1.0..=1.0).contains(&m));
        let flip = |v: &[usize]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
        prop_assert!((mcc(&flip(&pred), &flip(&labels)) - m).abs() < 1e-12);
    }
}
