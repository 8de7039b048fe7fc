use rose_core::config::{DataSource, Mode, RunConfig};
use rose_core::losses::{sce_loss, SceSource};
use rose_core::model::{init_params, Activation, DropoutSites, ModelSpec};
use rose_core::optimizer::{adamw_step, rdrop_rose_step, rose_step, Hyper, OptimizerState};
use rose_core::params::ParamSet;
use rose_core::probe::{generate_probe_task, ProbeTaskSpec, SurfaceKind};
use rose_core::rng::RngStream;
use rose_core::rose::{Granularity, RoseConfig, Strategy};
use rose_core::train::train;

fn spec() -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        hidden_dims: vec![24, 16],
        classes: 2,
        activation: Activation::Tanh,
        dropout_rate: 0.1,
        dropout_sites: DropoutSites::AfterEachHidden,
    }
}

fn max_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn full_mask_reduces_to_adamw() {
    let spec = spec();
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 3)).unwrap();
    let batch = data.subset(&(0..32).collect::<Vec<_>>()).unwrap();
    let hyper = Hyper {
        lr: 3e-3,
        weight_decay: 0.05,
        ..Hyper::default()
    };
    for (strategy, granularity) in [
        (Strategy::First, Granularity::Group),
        (Strategy::Second, Granularity::Scalar),
        (Strategy::Ensemble, Granularity::Scalar),
    ] {
        let rose = RoseConfig {
            granularity,
            ..RoseConfig::new(strategy, 1.0)
        };
        let mut p = init_params(&spec, 1).unwrap();
        let mut s = OptimizerState::new(&p, hyper);
        let mut q = p.clone();
        let mut r = s.clone();
        for _ in 0..120 {
            let out = rose_step(&spec, &p, &s, &batch, &rose, SceSource::Pass0, 4).unwrap();
            (p, s) = (out.params, out.state);
            let pass0 = RngStream::new(4, r.t + 1, 0).unwrap();
            let (logits, mut tape) = spec.forward(&q, &batch.inputs, Some(&pass0)).unwrap();
            let loss = sce_loss(&mut tape, logits, &batch.labels).unwrap();
            (q, r) = adamw_step(&q, &r, &tape.backward(loss).unwrap()).unwrap();
            assert!(max_diff(&p, &q) <= 1e-12, "{strategy:?}");
        }
    }
}

#[test]
fn mask_fraction_tracks_threshold() {
    let spec = spec();
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 3)).unwrap();
    let batch = data.subset(&(0..16).collect::<Vec<_>>()).unwrap();
    let p = init_params(&spec, 1).unwrap();
    let s = OptimizerState::new(&p, Hyper::default());
    let rose = RoseConfig {
        granularity: Granularity::Scalar,
        ..RoseConfig::new(Strategy::First, 0.3)
    };
    let out = rose_step(&spec, &p, &s, &batch, &rose, SceSource::Pass0, 1).unwrap();
    let n = p.scalar_count() as f64;
    assert!((out.report.mask_ones_fraction - (0.3 * n).floor() / n).abs() < 1e-12);
    // unselected scalars do not move
    let moved = p
        .flatten()
        .iter()
        .zip(out.params.flatten())
        .filter(|(a, b)| **a != *b)
        .count();
    assert!(moved as f64 <= (0.3 * n).floor());
}

#[test]
fn rdrop_rose_is_deterministic() {
    let spec = spec();
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 5)).unwrap();
    let batch = data.subset(&(0..32).collect::<Vec<_>>()).unwrap();
    let p = init_params(&spec, 2).unwrap();
    let s = OptimizerState::new(&p, Hyper::default());
    let rose = RoseConfig::new(Strategy::Ensemble, 0.5);
    let a = rdrop_rose_step(&spec, &p, &s, &batch, &rose, 1.0, 8).unwrap();
    let b = rdrop_rose_step(&spec, &p, &s, &batch, &rose, 1.0, 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.report, b.report);
    assert!(a.report.loss_kl.unwrap() > 0.0);
}

fn config(mode: Mode, rose: Option<RoseConfig>, epochs: usize) -> RunConfig {
    let task = ProbeTaskSpec {
        train_size: 128,
        ..ProbeTaskSpec::new(SurfaceKind::Indicator, 6)
    };
    RunConfig {
        model: spec(),
        optimizer: Hyper::default(),
        mode,
        rose,
        rdrop_weight: None,
        sce_source: SceSource::Pass0,
        data: DataSource::Synthetic(task),
        epochs,
        batch_size: 32,
        seed: 3,
        output_dir: None,
    }
}

#[test]
fn training_with_full_mask_matches_vanilla() {
    let vanilla = config(Mode::Vanilla, None, 3);
    let rose = config(
        Mode::Rose,
        Some(RoseConfig::new(Strategy::Ensemble, 1.0)),
        3,
    );
    let (data, _) = vanilla.data.load(None).unwrap();
    let a = train(&vanilla, &data).unwrap();
    let b = train(&rose, &data).unwrap();
    assert!(max_diff(&a.params, &b.params) <= 1e-10);
}

#[test]
fn zero_epochs_returns_initialization() {
    let c = config(Mode::Vanilla, None, 0);
    let (data, _) = c.data.load(None).unwrap();
    let out = train(&c, &data).unwrap();
    assert_eq!(out.params, init_params(&c.model, c.seed).unwrap());
    assert!(out.log.is_empty());
}
