use rose_core::exec::Schedule;
use rose_core::landscape::{
    evaluate, interp_1d, interp_1d_with, surface_2d, surface_2d_with, write_1d_csv, write_2d_csv,
    GRID_POINTS,
};
use rose_core::model::{init_params, Activation, DropoutSites, ModelSpec};
use rose_core::probe::{generate_probe_task, ProbeTaskSpec, SurfaceKind};

fn spec() -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        hidden_dims: vec![12, 12],
        classes: 2,
        activation: Activation::Tanh,
        dropout_rate: 0.1,
        dropout_sites: DropoutSites::AfterEachHidden,
    }
}

#[test]
fn identical_endpoints_give_a_flat_line() {
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 1)).unwrap();
    let a = init_params(&spec(), 4).unwrap();
    let grid = interp_1d(&spec(), &a, &a, &data).unwrap();
    let (loss, _) = evaluate(&spec(), &a, &data).unwrap();
    assert_eq!(grid.alphas.len(), GRID_POINTS);
    assert!(grid.losses.iter().all(|l| *l == loss));
}

#[test]
fn schedules_agree_bitwise() {
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 1)).unwrap();
    let a = init_params(&spec(), 1).unwrap();
    let b = init_params(&spec(), 2).unwrap();
    let s = interp_1d_with(&spec(), &a, &b, &data, Schedule::Sequential).unwrap();
    let p = interp_1d_with(&spec(), &a, &b, &data, Schedule::Parallel).unwrap();
    assert_eq!(s, p);
    let (gs, _) = surface_2d_with(&spec(), &a, &data, 9, Schedule::Sequential).unwrap();
    let (gp, _) = surface_2d_with(&spec(), &a, &data, 9, Schedule::Parallel).unwrap();
    assert_eq!(gs, gp);
}

#[test]
fn csv_output_is_reproducible() {
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 1)).unwrap();
    let a = init_params(&spec(), 1).unwrap();
    let render = || {
        let (grid, _) = surface_2d(&spec(), &a, &data, 5).unwrap();
        let mut buf = Vec::new();
        write_2d_csv(&grid, &mut buf).unwrap();
        buf
    };
    let first = render();
    assert_eq!(first, render());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 1 + 51 * 51);
    assert_eq!(text.lines().next(), Some("alpha,beta,loss"));

    let line = interp_1d(&spec(), &a, &init_params(&spec(), 2).unwrap(), &data).unwrap();
    let mut buf = Vec::new();
    write_1d_csv(&line, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 52);
}

#[test]
fn mismatched_structures_rejected() {
    let (data, _) = generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 1)).unwrap();
    let a = init_params(&spec(), 1).unwrap();
    let other = ModelSpec {
        hidden_dims: vec![12],
        ..spec()
    };
    let b = init_params(&other, 1).unwrap();
    assert!(interp_1d(&spec(), &a, &b, &data).is_err());
}
