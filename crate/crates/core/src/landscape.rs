//! Loss-landscape probes: the 1-D line between two solutions and the 2-D
//! surface spanned by two filter-normalized Gaussian directions.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{format_f64, LabeledSet};
use crate::error::{Result, RoseError};
use crate::exec::Schedule;
use crate::losses::sce_value;
use crate::model::{predict_from_logits, ModelSpec};
use crate::params::ParamSet;
use crate::rng::{seeded, Purpose};
use crate::tensor::Tensor;

pub const GRID_POINTS: usize = 51;
pub const LINE_RANGE: (f64, f64) = (-0.5, 1.5);
pub const SURFACE_RANGE: (f64, f64) = (-0.25, 0.25);

/// `points` uniform samples from `lo` to `hi` inclusive.
pub fn uniform_axis(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let span = hi - lo;
    let last = (points - 1) as f64;
    (0..points).map(|i| lo + span * i as f64 / last).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeGrid1D {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeGrid2D {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major over `(alpha, beta)`: `losses[i * betas.len() + j]`.
    pub losses: Vec<f64>,
}

impl LandscapeGrid2D {
    pub fn loss(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionPair {
    pub delta: ParamSet,
    pub eta: ParamSet,
}

/// Evaluation-mode loss and accuracy of `params` on `data`.
pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &LabeledSet) -> Result<(f64, f64)> {
    let logits = spec.logits(params, &data.inputs)?;
    let loss = sce_value(&logits, &data.labels)?;
    let correct = predict_from_logits(&logits)
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// `(1 - alpha) * a + alpha * b`, evaluated as `a + alpha * (b - a)` so that
/// `a == b` gives `a` exactly for every alpha.
pub fn interpolate(a: &ParamSet, b: &ParamSet, alpha: f64) -> Result<ParamSet> {
    a.zip_map(b, |x, y| x + alpha * (y - x))
}

pub fn interp_loss_at(
    spec: &ModelSpec,
    a: &ParamSet,
    b: &ParamSet,
    data: &LabeledSet,
    alpha: f64,
) -> Result<(f64, f64)> {
    evaluate(spec, &interpolate(a, b, alpha)?, data)
}

pub fn interp_1d(
    spec: &ModelSpec,
    a: &ParamSet,
    b: &ParamSet,
    data: &LabeledSet,
) -> Result<LandscapeGrid1D> {
    interp_1d_with(spec, a, b, data, Schedule::default())
}

pub fn interp_1d_with(
    spec: &ModelSpec,
    a: &ParamSet,
    b: &ParamSet,
    data: &LabeledSet,
    schedule: Schedule,
) -> Result<LandscapeGrid1D> {
    a.ensure_same_structure(b, "interp_1d")?;
    check_data(data)?;
    let alphas = uniform_axis(LINE_RANGE.0, LINE_RANGE.1, GRID_POINTS);
    let evals = schedule.try_map(alphas.len(), |i| {
        interp_loss_at(spec, a, b, data, alphas[i])
    })?;
    let (losses, accuracies) = evals.into_iter().unzip();
    Ok(LandscapeGrid1D {
        alphas,
        losses,
        accuracies,
    })
}

fn check_data(data: &LabeledSet) -> Result<()> {
    if data.is_empty() {
        return Err(RoseError::data("landscape dataset is empty"));
    }
    Ok(())
}

/// Gaussian direction rescaled group by group to the norm of `params`.
/// Groups with zero norm get a zero direction.
fn filter_normalized_direction(params: &ParamSet, rng: &mut impl rand::Rng) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, theta) in params.iter() {
        let raw: Vec<f64> = (0..theta.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let target = theta.frobenius_norm();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if target == 0.0 || norm == 0.0 {
            0.0
        } else {
            target / norm
        };
        let t = Tensor::new(
            theta.shape().to_vec(),
            raw.into_iter().map(|x| x * scale).collect(),
        )
        .expect("shape from params");
        out.insert(name, t).expect("unique names");
    }
    out
}

pub fn sample_directions(params: &ParamSet, seed: u64) -> DirectionPair {
    let mut rng = seeded(seed, Purpose::Directions, 0);
    let delta = filter_normalized_direction(params, &mut rng);
    let eta = filter_normalized_direction(params, &mut rng);
    DirectionPair { delta, eta }
}

/// `params + alpha * delta + beta * eta`.
pub fn displaced(params: &ParamSet, dirs: &DirectionPair, alpha: f64, beta: f64) -> ParamSet {
    params
        .iter()
        .zip(dirs.delta.tensors().zip(dirs.eta.tensors()))
        .map(|((name, t), (d, e))| {
            let data = t
                .data()
                .iter()
                .zip(d.data().iter().zip(e.data()))
                .map(|(x, (dx, ex))| x + alpha * dx + beta * ex)
                .collect();
            (
                name.to_string(),
                Tensor::new(t.shape().to_vec(), data).expect("same shape"),
            )
        })
        .collect()
}

pub fn surface_2d(
    spec: &ModelSpec,
    params: &ParamSet,
    data: &LabeledSet,
    seed: u64,
) -> Result<(LandscapeGrid2D, DirectionPair)> {
    surface_2d_with(spec, params, data, seed, Schedule::default())
}

pub fn surface_2d_with(
    spec: &ModelSpec,
    params: &ParamSet,
    data: &LabeledSet,
    seed: u64,
    schedule: Schedule,
) -> Result<(LandscapeGrid2D, DirectionPair)> {
    check_data(data)?;
    spec.check_params(params)?;
    let dirs = sample_directions(params, seed);
    let alphas = uniform_axis(SURFACE_RANGE.0, SURFACE_RANGE.1, GRID_POINTS);
    let betas = alphas.clone();
    let cols = betas.len();
    let losses = schedule.try_map(alphas.len() * cols, |k| {
        let p = displaced(params, &dirs, alphas[k / cols], betas[k % cols]);
        evaluate(spec, &p, data).map(|(loss, _)| loss)
    })?;
    if let Some(k) = losses.iter().position(|l| !l.is_finite()) {
        return Err(RoseError::NonFinite(format!(
            "surface loss at grid cell {k}"
        )));
    }
    Ok((
        LandscapeGrid2D {
            alphas,
            betas,
            losses,
        },
        dirs,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Flatness {
    pub center_loss: f64,
    pub boundary_mean_loss: f64,
    /// Fraction of grid cells whose loss is at most twice the center loss.
    pub basin_width: f64,
}

pub fn flatness_summary(grid: &LandscapeGrid2D) -> Result<Flatness> {
    let (rows, cols) = (grid.alphas.len(), grid.betas.len());
    if rows == 0 || cols == 0 || grid.losses.len() != rows * cols {
        return Err(RoseError::data("malformed landscape grid"));
    }
    let center = grid.loss(rows / 2, cols / 2);
    let mut ring_sum = 0.0;
    let mut ring_count = 0usize;
    let mut within = 0usize;
    for i in 0..rows {
        for j in 0..cols {
            let l = grid.loss(i, j);
            if i == 0 || j == 0 || i == rows - 1 || j == cols - 1 {
                ring_sum += l;
                ring_count += 1;
            }
            if l <= 2.0 * center {
                within += 1;
            }
        }
    }
    Ok(Flatness {
        center_loss: center,
        boundary_mean_loss: ring_sum / ring_count as f64,
        basin_width: within as f64 / (rows * cols) as f64,
    })
}

pub fn write_1d_csv(grid: &LandscapeGrid1D, out: &mut impl Write) -> Result<()> {
    writeln!(out, "alpha,loss,accuracy")?;
    for ((a, l), acc) in grid.alphas.iter().zip(&grid.losses).zip(&grid.accuracies) {
        writeln!(
            out,
            "{},{},{}",
            format_f64(*a),
            format_f64(*l),
            format_f64(*acc)
        )?;
    }
    Ok(())
}

pub fn write_2d_csv(grid: &LandscapeGrid2D, out: &mut impl Write) -> Result<()> {
    writeln!(out, "alpha,beta,loss")?;
    for (i, a) in grid.alphas.iter().enumerate() {
        for (j, b) in grid.betas.iter().enumerate() {
            writeln!(
                out,
                "{},{},{}",
                format_f64(*a),
                format_f64(*b),
                format_f64(grid.loss(i, j))
            )?;
        }
    }
    Ok(())
}

pub fn save_csv(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
