//! Spurious-feature probing on synthetic data.
//!
//! The label is an XOR of the signs of two core coordinates, so no linear
//! shortcut exists for it. A surface cue is attached to each example. In the
//! ambiguous training set the cue always equals the label. In the
//! disambiguating test set it is a fair coin, so only the core signal
//! predicts the label there.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, SurfaceEncoding};
use crate::error::{Result, RoseError};
use crate::model::{predict_from_logits, ModelSpec};
use crate::params::ParamSet;
use crate::rng::{seeded, Purpose, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    /// An extra feature set to `±surface_strength`.
    Indicator,
    /// The whole input row is inflated by `magnitude_factor`.
    Magnitude,
}

fn default_strength() -> f64 {
    1.0
}

fn default_factor() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTaskSpec {
    pub surface_kind: SurfaceKind,
    pub core_dim: usize,
    pub noise_std: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    #[serde(default = "default_strength")]
    pub surface_strength: f64,
    #[serde(default = "default_factor")]
    pub magnitude_factor: f64,
}

impl ProbeTaskSpec {
    pub fn new(surface_kind: SurfaceKind, seed: u64) -> Self {
        ProbeTaskSpec {
            surface_kind,
            core_dim: 4,
            noise_std: 0.0,
            train_size: 512,
            test_size: 1024,
            seed,
            surface_strength: default_strength(),
            magnitude_factor: default_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_dim < 2 {
            return Err(RoseError::config("core_dim must be at least 2"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(RoseError::config(
                "noise_std must be finite and non-negative",
            ));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(RoseError::config(
                "train_size and test_size must be positive",
            ));
        }
        if !(self.surface_strength > 0.0 && self.surface_strength.is_finite()) {
            return Err(RoseError::config("surface_strength must be positive"));
        }
        if !(self.magnitude_factor > 1.0 && self.magnitude_factor.is_finite()) {
            return Err(RoseError::config("magnitude_factor must exceed 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.surface_kind {
            SurfaceKind::Indicator => self.core_dim + 1,
            SurfaceKind::Magnitude => self.core_dim,
        }
    }

    pub fn encoding(&self) -> SurfaceEncoding {
        match self.surface_kind {
            SurfaceKind::Indicator => SurfaceEncoding::Indicator {
                coord: self.core_dim,
                strength: self.surface_strength,
            },
            SurfaceKind::Magnitude => SurfaceEncoding::Magnitude {
                factor: self.magnitude_factor,
            },
        }
    }
}

/// Core coordinates are drawn away from zero so the XOR quadrants are separated.
const CORE_MIN: f64 = 0.1;

fn generate_split(
    spec: &ProbeTaskSpec,
    size: usize,
    ambiguous: bool,
    purpose: Purpose,
    salt: u64,
) -> Result<LabeledSet> {
    let mut rng = seeded(spec.seed, purpose, salt);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| RoseError::config(e.to_string()))?;
    let width = spec.input_dim();
    let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let mut data = Vec::with_capacity(size * width);
    let mut cues = Vec::with_capacity(size);
    for &label in &labels {
        let mut row = vec![0.0; width];
        let s0 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        // label 1 iff the two core signs agree
        let s1 = if label == 1 { s0 } else { -s0 };
        row[0] = s0 * rng.random_range(CORE_MIN..1.0);
        row[1] = s1 * rng.random_range(CORE_MIN..1.0);
        for v in row.iter_mut().take(spec.core_dim).skip(2) {
            *v = rng.random_range(-1.0..1.0);
        }
        if spec.noise_std > 0.0 {
            for v in row.iter_mut().take(spec.core_dim) {
                *v += noise.sample(&mut rng);
            }
        }
        let cue = if ambiguous {
            label == 1
        } else {
            rng.random::<bool>()
        };
        match spec.encoding() {
            SurfaceEncoding::Indicator { coord, strength } => {
                row[coord] = if cue { strength } else { -strength };
            }
            SurfaceEncoding::Magnitude { factor } => {
                if cue {
                    row.iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        cues.push(cue);
        data.extend(row);
    }
    let mut set = LabeledSet::new(Tensor::new(vec![size, width], data)?, labels)?;
    set.surface_cue = cues;
    set.encoding = Some(spec.encoding());
    Ok(set)
}

/// Ambiguous training split and disambiguating test split.
pub fn generate_probe_task(spec: &ProbeTaskSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let train = generate_split(spec, spec.train_size, true, Purpose::TrainData, 0)?;
    let test = generate_split(spec, spec.test_size, false, Purpose::EvalData, 0)?;
    Ok((train, test))
}

/// A cue-free split of `size` examples, drawn independently of both probe
/// splits: the surface cue is a fair coin, as in the test split.
pub fn generate_pretrain_split(spec: &ProbeTaskSpec, size: usize) -> Result<LabeledSet> {
    spec.validate()?;
    if size == 0 {
        return Err(RoseError::config("pretraining split must be non-empty"));
    }
    generate_split(spec, size, false, Purpose::TrainData, 1)
}

/// Binary Matthews correlation; 0 when any confusion-matrix marginal is empty.
pub fn mcc(predictions: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fne) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
        }
    }
    let denom = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ((tp * tn - fp * fne) / denom).clamp(-1.0, 1.0)
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Adds `N(0, sigma^2)` noise to every feature.
    Gaussian { sigma: f64 },
    /// Inverts the surface cue of every example.
    SurfaceFlip,
}

impl std::str::FromStr for Perturbation {
    type Err = RoseError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "surface_flip" {
            return Ok(Perturbation::SurfaceFlip);
        }
        if let Some(sigma) = s.strip_prefix("gaussian:") {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| RoseError::config(format!("bad gaussian sigma in `{s}`")))?;
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(RoseError::config("gaussian sigma must be non-negative"));
            }
            return Ok(Perturbation::Gaussian { sigma });
        }
        Err(RoseError::config(format!(
            "unknown perturbation `{s}` (expected gaussian:<sigma> or surface_flip)"
        )))
    }
}

/// Perturbed copy of `set`; the original is untouched.
pub fn perturb(set: &LabeledSet, kind: Perturbation, seed: u64) -> Result<LabeledSet> {
    let mut out = set.clone();
    match kind {
        Perturbation::Gaussian { sigma } => {
            let mut rng = seeded(seed, Purpose::Perturb, 0);
            for v in out.inputs.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        Perturbation::SurfaceFlip => {
            let encoding = set
                .encoding
                .ok_or_else(|| RoseError::data("dataset carries no surface cue to flip"))?;
            let width = set.features();
            let data = out.inputs.data_mut();
            for (r, cue) in out.surface_cue.iter_mut().enumerate() {
                let row = &mut data[r * width..(r + 1) * width];
                match encoding {
                    SurfaceEncoding::Indicator { coord, .. } => row[coord] = -row[coord],
                    SurfaceEncoding::Magnitude { factor } => {
                        let scale = if *cue { 1.0 / factor } else { factor };
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                *cue = !*cue;
            }
        }
    }
    Ok(out)
}

pub fn perturbation_eval(
    spec: &ModelSpec,
    params: &ParamSet,
    test: &LabeledSet,
    kind: Perturbation,
    seed: u64,
) -> Result<f64> {
    let perturbed = perturb(test, kind, seed)?;
    Ok(accuracy(
        &spec.predict(params, &perturbed.inputs)?,
        &perturbed.labels,
    ))
}

/// Percentage of examples whose two dropout passes predict different labels,
/// over the steps in `window`. Step `s` uses batch `batches[s % len]` and
/// the dropout streams `(seed, s, 0)` and `(seed, s, 1)`.
pub fn dropout_inconsistency_ratio(
    spec: &ModelSpec,
    params: &ParamSet,
    batches: &[LabeledSet],
    window: Range<u64>,
    seed: u64,
) -> Result<f64> {
    if spec.dropout_rate == 0.0 {
        return Err(RoseError::config(
            "inconsistency ratio needs dropout_rate > 0",
        ));
    }
    if batches.is_empty() || window.is_empty() {
        return Err(RoseError::data("no batches or empty step window"));
    }
    let mut differing = 0usize;
    let mut total = 0usize;
    for step in window {
        let batch = &batches[(step % batches.len() as u64) as usize];
        let s0 = RngStream::new(seed, step, 0)?;
        let (a, ta) = spec.forward(params, &batch.inputs, Some(&s0))?;
        let (b, tb) = spec.forward(params, &batch.inputs, Some(&s0.sibling()))?;
        differing += predict_from_logits(ta.value(a))
            .iter()
            .zip(predict_from_logits(tb.value(b)))
            .filter(|(x, y)| **x != *y)
            .count();
        total += batch.len();
    }
    Ok(100.0 * differing as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_reference_points() {
        let labels = [1, 0, 1, 0, 1, 1, 0, 0];
        let inverted: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        assert_eq!(mcc(&labels, &labels), 1.0);
        assert_eq!(mcc(&inverted, &labels), -1.0);
        // TP = TN = FP = FN = 25
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (pp, ll) in [(1, 1), (0, 0), (1, 0), (0, 1)] {
            p.extend(std::iter::repeat_n(pp, 25));
            l.extend(std::iter::repeat_n(ll, 25));
        }
        assert_eq!(mcc(&p, &l), 0.0);
        assert_eq!(mcc(&[1, 1, 1], &[1, 0, 1]), 0.0);
    }

    #[test]
    fn training_split_is_ambiguous() {
        let spec = ProbeTaskSpec::new(SurfaceKind::Indicator, 7);
        let (train, test) = generate_probe_task(&spec).unwrap();
        for (cue, &label) in train.surface_cue.iter().zip(&train.labels) {
            assert_eq!(*cue, label == 1);
        }
        let ones = train.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, train.len() / 2);
        assert_eq!(test.len(), spec.test_size);
        assert_eq!(train.features(), 5);
    }

    #[test]
    fn core_signal_is_xor_of_signs() {
        for kind in [SurfaceKind::Indicator, SurfaceKind::Magnitude] {
            let spec = ProbeTaskSpec::new(kind, 3);
            let (train, test) = generate_probe_task(&spec).unwrap();
            for set in [&train, &test] {
                for r in 0..set.len() {
                    let row = set.inputs.row(r);
                    let same = (row[0] > 0.0) == (row[1] > 0.0);
                    assert_eq!(same, set.labels[r] == 1);
                }
            }
        }
    }

    #[test]
    fn perturbation_parsing() {
        assert_eq!(
            "surface_flip".parse::<Perturbation>().unwrap(),
            Perturbation::SurfaceFlip
        );
        assert_eq!(
            "gaussian:0.25".parse::<Perturbation>().unwrap(),
            Perturbation::Gaussian { sigma: 0.25 }
        );
        assert!("gaussian:-1".parse::<Perturbation>().is_err());
        assert!("rotate".parse::<Perturbation>().is_err());
    }

    #[test]
    fn surface_flip_is_an_involution() {
        for kind in [SurfaceKind::Indicator, SurfaceKind::Magnitude] {
            let (_, test) = generate_probe_task(&ProbeTaskSpec::new(kind, 5)).unwrap();
            let once = perturb(&test, Perturbation::SurfaceFlip, 0).unwrap();
            assert_ne!(once.inputs, test.inputs);
            let twice = perturb(&once, Perturbation::SurfaceFlip, 0).unwrap();
            assert_eq!(twice.surface_cue, test.surface_cue);
            for (a, b) in twice.inputs.data().iter().zip(test.inputs.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_without_cue_is_a_data_error() {
        let set = LabeledSet::new(Tensor::zeros(&[2, 3]), vec![0, 1]).unwrap();
        assert!(matches!(
            perturb(&set, Perturbation::SurfaceFlip, 0),
            Err(RoseError::Data(_))
        ));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let (_, test) =
            generate_probe_task(&ProbeTaskSpec::new(SurfaceKind::Indicator, 5)).unwrap();
        let same = perturb(&test, Perturbation::Gaussian { sigma: 0.0 }, 9).unwrap();
        assert_eq!(same, test);
    }
}
