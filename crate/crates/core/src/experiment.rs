//! Multi-seed probe runs: train on the ambiguous split, score on the
//! disambiguating split.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, Mode, RunConfig};
use crate::data::{format_f64, LabeledSet, SurfaceEncoding};
use crate::error::{Result, RoseError};
use crate::exec::Schedule;
use crate::losses::SceSource;
use crate::model::init_params;
use crate::model::{Activation, DropoutSites, ModelSpec};
use crate::optimizer::Hyper;
use crate::params::ParamSet;
use crate::probe::{
    accuracy, generate_pretrain_split, generate_probe_task, mcc, perturb, Perturbation,
    ProbeTaskSpec, SurfaceKind,
};
use crate::rose::{Granularity, RoseConfig, Strategy};
use crate::train::{train_from, LoggedStep};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const PROBE_CSV_HEADER: &str = "seed,strategy,mcc,clean_acc,gaussian_acc,surface_flip_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStrategy {
    Vanilla,
    First,
    Second,
    Ensemble,
    /// One-feature logistic regression on the surface cue alone.
    SurfaceBaseline,
}

impl ProbeStrategy {
    pub fn rose(self) -> Option<Strategy> {
        match self {
            ProbeStrategy::First => Some(Strategy::First),
            ProbeStrategy::Second => Some(Strategy::Second),
            ProbeStrategy::Ensemble => Some(Strategy::Ensemble),
            ProbeStrategy::Vanilla | ProbeStrategy::SurfaceBaseline => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeStrategy::Vanilla => "vanilla",
            ProbeStrategy::First => "first",
            ProbeStrategy::Second => "second",
            ProbeStrategy::Ensemble => "ensemble",
            ProbeStrategy::SurfaceBaseline => "surface_baseline",
        }
    }
}

impl fmt::Display for ProbeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeStrategy {
    type Err = RoseError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => ProbeStrategy::Vanilla,
            "first" => ProbeStrategy::First,
            "second" => ProbeStrategy::Second,
            "ensemble" => ProbeStrategy::Ensemble,
            "surface_baseline" => ProbeStrategy::SurfaceBaseline,
            other => {
                return Err(RoseError::config(format!(
                    "unknown probe strategy `{other}`"
                )))
            }
        })
    }
}

/// Everything a probe run needs besides the strategy and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeProtocol {
    pub task: ProbeTaskSpec,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub optimizer: Hyper,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cue-free examples and epochs for the vanilla pre-training stage.
    /// Zero epochs starts fine-tuning from the random initialization.
    pub pretrain_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub c_h: f64,
    pub granularity: Granularity,
    pub gaussian_sigma: f64,
}

impl ProbeProtocol {
    pub fn default_for(kind: SurfaceKind) -> Self {
        ProbeProtocol {
            task: ProbeTaskSpec::new(kind, 0),
            hidden_dims: vec![32, 32],
            activation: Activation::Tanh,
            dropout_rate: 0.1,
            optimizer: Hyper {
                lr: 1e-3,
                ..Hyper::default()
            },
            epochs: 10,
            batch_size: 16,
            pretrain_size: 512,
            pretrain_epochs: 8,
            pretrain_lr: 1e-2,
            c_h: 0.6,
            granularity: Granularity::Group,
            gaussian_sigma: 0.1,
        }
    }

    fn task_for(&self, seed: u64) -> ProbeTaskSpec {
        ProbeTaskSpec {
            seed,
            ..self.task.clone()
        }
    }

    /// The [`RunConfig`] a neural strategy trains with for `seed`.
    pub fn run_config(&self, strategy: ProbeStrategy, seed: u64) -> Result<RunConfig> {
        let task = self.task_for(seed);
        let rose = strategy.rose().map(|s| RoseConfig {
            granularity: self.granularity,
            ..RoseConfig::new(s, self.c_h)
        });
        let mode = match (strategy, &rose) {
            (ProbeStrategy::SurfaceBaseline, _) => {
                return Err(RoseError::config(
                    "the surface baseline is not a neural run",
                ))
            }
            (_, Some(_)) => Mode::Rose,
            (_, None) => Mode::Vanilla,
        };
        let config = RunConfig {
            model: ModelSpec {
                input_dim: task.input_dim(),
                hidden_dims: self.hidden_dims.clone(),
                classes: 2,
                activation: self.activation,
                dropout_rate: self.dropout_rate,
                dropout_sites: DropoutSites::AfterEachHidden,
            },
            optimizer: self.optimizer,
            mode,
            rose,
            rdrop_weight: None,
            sce_source: SceSource::Pass0,
            data: DataSource::Synthetic(task),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            output_dir: None,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub strategy: ProbeStrategy,
    pub mcc: f64,
    pub clean_acc: f64,
    pub gaussian_acc: f64,
    pub surface_flip_acc: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub row: ProbeRow,
    /// Per-step training log; empty for the surface baseline.
    pub log: Vec<LoggedStep>,
}

/// The scalar the surface cue is carried by.
pub fn surface_feature(set: &LabeledSet, row: usize) -> Result<f64> {
    let x = set.inputs.row(row);
    match set.encoding {
        Some(SurfaceEncoding::Indicator { coord, .. }) => Ok(x[coord]),
        Some(SurfaceEncoding::Magnitude { .. }) => Ok(x.iter().map(|v| v * v).sum::<f64>().sqrt()),
        None => Err(RoseError::data("dataset carries no surface encoding")),
    }
}

/// Logistic regression on the surface feature alone, fitted by full-batch
/// gradient descent on standardized inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceBaseline {
    pub mean: f64,
    pub scale: f64,
    pub weight: f64,
    pub bias: f64,
}

impl SurfaceBaseline {
    pub fn fit(train: &LabeledSet) -> Result<Self> {
        let xs = (0..train.len())
            .map(|i| surface_feature(train, i))
            .collect::<Result<Vec<_>>>()?;
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        let (mut w, mut b) = (0.0, 0.0);
        for _ in 0..500 {
            let (mut gw, mut gb) = (0.0, 0.0);
            for (x, &y) in xs.iter().zip(&train.labels) {
                let z = (x - mean) / scale;
                let p = 1.0 / (1.0 + (-(w * z + b)).exp());
                gw += (p - y as f64) * z;
                gb += p - y as f64;
            }
            w -= gw / n;
            b -= gb / n;
        }
        Ok(SurfaceBaseline {
            mean,
            scale,
            weight: w,
            bias: b,
        })
    }

    pub fn predict(&self, set: &LabeledSet) -> Result<Vec<usize>> {
        (0..set.len())
            .map(|i| {
                let z = (surface_feature(set, i)? - self.mean) / self.scale;
                Ok(usize::from(self.weight * z + self.bias > 0.0))
            })
            .collect()
    }

    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64> {
        Ok(accuracy(&self.predict(set)?, &set.labels))
    }
}

fn score(
    seed: u64,
    strategy: ProbeStrategy,
    test: &LabeledSet,
    sigma: f64,
    predict: impl Fn(&LabeledSet) -> Result<Vec<usize>>,
) -> Result<ProbeRow> {
    let clean = predict(test)?;
    let noisy = perturb(test, Perturbation::Gaussian { sigma }, seed)?;
    let flipped = perturb(test, Perturbation::SurfaceFlip, seed)?;
    Ok(ProbeRow {
        seed,
        strategy,
        mcc: mcc(&clean, &test.labels),
        clean_acc: accuracy(&clean, &test.labels),
        gaussian_acc: accuracy(&predict(&noisy)?, &noisy.labels),
        surface_flip_acc: accuracy(&predict(&flipped)?, &flipped.labels),
    })
}

/// Starting point for fine-tuning: the seeded initialization, trained with
/// vanilla AdamW on a cue-free split when `pretrain_epochs > 0`.
pub fn pretrained(protocol: &ProbeProtocol, config: &RunConfig) -> Result<ParamSet> {
    let init = init_params(&config.model, config.seed)?;
    if protocol.pretrain_epochs == 0 {
        return Ok(init);
    }
    let DataSource::Synthetic(task) = &config.data else {
        return Err(RoseError::config("pre-training needs a synthetic task"));
    };
    let corpus = generate_pretrain_split(task, protocol.pretrain_size)?;
    let stage = RunConfig {
        mode: Mode::Vanilla,
        rose: None,
        epochs: protocol.pretrain_epochs,
        optimizer: Hyper {
            lr: protocol.pretrain_lr,
            ..config.optimizer
        },
        // separate dropout and shuffle streams from fine-tuning
        seed: config.seed ^ (1 << 40),
        ..config.clone()
    };
    Ok(train_from(&stage, init, &corpus)?.params)
}

pub fn run_probe(protocol: &ProbeProtocol, strategy: ProbeStrategy, seed: u64) -> Result<ProbeRun> {
    let (train_set, test) = generate_probe_task(&protocol.task_for(seed))?;
    if strategy == ProbeStrategy::SurfaceBaseline {
        let baseline = SurfaceBaseline::fit(&train_set)?;
        let row = score(seed, strategy, &test, protocol.gaussian_sigma, |s| {
            baseline.predict(s)
        })?;
        return Ok(ProbeRun {
            row,
            log: Vec::new(),
        });
    }
    let config = protocol.run_config(strategy, seed)?;
    let start = pretrained(protocol, &config)?;
    let trained = train_from(&config, start, &train_set)?;
    let row = score(seed, strategy, &test, protocol.gaussian_sigma, |s| {
        config.model.predict(&trained.params, &s.inputs)
    })?;
    Ok(ProbeRun {
        row,
        log: trained.log,
    })
}

/// One run per seed, in seed order.
pub fn run_probes(
    protocol: &ProbeProtocol,
    strategy: ProbeStrategy,
    seeds: &[u64],
    schedule: Schedule,
) -> Result<Vec<ProbeRun>> {
    schedule.try_map(seeds.len(), |i| run_probe(protocol, strategy, seeds[i]))
}

pub fn write_probe_csv(rows: &[ProbeRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{PROBE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.seed,
            r.strategy,
            format_f64(r.mcc),
            format_f64(r.clean_acc),
            format_f64(r.gaussian_acc),
            format_f64(r.surface_flip_acc)
        )?;
    }
    Ok(())
}

/// Percentage of examples whose two dropout passes disagreed, over the
/// logged steps whose 1-based step number lies in `steps`.
pub fn logged_inconsistency(
    log: &[LoggedStep],
    steps: std::ops::RangeInclusive<u64>,
) -> Option<f64> {
    let (mut differing, mut total) = (0usize, 0usize);
    for s in log.iter().filter(|s| steps.contains(&s.report.step)) {
        differing += s.report.disagreements?;
        total += s.report.batch_size;
    }
    (total > 0).then(|| 100.0 * differing as f64 / total as f64)
}
