//! Epoch loop over a [`RunConfig`], plus the run outputs written by `rose train`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::data::{format_f64, LabeledSet};
use crate::error::{Result, RoseError};
use crate::landscape::evaluate;
use crate::model::init_params;
use crate::optimizer::{
    rdrop_rose_step, rdrop_step, rose_step, vanilla_step, OptimizerState, StepOutcome, StepReport,
};
use crate::params::ParamSet;

pub const RUN_CSV_HEADER: &str =
    "step,epoch,loss_sce,loss_kl,mask_ones_fraction,grad_norm,update_norm,mean_first_risk,mean_second_risk";

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedStep {
    pub epoch: u64,
    pub report: StepReport,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ParamSet,
    pub state: OptimizerState,
    pub log: Vec<LoggedStep>,
}

/// One optimizer step in the mode selected by `config`.
pub fn step(
    config: &RunConfig,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &LabeledSet,
) -> Result<StepOutcome> {
    let spec = &config.model;
    let seed = config.seed;
    let rose = || {
        config
            .rose
            .as_ref()
            .ok_or_else(|| RoseError::config("missing `rose` section"))
    };
    let weight = || {
        config
            .rdrop_weight
            .ok_or_else(|| RoseError::config("missing `rdrop_weight`"))
    };
    match config.mode {
        Mode::Vanilla => vanilla_step(spec, params, state, batch, seed),
        Mode::Rose => rose_step(spec, params, state, batch, rose()?, config.sce_source, seed),
        Mode::Rdrop => rdrop_step(spec, params, state, batch, weight()?, seed),
        Mode::RdropRose => rdrop_rose_step(spec, params, state, batch, rose()?, weight()?, seed),
    }
}

/// Trains from `params` for `config.epochs` epochs. Batches are reshuffled
/// each epoch from `config.seed`; the global step drives the dropout streams.
pub fn train_from(config: &RunConfig, params: ParamSet, train: &LabeledSet) -> Result<Trained> {
    config.validate()?;
    config.model.check_params(&params)?;
    if train.features() != config.model.input_dim {
        return Err(RoseError::data(format!(
            "training data has {} features, model expects {}",
            train.features(),
            config.model.input_dim
        )));
    }
    let mut state = OptimizerState::new(&params, config.optimizer);
    let mut params = params;
    let mut log = Vec::new();
    for epoch in 0..config.epochs as u64 {
        for batch in train.epoch_batches(config.batch_size, config.seed, epoch)? {
            let out = step(config, &params, &state, &batch)?;
            params = out.params;
            state = out.state;
            log.push(LoggedStep {
                epoch,
                report: out.report,
            });
        }
    }
    Ok(Trained { params, state, log })
}

pub fn train(config: &RunConfig, train_set: &LabeledSet) -> Result<Trained> {
    train_from(config, init_params(&config.model, config.seed)?, train_set)
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub fn write_run_csv(log: &[LoggedStep], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{RUN_CSV_HEADER}")?;
    for LoggedStep { epoch, report: r } in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            epoch,
            format_f64(r.loss_sce),
            opt(r.loss_kl),
            format_f64(r.mask_ones_fraction),
            format_f64(r.grad_norm),
            format_f64(r.update_norm),
            opt(r.mean_first_risk),
            opt(r.mean_second_risk),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub final_train_acc: f64,
    pub final_eval_acc: f64,
    pub final_eval_loss: f64,
    pub mask_fraction_mean: f64,
    pub steps: u64,
}

pub fn summarize(
    config: &RunConfig,
    trained: &Trained,
    train_set: &LabeledSet,
    eval_set: &LabeledSet,
) -> Result<Summary> {
    let (_, final_train_acc) = evaluate(&config.model, &trained.params, train_set)?;
    let (final_eval_loss, final_eval_acc) = evaluate(&config.model, &trained.params, eval_set)?;
    let mask_fraction_mean = if trained.log.is_empty() {
        1.0
    } else {
        trained
            .log
            .iter()
            .map(|s| s.report.mask_ones_fraction)
            .sum::<f64>()
            / trained.log.len() as f64
    };
    Ok(Summary {
        final_train_acc,
        final_eval_acc,
        final_eval_loss,
        mask_fraction_mean,
        steps: trained.state.t,
    })
}

/// Loads the data, trains, and writes `checkpoint.json`/`.bin`, `steps.csv`
/// and `summary.json` into `out_dir`.
pub fn run(config: &RunConfig, config_dir: Option<&Path>, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let (train_set, eval_set) = config.data.load(config_dir)?;
    if eval_set.features() != config.model.input_dim {
        return Err(RoseError::data(format!(
            "evaluation data has {} features, model expects {}",
            eval_set.features(),
            config.model.input_dim
        )));
    }
    let trained = train(config, &train_set)?;
    let summary = summarize(config, &trained, &train_set, &eval_set)?;

    std::fs::create_dir_all(out_dir)?;
    Checkpoint {
        params: trained.params.clone(),
        step: trained.state.t,
        config: config.clone(),
    }
    .save(&out_dir.join("checkpoint.json"))?;
    let mut csv = Vec::new();
    write_run_csv(&trained.log, &mut csv)?;
    std::fs::write(out_dir.join("steps.csv"), csv)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}
