//! AdamW and its ROSE-masked variant.
//!
//! One masked step, given gates `M` (1 = update, 0 = freeze):
//!
//! ```text
//! g' = M * g + (1 - M) * m_{t-1}
//! m  = b1 * m_{t-1} + (1 - b1) * g'
//! v  = b2 * v_{t-1} + (1 - b2) * g'^2
//! m^ = m / (1 - b1^t),   v^ = v / (1 - b2^t)
//! θ  = θ - lr * (m^ / (sqrt(v^) + eps) + wd * θ) * M
//! ```
//!
//! [`adamw_step`] is the unmasked reference, written independently so the
//! all-ones reduction can be checked against it.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::LabeledSet;
use crate::error::{Result, RoseError};
use crate::exec::Schedule;
use crate::losses::{rdrop_loss, sce_loss, sym_kl_loss, SceSource};
use crate::model::{predict_from_logits, ModelSpec};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::rose::{
    calculate_mask, first_order_risks, second_order_risks, Granularity, Mask, RiskReport,
    RoseConfig,
};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RoseError::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(RoseError::config(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(RoseError::config("eps must be positive"));
        }
        if !self.weight_decay.is_finite() {
            return Err(RoseError::config("weight_decay must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub hyper: Hyper,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, hyper: Hyper) -> Self {
        OptimizerState {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            hyper,
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        params.ensure_same_structure(&self.m, "optimizer state")?;
        params.ensure_same_structure(&self.v, "optimizer state")
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_sce: f64,
    pub loss_kl: Option<f64>,
    pub mask_ones_fraction: f64,
    pub mean_first_risk: Option<f64>,
    pub mean_second_risk: Option<f64>,
    pub grad_norm: f64,
    pub update_norm: f64,
    pub group_update_norms: Vec<(String, f64)>,
    /// Examples whose two dropout passes predicted different labels, when
    /// two passes were run.
    pub disagreements: Option<usize>,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub params: ParamSet,
    pub state: OptimizerState,
    pub report: StepReport,
}

fn check_finite(grads: &ParamSet, what: &str) -> Result<()> {
    match grads.first_non_finite() {
        Some(group) => Err(RoseError::NonFinite(format!("{what} of group `{group}`"))),
        None => Ok(()),
    }
}

/// Plain AdamW with decoupled weight decay.
pub fn adamw_step(
    params: &ParamSet,
    state: &OptimizerState,
    grads: &ParamSet,
) -> Result<(ParamSet, OptimizerState)> {
    state.check(params)?;
    params.ensure_same_structure(grads, "adamw_step")?;
    check_finite(grads, "gradient")?;
    let h = state.hyper;
    let t = state.t + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    let mut new_params = params.clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for (((name, theta), (_, mt)), (_, vt)) in
        new_params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut())
    {
        let g = grads.get(name).expect("structure checked");
        for i in 0..theta.len() {
            let gi = g.data()[i];
            let mi = h.beta1 * mt.data()[i] + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * vt.data()[i] + (1.0 - h.beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let th = theta.data()[i];
            theta.data_mut()[i] =
                th - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * th);
            mt.data_mut()[i] = mi;
            vt.data_mut()[i] = vi;
        }
    }
    Ok((new_params, OptimizerState { t, m, v, hyper: h }))
}

/// Gradient blending, moment updates and the gated parameter update.
/// `gates` holds one gate per scalar, shaped like the parameters.
pub fn masked_update(
    params: &ParamSet,
    state: &OptimizerState,
    grads: &ParamSet,
    gates: &ParamSet,
    schedule: Schedule,
) -> Result<(ParamSet, OptimizerState)> {
    state.check(params)?;
    params.ensure_same_structure(grads, "masked_update")?;
    params.ensure_same_structure(gates, "masked_update")?;
    check_finite(grads, "gradient")?;
    let h = state.hyper;
    let t = state.t + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    let groups: Vec<(&str, &Tensor)> = params.iter().collect();
    let m_prev: Vec<&Tensor> = state.m.tensors().collect();
    let v_prev: Vec<&Tensor> = state.v.tensors().collect();
    let g_all: Vec<&Tensor> = grads.tensors().collect();
    let gate_all: Vec<&Tensor> = gates.tensors().collect();

    // Groups are independent once the mask is fixed.
    let updated = schedule.map(groups.len(), |k| {
        let theta = groups[k].1;
        let (mp, vp, g, gate) = (m_prev[k], v_prev[k], g_all[k], gate_all[k]);
        let n = theta.len();
        let (mut th, mut mo, mut ve) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for i in 0..n {
            let mask = gate.data()[i];
            let m_old = mp.data()[i];
            let blended = mask * g.data()[i] + (1.0 - mask) * m_old;
            let mi = h.beta1 * m_old + (1.0 - h.beta1) * blended;
            let vi = h.beta2 * vp.data()[i] + (1.0 - h.beta2) * blended * blended;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let x = theta.data()[i];
            th.push(x - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * x) * mask);
            mo.push(mi);
            ve.push(vi);
        }
        let shape = theta.shape().to_vec();
        (
            Tensor::new(shape.clone(), th).expect("same shape"),
            Tensor::new(shape.clone(), mo).expect("same shape"),
            Tensor::new(shape, ve).expect("same shape"),
        )
    });

    let mut new_params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for ((name, _), (th, mo, ve)) in groups.iter().zip(updated) {
        new_params.insert(*name, th)?;
        m.insert(*name, mo)?;
        v.insert(*name, ve)?;
    }
    Ok((new_params, OptimizerState { t, m, v, hyper: h }))
}

fn update_norms(before: &ParamSet, after: &ParamSet) -> (f64, Vec<(String, f64)>) {
    let per_group: Vec<(String, f64)> = before
        .iter()
        .zip(after.tensors())
        .map(|((name, a), b)| {
            let d: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (y - x) * (y - x))
                .sum();
            (name.to_string(), d.sqrt())
        })
        .collect();
    let total = per_group.iter().map(|(_, d)| d * d).sum::<f64>().sqrt();
    (total, per_group)
}

fn count_disagreements(a: &Tensor, b: &Tensor) -> usize {
    predict_from_logits(a)
        .into_iter()
        .zip(predict_from_logits(b))
        .filter(|(x, y)| x != y)
        .count()
}

fn check_batch(batch: &LabeledSet) -> Result<()> {
    if batch.is_empty() {
        return Err(RoseError::data("empty batch"));
    }
    Ok(())
}

/// Rejects strategies whose first-order risks would all tie at zero.
pub fn check_rose_compatible(spec: &ModelSpec, rose: &RoseConfig) -> Result<()> {
    rose.validate()?;
    if rose.strategy.needs_first_order() && spec.dropout_rate == 0.0 {
        return Err(RoseError::config(
            "first-order risks need dropout: with dropout_rate = 0 both passes coincide and every risk is 0",
        ));
    }
    Ok(())
}

/// Baseline step: SCE on the first dropout pass, then [`adamw_step`].
pub fn vanilla_step(
    spec: &ModelSpec,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &LabeledSet,
    seed: u64,
) -> Result<StepOutcome> {
    check_batch(batch)?;
    let step = state.t + 1;
    let pass0 = RngStream::new(seed, step, 0)?;
    let (logits, mut tape) = spec.forward(params, &batch.inputs, Some(&pass0))?;
    let sce = sce_loss(&mut tape, logits, &batch.labels)?;
    let grads = tape.backward(sce)?;
    let (new_params, new_state) = adamw_step(params, state, &grads)?;
    let (update_norm, group_update_norms) = update_norms(params, &new_params);
    let report = StepReport {
        step,
        loss_sce: tape.value(sce).data()[0],
        loss_kl: None,
        mask_ones_fraction: 1.0,
        mean_first_risk: None,
        mean_second_risk: None,
        grad_norm: grads.global_norm(),
        update_norm,
        group_update_norms,
        disagreements: None,
        batch_size: batch.len(),
    };
    Ok(StepOutcome {
        params: new_params,
        state: new_state,
        report,
    })
}

/// One ROSE step: SCE gradient, risk scores, mask, masked AdamW update.
pub fn rose_step(
    spec: &ModelSpec,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &LabeledSet,
    rose: &RoseConfig,
    sce_source: SceSource,
    seed: u64,
) -> Result<StepOutcome> {
    check_batch(batch)?;
    check_rose_compatible(spec, rose)?;
    state.check(params)?;
    spec.check_params(params)?;
    let step = state.t + 1;
    let pass0 = RngStream::new(seed, step, 0)?;
    let pass1 = pass0.sibling();

    let mut tape = Tape::new();
    let nodes = tape.params(params);
    let x = tape.input(batch.inputs.clone());

    // SCE gradient first: the second-order risk needs it.
    let logits0 = spec.build(&mut tape, &nodes, x, Some(&pass0))?;
    let sce = match sce_source {
        SceSource::Pass0 => sce_loss(&mut tape, logits0, &batch.labels)?,
        SceSource::CleanPass => {
            let clean = spec.build(&mut tape, &nodes, x, None)?;
            sce_loss(&mut tape, clean, &batch.labels)?
        }
    };
    let grads = tape.backward(sce)?;
    check_finite(&grads, "SCE gradient")?;

    let granularity = rose.granularity;
    let mut loss_kl = None;
    let mut disagreements = None;
    let first = if rose.strategy.needs_first_order() {
        let logits1 = spec.build(&mut tape, &nodes, x, Some(&pass1))?;
        let kl = sym_kl_loss(&mut tape, logits0, logits1)?;
        loss_kl = Some(tape.value(kl).data()[0]);
        disagreements = Some(count_disagreements(
            tape.value(logits0),
            tape.value(logits1),
        ));
        // KL gradients only rank units; they are dropped after this.
        let kl_grads = tape.backward(kl)?;
        check_finite(&kl_grads, "KL gradient")?;
        Some(first_order_risks(&kl_grads, granularity))
    } else {
        None
    };
    let second = if rose.strategy.needs_second_order() {
        Some(second_order_risks(
            &grads,
            &state.m,
            state.hyper.beta1,
            rose.momentum_floor,
            granularity,
        )?)
    } else {
        None
    };
    let report = RiskReport {
        granularity,
        first,
        second,
    };
    let mask = calculate_mask(rose, &report)?;
    finish_masked(
        params,
        state,
        &grads,
        &mask,
        granularity,
        &report,
        MaskedStepInfo {
            step,
            loss_sce: tape.value(sce).data()[0],
            loss_kl,
            disagreements,
            batch_size: batch.len(),
        },
    )
}

struct MaskedStepInfo {
    step: u64,
    loss_sce: f64,
    loss_kl: Option<f64>,
    disagreements: Option<usize>,
    batch_size: usize,
}

fn finish_masked(
    params: &ParamSet,
    state: &OptimizerState,
    update_grads: &ParamSet,
    mask: &Mask,
    granularity: Granularity,
    risks: &RiskReport,
    info: MaskedStepInfo,
) -> Result<StepOutcome> {
    let gates = mask.expand(params, granularity)?;
    let (new_params, new_state) =
        masked_update(params, state, update_grads, &gates, Schedule::default())?;
    if let Some(group) = new_params.first_non_finite() {
        return Err(RoseError::NonFinite(format!(
            "updated parameters of group `{group}`"
        )));
    }
    let (update_norm, group_update_norms) = update_norms(params, &new_params);
    let report = StepReport {
        step: info.step,
        loss_sce: info.loss_sce,
        loss_kl: info.loss_kl,
        mask_ones_fraction: mask.ones_fraction(params, granularity),
        mean_first_risk: risks.mean_first(),
        mean_second_risk: risks.mean_second(),
        grad_norm: update_grads.global_norm(),
        update_norm,
        group_update_norms,
        disagreements: info.disagreements,
        batch_size: info.batch_size,
    };
    Ok(StepOutcome {
        params: new_params,
        state: new_state,
        report,
    })
}

struct RdropGradients {
    sce_mean: f64,
    kl: f64,
    /// Gradient of `0.5 * (sce0 + sce1)`.
    sce_grads: ParamSet,
    kl_grads: ParamSet,
    /// Gradient of the aggregated objective.
    total_grads: ParamSet,
    disagreements: usize,
}

fn rdrop_gradients(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &LabeledSet,
    weight: f64,
    step: u64,
    seed: u64,
    need_components: bool,
) -> Result<RdropGradients> {
    let pass0 = RngStream::new(seed, step, 0)?;
    let pass1 = pass0.sibling();
    let mut tape = Tape::new();
    let nodes = tape.params(params);
    let x = tape.input(batch.inputs.clone());
    let logits0 = spec.build(&mut tape, &nodes, x, Some(&pass0))?;
    let logits1 = spec.build(&mut tape, &nodes, x, Some(&pass1))?;
    let sce0 = sce_loss(&mut tape, logits0, &batch.labels)?;
    let sce1 = sce_loss(&mut tape, logits1, &batch.labels)?;
    let kl = sym_kl_loss(&mut tape, logits0, logits1)?;
    let total = rdrop_loss(&mut tape, sce0, sce1, kl, weight)?;
    let total_grads = tape.backward(total)?;
    check_finite(&total_grads, "aggregated gradient")?;
    let (sce_grads, kl_grads) = if need_components {
        let both = tape.add(sce0, sce1)?;
        let sce_part = tape.scale(both, 0.5);
        (tape.backward(sce_part)?, tape.backward(kl)?)
    } else {
        (ParamSet::new(), ParamSet::new())
    };
    let sce_mean = 0.5 * (tape.value(sce0).data()[0] + tape.value(sce1).data()[0]);
    Ok(RdropGradients {
        sce_mean,
        kl: tape.value(kl).data()[0],
        sce_grads,
        kl_grads,
        total_grads,
        disagreements: count_disagreements(tape.value(logits0), tape.value(logits1)),
    })
}

/// R-Drop baseline: AdamW on `0.5 * (sce0 + sce1) + weight * kl`.
pub fn rdrop_step(
    spec: &ModelSpec,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &LabeledSet,
    weight: f64,
    seed: u64,
) -> Result<StepOutcome> {
    check_batch(batch)?;
    let step = state.t + 1;
    let parts = rdrop_gradients(spec, params, batch, weight, step, seed, false)?;
    let (new_params, new_state) = adamw_step(params, state, &parts.total_grads)?;
    let (update_norm, group_update_norms) = update_norms(params, &new_params);
    let report = StepReport {
        step,
        loss_sce: parts.sce_mean,
        loss_kl: Some(parts.kl),
        mask_ones_fraction: 1.0,
        mean_first_risk: None,
        mean_second_risk: None,
        grad_norm: parts.total_grads.global_norm(),
        update_norm,
        group_update_norms,
        disagreements: Some(parts.disagreements),
        batch_size: batch.len(),
    };
    Ok(StepOutcome {
        params: new_params,
        state: new_state,
        report,
    })
}

/// R-Drop with ROSE masking: first-order risks from the KL component,
/// second-order risks from the SCE component, update with the gradient of
/// the aggregated loss.
pub fn rdrop_rose_step(
    spec: &ModelSpec,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &LabeledSet,
    rose: &RoseConfig,
    weight: f64,
    seed: u64,
) -> Result<StepOutcome> {
    check_batch(batch)?;
    check_rose_compatible(spec, rose)?;
    state.check(params)?;
    let step = state.t + 1;
    let parts = rdrop_gradients(spec, params, batch, weight, step, seed, true)?;
    let granularity = rose.granularity;
    let first = rose
        .strategy
        .needs_first_order()
        .then(|| first_order_risks(&parts.kl_grads, granularity));
    let second = if rose.strategy.needs_second_order() {
        Some(second_order_risks(
            &parts.sce_grads,
            &state.m,
            state.hyper.beta1,
            rose.momentum_floor,
            granularity,
        )?)
    } else {
        None
    };
    let report = RiskReport {
        granularity,
        first,
        second,
    };
    let mask = calculate_mask(rose, &report)?;
    finish_masked(
        params,
        state,
        &parts.total_grads,
        &mask,
        granularity,
        &report,
        MaskedStepInfo {
            step,
            loss_sce: parts.sce_mean,
            loss_kl: Some(parts.kl),
            disagreements: Some(parts.disagreements),
            batch_size: batch.len(),
        },
    )
}
