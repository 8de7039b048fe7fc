//! Risk scores and update masks for robust selective fine-tuning.
//!
//! A *unit* is either a whole parameter group or a single scalar, depending
//! on [`Granularity`]. Units are ordered by declaration: group order, then
//! row-major position within a group.
//!
//! * First-order risk: norm of the unit's gradient of the dropout-twice
//!   symmetric KL loss.
//! * Second-order risk: `|(1 - beta1) * ||g|| / ||m_prev|| - 1|`, zero when
//!   `||m_prev||` is below the momentum floor.
//!
//! The lowest-risk fraction `c_h` of units gets gate 1, the rest gate 0. The
//! ensemble mask mixes the two binary masks as `gamma * M_first + (1 - gamma)
//! * M_second`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RoseError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    First,
    Second,
    Ensemble,
}

impl Strategy {
    pub fn needs_first_order(self) -> bool {
        matches!(self, Strategy::First | Strategy::Ensemble)
    }

    pub fn needs_second_order(self) -> bool {
        matches!(self, Strategy::Second | Strategy::Ensemble)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Group,
    Scalar,
}

fn default_momentum_floor() -> f64 {
    1e-12
}

fn default_gamma() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoseConfig {
    pub strategy: Strategy,
    pub c_h_first: f64,
    pub c_h_second: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_momentum_floor")]
    pub momentum_floor: f64,
    #[serde(default)]
    pub hard_ensemble: bool,
}

impl RoseConfig {
    pub fn new(strategy: Strategy, c_h: f64) -> Self {
        RoseConfig {
            strategy,
            c_h_first: c_h,
            c_h_second: c_h,
            gamma: default_gamma(),
            granularity: Granularity::Group,
            momentum_floor: default_momentum_floor(),
            hard_ensemble: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [
            ("c_h_first", self.c_h_first),
            ("c_h_second", self.c_h_second),
        ] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(RoseError::config(format!(
                    "{name} must lie in (0, 1], got {c}"
                )));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(RoseError::config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.momentum_floor > 0.0 && self.momentum_floor.is_finite()) {
            return Err(RoseError::config(
                "momentum_floor must be a small positive number",
            ));
        }
        Ok(())
    }
}

/// Per-unit norms: Frobenius norm per group, or absolute value per scalar.
pub fn unit_norms(set: &ParamSet, granularity: Granularity) -> Vec<f64> {
    match granularity {
        Granularity::Group => set.tensors().map(Tensor::frobenius_norm).collect(),
        Granularity::Scalar => set
            .tensors()
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .collect(),
    }
}

pub fn unit_count(set: &ParamSet, granularity: Granularity) -> usize {
    match granularity {
        Granularity::Group => set.group_count(),
        Granularity::Scalar => set.scalar_count(),
    }
}

pub fn first_order_risks(kl_grads: &ParamSet, granularity: Granularity) -> Vec<f64> {
    unit_norms(kl_grads, granularity)
}

/// Second-order risk of one unit from its gradient and previous-momentum norms.
///
/// `(1 - beta1) * r` is evaluated as `r - beta1 * r`, which keeps the
/// cancellation point `||g|| = ||m|| / (1 - beta1)` at exactly zero.
pub fn second_order_risk(grad_norm: f64, momentum_norm: f64, beta1: f64, floor: f64) -> f64 {
    if momentum_norm < floor {
        return 0.0;
    }
    let ratio = grad_norm / momentum_norm;
    ((ratio - beta1 * ratio) - 1.0).abs()
}

pub fn second_order_risks(
    grads: &ParamSet,
    prev_momentum: &ParamSet,
    beta1: f64,
    floor: f64,
    granularity: Granularity,
) -> Result<Vec<f64>> {
    grads.ensure_same_structure(prev_momentum, "second_order_risks")?;
    let g = unit_norms(grads, granularity);
    let m = unit_norms(prev_momentum, granularity);
    Ok(g.iter()
        .zip(&m)
        .map(|(&gn, &mn)| second_order_risk(gn, mn, beta1, floor))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskReport {
    pub granularity: Granularity,
    pub first: Option<Vec<f64>>,
    pub second: Option<Vec<f64>>,
}

impl RiskReport {
    pub fn unit_count(&self) -> usize {
        self.first
            .as_ref()
            .or(self.second.as_ref())
            .map(Vec::len)
            .unwrap_or(0)
    }

    pub fn mean_first(&self) -> Option<f64> {
        self.first.as_deref().map(mean)
    }

    pub fn mean_second(&self) -> Option<f64> {
        self.second.as_deref().map(mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-unit gate values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    values: Vec<f64>,
}

impl Mask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RoseError::config("mask values must lie in [0, 1]"));
        }
        Ok(Mask { values })
    }

    pub fn ones(units: usize) -> Self {
        Mask {
            values: vec![1.0; units],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Broadcasts unit gates to parameter-shaped tensors.
    pub fn expand(&self, layout: &ParamSet, granularity: Granularity) -> Result<ParamSet> {
        let units = unit_count(layout, granularity);
        if units != self.values.len() {
            return Err(RoseError::shape(
                "mask",
                format!("{} gates for {units} units", self.values.len()),
            ));
        }
        Ok(match granularity {
            Granularity::Group => layout
                .iter()
                .zip(&self.values)
                .map(|((name, t), &g)| (name.to_string(), Tensor::full(t.shape(), g)))
                .collect(),
            Granularity::Scalar => {
                let mut offset = 0;
                layout
                    .iter()
                    .map(|(name, t)| {
                        let gates = self.values[offset..offset + t.len()].to_vec();
                        offset += t.len();
                        let tensor =
                            Tensor::new(t.shape().to_vec(), gates).expect("shape from layout");
                        (name.to_string(), tensor)
                    })
                    .collect()
            }
        })
    }

    /// Fraction of scalar parameters whose gate is exactly 1.
    pub fn ones_fraction(&self, layout: &ParamSet, granularity: Granularity) -> f64 {
        let n = layout.scalar_count() as f64;
        match granularity {
            Granularity::Scalar => self.popcount() as f64 / n,
            Granularity::Group => {
                layout
                    .tensors()
                    .zip(&self.values)
                    .filter(|(_, &g)| g == 1.0)
                    .map(|(t, _)| t.len())
                    .sum::<usize>() as f64
                    / n
            }
        }
    }
}

/// Number of units selected at threshold `c_h`: the largest rank `i` with
/// `i / n <= c_h`. Equals `floor(c_h * n)` away from exact boundaries.
pub fn selected_count(c_h: f64, n: usize) -> usize {
    let guess = ((c_h * n as f64).floor() as usize).min(n);
    // Settle the rounding of c_h * n against the rank condition itself.
    let fits = |i: usize| i as f64 / n as f64 <= c_h;
    let mut k = guess;
    while k < n && fits(k + 1) {
        k += 1;
    }
    while k > 0 && !fits(k) {
        k -= 1;
    }
    k
}

/// Gate 1 for the `selected_count(c_h, n)` lowest-risk units, ties broken by
/// declaration order; gate 0 otherwise.
pub fn rank_threshold_mask(risks: &[f64], c_h: f64) -> Result<Mask> {
    if risks.is_empty() {
        return Err(RoseError::config("cannot rank an empty risk list"));
    }
    if !(c_h > 0.0 && c_h <= 1.0) {
        return Err(RoseError::config(format!(
            "c_h must lie in (0, 1], got {c_h}"
        )));
    }
    if let Some(i) = risks.iter().position(|r| !r.is_finite()) {
        return Err(RoseError::NonFinite(format!("risk of unit {i}")));
    }
    let mut order: Vec<usize> = (0..risks.len()).collect();
    // sort_by is stable, so equal risks keep declaration order.
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let keep = selected_count(c_h, risks.len());
    let mut values = vec![0.0; risks.len()];
    for &unit in &order[..keep] {
        values[unit] = 1.0;
    }
    Ok(Mask { values })
}

/// `gamma * first + (1 - gamma) * second`, optionally thresholded at 0.5.
pub fn ensemble_mask(first: &Mask, second: &Mask, gamma: f64, hard: bool) -> Result<Mask> {
    if first.len() != second.len() {
        return Err(RoseError::shape(
            "ensemble_mask",
            format!("{} vs {} units", first.len(), second.len()),
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(RoseError::config(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let values = first
        .values
        .iter()
        .zip(&second.values)
        .map(|(&f, &s)| {
            let v = if f == s {
                f
            } else {
                gamma * f + (1.0 - gamma) * s
            };
            if hard {
                if v >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect();
    Mask::new(values)
}

pub fn calculate_mask(config: &RoseConfig, report: &RiskReport) -> Result<Mask> {
    fn need<'a>(risks: &'a Option<Vec<f64>>, which: &str) -> Result<&'a [f64]> {
        risks.as_deref().ok_or_else(|| {
            RoseError::config(format!("{which}-order risks were not computed this step"))
        })
    }
    match config.strategy {
        Strategy::First => rank_threshold_mask(need(&report.first, "first")?, config.c_h_first),
        Strategy::Second => rank_threshold_mask(need(&report.second, "second")?, config.c_h_second),
        Strategy::Ensemble => {
            let f = rank_threshold_mask(need(&report.first, "first")?, config.c_h_first)?;
            let s = rank_threshold_mask(need(&report.second, "second")?, config.c_h_second)?;
            ensemble_mask(&f, &s, config.gamma, config.hard_ensemble)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_rule_examples() {
        let m = rank_threshold_mask(&[0.1, 0.5, 0.3, 0.9], 0.5).unwrap();
        assert_eq!(m.values(), &[1.0, 0.0, 1.0, 0.0]);
        let m = rank_threshold_mask(&[0.1, 0.5, 0.3, 0.9], 1.0).unwrap();
        assert_eq!(m.values(), &[1.0; 4]);
        let m = rank_threshold_mask(&[0.2; 4], 0.5).unwrap();
        assert_eq!(m.values(), &[1.0, 1.0, 0.0, 0.0]);
        assert!(rank_threshold_mask(&[], 0.5).is_err());
        assert!(rank_threshold_mask(&[1.0], 0.0).is_err());
    }

    #[test]
    fn selected_count_uses_rank_condition_at_boundaries() {
        // 0.29 * 100 rounds to 28.999999999999996, but 29/100 <= 0.29 holds.
        assert_eq!(selected_count(0.29, 100), 29);
        assert_eq!(selected_count(0.6, 5), 3);
        assert_eq!(selected_count(0.1, 5), 0);
        assert_eq!(selected_count(1.0, 7), 7);
    }

    #[test]
    fn second_order_examples() {
        assert_eq!(second_order_risk(2.0, 0.4, 0.9, 1e-12), 0.5);
        let m = 0.4;
        assert_eq!(second_order_risk(m / (1.0 - 0.9), m, 0.9, 1e-12), 0.0);
        assert_eq!(second_order_risk(3.0, 0.0, 0.9, 1e-12), 0.0);
    }

    #[test]
    fn norm_units() {
        let mut g = ParamSet::new();
        g.insert(
            "w",
            Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        g.insert("b", Tensor::new(vec![1], vec![-2.0]).unwrap())
            .unwrap();
        assert_eq!(first_order_risks(&g, Granularity::Group), vec![5.0, 2.0]);
        assert_eq!(
            first_order_risks(&g, Granularity::Scalar),
            vec![3.0, 4.0, 0.0, 0.0, 2.0]
        );
    }

    #[test]
    fn ensemble_values() {
        let one = Mask::ones(1);
        let zero = Mask::new(vec![0.0]).unwrap();
        assert_eq!(
            ensemble_mask(&one, &one, 0.5, false).unwrap().values(),
            &[1.0]
        );
        assert_eq!(
            ensemble_mask(&one, &zero, 0.5, false).unwrap().values(),
            &[0.5]
        );
        let v = ensemble_mask(&zero, &one, 0.3, false).unwrap().values()[0];
        assert_eq!(v, 1.0 - 0.3);
        assert!((v - 0.7).abs() < 1e-15);
        assert_eq!(
            ensemble_mask(&zero, &one, 0.3, true).unwrap().values(),
            &[1.0]
        );
        assert_eq!(
            ensemble_mask(&one, &zero, 0.3, true).unwrap().values(),
            &[0.0]
        );
        assert!(ensemble_mask(&one, &Mask::ones(2), 0.5, false).is_err());
    }

    #[test]
    fn dispatch() {
        let report = RiskReport {
            granularity: Granularity::Group,
            first: Some(vec![0.4, 0.1, 0.3, 0.2]),
            second: Some(vec![0.0; 4]),
        };
        let mut cfg = RoseConfig::new(Strategy::First, 0.5);
        assert_eq!(
            calculate_mask(&cfg, &report).unwrap(),
            rank_threshold_mask(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap()
        );
        cfg.strategy = Strategy::Second;
        assert_eq!(
            calculate_mask(&cfg, &report).unwrap().values(),
            &[1.0, 1.0, 0.0, 0.0]
        );
        let cfg = RoseConfig::new(Strategy::Ensemble, 1.0);
        assert_eq!(calculate_mask(&cfg, &report).unwrap().values(), &[1.0; 4]);

        let no_first = RiskReport {
            first: None,
            ..report
        };
        assert!(calculate_mask(&RoseConfig::new(Strategy::First, 0.5), &no_first).is_err());
    }

    #[test]
    fn expand_broadcasts_group_gates() {
        let mut layout = ParamSet::new();
        layout.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        layout.insert("b", Tensor::zeros(&[3])).unwrap();
        let m = Mask::new(vec![0.0, 1.0]).unwrap();
        let e = m.expand(&layout, Granularity::Group).unwrap();
        assert_eq!(e.get("w").unwrap(), &Tensor::zeros(&[2, 3]));
        assert_eq!(e.get("b").unwrap(), &Tensor::ones(&[3]));
        assert_eq!(m.ones_fraction(&layout, Granularity::Group), 3.0 / 9.0);
        assert!(m.expand(&layout, Granularity::Scalar).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RoseConfig::new(Strategy::First, 0.6).validate().is_ok());
        assert!(RoseConfig::new(Strategy::First, 0.0).validate().is_err());
        assert!(RoseConfig::new(Strategy::First, 1.2).validate().is_err());
        let mut c = RoseConfig::new(Strategy::Ensemble, 0.5);
        c.gamma = 1.0;
        assert!(c.validate().is_err());
    }
}
