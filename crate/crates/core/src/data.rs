//! Labelled example sets, batching, and the dataset CSV format
//! (`label,x0,x1,...` with one header row).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoseError};
use crate::rng::{seeded, Purpose};
use crate::tensor::Tensor;

/// How a synthetic set encodes its surface cue, so perturbations can flip it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceEncoding {
    /// Feature `coord` is `+strength` when the cue is on and `-strength` otherwise.
    Indicator { coord: usize, strength: f64 },
    /// The whole input row is scaled by `factor` when the cue is on.
    Magnitude { factor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Surface-cue value per example; empty for sets without one.
    pub surface_cue: Vec<bool>,
    pub encoding: Option<SurfaceEncoding>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = inputs.dims2("labeled_set")?;
        if labels.len() != n {
            return Err(RoseError::data(format!(
                "{} labels for {n} examples",
                labels.len()
            )));
        }
        Ok(LabeledSet {
            inputs,
            labels,
            surface_cue: Vec::new(),
            encoding: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledSet> {
        Ok(LabeledSet {
            inputs: self.inputs.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            surface_cue: if self.surface_cue.is_empty() {
                Vec::new()
            } else {
                rows.iter().map(|&r| self.surface_cue[r]).collect()
            },
            encoding: self.encoding,
        })
    }

    /// Splits the set into shuffled minibatches for `epoch`.
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<LabeledSet>> {
        epoch_order(self.len(), batch_size, seed, epoch)?
            .iter()
            .map(|rows| self.subset(rows))
            .collect()
    }

    pub fn read_csv(path: &Path) -> Result<LabeledSet> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| RoseError::data(format!("{}: {e}", path.display())))?;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| RoseError::data(format!("{}: {e}", path.display())))?;
            let mut fields = record.iter();
            let label = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| RoseError::data(format!("row {}: bad label", i + 1)))?;
            let row: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| RoseError::data(format!("row {}: {e}", i + 1)))?;
            if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
                return Err(RoseError::data(format!(
                    "row {}: wrong number of features",
                    i + 1
                )));
            }
            labels.push(label);
            data.extend(row);
        }
        let width =
            width.ok_or_else(|| RoseError::data(format!("{}: no examples", path.display())))?;
        LabeledSet::new(Tensor::new(vec![labels.len(), width], data)?, labels)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| RoseError::data(e.to_string()))?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.features()).map(|i| format!("x{i}")));
        w.write_record(&header)
            .map_err(|e| RoseError::data(e.to_string()))?;
        for r in 0..self.len() {
            let mut rec = vec![self.labels[r].to_string()];
            rec.extend(self.inputs.row(r).iter().map(|v| format_f64(*v)));
            w.write_record(&rec)
                .map_err(|e| RoseError::data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Row indices of each minibatch of one epoch.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(RoseError::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, Purpose::Shuffle, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Decimal text with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
