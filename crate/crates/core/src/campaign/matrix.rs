//! Layer x bit aggregation of injection outcomes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::InjectionRecord;
use crate::error::{Error, Result};

/// Error-rate statistics over a set of injections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub count: u64,
    pub count_nonzero: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean over nonzero rates; 0 when `count_nonzero` is 0.
    pub mean_nonzero: f64,
    pub max: f64,
}

pub type Summary = CellStats;

impl CellStats {
    /// Statistics of `rates`, summed in the given order.
    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Empty("no error rates to aggregate".into()));
        }
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let nz: Vec<f64> = rates.iter().copied().filter(|&r| r != 0.0).collect();
        let mean_nonzero = if nz.is_empty() { 0.0 } else { nz.iter().sum::<f64>() / nz.len() as f64 };
        Ok(Self {
            count: rates.len() as u64,
            count_nonzero: nz.len() as u64,
            mean,
            std: var.sqrt(),
            mean_nonzero,
            max: rates.iter().cloned().fold(0.0, f64::max),
        })
    }
}

/// Per `(layer, bit)` cells plus a global summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    pub cells: BTreeMap<(usize, u8), CellStats>,
    pub global: Summary,
}

impl ErrorMatrix {
    pub fn cell(&self, layer_id: usize, bit: u8) -> Option<&CellStats> {
        self.cells.get(&(layer_id, bit))
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.cells.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }
}

fn sorted(records: &[InjectionRecord]) -> Vec<&InjectionRecord> {
    let mut v: Vec<&InjectionRecord> = records.iter().collect();
    v.sort_by(|a, b| (a.location, a.input_id).cmp(&(b.location, b.input_id)));
    v
}

/// Aggregates records independently of their order.
pub fn aggregate(records: &[InjectionRecord]) -> Result<ErrorMatrix> {
    if records.is_empty() {
        return Err(Error::Empty("no injection records".into()));
    }
    let recs = sorted(records);
    let mut groups: BTreeMap<(usize, u8), Vec<f64>> = BTreeMap::new();
    for r in &recs {
        groups.entry((r.location.layer_id, r.location.bit)).or_default().push(r.error_rate);
    }
    let cells = groups
        .into_iter()
        .map(|(k, v)| CellStats::from_rates(&v).map(|s| (k, s)))
        .collect::<Result<_>>()?;
    let all: Vec<f64> = recs.iter().map(|r| r.error_rate).collect();
    Ok(ErrorMatrix { cells, global: CellStats::from_rates(&all)? })
}
