//! Enumeration of `(parameter element, bit)` pairs per layer.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{ModelGraph, ParamKind};

/// One parameter tensor's share of the fault space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultSpaceEntry {
    pub layer_id: usize,
    pub kind: ParamKind,
    pub elements: usize,
    pub bit_width: u8,
}

impl FaultSpaceEntry {
    pub fn size(&self) -> u64 {
        self.elements as u64 * self.bit_width as u64
    }
}

/// All injectable locations of a model under a kind filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FaultSpace {
    pub entries: Vec<FaultSpaceEntry>,
}

impl FaultSpace {
    /// `N` per layer, in layer order.
    pub fn layer_totals(&self) -> BTreeMap<usize, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.layer_id).or_insert(0) += e.size();
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(FaultSpaceEntry::size).sum()
    }

    pub fn layer_entries(&self, layer: usize) -> impl Iterator<Item = &FaultSpaceEntry> {
        self.entries.iter().filter(move |e| e.layer_id == layer)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lists every parameter tensor of the included kinds with its element
/// count and storage width (32 for f32/i32, 8 for i8).
pub fn enumerate_fault_space(model: &ModelGraph, included: &BTreeSet<ParamKind>) -> FaultSpace {
    let entries = model
        .nodes()
        .iter()
        .flat_map(|n| {
            n.params
                .iter()
                .filter(|(k, _)| included.contains(k))
                .map(move |(k, t)| FaultSpaceEntry {
                    layer_id: n.id,
                    kind: *k,
                    elements: t.len(),
                    bit_width: t.dtype().bit_width(),
                })
        })
        .collect();
    FaultSpace { entries }
}
