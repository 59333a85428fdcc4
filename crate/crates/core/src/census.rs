//! Bit-level statistics over model parameters.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Magnitude buckets of one layer's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RangeCensus {
    pub layer_id: usize,
    pub total: u64,
    /// |v| < 1, zeros included.
    pub below_one: u64,
    /// 1 <= |v| < 2.
    pub one_to_two: u64,
    /// |v| >= 2, non-finite values included.
    pub two_or_more: u64,
    /// Exact zeros, also counted in `below_one`.
    pub zeros: u64,
}

impl RangeCensus {
    pub fn from_values(layer_id: usize, values: &[f32]) -> Self {
        let mut c = Self { layer_id, ..Self::default() };
        for v in values {
            c.total += 1;
            let a = v.abs();
            c.zeros += (a == 0.0) as u64;
            if a < 1.0 {
                c.below_one += 1;
            } else if a < 2.0 {
                c.one_to_two += 1;
            } else {
                c.two_or_more += 1;
            }
        }
        c
    }

    fn frac(n: u64, d: u64) -> f64 {
        if d == 0 { 0.0 } else { n as f64 / d as f64 }
    }

    pub fn frac_below_one(&self) -> f64 {
        Self::frac(self.below_one, self.total)
    }

    pub fn frac_below_two(&self) -> f64 {
        Self::frac(self.below_one + self.one_to_two, self.total)
    }

    pub fn frac_two_or_more(&self) -> f64 {
        Self::frac(self.two_or_more, self.total)
    }

    pub fn frac_zero(&self) -> f64 {
        Self::frac(self.zeros, self.total)
    }

    /// Pools several layers. Fractions of the result are the count-weighted
    /// averages of the parts.
    pub fn pooled(parts: &[RangeCensus]) -> Self {
        parts.iter().fold(Self::default(), |a, p| Self {
            layer_id: 0,
            total: a.total + p.total,
            below_one: a.below_one + p.below_one,
            one_to_two: a.one_to_two + p.one_to_two,
            two_or_more: a.two_or_more + p.two_or_more,
            zeros: a.zeros + p.zeros,
        })
    }
}

/// How many values sit one flip away from an all-ones exponent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExponentCensus {
    pub layer_id: usize,
    pub bit: u8,
    pub total: u64,
    /// Values whose bit `bit` is 0.
    pub zero_at_bit: u64,
    /// Of those, values with bit 30 clear and exactly one zero in bits
    /// 29..23 (necessarily at `bit`).
    pub one_flip_from_full: u64,
}

impl ExponentCensus {
    pub fn from_values(layer_id: usize, bit: u8, values: &[f32]) -> Result<Self> {
        check_bit(bit)?;
        let mut c = Self { layer_id, bit, ..Self::default() };
        for v in values {
            let b = v.to_bits();
            c.total += 1;
            if b >> bit & 1 != 0 {
                continue;
            }
            c.zero_at_bit += 1;
            let low = (b >> 23) & 0x7f;
            if b >> 30 & 1 == 0 && low | (1 << (bit - 23)) == 0x7f {
                c.one_flip_from_full += 1;
            }
        }
        Ok(c)
    }

    pub fn frac_zero_at_bit(&self) -> f64 {
        RangeCensus::frac(self.zero_at_bit, self.total)
    }

    /// Share of the zero-at-bit values that are one flip from all ones.
    pub fn frac_one_flip(&self) -> f64 {
        RangeCensus::frac(self.one_flip_from_full, self.zero_at_bit)
    }
}

fn check_bit(bit: u8) -> Result<()> {
    if (23..=29).contains(&bit) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("exponent census bit must be in 23..=29, got {bit}")))
    }
}

fn layer_values(model: &ModelGraph) -> Result<Vec<(usize, Vec<f32>)>> {
    let mut out = Vec::new();
    for n in model.nodes() {
        if n.params.is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(n.param_count());
        for t in n.params.values() {
            vals.extend_from_slice(t.as_f32().ok_or_else(|| {
                Error::InvalidArgument(format!("layer {} holds non-f32 parameters", n.id))
            })?);
        }
        out.push((n.id, vals));
    }
    Ok(out)
}

/// Per-layer magnitude buckets of an f32 model.
pub fn value_range_census(model: &ModelGraph) -> Result<Vec<RangeCensus>> {
    Ok(layer_values(model)?.iter().map(|(id, v)| RangeCensus::from_values(*id, v)).collect())
}

/// Per-layer exponent census of an f32 model at exponent bit `bit` (23..=29).
pub fn partial_exponent_census(model: &ModelGraph, bit: u8) -> Result<Vec<ExponentCensus>> {
    check_bit(bit)?;
    layer_values(model)?.iter().map(|(id, v)| ExponentCensus::from_values(*id, bit, v)).collect()
}
