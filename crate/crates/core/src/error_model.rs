//! Closed-form error expectations for flips in classifier biases.
//!
//! A large enough upward exponent flip in the bias of class `j` either
//! removes `j` from the output (negative bias becomes hugely negative) or
//! forces `j` at every pixel (positive bias becomes hugely positive). The
//! resulting pixel error is `freq_j` or `1 - freq_j`, where `freq_j` is the
//! share of pixels the fault-free model assigns to `j`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ClassMap;

/// Normalized histogram of a class map.
pub fn class_frequencies(map: &ClassMap, n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; n_classes];
    for &c in map.classes() {
        *counts.get_mut(c as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("class {c} outside 0..{n_classes}"))
        })? += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / map.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSign {
    Negative,
    Positive,
}

impl BiasSign {
    /// Zero counts as positive: its exponent flip yields +2.
    pub fn of(v: f64) -> Self {
        if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
            Self::Negative
        } else {
            Self::Positive
        }
    }
}

/// Signs of a bias vector.
pub fn bias_signs(biases: &[f64]) -> Vec<BiasSign> {
    biases.iter().map(|&b| BiasSign::of(b)).collect()
}

fn check_lengths(freqs: &[f64], signs: &[BiasSign]) -> Result<()> {
    if freqs.is_empty() || freqs.len() != signs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frequencies and {} signs",
            freqs.len(),
            signs.len()
        )));
    }
    if let Some(f) = freqs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("frequency {f} outside [0, 1]")));
    }
    Ok(())
}

/// Pixel error of saturating the bias of class `j`.
pub fn bias_flip_contribution(freqs: &[f64], signs: &[BiasSign], j: usize) -> Result<f64> {
    check_lengths(freqs, signs)?;
    match signs.get(j) {
        Some(BiasSign::Negative) => Ok(freqs[j]),
        Some(BiasSign::Positive) => Ok(1.0 - freqs[j]),
        None => Err(Error::InvalidArgument(format!("class {j} outside 0..{}", freqs.len()))),
    }
}

/// Uniform flip probabilities when `p_fi` is `None`; validated otherwise.
pub fn flip_probabilities(n: usize, p_fi: Option<&[f64]>) -> Result<Vec<f64>> {
    match p_fi {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(p) => {
            if p.len() != n {
                return Err(Error::InvalidArgument(format!("{} flip probabilities for {n} classes", p.len())));
            }
            let s: f64 = p.iter().sum();
            if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("flip probabilities must be non-negative and sum to 1, got {s}")));
            }
            Ok(p.to_vec())
        }
    }
}

/// `sum_j p_fi_j * contribution_j` for flips that saturate one bias.
pub fn expected_bias_msb_error(freqs: &[f64], signs: &[BiasSign], p_fi: Option<&[f64]>) -> Result<f64> {
    check_lengths(freqs, signs)?;
    let p = flip_probabilities(freqs.len(), p_fi)?;
    let mut acc = 0.0;
    for (j, pj) in p.iter().enumerate() {
        acc += pj * bias_flip_contribution(freqs, signs, j)?;
    }
    Ok(acc)
}

/// Expected value from contributions given directly (fractions).
pub fn expected_from_contributions(contributions: &[f64], p_fi: Option<&[f64]>) -> Result<f64> {
    if contributions.is_empty() {
        return Err(Error::Empty("no contributions".into()));
    }
    let p = flip_probabilities(contributions.len(), p_fi)?;
    Ok(contributions.iter().zip(&p).map(|(c, p)| c * p).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight 1 at and above `k_sat`, 0 below.
    SaturatedOnly,
    /// `clamp((k - k_min) / (k_sat - k_min), 0, 1)`.
    LinearRamp,
}

/// How the effect of an integer bias flip grows with bit position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationProfile {
    pub k_sat: u8,
    pub k_min: u8,
    /// Inclusive range of bias bits considered.
    pub bit_range: (u8, u8),
    pub weighting: Weighting,
}

impl SaturationProfile {
    pub fn new(k_sat: u8, weighting: Weighting) -> Result<Self> {
        let p = Self { k_sat, k_min: 0, bit_range: (0, 30), weighting };
        p.validate()?;
        Ok(p)
    }

    /// Preset for ReLU models.
    pub fn relu(weighting: Weighting) -> Self {
        Self::new(17, weighting).unwrap()
    }

    /// Preset for sigmoid and hard-sigmoid models.
    pub fn bounded(weighting: Weighting) -> Self {
        Self::new(19, weighting).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bit_range;
        if self.k_sat >= 32 || lo > hi || hi >= 32 {
            return Err(Error::InvalidArgument(format!(
                "profile k_sat {} range {lo}..={hi} exceeds the 32-bit bias",
                self.k_sat
            )));
        }
        if self.weighting == Weighting::LinearRamp && self.k_sat <= self.k_min {
            return Err(Error::InvalidArgument(format!(
                "linear ramp needs k_sat > k_min, got {} <= {}",
                self.k_sat, self.k_min
            )));
        }
        Ok(())
    }

    pub fn weight(&self, k: u8) -> f64 {
        match self.weighting {
            Weighting::SaturatedOnly => (k >= self.k_sat) as u8 as f64,
            Weighting::LinearRamp => {
                ((k as f64 - self.k_min as f64) / (self.k_sat as f64 - self.k_min as f64)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn bits(&self) -> impl Iterator<Item = u8> {
        self.bit_range.0..=self.bit_range.1
    }

    /// Mean weight over the bit range.
    pub fn mean_weight(&self) -> f64 {
        let n = (self.bit_range.1 - self.bit_range.0) as f64 + 1.0;
        self.bits().map(|k| self.weight(k)).sum::<f64>() / n
    }
}

/// Expected error of an integer bias flip. Saturated-only: the full
/// class-flip expectation (any flip at or above `k_sat`). Linear ramp: that
/// expectation times the mean bit weight, i.e. averaged over every bit of
/// the range.
pub fn expected_quantized_bias_error(
    freqs: &[f64],
    signs: &[BiasSign],
    profile: &SaturationProfile,
    p_fi: Option<&[f64]>,
) -> Result<f64> {
    profile.validate()?;
    let full = expected_bias_msb_error(freqs, signs, p_fi)?;
    Ok(match profile.weighting {
        Weighting::SaturatedOnly => full,
        Weighting::LinearRamp => full * profile.mean_weight(),
    })
}

/// Weighted mean of measured per-bit rates, `sum w_k r_k / sum w_k`.
pub fn measured_weighted_rate(rates: &BTreeMap<u8, f64>, profile: &SaturationProfile) -> Result<f64> {
    profile.validate()?;
    let (mut num, mut den) = (0.0, 0.0);
    for k in profile.bits() {
        let w = profile.weight(k);
        let r = rates
            .get(&k)
            .ok_or_else(|| Error::InvalidArgument(format!("no measured rate for bit {k}")))?;
        num += w * r;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Empty("profile assigns zero weight to every bit in range".into()));
    }
    Ok(num / den)
}

/// Measured-versus-expected line of a prediction report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub expected: f64,
    pub measured: f64,
    pub abs_deviation: f64,
    /// Deviation exceeds the stated half-width.
    pub flagged: bool,
}

impl Comparison {
    pub fn new(name: impl Into<String>, expected: f64, measured: f64, half_width: f64) -> Self {
        let d = (expected - measured).abs();
        Self { name: name.into(), expected, measured, abs_deviation: d, flagged: d > half_width }
    }
}

fn weighting_note(w: Weighting) -> &'static str {
    match w {
        Weighting::SaturatedOnly => "flips at or above k_sat take the full class-flip effect",
        Weighting::LinearRamp => {
            "linear ramp is one reading of bit-significance weighting; expected_quantized averages it over the bit range"
        }
    }
}

/// Inputs and outputs of a bias-flip prediction. Values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub freqs: Vec<f64>,
    pub signs: Vec<BiasSign>,
    pub p_fi: Vec<f64>,
    pub contributions: Vec<f64>,
    pub profile: SaturationProfile,
    pub expected_msb: f64,
    pub expected_quantized: f64,
    /// Note on how the profile weighting should be read.
    pub weighting_note: String,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl PredictionReport {
    pub fn new(freqs: &[f64], signs: &[BiasSign], p_fi: Option<&[f64]>, profile: SaturationProfile) -> Result<Self> {
        let p = flip_probabilities(freqs.len(), p_fi)?;
        let contributions = (0..freqs.len())
            .map(|j| bias_flip_contribution(freqs, signs, j).map(|c| 100.0 * c))
            .collect::<Result<_>>()?;
        Ok(Self {
            freqs: freqs.to_vec(),
            signs: signs.to_vec(),
            p_fi: p.clone(),
            contributions,
            profile,
            expected_msb: 100.0 * expected_bias_msb_error(freqs, signs, Some(&p))?,
            expected_quantized: 100.0 * expected_quantized_bias_error(freqs, signs, &profile, Some(&p))?,
            weighting_note: weighting_note(profile.weighting).into(),
            comparisons: Vec::new(),
        })
    }

    /// Report from per-bias contributions given directly, in percent.
    /// Frequencies and signs are left empty.
    pub fn from_contributions(contributions: &[f64], p_fi: Option<&[f64]>, profile: SaturationProfile) -> Result<Self> {
        profile.validate()?;
        let p = flip_probabilities(contributions.len(), p_fi)?;
        let full = expected_from_contributions(contributions, Some(&p))?;
        let scale = match profile.weighting {
            Weighting::SaturatedOnly => 1.0,
            Weighting::LinearRamp => profile.mean_weight(),
        };
        Ok(Self {
            freqs: Vec::new(),
            signs: Vec::new(),
            p_fi: p,
            contributions: contributions.to_vec(),
            profile,
            expected_msb: full,
            expected_quantized: full * scale,
            weighting_note: weighting_note(profile.weighting).into(),
            comparisons: Vec::new(),
        })
    }
}
