//! Statistically sized injection campaigns.
//!
//! A campaign samples `(element, bit)` locations per layer, flips each one
//! for the duration of one inference, and compares the class map against
//! the fault-free golden map. Per-layer sample counts follow the finite
//! population formula in [`sample_size`].

mod csv_io;
mod matrix;
mod run;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::FaultLocation;
use crate::model::{self, enumerate_fault_space, ModelGraph, ParamKind};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use csv_io::{read_matrix_csv, read_records_csv, write_matrix_csv, write_records_csv, MatrixRow};
pub use matrix::{aggregate, CellStats, ErrorMatrix, Summary};
pub use run::{pixel_mismatch_rate, run_campaign, run_planned, GoldenCache, InjectionRecord};

/// How locations are drawn inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform without replacement over all `(element, bit)` pairs.
    #[default]
    UniformLayer,
    /// Equal quota per bit position, without replacement within each bit.
    StratifiedPerBit,
}

/// Which inputs feed each injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// One input per injection, drawn from the input set.
    #[default]
    Single,
    /// Every input for every injection, one record per input.
    All,
}

/// Source of the campaign's input images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Seeded synthetic scenes, see [`model::synthetic_inputs`].
    Synthetic { count: usize, height: usize, width: usize, seed: u64 },
    /// Tensor files, resolved relative to the config file.
    Files { paths: Vec<PathBuf> },
}

impl Default for InputSpec {
    fn default() -> Self {
        Self::Synthetic { count: 1, height: 32, width: 32, seed: 0 }
    }
}

impl InputSpec {
    pub fn load(&self, model: &ModelGraph, base_dir: Option<&Path>) -> Result<Vec<Tensor>> {
        let inputs = match self {
            Self::Synthetic { count, height, width, seed } => {
                if *count == 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config("synthetic inputs need positive count, height and width".into()));
                }
                model::synthetic_inputs(model.n_input_channels(), *height, *width, *count, *seed)
            }
            Self::Files { paths } => {
                if paths.is_empty() {
                    return Err(Error::Config("input file list is empty".into()));
                }
                paths
                    .iter()
                    .map(|p| match base_dir {
                        Some(d) if p.is_relative() => model::load_tensor(d.join(p)),
                        _ => model::load_tensor(p),
                    })
                    .collect::<Result<_>>()?
            }
        };
        for x in &inputs {
            model.check_input(x)?;
        }
        Ok(inputs)
    }
}

fn default_kinds() -> Vec<ParamKind> {
    ParamKind::DEFAULT_CAMPAIGN.to_vec()
}

/// Campaign parameters. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Error margin.
    pub e: f64,
    /// Confidence coefficient.
    pub t: f64,
    /// Assumed failure probability.
    pub p: f64,
    /// Maximum injections per layer.
    pub cap: u64,
    #[serde(default = "default_kinds")]
    pub included_kinds: Vec<ParamKind>,
    pub sampling: Sampling,
    pub seed: u64,
    pub inputs: InputSpec,
    pub input_mode: InputMode,
    /// Restricts the fault space to these bit positions.
    pub bits: Option<Vec<u8>>,
    /// Restricts the fault space to these layer ids.
    pub layers: Option<Vec<usize>>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            e: 0.025,
            t: 1.96,
            p: 0.5,
            cap: 1550,
            included_kinds: default_kinds(),
            sampling: Sampling::default(),
            seed: 0,
            inputs: InputSpec::default(),
            input_mode: InputMode::default(),
            bits: None,
            layers: None,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        check_params(self.e, self.t, self.p, self.cap)?;
        if let Some(b) = self.bits.as_ref().and_then(|b| b.iter().find(|&&b| b >= 32)) {
            return Err(Error::Config(format!("bit {b} out of range 0..32")));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn kinds(&self) -> BTreeSet<ParamKind> {
        self.included_kinds.iter().copied().collect()
    }

    /// [`sample_size`] under this config.
    pub fn sample_size(&self, n: u64) -> Result<u64> {
        sample_size(n, self.e, self.t, self.p, self.cap)
    }
}

fn check_params(e: f64, t: f64, p: f64, cap: u64) -> Result<()> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::Config(format!("error margin e = {e} must lie in (0, 1)")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("confidence coefficient t = {t} must be positive")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("failure probability p = {p} must lie in (0, 1)")));
    }
    if cap == 0 {
        return Err(Error::Config("cap must be at least 1".into()));
    }
    Ok(())
}

/// Injections needed for a population of `n` locations:
/// `ceil(n / (1 + e^2 (n - 1) / (t^2 p (1 - p))))`, then capped at `cap`
/// and at `n`.
pub fn sample_size(n: u64, e: f64, t: f64, p: f64, cap: u64) -> Result<u64> {
    check_params(e, t, p, cap)?;
    if n == 0 {
        return Err(Error::InvalidArgument("population size must be at least 1".into()));
    }
    let nf = n as f64;
    let raw = nf / (1.0 + e * e * (nf - 1.0) / (t * t * p * (1.0 - p)));
    Ok((raw.ceil() as u64).min(cap).min(n))
}

/// One tensor's part of a layer's (possibly bit-restricted) fault space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpacePart {
    pub kind: ParamKind,
    pub elements: usize,
    pub bits: Vec<u8>,
}

impl SpacePart {
    fn size(&self) -> u64 {
        self.elements as u64 * self.bits.len() as u64
    }
}

/// Planned injections for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    pub layer_id: usize,
    /// Fault-space size `N`.
    pub population: u64,
    /// Planned injections `n`.
    pub injections: u64,
    pub parts: Vec<SpacePart>,
}

impl LayerPlan {
    fn decode(&self, mut idx: u64) -> (ParamKind, usize, u8) {
        for p in &self.parts {
            if idx < p.size() {
                let nb = p.bits.len() as u64;
                return (p.kind, (idx / nb) as usize, p.bits[(idx % nb) as usize]);
            }
            idx -= p.size();
        }
        unreachable!("index beyond layer fault space")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CampaignPlan {
    pub sampling: Sampling,
    pub layers: Vec<LayerPlan>,
}

impl CampaignPlan {
    pub fn total_injections(&self) -> u64 {
        self.layers.iter().map(|l| l.injections).sum()
    }

    pub fn total_population(&self) -> u64 {
        self.layers.iter().map(|l| l.population).sum()
    }
}

/// Per-layer `N` and `n` for the config's kinds, bits and layers.
pub fn plan(model: &ModelGraph, config: &CampaignConfig) -> Result<CampaignPlan> {
    config.validate()?;
    let kinds = config.kinds();
    if kinds.is_empty() {
        return Err(Error::EmptyFaultSpace("no parameter kinds included".into()));
    }
    let space = enumerate_fault_space(model, &kinds);
    let bit_filter: Option<BTreeSet<u8>> = config.bits.as_ref().map(|b| b.iter().copied().collect());
    let layer_filter: Option<BTreeSet<usize>> = config.layers.as_ref().map(|l| l.iter().copied().collect());
    if let Some(lf) = &layer_filter {
        if let Some(bad) = lf.iter().find(|&&l| space.layer_entries(l).next().is_none()) {
            return Err(Error::Config(format!("layer {bad} has no parameters of the included kinds")));
        }
    }
    let mut layers = Vec::new();
    for (&layer_id, _) in space.layer_totals().iter() {
        if layer_filter.as_ref().is_some_and(|f| !f.contains(&layer_id)) {
            continue;
        }
        let parts: Vec<SpacePart> = space
            .layer_entries(layer_id)
            .map(|e| SpacePart {
                kind: e.kind,
                elements: e.elements,
                bits: (0..e.bit_width).filter(|b| bit_filter.as_ref().is_none_or(|f| f.contains(b))).collect(),
            })
            .filter(|p| !p.bits.is_empty() && p.elements > 0)
            .collect();
        let population: u64 = parts.iter().map(SpacePart::size).sum();
        if population == 0 {
            continue;
        }
        layers.push(LayerPlan { layer_id, population, injections: config.sample_size(population)?, parts });
    }
    if layers.is_empty() {
        return Err(Error::EmptyFaultSpace("no injectable location matches the configuration".into()));
    }
    Ok(CampaignPlan { sampling: config.sampling, layers })
}

/// Draws the concrete locations of one layer.
pub fn sample_layer(layer: &LayerPlan, sampling: Sampling, seed: u64) -> Vec<FaultLocation> {
    let lid = layer.layer_id as u64;
    let n = layer.injections as usize;
    let to_loc = |(kind, index, bit): (ParamKind, usize, u8)| FaultLocation { layer_id: layer.layer_id, kind, index, bit };
    match sampling {
        Sampling::UniformLayer => {
            let mut rng = rng_for(seed, &[0x6c61_7965, lid]);
            let mut picks: Vec<u64> =
                index::sample(&mut rng, layer.population as usize, n).into_iter().map(|i| i as u64).collect();
            picks.sort_unstable();
            picks.into_iter().map(|i| to_loc(layer.decode(i))).collect()
        }
        Sampling::StratifiedPerBit => {
            // Pool of (kind, elements) pairs holding each bit.
            let all_bits: BTreeSet<u8> = layer.parts.iter().flat_map(|p| p.bits.iter().copied()).collect();
            let pools: Vec<(u8, Vec<(ParamKind, usize)>)> = all_bits
                .iter()
                .rev()
                .map(|&b| {
                    let members = layer.parts.iter().filter(|p| p.bits.contains(&b)).map(|p| (p.kind, p.elements)).collect();
                    (b, members)
                })
                .collect();
            let sizes: Vec<usize> = pools.iter().map(|(_, m)| m.iter().map(|x| x.1).sum()).collect();
            let mut quota = vec![0usize; pools.len()];
            let mut left = n;
            while left > 0 {
                let mut progressed = false;
                for i in 0..pools.len() {
                    if left > 0 && quota[i] < sizes[i] {
                        quota[i] += 1;
                        left -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            let mut out = Vec::with_capacity(n);
            for ((bit, members), (&q, &size)) in pools.iter().zip(quota.iter().zip(&sizes)) {
                let mut rng = rng_for(seed, &[0x6269_7473, lid, *bit as u64]);
                let mut picks = index::sample(&mut rng, size, q).into_vec();
                picks.sort_unstable();
                for mut i in picks {
                    for &(kind, elements) in members {
                        if i < elements {
                            out.push(to_loc((kind, i, *bit)));
                            break;
                        }
                        i -= elements;
                    }
                }
            }
            out.sort();
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ActivationKind;
    use crate::model::build_unet;
    use proptest::prelude::*;

    fn oracle(n: u64) -> u64 {
        // Exact rational form: n * t^2 p(1-p) / (t^2 p(1-p) + e^2 (n-1)),
        // with t^2 p(1-p) = 0.9604 = 2401/2500 and e^2 = 1/1600.
        let (num, den) = (n as u128 * 2401 * 1600, 2401u128 * 1600 + (n as u128 - 1) * 2500);
        num.div_ceil(den) as u64
    }

    fn defaults(n: u64) -> u64 {
        sample_size(n, 0.025, 1.96, 0.5, 1550).unwrap()
    }

    #[test]
    fn reference_sizes() {
        assert_eq!(defaults(1), 1);
        assert_eq!(defaults(1000), oracle(1000));
        assert_eq!(oracle(1000), 607);
        assert_eq!(defaults(1_000_000), 1535);
        assert_eq!(defaults(384), oracle(384));
        assert_eq!(oracle(384), 308);
        assert_eq!(sample_size(u64::MAX / 2, 0.025, 1.96, 0.5, u64::MAX).unwrap(), 1537);
    }

    #[test]
    fn invalid_parameters() {
        assert!(sample_size(10, 0.0, 1.96, 0.5, 10).is_err());
        assert!(sample_size(10, 0.1, -1.0, 0.5, 10).is_err());
        assert!(sample_size(10, 0.1, 1.96, 1.0, 10).is_err());
        assert!(sample_size(10, 0.1, 1.96, 0.5, 0).is_err());
        assert!(sample_size(0, 0.1, 1.96, 0.5, 10).is_err());
    }

    proptest! {
        #[test]
        fn matches_rational_oracle(n in 1u64..10_000_000) {
            prop_assert_eq!(sample_size(n, 0.025, 1.96, 0.5, u64::MAX).unwrap(), oracle(n));
        }

        #[test]
        fn monotone_and_bounded(n in 1u64..10_000_000, e in 0.005f64..0.5, p in 0.05f64..0.95, cap in 1u64..5000) {
            let a = sample_size(n, e, 1.96, p, cap).unwrap();
            let b = sample_size(n + 1, e, 1.96, p, cap).unwrap();
            prop_assert!(a <= b);
            let bound = (1.96f64 * 1.96 * p * (1.0 - p) / (e * e)).ceil() as u64 + 1;
            prop_assert!(a <= cap.min(bound).min(n));
        }
    }

    #[test]
    fn config_toml_round_trip_and_errors() {
        let c = CampaignConfig { seed: 9, bits: Some(vec![30]), ..Default::default() };
        assert_eq!(CampaignConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = CampaignConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(d.e, 0.025);
        assert_eq!(d.included_kinds, default_kinds());
        let err = CampaignConfig::from_toml("seed = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(CampaignConfig::from_toml("e = 2.0\n").is_err());
        let f = CampaignConfig::from_toml("[inputs]\nkind = \"files\"\npaths = [\"a.sbut\"]\n").unwrap();
        assert!(matches!(f.inputs, InputSpec::Files { .. }));
    }

    #[test]
    fn plan_respects_cap_and_filters() {
        let m = build_unet(2, 4, 3, 4, ActivationKind::Relu, 1).unwrap();
        let c = CampaignConfig { cap: 10, ..Default::default() };
        let p = plan(&m, &c).unwrap();
        assert!(p.layers.iter().all(|l| l.injections <= 10 && l.injections <= l.population));
        let none = CampaignConfig { included_kinds: vec![], ..Default::default() };
        assert!(matches!(plan(&m, &none), Err(Error::EmptyFaultSpace(_))));
        let bias30 = CampaignConfig {
            included_kinds: vec![ParamKind::ConvBias],
            bits: Some(vec![30]),
            layers: Some(vec![m.output_id()]),
            ..Default::default()
        };
        let p = plan(&m, &bias30).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].population, 4);
        let bad = CampaignConfig { layers: Some(vec![0]), ..Default::default() };
        assert!(plan(&m, &bad).is_err());
    }

    fn check_sampling(sampling: Sampling, seed: u64) {
        let m = build_unet(1, 2, 1, 2, ActivationKind::Relu, 2).unwrap();
        let c = CampaignConfig { sampling, ..Default::default() };
        let p = plan(&m, &c).unwrap();
        for l in &p.layers {
            let locs = sample_layer(l, sampling, seed);
            assert_eq!(locs.len() as u64, l.injections);
            let uniq: BTreeSet<_> = locs.iter().collect();
            assert_eq!(uniq.len(), locs.len());
            for loc in &locs {
                crate::inject::ModelView::validate_location(&m, loc).unwrap();
                assert!(l.parts.iter().any(|p| p.kind == loc.kind && p.bits.contains(&loc.bit)));
            }
            assert_eq!(locs, sample_layer(l, sampling, seed));
        }
    }

    #[test]
    fn sampled_locations_are_valid_and_unique() {
        for s in 0..3 {
            check_sampling(Sampling::UniformLayer, s);
            check_sampling(Sampling::StratifiedPerBit, s);
        }
    }

    #[test]
    fn stratified_quota_is_even() {
        let m = build_unet(2, 4, 3, 4, ActivationKind::Relu, 1).unwrap();
        let c = CampaignConfig { sampling: Sampling::StratifiedPerBit, ..Default::default() };
        let p = plan(&m, &c).unwrap();
        let l = p.layers.iter().max_by_key(|l| l.population).unwrap();
        let locs = sample_layer(l, Sampling::StratifiedPerBit, 0);
        let mut per_bit = [0u64; 32];
        for loc in &locs {
            per_bit[loc.bit as usize] += 1;
        }
        let (lo, hi) = (per_bit.iter().min().unwrap(), per_bit.iter().max().unwrap());
        assert!(hi - lo <= 1, "{per_bit:?}");
    }

    #[test]
    fn exhaustive_single_parameter_covers_all_bits() {
        let l = LayerPlan {
            layer_id: 1,
            population: 32,
            injections: 32,
            parts: vec![SpacePart { kind: ParamKind::ConvBias, elements: 1, bits: (0..32).collect() }],
        };
        for s in [Sampling::UniformLayer, Sampling::StratifiedPerBit] {
            let bits: Vec<u8> = sample_layer(&l, s, 5).iter().map(|l| l.bit).collect();
            let mut sorted = bits.clone();
            sorted.sort();
            assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        }
    }
}
