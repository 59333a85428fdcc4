//! Campaign execution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate, plan, sample_layer, CampaignConfig, CampaignPlan, ErrorMatrix, InputMode};
use crate::error::{Error, Result};
use crate::inject::{BitField, FaultLocation, FlipDirection, ModelView, ValueKind};
use crate::kernels::argmax_classes;
use crate::model::{forward_all, forward_from, ModelGraph};
use crate::rng::derive_seed;
use crate::tensor::{ClassMap, Tensor};

/// Outcome of one fault on one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub location: FaultLocation,
    pub direction: FlipDirection,
    pub field: BitField,
    pub pre_bits: u32,
    pub post_bits: u32,
    pub post_kind: ValueKind,
    pub input_id: usize,
    /// Fraction of pixels whose class differs from the golden map.
    pub error_rate: f64,
}

/// Fraction of pixels whose class differs between two maps.
pub fn pixel_mismatch_rate(golden: &ClassMap, faulty: &ClassMap) -> Result<f64> {
    if !golden.same_shape(faulty) {
        return Err(Error::Shape(format!(
            "class maps {}x{} and {}x{}",
            golden.height(),
            golden.width(),
            faulty.height(),
            faulty.width()
        )));
    }
    let diff = golden.classes().iter().zip(faulty.classes()).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / golden.len() as f64)
}

/// Fault-free activations and class maps of one model on a set of inputs.
#[derive(Debug, Clone)]
pub struct GoldenCache {
    model_digest: String,
    inputs: Vec<Tensor>,
    activations: Vec<Vec<Tensor>>,
    golden: Vec<ClassMap>,
}

impl GoldenCache {
    pub fn new(model: &ModelGraph, inputs: Vec<Tensor>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("campaign needs at least one input".into()));
        }
        let activations: Vec<Vec<Tensor>> =
            inputs.iter().map(|x| forward_all(model, model, x)).collect::<Result<_>>()?;
        let golden = activations
            .iter()
            .map(|a| {
                let out = a.last().unwrap();
                match out.dtype() {
                    crate::tensor::DType::F32 => argmax_classes(out),
                    _ => argmax_classes(&crate::kernels::dequantize_tensor(out)?),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { model_digest: model.digest(), inputs, activations, golden })
    }

    pub fn model_digest(&self) -> &str {
        &self.model_digest
    }

    pub fn golden(&self, input_id: usize) -> Option<&ClassMap> {
        self.golden.get(input_id)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Applies `loc`, runs every listed input from the faulty layer on,
    /// and reverts.
    fn inject(&self, model: &ModelGraph, loc: FaultLocation, input_ids: &[usize]) -> Result<Vec<InjectionRecord>> {
        let mut view = ModelView::new(model);
        let h = view.apply_fault(loc)?;
        let mut out = Vec::with_capacity(input_ids.len());
        for &i in input_ids {
            let logits = forward_from(model, &view, &self.inputs[i], &self.activations[i], loc.layer_id)?;
            let map = argmax_classes(&logits)?;
            out.push(InjectionRecord {
                location: loc,
                direction: h.classification.direction,
                field: h.classification.field,
                pre_bits: h.pre_bits,
                post_bits: h.post_bits,
                post_kind: h.classification.post_kind,
                input_id: i,
                error_rate: pixel_mismatch_rate(&self.golden[i], &map)?,
            });
        }
        view.revert(h)?;
        Ok(out)
    }
}

/// Executes a plan. `jobs = 1` runs serially; other values size a worker
/// pool (0 = all cores). Output order and content do not depend on `jobs`.
pub fn run_planned(
    model: &ModelGraph,
    plan: &CampaignPlan,
    seed: u64,
    input_mode: InputMode,
    cache: &GoldenCache,
    jobs: usize,
) -> Result<Vec<InjectionRecord>> {
    if cache.model_digest != model.digest() {
        return Err(Error::InvalidArgument("golden cache belongs to a different model".into()));
    }
    let all_inputs: Vec<usize> = (0..cache.len()).collect();
    let mut tasks: Vec<(FaultLocation, Vec<usize>)> = Vec::with_capacity(plan.total_injections() as usize);
    for layer in &plan.layers {
        for (j, loc) in sample_layer(layer, plan.sampling, seed).into_iter().enumerate() {
            let ids = match input_mode {
                InputMode::All => all_inputs.clone(),
                InputMode::Single => {
                    let pick = derive_seed(seed, &[0x696e_7075, layer.layer_id as u64, j as u64]) % cache.len() as u64;
                    vec![pick as usize]
                }
            };
            tasks.push((loc, ids));
        }
    }
    let work = |t: &(FaultLocation, Vec<usize>)| cache.inject(model, t.0, &t.1);
    let nested: Vec<Vec<InjectionRecord>> = if jobs == 1 {
        tasks.iter().map(work).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(work).collect::<Result<_>>())?
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Plans, runs and aggregates a campaign over `inputs`.
pub fn run_campaign(
    model: &ModelGraph,
    config: &CampaignConfig,
    inputs: Vec<Tensor>,
    jobs: usize,
) -> Result<(CampaignPlan, Vec<InjectionRecord>, ErrorMatrix)> {
    let p = plan(model, config)?;
    let cache = GoldenCache::new(model, inputs)?;
    let records = run_planned(model, &p, config.seed, config.input_mode, &cache, jobs)?;
    let matrix = aggregate(&records)?;
    Ok((p, records, matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ActivationKind;
    use crate::model::{build_bias_probe_model, build_unet, infer, synthetic_inputs, DTypeMode, LayerKind, LayerNode, ParamKind};
    use crate::inject::ModelView as View;

    fn map(classes: Vec<u16>) -> ClassMap {
        ClassMap::new(3, 4, classes).unwrap()
    }

    #[test]
    fn mismatch_examples() {
        let a = map(vec![0; 12]);
        assert_eq!(pixel_mismatch_rate(&a, &a).unwrap(), 0.0);
        assert_eq!(pixel_mismatch_rate(&a, &map(vec![1; 12])).unwrap(), 1.0);
        let mut c = vec![0; 12];
        c[..3].fill(2);
        assert_eq!(pixel_mismatch_rate(&a, &map(c)).unwrap(), 0.25);
        assert!(pixel_mismatch_rate(&a, &ClassMap::new(4, 3, vec![0; 12]).unwrap()).is_err());
    }

    #[test]
    fn incremental_matches_full_inference() {
        let m = build_unet(2, 4, 3, 3, ActivationKind::Sigmoid, 3).unwrap();
        let x = synthetic_inputs(3, 16, 16, 1, 4).pop().unwrap();
        let cache = GoldenCache::new(&m, vec![x.clone()]).unwrap();
        assert_eq!(cache.golden(0).unwrap(), &infer(&m, &x).unwrap());
        for (layer, kind, bit) in [(1, ParamKind::ConvWeight, 27u8), (2, ParamKind::BnGamma, 30), (m.output_id(), ParamKind::ConvBias, 29)] {
            let loc = FaultLocation { layer_id: layer, kind, index: 1, bit };
            let r = cache.inject(&m, loc, &[0]).unwrap().pop().unwrap();
            let mut v = View::new(&m);
            v.apply_fault(loc).unwrap();
            let full = infer(&v.materialize(), &x).unwrap();
            assert_eq!(r.error_rate, pixel_mismatch_rate(cache.golden(0).unwrap(), &full).unwrap());
        }
    }

    #[test]
    fn determinism_and_job_independence() {
        let m = build_unet(1, 2, 3, 3, ActivationKind::Relu, 5).unwrap();
        let c = CampaignConfig { cap: 20, seed: 11, ..Default::default() };
        let inputs = synthetic_inputs(3, 16, 16, 2, 1);
        let (_, r1, m1) = run_campaign(&m, &c, inputs.clone(), 1).unwrap();
        let (_, r2, m2) = run_campaign(&m, &c, inputs.clone(), 4).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.iter().all(|r| (0.0..=1.0).contains(&r.error_rate)));
        let c2 = CampaignConfig { seed: 12, ..c };
        let (_, r3, _) = run_campaign(&m, &c2, inputs, 1).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn all_inputs_mode_records_every_input() {
        let m = build_unet(1, 2, 3, 3, ActivationKind::Relu, 5).unwrap();
        let c = CampaignConfig { cap: 3, input_mode: InputMode::All, ..Default::default() };
        let (p, r, _) = run_campaign(&m, &c, synthetic_inputs(3, 8, 8, 3, 1), 1).unwrap();
        assert_eq!(r.len() as u64, p.total_injections() * 3);
    }

    #[test]
    fn single_parameter_model_is_exhaustive() {
        let input = LayerNode::new(0, LayerKind::Input, vec![]);
        let conv = LayerNode::new(1, LayerKind::Conv { stride: 1, padding: 0 }, vec![0])
            .with_param(ParamKind::ConvWeight, Tensor::from_f32(vec![1, 1, 1, 1], vec![0.75]).unwrap());
        let mut conv = conv;
        conv.params.insert(ParamKind::ConvBias, Tensor::from_f32(vec![1], vec![0.0]).unwrap());
        let m = ModelGraph::new(vec![input, conv], 1, 1, DTypeMode::Float32, ActivationKind::Relu).unwrap();
        let c = CampaignConfig { included_kinds: vec![ParamKind::ConvWeight], ..Default::default() };
        let x = Tensor::from_f32(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let (p, r, _) = run_campaign(&m, &c, vec![x], 1).unwrap();
        assert_eq!(p.total_injections(), 32);
        let mut bits: Vec<u8> = r.iter().map(|r| r.location.bit).collect();
        bits.sort();
        assert_eq!(bits, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn probe_bias_campaign_matches_contributions() {
        let biases = [-0.85f32, 0.32, -0.03, 0.04, -0.17, 0.11];
        let freqs = [0.0, 0.4491, 0.0441, 0.2695, 0.0747, 0.1627];
        let (m, x) = build_bias_probe_model(&biases, &freqs, 64, 7).unwrap();
        let c = CampaignConfig {
            included_kinds: vec![ParamKind::ConvBias],
            bits: Some(vec![30]),
            layers: Some(vec![m.output_id()]),
            ..Default::default()
        };
        let (_, r, mat) = run_campaign(&m, &c, vec![x], 1).unwrap();
        assert_eq!(r.len(), 6);
        assert!((mat.global.mean - 0.3729).abs() < 0.005, "{}", mat.global.mean);
    }
}
