//! Structured filter pruning, batch-norm folding and 8-bit post-training
//! quantization.
//!
//! The supported pipeline is prune, then fold, then quantize. Every transform
//! is a pure `ModelGraph -> ModelGraph` function.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{argmax_classes, ActivationKind};
use crate::metrics::{giou_from_confusion, pooled_confusion, wiou_from_confusion};
use crate::model::{forward_all, infer, logits, DTypeMode, LayerKind, LayerNode, ModelGraph, ParamKind};
use crate::tensor::{ClassMap, QuantParams, Tensor};

/// Largest allowed per-layer pruning ratio.
pub const MAX_RATIO: f64 = 0.9;

/// Allowed metric drop, in points, before pruning must stop.
pub const STOP_THRESHOLD: f64 = 1.5;

/// Filter indices by ascending L1 norm, ties broken by lower index.
pub fn l1_filter_ranking(weight: &Tensor) -> Result<Vec<usize>> {
    if weight.shape().len() != 4 {
        return Err(Error::Shape(format!("conv weight must be 4-D, got {:?}", weight.shape())));
    }
    let filters = weight.shape()[0];
    let per = weight.len() / filters;
    let norms: Vec<f64> = (0..filters)
        .map(|f| (0..per).map(|i| weight.real_value(f * per + i).unwrap().abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..filters).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Number of filters removed from a layer of `channels` filters.
pub fn filters_removed(ratio: f64, channels: usize) -> usize {
    // the epsilon keeps e.g. 0.3 * 10 from landing on 2.9999999999999996
    (ratio * channels as f64 + 1e-9).floor() as usize
}

/// Per-layer pruning ratios. Layers not listed are left intact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub ratios: BTreeMap<usize, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    layer_id: usize,
    ratio: f64,
}

impl PruningPlan {
    /// Same ratio on every prunable conv.
    pub fn uniform(model: &ModelGraph, ratio: f64) -> Self {
        Self { ratios: prunable_layers(model).into_iter().map(|l| (l, ratio)).collect() }
    }

    pub fn single(layer: usize, ratio: f64) -> Self {
        Self { ratios: [(layer, ratio)].into_iter().collect() }
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        for (&l, &r) in &self.ratios {
            let node = model.node(l).ok_or_else(|| Error::InvalidArgument(format!("plan names unknown layer {l}")))?;
            if !matches!(node.kind, LayerKind::Conv { .. }) {
                return Err(Error::InvalidArgument(format!("layer {l} is not a convolution")));
            }
            if !(0.0..=MAX_RATIO).contains(&r) {
                return Err(Error::InvalidArgument(format!("layer {l} ratio {r} outside [0, {MAX_RATIO}]")));
            }
            if l == model.output_id() && r > 0.0 {
                return Err(Error::InvalidArgument("the classifier layer cannot be pruned".into()));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (&layer_id, &ratio) in &self.ratios {
            out.serialize(PlanRow { layer_id, ratio })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut ratios = BTreeMap::new();
        for row in rd.deserialize() {
            let row: PlanRow = row?;
            if ratios.insert(row.layer_id, row.ratio).is_some() {
                return Err(Error::InvalidArgument(format!("layer {} listed twice", row.layer_id)));
            }
        }
        Ok(Self { ratios })
    }
}

/// Convolutions eligible for pruning (all but the classifier).
pub fn prunable_layers(model: &ModelGraph) -> Vec<usize> {
    model.conv_ids().into_iter().filter(|&c| c != model.output_id()).collect()
}

/// Removes the lowest-L1 filters of each planned layer and drops the
/// matching channels downstream, through batch norms, activations,
/// resampling and concatenations.
pub fn apply_prune(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    if model.dtype_mode() != DTypeMode::Float32 {
        return Err(Error::InvalidArgument("pruning applies to float32 models; prune before quantizing".into()));
    }
    plan.validate(model)?;
    let orig_ch = model.channels()?;
    // kept[n]: original channel indices of node n's output that survive
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(model.nodes().len());
    let mut nodes = Vec::with_capacity(model.nodes().len());
    for n in model.nodes() {
        let mut node = n.clone();
        let k = match n.kind {
            LayerKind::Input => (0..orig_ch[0]).collect(),
            LayerKind::Conv { .. } => {
                let w = &n.params[&ParamKind::ConvWeight];
                let c = w.shape()[0];
                let ratio = plan.ratios.get(&n.id).copied().unwrap_or(0.0);
                let drop = filters_removed(ratio, c);
                if drop >= c {
                    return Err(Error::InvalidArgument(format!("ratio {ratio} would remove all {c} filters of layer {}", n.id)));
                }
                let mut keep: Vec<usize> = l1_filter_ranking(w)?[drop..].to_vec();
                keep.sort_unstable();
                let w2 = w.select_axis(0, &keep)?.select_axis(1, &kept[n.inputs[0]])?;
                let b2 = n.params[&ParamKind::ConvBias].select_axis(0, &keep)?;
                node.params.insert(ParamKind::ConvWeight, w2);
                node.params.insert(ParamKind::ConvBias, b2);
                keep
            }
            LayerKind::BatchNorm { .. } => {
                let keep = kept[n.inputs[0]].clone();
                for t in node.params.values_mut() {
                    *t = t.select_axis(0, &keep)?;
                }
                keep
            }
            LayerKind::Concat => {
                let (a, b) = (n.inputs[0], n.inputs[1]);
                kept[a].iter().copied().chain(kept[b].iter().map(|&i| i + orig_ch[a])).collect()
            }
            LayerKind::Activation(_) | LayerKind::MaxPool2 | LayerKind::Upsample2 => kept[n.inputs[0]].clone(),
        };
        kept.push(k);
        nodes.push(node);
    }
    ModelGraph::new(nodes, model.n_classes(), model.n_input_channels(), model.dtype_mode(), model.activation())
}

/// Metric values of one layer pruned at ratios 0.0, 0.1, ..., 0.9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub layer_id: usize,
    pub ratios: Vec<f64>,
    pub giou: Vec<f64>,
    pub wiou: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    layer_id: usize,
    ratio: f64,
    giou: f64,
    wiou: f64,
}

/// Writes curves as `layer_id,ratio,giou,wiou` rows.
pub fn write_curves_csv<W: Write>(curves: &[SensitivityCurve], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in curves {
        for i in 0..c.ratios.len() {
            out.serialize(CurveRow { layer_id: c.layer_id, ratio: c.ratios[i], giou: c.giou[i], wiou: c.wiou[i] })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Pooled GIoU and WIoU of `model` on `inputs` against `labels`.
pub fn evaluate(model: &ModelGraph, inputs: &[Tensor], labels: &[ClassMap]) -> Result<(f64, f64)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} inputs for {} label maps", inputs.len(), labels.len())));
    }
    let pairs: Vec<(ClassMap, ClassMap)> = inputs
        .iter()
        .zip(labels)
        .map(|(x, l)| infer(model, x).map(|p| (l.clone(), p)))
        .collect::<Result<_>>()?;
    let m = pooled_confusion(&pairs, model.n_classes())?;
    Ok((giou_from_confusion(&m), wiou_from_confusion(&m)))
}

/// Prunes only `layer`, at each of the ten ratios, and evaluates.
pub fn sensitivity_sweep(model: &ModelGraph, inputs: &[Tensor], labels: &[ClassMap], layer: usize) -> Result<SensitivityCurve> {
    let ratios: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let points: Vec<(f64, f64)> = ratios
        .par_iter()
        .map(|&r| evaluate(&apply_prune(model, &PruningPlan::single(layer, r))?, inputs, labels))
        .collect::<Result<_>>()?;
    Ok(SensitivityCurve {
        layer_id: layer,
        ratios,
        giou: points.iter().map(|p| p.0).collect(),
        wiou: points.iter().map(|p| p.1).collect(),
    })
}

/// Curves for every prunable layer.
pub fn sensitivity_sweep_all(model: &ModelGraph, inputs: &[Tensor], labels: &[ClassMap]) -> Result<Vec<SensitivityCurve>> {
    prunable_layers(model).into_par_iter().map(|l| sensitivity_sweep(model, inputs, labels, l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once GIoU or WIoU has dropped by more than 1.5 points.
pub fn stopping_check(baseline: (f64, f64), current: (f64, f64)) -> StopDecision {
    // tolerance absorbs decimal inputs such as 94.71 - 93.21
    let limit = STOP_THRESHOLD + 1e-9;
    if baseline.0 - current.0 > limit || baseline.1 - current.1 > limit {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Absorbs every batch norm into the convolution feeding it.
pub fn fold_batch_norm(model: &ModelGraph) -> Result<ModelGraph> {
    if model.dtype_mode() != DTypeMode::Float32 {
        return Err(Error::InvalidArgument("batch norm folding needs a float32 model".into()));
    }
    let src = model.nodes();
    let mut folded: BTreeMap<usize, LayerNode> = BTreeMap::new();
    let mut remap = vec![usize::MAX; src.len()];
    let mut nodes: Vec<LayerNode> = Vec::new();
    for n in src {
        if let LayerKind::BatchNorm { eps } = n.kind {
            let p = n.inputs[0];
            if !matches!(src[p].kind, LayerKind::Conv { .. }) || model.consumers(p).len() != 1 {
                return Err(Error::Graph(format!("batch norm {} does not directly follow a convolution", n.id)));
            }
            let conv = &mut nodes[remap[p]];
            let f = |k| n.params[&k].as_f32().unwrap();
            let (g, beta, mean, var) = (f(ParamKind::BnGamma), f(ParamKind::BnBeta), f(ParamKind::BnMean), f(ParamKind::BnVar));
            let w = conv.params[&ParamKind::ConvWeight].as_f32().unwrap().to_vec();
            let b = conv.params[&ParamKind::ConvBias].as_f32().unwrap().to_vec();
            let per = w.len() / b.len();
            let mut w2 = w.clone();
            let mut b2 = b.clone();
            for o in 0..b.len() {
                let s = g[o] as f64 / (var[o] as f64 + eps as f64).sqrt();
                for v in &mut w2[o * per..(o + 1) * per] {
                    *v = (*v as f64 * s) as f32;
                }
                b2[o] = ((b[o] as f64 - mean[o] as f64) * s + beta[o] as f64) as f32;
            }
            let wshape = conv.params[&ParamKind::ConvWeight].shape().to_vec();
            conv.params.insert(ParamKind::ConvWeight, Tensor::from_f32(wshape, w2)?);
            conv.params.insert(ParamKind::ConvBias, Tensor::from_f32(vec![b.len()], b2)?);
            folded.insert(n.id, conv.clone());
            remap[n.id] = remap[p];
            continue;
        }
        let mut node = n.clone();
        node.id = nodes.len();
        node.inputs = n.inputs.iter().map(|&i| remap[i]).collect();
        remap[n.id] = node.id;
        nodes.push(node);
    }
    ModelGraph::new(nodes, model.n_classes(), model.n_input_channels(), DTypeMode::Float32, model.activation())
}

/// Affine i8 parameters covering `[min(lo, 0), max(hi, 0)]`.
pub fn activation_quant(lo: f32, hi: f32) -> QuantParams {
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let range = hi - lo;
    let scale = if range > 0.0 && range.is_finite() { range / 255.0 } else { 1.0 };
    let zp = (-128.0 - lo / scale).round_ties_even().clamp(-128.0, 127.0) as i32;
    QuantParams::new(scale, zp).expect("valid activation quantization")
}

/// Symmetric i8 quantization of a weight tensor (zero point 0).
pub fn quantize_weights(w: &Tensor) -> Result<Tensor> {
    let v = w.f32_or_err("weight")?;
    let peak = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 && peak.is_finite() { peak / 127.0 } else { 1.0 };
    let q = QuantParams::new(scale, 0)?;
    let data = v.iter().map(|x| (x / scale).round_ties_even().clamp(-127.0, 127.0) as i8).collect();
    Tensor::from_i8(w.shape().to_vec(), data, q)
}

/// i32 bias with scale `input_scale * weight_scale`, saturating.
pub fn quantize_bias(b: &Tensor, input_scale: f32, weight_scale: f32) -> Result<Tensor> {
    let v = b.f32_or_err("bias")?;
    let scale = input_scale * weight_scale;
    let data = v
        .iter()
        .map(|x| (*x as f64 / scale as f64).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect();
    Tensor::from_i32(b.shape().to_vec(), data, QuantParams::new(scale, 0)?)
}

/// Converts a folded float model to int8 with per-tensor parameters
/// calibrated by min/max over `calibration`.
pub fn quantize_model(model: &ModelGraph, calibration: &[Tensor]) -> Result<ModelGraph> {
    if model.dtype_mode() != DTypeMode::Float32 {
        return Err(Error::InvalidArgument("model is already quantized".into()));
    }
    if calibration.is_empty() {
        return Err(Error::Empty("calibration set is empty".into()));
    }
    if let Some(n) = model.nodes().iter().find(|n| matches!(n.kind, LayerKind::BatchNorm { .. })) {
        return Err(Error::InvalidArgument(format!("fold batch norm {} before quantizing", n.id)));
    }
    let count = model.nodes().len();
    let mut lo = vec![f32::INFINITY; count];
    let mut hi = vec![f32::NEG_INFINITY; count];
    for x in calibration {
        for (i, t) in forward_all(model, model, x)?.iter().enumerate() {
            for &v in t.f32_or_err("activation")? {
                if v.is_finite() {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
            }
        }
    }
    // quantization of the tensor each node emits
    let mut tq: Vec<Option<QuantParams>> = vec![None; count];
    let mut nodes = Vec::with_capacity(count);
    for n in model.nodes() {
        let mut node = n.clone();
        match n.kind {
            LayerKind::Input | LayerKind::Activation(_) | LayerKind::Concat => {
                node.out_quant = Some(activation_quant(lo[n.id], hi[n.id]));
            }
            LayerKind::Conv { .. } => {
                let in_q = tq[n.inputs[0]].expect("producer quantized earlier");
                let w = quantize_weights(&n.params[&ParamKind::ConvWeight])?;
                let b = quantize_bias(&n.params[&ParamKind::ConvBias], in_q.scale, w.quant().unwrap().scale)?;
                node.params.insert(ParamKind::ConvWeight, w);
                node.params.insert(ParamKind::ConvBias, b);
                node.out_quant = (n.id != model.output_id()).then(|| {
                    // conv feeding only a ReLU takes the ReLU's range, so
                    // negative outputs clamp to zero in the requantization
                    match model.consumers(n.id).as_slice() {
                        [c] if model.nodes()[*c].kind == LayerKind::Activation(ActivationKind::Relu) => {
                            activation_quant(lo[*c], hi[*c])
                        }
                        _ => activation_quant(lo[n.id], hi[n.id]),
                    }
                });
            }
            LayerKind::MaxPool2 | LayerKind::Upsample2 => {}
            LayerKind::BatchNorm { .. } => unreachable!(),
        }
        tq[n.id] = node.out_quant.or(tq[n.inputs.first().copied().unwrap_or(0)]);
        nodes.push(node);
    }
    ModelGraph::new(nodes, model.n_classes(), model.n_input_channels(), DTypeMode::Int8, model.activation())
}

/// Class maps of `model` on every input.
pub fn class_maps(model: &ModelGraph, inputs: &[Tensor]) -> Result<Vec<ClassMap>> {
    inputs.iter().map(|x| argmax_classes(&logits(model, model, x)?)).collect()
}

/// Fraction of pixels, pooled over `inputs`, where two models disagree.
pub fn map_mismatch(a: &ModelGraph, b: &ModelGraph, inputs: &[Tensor]) -> Result<f64> {
    let (ma, mb) = (class_maps(a, inputs)?, class_maps(b, inputs)?);
    let (mut diff, mut total) = (0usize, 0usize);
    for (x, y) in ma.iter().zip(&mb) {
        if !x.same_shape(y) {
            return Err(Error::Shape("class maps differ in size".into()));
        }
        diff += x.classes().iter().zip(y.classes()).filter(|(p, q)| p != q).count();
        total += x.classes().len();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no inputs".into()));
    }
    Ok(diff as f64 / total as f64)
}
