//! Graph execution over a parameter source.

use super::{DTypeMode, LayerKind, LayerNode, ModelGraph, ParamKind};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ClassMap, DType, Tensor};

/// Supplies parameter tensors by `(layer id, kind)`. Implemented by the
/// model itself and by fault overlays that substitute one tensor.
pub trait ParamSource {
    fn param(&self, layer: usize, kind: ParamKind) -> Option<&Tensor>;
}

impl ParamSource for ModelGraph {
    fn param(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        self.node(layer).and_then(|n| n.param(kind))
    }
}

fn get<'a, P: ParamSource + ?Sized>(params: &'a P, node: &LayerNode, kind: ParamKind) -> Result<&'a Tensor> {
    params
        .param(node.id, kind)
        .ok_or_else(|| Error::Graph(format!("node {} has no {kind}", node.id)))
}

fn eval_node<P: ParamSource + ?Sized>(
    model: &ModelGraph,
    params: &P,
    node: &LayerNode,
    image: &Tensor,
    inputs: &[&Tensor],
) -> Result<Tensor> {
    let int8 = model.dtype_mode() == DTypeMode::Int8;
    match node.kind {
        LayerKind::Input => {
            if int8 {
                kernels::quantize_tensor(image, node.out_quant.unwrap())
            } else {
                Ok(image.clone())
            }
        }
        LayerKind::Conv { stride, padding } => kernels::conv2d(
            inputs[0],
            get(params, node, ParamKind::ConvWeight)?,
            get(params, node, ParamKind::ConvBias)?,
            stride,
            padding,
            node.out_quant,
        ),
        LayerKind::BatchNorm { eps } => kernels::batch_norm_unchecked(
            inputs[0],
            get(params, node, ParamKind::BnGamma)?,
            get(params, node, ParamKind::BnBeta)?,
            get(params, node, ParamKind::BnMean)?,
            get(params, node, ParamKind::BnVar)?,
            eps,
        ),
        LayerKind::Activation(kind) => match node.out_quant {
            Some(q) if int8 => kernels::activation_i8(inputs[0], kind, q),
            _ => kernels::activation(inputs[0], kind),
        },
        LayerKind::MaxPool2 => kernels::max_pool2(inputs[0]),
        LayerKind::Upsample2 => kernels::upsample2(inputs[0]),
        LayerKind::Concat => match node.out_quant {
            Some(q) if int8 => kernels::concat_channels(
                &kernels::requantize_i8(inputs[0], q)?,
                &kernels::requantize_i8(inputs[1], q)?,
            ),
            _ => kernels::concat_channels(inputs[0], inputs[1]),
        },
    }
}

/// Runs the whole graph and returns every node's output, indexed by id.
pub fn forward_all<P: ParamSource + ?Sized>(model: &ModelGraph, params: &P, image: &Tensor) -> Result<Vec<Tensor>> {
    model.check_input(image)?;
    let mut outs: Vec<Tensor> = Vec::with_capacity(model.nodes().len());
    for node in model.nodes() {
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &outs[i]).collect();
        let out = eval_node(model, params, node, image, &ins)?;
        outs.push(out);
    }
    Ok(outs)
}

/// Recomputes nodes `start..` reusing `cached` outputs for every node before
/// `start`, and returns the f32 logits. Nodes before `start` cannot depend
/// on a parameter of node `start` because the graph is topologically ordered.
pub fn forward_from<P: ParamSource + ?Sized>(
    model: &ModelGraph,
    params: &P,
    image: &Tensor,
    cached: &[Tensor],
    start: usize,
) -> Result<Tensor> {
    let n = model.nodes().len();
    if cached.len() != n || start >= n {
        return Err(Error::InvalidArgument(format!(
            "cache holds {} of {n} node outputs, restart at {start}",
            cached.len()
        )));
    }
    let mut fresh: Vec<Option<Tensor>> = vec![None; n - start];
    for node in &model.nodes()[start..] {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|&i| if i < start { &cached[i] } else { fresh[i - start].as_ref().unwrap() })
            .collect();
        let out = eval_node(model, params, node, image, &ins)?;
        fresh[node.id - start] = Some(out);
    }
    to_logits(fresh.pop().flatten().unwrap())
}

fn to_logits(out: Tensor) -> Result<Tensor> {
    if out.dtype() == DType::F32 {
        Ok(out)
    } else {
        kernels::dequantize_tensor(&out)
    }
}

/// f32 logits of the model on one image.
pub fn logits<P: ParamSource + ?Sized>(model: &ModelGraph, params: &P, image: &Tensor) -> Result<Tensor> {
    let mut outs = forward_all(model, params, image)?;
    to_logits(outs.pop().unwrap())
}

/// Class map predicted by the fault-free model.
pub fn infer(model: &ModelGraph, image: &Tensor) -> Result<ClassMap> {
    kernels::argmax_classes(&logits(model, model, image)?)
}
