//! Encoder-decoder model graphs and the parameter universe they expose.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerNode`]s in topological
//! order: node 0 is the image input, every node only reads from earlier
//! nodes and the last node produces the `[n_classes, H, W]` logits.
//! Parameter tensors are keyed by [`ParamKind`]; `(layer id, kind, element,
//! bit)` is the address of a single fault.

mod exec;
mod fault_space;
mod io;
mod probe;
mod unet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::tensor::{DType, QuantParams, Tensor};

pub use exec::{forward_all, forward_from, infer, logits, ParamSource};
pub use fault_space::{enumerate_fault_space, FaultSpace, FaultSpaceEntry};
pub use io::{load_model, load_tensor, model_from_bytes, model_to_bytes, save_model, save_tensor, tensor_from_bytes, tensor_to_bytes, FORMAT_VERSION};
pub use probe::build_bias_probe_model;
pub use unet::{build_unet, synthetic_input, synthetic_inputs};

/// Default batch-norm epsilon.
pub const DEFAULT_BN_EPS: f32 = 1e-3;

/// Role of a parameter tensor inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::ConvWeight,
        ParamKind::ConvBias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::BnMean,
        ParamKind::BnVar,
    ];

    /// Kinds injected by default: running statistics are left out.
    pub const DEFAULT_CAMPAIGN: [ParamKind; 4] =
        [ParamKind::ConvWeight, ParamKind::ConvBias, ParamKind::BnGamma, ParamKind::BnBeta];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::BnMean => "bn_mean",
            ParamKind::BnVar => "bn_var",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter kind '{s}'")))
    }
}

/// Operation performed by a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Input,
    Conv { stride: usize, padding: usize },
    BatchNorm { eps: f32 },
    Activation(ActivationKind),
    MaxPool2,
    Upsample2,
    Concat,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Activation(_) => "activation",
            LayerKind::MaxPool2 => "max_pool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Concat => "concat",
        }
    }

    fn expected_params(&self) -> &'static [ParamKind] {
        match self {
            LayerKind::Conv { .. } => &[ParamKind::ConvWeight, ParamKind::ConvBias],
            LayerKind::BatchNorm { .. } => &[ParamKind::BnGamma, ParamKind::BnBeta, ParamKind::BnMean, ParamKind::BnVar],
            _ => &[],
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Concat => 2,
            _ => 1,
        }
    }
}

impl PartialEq for LayerNode {
    fn eq(&self, other: &Self) -> bool {
        let kind_eq = match (self.kind, other.kind) {
            (LayerKind::BatchNorm { eps: a }, LayerKind::BatchNorm { eps: b }) => a.to_bits() == b.to_bits(),
            (a, b) => a == b,
        };
        kind_eq
            && self.id == other.id
            && self.inputs == other.inputs
            && self.params == other.params
            && self.out_quant == other.out_quant
    }
}

/// One operation in the graph.
#[derive(Debug, Clone)]
pub struct LayerNode {
    pub id: usize,
    pub kind: LayerKind,
    pub params: BTreeMap<ParamKind, Tensor>,
    pub inputs: Vec<usize>,
    /// Quantization of this node's i8 output in int8 mode. `None` on the
    /// float path and on the classifier, whose logits are dequantized.
    pub out_quant: Option<QuantParams>,
}

impl LayerNode {
    pub fn new(id: usize, kind: LayerKind, inputs: Vec<usize>) -> Self {
        Self { id, kind, params: BTreeMap::new(), inputs, out_quant: None }
    }

    pub fn with_param(mut self, kind: ParamKind, t: Tensor) -> Self {
        self.params.insert(kind, t);
        self
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor> {
        self.params.get(&kind)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Numeric regime of a whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeMode {
    Float32,
    Int8,
}

/// Validated model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    n_classes: usize,
    n_input_channels: usize,
    dtype_mode: DTypeMode,
    activation: ActivationKind,
}

impl ModelGraph {
    /// Builds and validates a graph.
    pub fn new(
        nodes: Vec<LayerNode>,
        n_classes: usize,
        n_input_channels: usize,
        dtype_mode: DTypeMode,
        activation: ActivationKind,
    ) -> Result<Self> {
        let g = Self { nodes, n_classes, n_input_channels, dtype_mode, activation };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_input_channels(&self) -> usize {
        self.n_input_channels
    }

    pub fn dtype_mode(&self) -> DTypeMode {
        self.dtype_mode
    }

    /// Activation the model was built with (recorded in the file header).
    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn output_id(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(LayerNode::param_count).sum()
    }

    /// Ids of nodes that read `id`.
    pub fn consumers(&self, id: usize) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.inputs.contains(&id)).map(|n| n.id).collect()
    }

    /// Conv node ids, in graph order.
    pub fn conv_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv { .. }))
            .map(|n| n.id)
            .collect()
    }

    /// SHA-256 over the serialized model, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(model_to_bytes(self)))
    }

    /// Mutable parameter access for transforms inside the crate. Callers
    /// must keep shapes intact.
    pub(crate) fn param_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut Tensor> {
        self.nodes.get_mut(layer).and_then(|n| n.params.get_mut(&kind))
    }

    /// Output channel count of every node.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let c = match n.kind {
                LayerKind::Input => self.n_input_channels,
                LayerKind::Conv { .. } => {
                    let w = n.param(ParamKind::ConvWeight).ok_or_else(|| Error::Graph(format!("conv {} has no weight", n.id)))?;
                    w.shape()[0]
                }
                LayerKind::Concat => ch[n.inputs[0]] + ch[n.inputs[1]],
                _ => ch[n.inputs[0]],
            };
            ch.push(c);
        }
        Ok(ch)
    }

    /// Smallest power of two the input height and width must be divisible by.
    pub fn spatial_multiple(&self) -> usize {
        // log2 downscale factor per node
        let mut level = vec![0i32; self.nodes.len()];
        let mut deepest = 0;
        for n in &self.nodes {
            level[n.id] = match n.kind {
                LayerKind::Input => 0,
                LayerKind::MaxPool2 => level[n.inputs[0]] + 1,
                LayerKind::Upsample2 => level[n.inputs[0]] - 1,
                _ => level[n.inputs[0]],
            };
            deepest = deepest.max(level[n.id]);
        }
        1 << deepest
    }

    fn validate(&self) -> Result<()> {
        let g = |m: String| Err(Error::Graph(m));
        if self.nodes.is_empty() {
            return g("graph has no nodes".into());
        }
        if self.n_classes == 0 || self.n_input_channels == 0 {
            return g("class and input channel counts must be positive".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return g(format!("node at position {i} has id {}", n.id));
            }
            if (i == 0) != matches!(n.kind, LayerKind::Input) {
                return g("exactly one input node is allowed and it must be node 0".into());
            }
            if n.inputs.len() != n.kind.arity() {
                return g(format!("node {i} ({}) has {} inputs, expected {}", n.kind.name(), n.inputs.len(), n.kind.arity()));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&p| p >= i) {
                return g(format!("node {i} reads node {bad}, which is not earlier in the graph"));
            }
            let expected = n.kind.expected_params();
            if n.params.len() != expected.len() || expected.iter().any(|k| !n.params.contains_key(k)) {
                return g(format!("node {i} ({}) must carry exactly {:?}", n.kind.name(), expected));
            }
            if let LayerKind::Conv { stride, .. } = n.kind {
                if stride == 0 {
                    return g(format!("conv {i} has stride 0"));
                }
            }
        }
        // exactly one sink, and it is the last node
        for n in &self.nodes[..self.nodes.len() - 1] {
            if self.consumers(n.id).is_empty() {
                return g(format!("node {} has no consumer; only the output node may be a sink", n.id));
            }
        }
        if !matches!(self.nodes.last().unwrap().kind, LayerKind::Conv { .. }) {
            return g("output node must be a convolution".into());
        }
        let ch = self.channels()?;
        for n in &self.nodes {
            match n.kind {
                LayerKind::Conv { .. } => {
                    let w = &n.params[&ParamKind::ConvWeight];
                    let b = &n.params[&ParamKind::ConvBias];
                    let [o, cin, _, _] = *w.shape() else {
                        return g(format!("conv {} weight must be 4-D, got {:?}", n.id, w.shape()));
                    };
                    if cin != ch[n.inputs[0]] {
                        return g(format!("conv {} expects {cin} input channels, producer gives {}", n.id, ch[n.inputs[0]]));
                    }
                    if b.shape() != [o] {
                        return g(format!("conv {} bias shape {:?} does not match {o} filters", n.id, b.shape()));
                    }
                }
                LayerKind::BatchNorm { eps } => {
                    let c = ch[n.inputs[0]];
                    for (k, t) in &n.params {
                        if t.shape() != [c] {
                            return g(format!("batch norm {} {k} has shape {:?}, expected [{c}]", n.id, t.shape()));
                        }
                        if t.dtype() != DType::F32 {
                            return g(format!("batch norm {} {k} must be f32", n.id));
                        }
                    }
                    let var = n.params[&ParamKind::BnVar].as_f32().unwrap();
                    if let Some((c, v)) = var.iter().enumerate().find(|(_, &v)| !(v + eps > 0.0)) {
                        return Err(Error::NonPositiveVariance { channel: c, value: v + eps });
                    }
                }
                _ => {}
            }
        }
        if ch[self.output_id()] != self.n_classes {
            return g(format!("output has {} channels, model declares {} classes", ch[self.output_id()], self.n_classes));
        }
        match self.dtype_mode {
            DTypeMode::Float32 => {
                for n in &self.nodes {
                    if n.params.values().any(|t| t.dtype() != DType::F32) || n.out_quant.is_some() {
                        return g(format!("float32 model has quantized data at node {}", n.id));
                    }
                }
            }
            DTypeMode::Int8 => self.validate_int8()?,
        }
        Ok(())
    }

    fn validate_int8(&self) -> Result<()> {
        let g = |m: String| Err(Error::Graph(m));
        let out = self.output_id();
        for n in &self.nodes {
            match n.kind {
                LayerKind::BatchNorm { .. } => return g(format!("int8 model still has batch norm node {}", n.id)),
                LayerKind::Conv { .. } => {
                    let w = &n.params[&ParamKind::ConvWeight];
                    let b = &n.params[&ParamKind::ConvBias];
                    if w.dtype() != DType::I8 || b.dtype() != DType::I32 {
                        return g(format!("int8 conv {} needs i8 weights and i32 bias", n.id));
                    }
                    if n.id != out && n.out_quant.is_none() {
                        return g(format!("int8 conv {} lacks output quantization", n.id));
                    }
                }
                LayerKind::Input | LayerKind::Activation(_) | LayerKind::Concat => {
                    if n.out_quant.is_none() {
                        return g(format!("int8 {} node {} lacks output quantization", n.kind.name(), n.id));
                    }
                }
                _ => {}
            }
        }
        if self.nodes[out].out_quant.is_some() {
            return g("int8 classifier output must be dequantized logits".into());
        }
        Ok(())
    }

    /// Checks that an input tensor fits this model.
    pub fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w, _) = crate::kernels::chw(input)?;
        if input.dtype() != DType::F32 {
            return Err(Error::InvalidArgument("model inputs are f32 images".into()));
        }
        if c != self.n_input_channels {
            return Err(Error::Shape(format!("input has {c} channels, model expects {}", self.n_input_channels)));
        }
        let m = self.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by {m}")));
        }
        Ok((h, w))
    }
}
