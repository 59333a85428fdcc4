//! Parametric U-Net builder and synthetic image generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DTypeMode, LayerKind, LayerNode, ModelGraph, ParamKind, DEFAULT_BN_EPS};
use crate::error::{Error, Result};
use crate::kernels::{self, ActivationKind};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Draws from `N(mean, std^2)` truncated to `mean ± 2 std`.
fn truncated_normal<R: Rng>(rng: &mut R, mean: f32, std: f32, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..n)
        .map(|_| loop {
            let z = normal.sample(rng);
            if z.abs() <= 2.0 {
                break mean + std * z;
            }
        })
        .collect()
}

struct Builder {
    nodes: Vec<LayerNode>,
    channels: Vec<usize>,
}

impl Builder {
    fn push(&mut self, kind: LayerKind, inputs: Vec<usize>, out_ch: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(LayerNode::new(id, kind, inputs));
        self.channels.push(out_ch);
        id
    }

    fn conv<R: Rng>(&mut self, rng: &mut R, input: usize, out_ch: usize, k: usize) -> usize {
        let in_ch = self.channels[input];
        let fan_in = (in_ch * k * k) as f32;
        let w = truncated_normal(rng, 0.0, (2.0 / fan_in).sqrt(), out_ch * in_ch * k * k);
        let b = truncated_normal(rng, 0.0, 0.02, out_ch);
        let id = self.push(LayerKind::Conv { stride: 1, padding: k / 2 }, vec![input], out_ch);
        let node = &mut self.nodes[id];
        node.params.insert(ParamKind::ConvWeight, Tensor::from_f32(vec![out_ch, in_ch, k, k], w).unwrap());
        node.params.insert(ParamKind::ConvBias, Tensor::from_f32(vec![out_ch], b).unwrap());
        id
    }

    fn bn<R: Rng>(&mut self, rng: &mut R, input: usize) -> usize {
        let c = self.channels[input];
        let gamma = truncated_normal(rng, 1.0, 0.15, c);
        let beta = truncated_normal(rng, 0.0, 0.1, c);
        let id = self.push(LayerKind::BatchNorm { eps: DEFAULT_BN_EPS }, vec![input], c);
        let node = &mut self.nodes[id];
        let t = |v: Vec<f32>| Tensor::from_f32(vec![c], v).unwrap();
        node.params.insert(ParamKind::BnGamma, t(gamma));
        node.params.insert(ParamKind::BnBeta, t(beta));
        // running statistics are measured after the graph is complete
        node.params.insert(ParamKind::BnMean, t(vec![0.0; c]));
        node.params.insert(ParamKind::BnVar, t(vec![1.0; c]));
        id
    }

    /// conv3x3 -> BN -> act, twice.
    fn double_conv<R: Rng>(&mut self, rng: &mut R, input: usize, out_ch: usize, act: ActivationKind) -> usize {
        let mut x = input;
        for _ in 0..2 {
            let c = self.conv(rng, x, out_ch, 3);
            let b = self.bn(rng, c);
            x = self.push(LayerKind::Activation(act), vec![b], out_ch);
        }
        x
    }
}

/// Builds a U-Net with `depth` pooling stages.
///
/// Each stage is two conv3x3/BN/activation blocks; the decoder upsamples,
/// concatenates the matching encoder output and applies another double
/// block; a 1x1 convolution produces the class logits. Weights are drawn
/// from a truncated He-normal distribution, gammas from `N(1, 0.15)`
/// truncated, and batch-norm running statistics are measured on a
/// synthetic image so the float model is well conditioned. After each
/// measurement the preceding convolution is zero-centred per filter and
/// rescaled towards unit output variance (capped so no weight exceeds 1.5).
pub fn build_unet(
    depth: usize,
    base_channels: usize,
    n_input_channels: usize,
    n_classes: usize,
    activation: ActivationKind,
    seed: u64,
) -> Result<ModelGraph> {
    if depth == 0 || depth > 8 {
        return Err(Error::InvalidArgument(format!("depth must be in 1..=8, got {depth}")));
    }
    if base_channels == 0 || n_input_channels == 0 || n_classes == 0 {
        return Err(Error::InvalidArgument("channel and class counts must be at least 1".into()));
    }
    if n_classes > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("too many classes: {n_classes}")));
    }
    let mut rng = rng_for(seed, &[0x756e_6574]);
    let mut b = Builder { nodes: Vec::new(), channels: Vec::new() };
    let input = b.push(LayerKind::Input, vec![], n_input_channels);

    let mut x = input;
    let mut skips = Vec::with_capacity(depth);
    for stage in 0..depth {
        x = b.double_conv(&mut rng, x, base_channels << stage, activation);
        skips.push(x);
        x = b.push(LayerKind::MaxPool2, vec![x], base_channels << stage);
    }
    x = b.double_conv(&mut rng, x, base_channels << depth, activation);
    for stage in (0..depth).rev() {
        let up = b.push(LayerKind::Upsample2, vec![x], b.channels[x]);
        let skip = skips[stage];
        let cat = b.push(LayerKind::Concat, vec![up, skip], b.channels[up] + b.channels[skip]);
        x = b.double_conv(&mut rng, cat, base_channels << stage, activation);
    }
    b.conv(&mut rng, x, n_classes, 1);

    let mut model = ModelGraph::new(b.nodes, n_classes, n_input_channels, DTypeMode::Float32, activation)?;
    let size = (1usize << depth).max(32);
    let calib = synthetic_input(n_input_channels, size, size, seed ^ 0x6361_6c69);
    calibrate_batch_norm(&mut model, &calib)?;
    Ok(model)
}

/// Sets each BN's running statistics from the preceding conv's output on
/// `image`, rescaling that conv to unit output variance first.
fn calibrate_batch_norm(model: &mut ModelGraph, image: &Tensor) -> Result<()> {
    let n = model.nodes().len();
    let mut outs: Vec<Tensor> = Vec::with_capacity(n);
    for id in 0..n {
        if let LayerKind::BatchNorm { .. } = model.nodes()[id].kind {
            let conv_id = model.nodes()[id].inputs[0];
            center_filters(model, conv_id);
            let centered = eval_single(&model.nodes()[conv_id], image, &[&outs[model.nodes()[conv_id].inputs[0]]])?;
            let (_, var) = channel_stats(&centered)?;
            let peak = filter_peaks(model, conv_id);
            let scale: Vec<f32> = var
                .iter()
                .zip(&peak)
                .map(|(&v, &p)| {
                    let unit = if v > 1e-8 { 1.0 / v.sqrt() } else { 1.0 };
                    if p > 0.0 { unit.min(MAX_WEIGHT / p) } else { unit }
                })
                .collect();
            rescale_conv(model, conv_id, &scale);
            let node = &model.nodes()[conv_id];
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &outs[i]).collect();
            let rescaled = eval_single(node, image, &ins)?;
            outs[conv_id] = rescaled;
            let (mean2, var2) = channel_stats(&outs[conv_id])?;
            let node = &mut model.nodes[id];
            node.params.insert(ParamKind::BnMean, Tensor::from_f32(vec![mean2.len()], mean2)?);
            node.params.insert(ParamKind::BnVar, Tensor::from_f32(vec![var2.len()], var2.iter().map(|v| v.max(1e-4)).collect())?);
        }
        let node = &model.nodes()[id];
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &outs[i]).collect();
        let out = eval_single(node, image, &ins)?;
        outs.push(out);
    }
    Ok(())
}

/// Float evaluation of one node with the checked batch-norm kernel.
fn eval_single(node: &LayerNode, image: &Tensor, ins: &[&Tensor]) -> Result<Tensor> {
    match node.kind {
        LayerKind::Input => Ok(image.clone()),
        LayerKind::Conv { stride, padding } => kernels::conv2d(
            ins[0],
            node.param(ParamKind::ConvWeight).unwrap(),
            node.param(ParamKind::ConvBias).unwrap(),
            stride,
            padding,
            None,
        ),
        LayerKind::BatchNorm { eps } => kernels::batch_norm(
            ins[0],
            node.param(ParamKind::BnGamma).unwrap(),
            node.param(ParamKind::BnBeta).unwrap(),
            node.param(ParamKind::BnMean).unwrap(),
            node.param(ParamKind::BnVar).unwrap(),
            eps,
        ),
        LayerKind::Activation(kind) => kernels::activation(ins[0], kind),
        LayerKind::MaxPool2 => kernels::max_pool2(ins[0]),
        LayerKind::Upsample2 => kernels::upsample2(ins[0]),
        LayerKind::Concat => kernels::concat_channels(ins[0], ins[1]),
    }
}

/// Largest weight magnitude the rescaling may produce.
const MAX_WEIGHT: f32 = 1.5;

/// Subtracts each filter's mean so its output ignores the input DC level.
fn center_filters(model: &mut ModelGraph, conv_id: usize) {
    let w = model.param_mut(conv_id, ParamKind::ConvWeight).unwrap();
    let per_filter = w.len() / w.shape()[0];
    let mut data = w.as_f32().unwrap().to_vec();
    if per_filter > 1 {
        for f in data.chunks_mut(per_filter) {
            let m = f.iter().sum::<f32>() / per_filter as f32;
            f.iter_mut().for_each(|v| *v -= m);
        }
    }
    *w = Tensor::from_f32(w.shape().to_vec(), data).unwrap();
}

fn filter_peaks(model: &ModelGraph, conv_id: usize) -> Vec<f32> {
    let w = model.node(conv_id).unwrap().param(ParamKind::ConvWeight).unwrap();
    let per_filter = w.len() / w.shape()[0];
    w.as_f32().unwrap().chunks(per_filter).map(|f| f.iter().fold(0.0f32, |a, v| a.max(v.abs()))).collect()
}

fn rescale_conv(model: &mut ModelGraph, conv_id: usize, scale: &[f32]) {
    let w = model.param_mut(conv_id, ParamKind::ConvWeight).unwrap();
    let per_filter = w.len() / scale.len();
    let mut data = w.as_f32().unwrap().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        *v *= scale[i / per_filter];
    }
    *w = Tensor::from_f32(w.shape().to_vec(), data).unwrap();
    let b = model.param_mut(conv_id, ParamKind::ConvBias).unwrap();
    let data: Vec<f32> = b.as_f32().unwrap().iter().zip(scale).map(|(v, s)| v * s).collect();
    *b = Tensor::from_f32(b.shape().to_vec(), data).unwrap();
}

/// Per-channel mean and population variance of a feature map.
fn channel_stats(t: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (c, h, w, _) = kernels::chw(t)?;
    let x = t.f32_or_err("statistics input")?;
    let plane = h * w;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let p = &x[ch * plane..(ch + 1) * plane];
        let m = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / plane as f64;
        mean.push(m as f32);
        var.push(v as f32);
    }
    Ok((mean, var))
}

/// Piecewise-constant synthetic image: a handful of Voronoi regions, each
/// with its own random channel vector, plus mild Gaussian noise. Values
/// stay roughly within `[-1.2, 1.2]`.
pub fn synthetic_input(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[0x696d_6167]);
    let regions = 6;
    let centers: Vec<(f32, f32)> = (0..regions)
        .map(|_| (rng.random_range(0.0..height as f32), rng.random_range(0.0..width as f32)))
        .collect();
    let colors: Vec<Vec<f32>> = (0..regions)
        .map(|_| (0..channels).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let mut owner = vec![0usize; height * width];
    for y in 0..height {
        for x in 0..width {
            let d = |&(cy, cx): &(f32, f32)| (cy - y as f32).powi(2) + (cx - x as f32).powi(2);
            owner[y * width + x] = (0..regions)
                .min_by(|&a, &b| d(&centers[a]).total_cmp(&d(&centers[b])))
                .unwrap();
        }
    }
    let mut data = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for &r in &owner {
            data.push(colors[r][c] + noise.sample(&mut rng));
        }
    }
    Tensor::from_f32(vec![channels, height, width], data).unwrap()
}

/// `count` synthetic images with seeds derived from `seed`.
pub fn synthetic_inputs(channels: usize, height: usize, width: usize, count: usize, seed: u64) -> Vec<Tensor> {
    (0..count)
        .map(|i| synthetic_input(channels, height, width, crate::rng::derive_seed(seed, &[i as u64])))
        .collect()
}

#[cfg(test)]
fn golden_logits(model: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    super::exec::logits(model, model, image)
}
