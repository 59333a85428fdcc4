//! Models with engineered golden class frequencies and classifier biases.

use rand::seq::SliceRandom;

use super::{DTypeMode, LayerKind, LayerNode, ModelGraph, ParamKind};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Template logit margin. Any fault-free bias set spanning less than this
/// leaves the template class on top at every pixel.
const TEMPLATE_GAIN: f32 = 16.0;

/// Pixel counts per class by largest remainder, summing to `pixels`.
fn apportion(freqs: &[f64], pixels: usize) -> Vec<usize> {
    let total: f64 = freqs.iter().sum();
    let exact: Vec<f64> = freqs.iter().map(|f| f / total * pixels as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = pixels - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Builds a model and an input image whose golden class map has the
/// requested class frequencies and whose classifier biases are exactly
/// `bias_values`.
///
/// The image is a one-hot class template (`n_classes` channels, `size` x
/// `size`, pixels assigned to classes in a seeded random order). The model
/// passes it through an identity conv3x3/BN/ReLU block and a 1x1
/// classifier with weight `16 * I` and the given biases, so each pixel's
/// logits are dominated by its template class.
pub fn build_bias_probe_model(
    bias_values: &[f32],
    class_freqs: &[f64],
    size: usize,
    seed: u64,
) -> Result<(ModelGraph, Tensor)> {
    let n = bias_values.len();
    if n == 0 || class_freqs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need one frequency per bias, got {} biases and {} frequencies",
            n,
            class_freqs.len()
        )));
    }
    if let Some(f) = class_freqs.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
        return Err(Error::InvalidArgument(format!("class frequency {f} is infeasible")));
    }
    let sum: f64 = class_freqs.iter().sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!("class frequencies sum to {sum}, expected 1")));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let span = bias_values.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
        - bias_values.iter().cloned().fold(f32::INFINITY, f32::min);
    if !(span < TEMPLATE_GAIN) {
        return Err(Error::InvalidArgument(format!(
            "bias spread {span} must stay below the template margin {TEMPLATE_GAIN}"
        )));
    }

    let pixels = size * size;
    let counts = apportion(class_freqs, pixels);
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(&mut rng_for(seed, &[0x7072_6f62]));
    let mut image = vec![0.0f32; n * pixels];
    let mut next = 0;
    for (class, &count) in counts.iter().enumerate() {
        for &p in &order[next..next + count] {
            image[class * pixels + p] = 1.0;
        }
        next += count;
    }
    let input = Tensor::from_f32(vec![n, size, size], image)?;

    let mut hidden_w = vec![0.0f32; n * n * 9];
    let mut head_w = vec![0.0f32; n * n];
    for c in 0..n {
        hidden_w[(c * n + c) * 9 + 4] = 1.0;
        head_w[c * n + c] = TEMPLATE_GAIN;
    }
    let f = |shape: Vec<usize>, v: Vec<f32>| Tensor::from_f32(shape, v);
    let nodes = vec![
        LayerNode::new(0, LayerKind::Input, vec![]),
        LayerNode::new(1, LayerKind::Conv { stride: 1, padding: 1 }, vec![0])
            .with_param(ParamKind::ConvWeight, f(vec![n, n, 3, 3], hidden_w)?)
            .with_param(ParamKind::ConvBias, f(vec![n], vec![0.0; n])?),
        LayerNode::new(2, LayerKind::BatchNorm { eps: 0.0 }, vec![1])
            .with_param(ParamKind::BnGamma, f(vec![n], vec![1.0; n])?)
            .with_param(ParamKind::BnBeta, f(vec![n], vec![0.0; n])?)
            .with_param(ParamKind::BnMean, f(vec![n], vec![0.0; n])?)
            .with_param(ParamKind::BnVar, f(vec![n], vec![1.0; n])?),
        LayerNode::new(3, LayerKind::Activation(ActivationKind::Relu), vec![2]),
        LayerNode::new(4, LayerKind::Conv { stride: 1, padding: 0 }, vec![3])
            .with_param(ParamKind::ConvWeight, f(vec![n, n, 1, 1], head_w)?)
            .with_param(ParamKind::ConvBias, f(vec![n], bias_values.to_vec())?),
    ];
    let model = ModelGraph::new(nodes, n, n, DTypeMode::Float32, ActivationKind::Relu)?;
    Ok((model, input))
}
