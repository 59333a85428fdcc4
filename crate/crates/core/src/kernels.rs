//! Inference kernels for single-image `[C, H, W]` feature maps.
//!
//! Every kernel also accepts a rank-4 `[1, C, H, W]` tensor and keeps the
//! leading batch axis on its output. The float path never masks NaN or
//! infinity: corrupted parameters must be allowed to poison the output.
//!
//! The integer path follows the usual 8-bit scheme: i8 activations and
//! weights, i32 biases, 32-bit accumulation and requantization with
//! round-to-nearest-even and saturation to `[-128, 127]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, DType, QuantParams, Tensor, TensorData};

/// Non-linearity applied after batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    HardSigmoid,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::HardSigmoid => "hard_sigmoid",
        }
    }

    /// Scalar definition on the float path.
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            // f32::max would swallow NaN
            ActivationKind::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::HardSigmoid => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    x / 6.0 + 0.5
                }
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Sigmoid => 1,
            ActivationKind::HardSigmoid => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActivationKind::Relu),
            1 => Some(ActivationKind::Sigmoid),
            2 => Some(ActivationKind::HardSigmoid),
            _ => None,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" | "sig" => Ok(ActivationKind::Sigmoid),
            "hard_sigmoid" | "hsig" | "hardsigmoid" => Ok(ActivationKind::HardSigmoid),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Splits a feature-map shape into `(channels, height, width, batched)`.
pub(crate) fn chw(t: &Tensor) -> Result<(usize, usize, usize, bool)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w, false)),
        [1, c, h, w] => Ok((*c, *h, *w, true)),
        other => Err(Error::Shape(format!("expected [C,H,W] or [1,C,H,W], got {other:?}"))),
    }
}

fn fm_shape(c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![1, c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output columns `ox` for which `ox*stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride) } else { 0 };
    lo.min(out_len)..hi.min(out_len)
}

struct ConvGeometry {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    batched: bool,
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (in_ch, h, w, batched) = chw(input)?;
    let [out_ch, w_in, kh, kw] = *weight.shape() else {
        return Err(Error::Shape(format!("conv weight must be [out, in, kh, kw], got {:?}", weight.shape())));
    };
    if w_in != in_ch {
        return Err(Error::Shape(format!("conv weight expects {w_in} input channels, input has {in_ch}")));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::Shape(format!("conv bias must be [{out_ch}], got {:?}", bias.shape())));
    }
    Ok(ConvGeometry {
        in_ch,
        h,
        w,
        out_ch,
        kh,
        kw,
        oh: conv_out_dim(h, kh, stride, pad)?,
        ow: conv_out_dim(w, kw, stride, pad)?,
        stride,
        pad,
        batched,
    })
}

/// 2-D convolution.
///
/// Float path: f32 input, weight and bias, f32 output; `out_quant` must be
/// `None`. Integer path: i8 input and weight, i32 bias with scale
/// `input_scale * weight_scale`. With `out_quant = Some(q)` the 32-bit
/// accumulator is requantized to i8 with `q`; with `None` it is dequantized
/// to f32 (used for the classifier logits).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_quant: Option<QuantParams>,
) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, stride, padding)?;
    match (input.dtype(), weight.dtype(), bias.dtype()) {
        (DType::F32, DType::F32, DType::F32) => {
            if out_quant.is_some() {
                return Err(Error::Quant("float convolution cannot requantize its output".into()));
            }
            conv2d_f32(&g, input.as_f32().unwrap(), weight.as_f32().unwrap(), bias.as_f32().unwrap())
        }
        (DType::I8, DType::I8, DType::I32) => conv2d_i8(&g, input, weight, bias, out_quant),
        (a, b, c) => Err(Error::InvalidArgument(format!(
            "unsupported dtype combination input={a:?} weight={b:?} bias={c:?}"
        ))),
    }
}

fn conv2d_f32(g: &ConvGeometry, x: &[f32], wt: &[f32], b: &[f32]) -> Result<Tensor> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; g.out_ch * plane];
    for o in 0..g.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(b[o]);
        for c in 0..g.in_ch {
            let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let rows = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                    let cols = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = cols.start + kx - g.pad;
                            let n = cols.len();
                            for (d, s) in dst_row[cols.clone()].iter_mut().zip(&src_row[ix0..ix0 + n]) {
                                *d += wv * *s;
                            }
                        } else {
                            for ox in cols.clone() {
                                dst_row[ox] += wv * src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_f32(fm_shape(g.out_ch, g.oh, g.ow, g.batched), out)
}

fn conv2d_i8(g: &ConvGeometry, input: &Tensor, weight: &Tensor, bias: &Tensor, out_quant: Option<QuantParams>) -> Result<Tensor> {
    let in_q = input.quant().ok_or_else(|| Error::Quant("i8 input without quantization parameters".into()))?;
    let w_q = weight.quant().ok_or_else(|| Error::Quant("i8 weight without quantization parameters".into()))?;
    let x = input.as_i8().unwrap();
    let wt = weight.as_i8().unwrap();
    let b = bias.as_i32().unwrap();
    let zp = in_q.zero_point;
    let plane = g.oh * g.ow;
    // i64 holds any exact partial sum; the final value is clamped to i32.
    let mut acc = vec![0i64; g.out_ch * plane];
    let centered: Vec<i32> = x.iter().map(|&v| v as i32 - zp).collect();
    for o in 0..g.out_ch {
        let dst = &mut acc[o * plane..(o + 1) * plane];
        dst.fill(b[o] as i64);
        for c in 0..g.in_ch {
            let src = &centered[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let rows = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx] as i64;
                    let cols = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in cols.clone() {
                            let ix = ox * g.stride + kx - g.pad;
                            dst[oy * g.ow + ox] += wv * src[iy * g.w + ix] as i64;
                        }
                    }
                }
            }
        }
    }
    let acc_scale = in_q.scale as f64 * w_q.scale as f64;
    let shape = fm_shape(g.out_ch, g.oh, g.ow, g.batched);
    let saturate = |a: i64| a.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
    match out_quant {
        Some(q) => {
            let mult = acc_scale / q.scale as f64;
            let data = acc
                .iter()
                .map(|&a| requantize(saturate(a), mult, q.zero_point))
                .collect();
            Tensor::from_i8(shape, data, q)
        }
        None => {
            let data = acc.iter().map(|&a| (saturate(a) as f64 * acc_scale) as f32).collect();
            Tensor::from_f32(shape, data)
        }
    }
}

/// `round_half_even(acc * multiplier) + zero_point`, saturated to i8.
#[inline]
pub fn requantize(acc: i32, multiplier: f64, zero_point: i32) -> i8 {
    let q = (acc as f64 * multiplier).round_ties_even() + zero_point as f64;
    q.clamp(-128.0, 127.0) as i8
}

/// Channel-wise batch normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let v = var.f32_or_err("batch norm var")?;
    for (channel, &vc) in v.iter().enumerate() {
        let value = vc + eps;
        if !(value > 0.0) {
            return Err(Error::NonPositiveVariance { channel, value });
        }
    }
    batch_norm_unchecked(input, gamma, beta, mean, var, eps)
}

/// Batch normalization without the variance check; a corrupted variance
/// yields NaN instead of an error.
pub(crate) fn batch_norm_unchecked(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let (c, h, w, batched) = chw(input)?;
    let x = input.f32_or_err("batch norm input")?;
    let params = [
        gamma.f32_or_err("gamma")?,
        beta.f32_or_err("beta")?,
        mean.f32_or_err("mean")?,
        var.f32_or_err("var")?,
    ];
    if params.iter().any(|p| p.len() != c) {
        return Err(Error::Shape(format!("batch norm parameters must have {c} channels")));
    }
    let [g, b, m, v] = params;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let inv = 1.0 / (v[ch] + eps).sqrt();
        out.extend(
            x[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&xi| g[ch] * (xi - m[ch]) * inv + b[ch]),
        );
    }
    Tensor::from_f32(fm_shape(c, h, w, batched), out)
}

/// Elementwise activation on the float path.
pub fn activation(input: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    let x = input.f32_or_err("activation input")?;
    Tensor::from_f32(input.shape().to_vec(), x.iter().map(|&v| kind.apply(v)).collect())
}

/// 256-entry table mapping i8 codes under `in_q` to i8 codes under `out_q`.
/// Index with `(code as u8) as usize`.
pub fn activation_lut(kind: ActivationKind, in_q: QuantParams, out_q: QuantParams) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for code in -128i32..=127 {
        let y = kind.apply(in_q.dequantize(code));
        lut[(code as i8 as u8) as usize] = out_q.quantize_i8(y);
    }
    lut
}

/// Activation on the integer path via [`activation_lut`].
pub fn activation_i8(input: &Tensor, kind: ActivationKind, out_q: QuantParams) -> Result<Tensor> {
    let x = input
        .as_i8()
        .ok_or_else(|| Error::InvalidArgument("integer activation expects an i8 tensor".into()))?;
    let in_q = input.quant().ok_or_else(|| Error::Quant("i8 input without quantization parameters".into()))?;
    let lut = activation_lut(kind, in_q, out_q);
    let data = x.iter().map(|&v| lut[v as u8 as usize]).collect();
    Tensor::from_i8(input.shape().to_vec(), data, out_q)
}

/// 2x2 max pooling with stride 2. A NaN anywhere in a window yields NaN.
pub fn max_pool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w, batched) = chw(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    fn pool<T: Copy>(x: &[T], c: usize, h: usize, w: usize, pick: impl Fn(T, T) -> T) -> Vec<T> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let a = pick(x[r0 + 2 * ox], x[r0 + 2 * ox + 1]);
                    let b = pick(x[r1 + 2 * ox], x[r1 + 2 * ox + 1]);
                    out.push(pick(a, b));
                }
            }
        }
        out
    }
    let shape = fm_shape(c, oh, ow, batched);
    match input.data() {
        TensorData::F32(x) => {
            let nan_max = |a: f32, b: f32| if a.is_nan() || b.is_nan() { f32::NAN } else if b > a { b } else { a };
            Tensor::from_f32(shape, pool(x, c, h, w, nan_max))
        }
        TensorData::I8(x) => Tensor::new(shape, TensorData::I8(pool(x, c, h, w, |a: i8, b| a.max(b))), input.quant()),
        TensorData::I32(_) => Err(Error::InvalidArgument("max_pool2 does not support i32".into())),
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w, batched) = chw(input)?;
    fn up<T: Copy>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(c * h * w * 4);
        for ch in 0..c {
            for y in 0..h {
                let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                for _ in 0..2 {
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
        }
        out
    }
    let shape = fm_shape(c, 2 * h, 2 * w, batched);
    let data = match input.data() {
        TensorData::F32(x) => TensorData::F32(up(x, c, h, w)),
        TensorData::I8(x) => TensorData::I8(up(x, c, h, w)),
        TensorData::I32(x) => TensorData::I32(up(x, c, h, w)),
    };
    Tensor::new(shape, data, input.quant())
}

/// Channel-axis concatenation, `a`'s channels first. Integer inputs must
/// share quantization parameters (requantize beforehand otherwise).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa, batched) = chw(a)?;
    let (cb, hb, wb, _) = chw(b)?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!("concat spatial dims differ: {ha}x{wa} vs {hb}x{wb}")));
    }
    if a.quant() != b.quant() {
        return Err(Error::Quant("concat inputs have different quantization parameters".into()));
    }
    let shape = fm_shape(ca + cb, ha, wa, batched);
    let data = match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => TensorData::F32([x.as_slice(), y].concat()),
        (TensorData::I8(x), TensorData::I8(y)) => TensorData::I8([x.as_slice(), y].concat()),
        (TensorData::I32(x), TensorData::I32(y)) => TensorData::I32([x.as_slice(), y].concat()),
        _ => return Err(Error::InvalidArgument("concat inputs have different dtypes".into())),
    };
    Tensor::new(shape, data, a.quant())
}

/// Re-expresses an i8 tensor under `out_q`.
pub fn requantize_i8(input: &Tensor, out_q: QuantParams) -> Result<Tensor> {
    let x = input
        .as_i8()
        .ok_or_else(|| Error::InvalidArgument("requantize expects an i8 tensor".into()))?;
    let in_q = input.quant().ok_or_else(|| Error::Quant("i8 input without quantization parameters".into()))?;
    if in_q == out_q {
        return Ok(input.clone());
    }
    let mult = in_q.scale as f64 / out_q.scale as f64;
    let data = x
        .iter()
        .map(|&v| requantize(v as i32 - in_q.zero_point, mult, out_q.zero_point))
        .collect();
    Tensor::from_i8(input.shape().to_vec(), data, out_q)
}

/// Converts an f32 tensor to i8 codes under `q`.
pub fn quantize_tensor(input: &Tensor, q: QuantParams) -> Result<Tensor> {
    let x = input.f32_or_err("quantize input")?;
    Tensor::from_i8(input.shape().to_vec(), x.iter().map(|&v| q.quantize_i8(v)).collect(), q)
}

/// Converts an integer tensor back to f32 reals.
pub fn dequantize_tensor(input: &Tensor) -> Result<Tensor> {
    match input.data() {
        TensorData::F32(_) => Ok(input.clone()),
        TensorData::I8(x) => {
            let q = input.quant().unwrap();
            Tensor::from_f32(input.shape().to_vec(), x.iter().map(|&v| q.dequantize(v as i32)).collect())
        }
        TensorData::I32(x) => {
            let q = input.quant().unwrap();
            Tensor::from_f32(
                input.shape().to_vec(),
                x.iter().map(|&v| (q.scale as f64 * v as f64) as f32).collect(),
            )
        }
    }
}

/// `true` when `candidate` outranks `best` under the total order used by
/// [`argmax_classes`]: NaN below everything, otherwise numeric.
#[inline]
fn outranks(candidate: f32, best: f32) -> bool {
    if candidate.is_nan() {
        false
    } else {
        best.is_nan() || candidate > best
    }
}

/// Per-pixel argmax over the class axis of `[classes, H, W]` logits.
///
/// NaN ranks below every other value, ties go to the lowest class index and
/// an all-NaN pixel maps to class 0.
pub fn argmax_classes(logits: &Tensor) -> Result<ClassMap> {
    let (c, h, w, _) = chw(logits)?;
    if c == 0 {
        return Err(Error::Shape("empty class dimension".into()));
    }
    if c > u16::MAX as usize {
        return Err(Error::Shape(format!("{c} classes exceed the class map range")));
    }
    let plane = h * w;
    let values: std::borrow::Cow<'_, [f32]> = match logits.data() {
        TensorData::F32(x) => x.as_slice().into(),
        _ => dequantize_tensor(logits)?.as_f32().unwrap().to_vec().into(),
    };
    let mut best = values[..plane].to_vec();
    let mut classes = vec![0u16; plane];
    for cls in 1..c {
        let row = &values[cls * plane..(cls + 1) * plane];
        for ((b, k), &v) in best.iter_mut().zip(classes.iter_mut()).zip(row) {
            if outranks(v, *b) {
                *b = v;
                *k = cls as u16;
            }
        }
    }
    ClassMap::new(h, w, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape.to_vec(), data).unwrap()
    }

    /// Direct nested-loop convolution; accumulates in f64.
    fn conv_oracle(x: &[f32], c: usize, h: usize, w: usize, wt: &[f32], o: usize, k: usize, b: &[f32], s: usize, p: usize) -> Vec<f32> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ic) * k + ky) * k + kx] as f64
                                    * x[(ic * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = (acc + b[oc] as f64) as f32;
                }
            }
        }
        out
    }

    fn assert_close(a: &[f32], b: &[f32], rel: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let tol = rel * x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_single_element() {
        let out = conv2d(
            &t(&[1, 1, 1, 1], vec![2.0]),
            &t(&[1, 1, 1, 1], vec![3.0]),
            &t(&[1], vec![1.0]),
            1,
            0,
            None,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.as_f32().unwrap(), &[7.0]);
    }

    #[test]
    fn conv_zero_weight_gives_bias_map() {
        let x = t(&[2, 4, 4], (0..32).map(|v| v as f32).collect());
        let out = conv2d(&x, &t(&[3, 2, 3, 3], vec![0.0; 54]), &t(&[3], vec![0.5, -1.0, 2.0]), 1, 1, None).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        let v = out.as_f32().unwrap();
        assert!(v[..16].iter().all(|&e| e == 0.5));
        assert!(v[16..32].iter().all(|&e| e == -1.0));
        assert!(v[32..].iter().all(|&e| e == 2.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..3 * 2 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = conv2d(&t(&[1, 2, 5, 5], x.clone()), &t(&[3, 2, k, k], wt.clone()), &t(&[3], b.clone()), stride, pad, None).unwrap();
            let expected = conv_oracle(&x, 2, 5, 5, &wt, 3, k, &b, stride, pad);
            assert_close(out.as_f32().unwrap(), &expected, 1e-6);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(&[2, 3, 3], vec![0.0; 18]);
        assert!(conv2d(&x, &t(&[1, 3, 1, 1], vec![0.0; 3]), &t(&[1], vec![0.0]), 1, 0, None).is_err());
        assert!(conv2d(&x, &t(&[1, 2, 1, 1], vec![0.0; 2]), &t(&[2], vec![0.0; 2]), 1, 0, None).is_err());
        assert!(conv2d(&x, &t(&[1, 2, 5, 5], vec![0.0; 50]), &t(&[1], vec![0.0]), 1, 0, None).is_err());
    }

    #[test]
    fn conv_integer_path() {
        let q_in = QuantParams::new(0.5, 2).unwrap();
        let q_w = QuantParams::new(0.25, 0).unwrap();
        let q_b = QuantParams::new(0.125, 0).unwrap();
        let q_out = QuantParams::new(1.0, -3).unwrap();
        // real input 0.5*(6-2) = 2, weight 0.25*12 = 3, bias 0.125*8 = 1 -> 7
        let x = Tensor::from_i8(vec![1, 1, 1], vec![6], q_in).unwrap();
        let w = Tensor::from_i8(vec![1, 1, 1, 1], vec![12], q_w).unwrap();
        let b = Tensor::from_i32(vec![1], vec![8], q_b).unwrap();
        let out = conv2d(&x, &w, &b, 1, 0, Some(q_out)).unwrap();
        assert_eq!(out.as_i8().unwrap(), &[7 - 3]);
        let logits = conv2d(&x, &w, &b, 1, 0, None).unwrap();
        assert_eq!(logits.as_f32().unwrap(), &[7.0]);
    }

    #[test]
    fn conv_integer_saturates() {
        let q = QuantParams::new(1.0, 0).unwrap();
        let x = Tensor::from_i8(vec![1, 1, 1], vec![127], q).unwrap();
        let w = Tensor::from_i8(vec![1, 1, 1, 1], vec![127], q).unwrap();
        let b = Tensor::from_i32(vec![1], vec![i32::MAX], q).unwrap();
        let out = conv2d(&x, &w, &b, 1, 0, Some(q)).unwrap();
        assert_eq!(out.as_i8().unwrap(), &[127]);
        let b = Tensor::from_i32(vec![1], vec![i32::MIN], q).unwrap();
        let out = conv2d(&x, &w, &b, 1, 0, Some(q)).unwrap();
        assert_eq!(out.as_i8().unwrap(), &[-128]);
    }

    #[test]
    fn requantize_ties_to_even() {
        assert_eq!(requantize(5, 0.5, 0), 2);
        assert_eq!(requantize(7, 0.5, 0), 4);
        assert_eq!(requantize(-5, 0.5, 0), -2);
    }

    #[test]
    fn batch_norm_examples() {
        let one = t(&[1], vec![1.0]);
        let zero = t(&[1], vec![0.0]);
        let x = t(&[1, 1, 2], vec![3.0, -4.5]);
        let id = batch_norm(&x, &one, &zero, &zero, &one, 0.0).unwrap();
        assert_eq!(id, x);
        let y = batch_norm(&t(&[1, 1, 1], vec![3.0]), &t(&[1], vec![2.0]), &one, &zero, &one, 0.0).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[7.0]);
    }

    #[test]
    fn batch_norm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, hw) = (4, 9);
        let mut r = |n: usize, lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let (x, g, b, m, v) = (r(c * hw, -3.0, 3.0), r(c, 0.5, 1.5), r(c, -1.0, 1.0), r(c, -1.0, 1.0), r(c, 0.1, 2.0));
        let eps = 1e-3;
        let out = batch_norm(&t(&[c, 3, 3], x.clone()), &t(&[c], g.clone()), &t(&[c], b.clone()), &t(&[c], m.clone()), &t(&[c], v.clone()), eps).unwrap();
        let mut expected = Vec::new();
        for ch in 0..c {
            for i in 0..hw {
                let xi = x[ch * hw + i] as f64;
                let y = g[ch] as f64 * (xi - m[ch] as f64) / (v[ch] as f64 + eps as f64).sqrt() + b[ch] as f64;
                expected.push(y as f32);
            }
        }
        assert_close(out.as_f32().unwrap(), &expected, 1e-6);
    }

    #[test]
    fn batch_norm_rejects_non_positive_variance() {
        let one = t(&[1], vec![1.0]);
        let zero = t(&[1], vec![0.0]);
        let x = t(&[1, 1, 1], vec![1.0]);
        assert!(matches!(
            batch_norm(&x, &one, &zero, &zero, &zero, 0.0),
            Err(Error::NonPositiveVariance { channel: 0, .. })
        ));
        let y = batch_norm_unchecked(&x, &one, &zero, &zero, &t(&[1], vec![-1.0]), 0.0).unwrap();
        assert!(y.as_f32().unwrap()[0].is_nan());
    }

    #[test]
    fn activation_examples() {
        use ActivationKind::*;
        assert_eq!(HardSigmoid.apply(-3.0), 0.0);
        assert_eq!(HardSigmoid.apply(3.0), 1.0);
        assert_eq!(HardSigmoid.apply(0.0), 0.5);
        assert_eq!(HardSigmoid.apply(1.5), 0.75);
        assert_eq!(Sigmoid.apply(0.0), 0.5);
        assert_eq!(Relu.apply(-2.0), 0.0);
        assert_eq!(Relu.apply(1e30), 1e30);
        for kind in [Relu, Sigmoid, HardSigmoid] {
            assert!(kind.apply(f32::NAN).is_nan(), "{kind:?} must propagate NaN");
        }
        assert_eq!(Relu.apply(f32::INFINITY), f32::INFINITY);
        assert_eq!(HardSigmoid.apply(f32::INFINITY), 1.0);
    }

    #[test]
    fn activation_lut_matches_float_path() {
        let in_q = QuantParams::new(0.05, -10).unwrap();
        let out_q = QuantParams::new(1.0 / 255.0, -128).unwrap();
        let lut = activation_lut(ActivationKind::HardSigmoid, in_q, out_q);
        for code in -128i32..=127 {
            let y = ActivationKind::HardSigmoid.apply(in_q.dequantize(code));
            let got = out_q.dequantize(lut[(code as i8 as u8) as usize] as i32);
            assert!((got - y).abs() <= out_q.scale / 2.0 + 1e-6);
        }
    }

    #[test]
    fn pool_upsample_concat() {
        let p = max_pool2(&t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        assert_eq!(p.as_f32().unwrap(), &[4.0]);
        let u = upsample2(&t(&[1, 1, 1], vec![5.0])).unwrap();
        assert_eq!(u.shape(), &[1, 2, 2]);
        assert_eq!(u.as_f32().unwrap(), &[5.0; 4]);
        let a = t(&[2, 1, 1], vec![1.0, 2.0]);
        let b = t(&[3, 1, 1], vec![3.0, 4.0, 5.0]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[5, 1, 1]);
        assert_eq!(c.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(max_pool2(&t(&[1, 3, 2], vec![0.0; 6])).is_err());
        assert!(concat_channels(&a, &t(&[1, 2, 1], vec![0.0; 2])).is_err());
    }

    #[test]
    fn upsample_layout() {
        let u = upsample2(&t(&[1, 1, 2], vec![1.0, 2.0])).unwrap();
        assert_eq!(u.as_f32().unwrap(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pool_propagates_nan() {
        let p = max_pool2(&t(&[1, 2, 2], vec![1.0, f32::NAN, 3.0, 4.0])).unwrap();
        assert!(p.as_f32().unwrap()[0].is_nan());
    }

    fn argmax_pixel(v: &[f32]) -> u16 {
        let x = t(&[v.len(), 1, 1], v.to_vec());
        argmax_classes(&x).unwrap().classes()[0]
    }

    /// Scalar oracle: NaN mapped to -inf-below sentinel, first maximum wins.
    fn argmax_oracle(v: &[f32]) -> u16 {
        let key = |x: f32| if x.is_nan() { (0u8, 0.0f32) } else { (1u8, x) };
        let mut best = 0;
        for i in 1..v.len() {
            let (a, b) = (key(v[i]), key(v[best]));
            if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
                best = i;
            }
        }
        best as u16
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_pixel(&[0.1, 0.9, 0.5]), 1);
        assert_eq!(argmax_pixel(&[f32::NAN, -5.0, -7.0]), 1);
        assert_eq!(argmax_oracle(&[f32::NAN, -5.0, -7.0]), 1);
        assert_eq!(argmax_pixel(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax_pixel(&[f32::NAN, f32::NAN]), 0);
        assert_eq!(argmax_pixel(&[f32::NAN, f32::NEG_INFINITY]), 1);
        assert_eq!(argmax_pixel(&[1.0, f32::INFINITY, f32::NAN]), 1);
    }

    #[test]
    fn argmax_agrees_with_oracle_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specials = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY, 0.0, 1.0];
        for _ in 0..2000 {
            let v: Vec<f32> = (0..4)
                .map(|_| if rng.random_bool(0.3) { specials[rng.random_range(0..specials.len())] } else { rng.random_range(-2.0..2.0) })
                .collect();
            assert_eq!(argmax_pixel(&v), argmax_oracle(&v), "{v:?}");
        }
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t(&[3, 8, 8], (0..192).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = t(&[4, 3, 3, 3], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = t(&[4], vec![0.1, 0.2, 0.3, 0.4]);
        let a = conv2d(&x, &w, &b, 1, 1, None).unwrap();
        let c = conv2d(&x, &w, &b, 1, 1, None).unwrap();
        assert_eq!(a, c);
    }
}
