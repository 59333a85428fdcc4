//! Dense row-major tensors for the float and quantized-integer paths.
//!
//! Equality on [`Tensor`] compares raw bit patterns, so two tensors holding
//! the same NaN payload are equal and `0.0` differs from `-0.0`. Fault
//! injection works at the bit level and every comparison in the crate wants
//! that notion of sameness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    /// Storage width in bits.
    pub fn bit_width(self) -> u8 {
        match self {
            DType::F32 | DType::I32 => 32,
            DType::I8 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

/// Per-tensor affine quantization: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Quant(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self { scale, zero_point })
    }

    fn check_for(&self, dtype: DType) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Quant(format!("scale must be positive and finite, got {}", self.scale)));
        }
        match dtype {
            DType::I8 if !(-128..=127).contains(&self.zero_point) => Err(Error::Quant(format!(
                "i8 zero point {} outside [-128, 127]",
                self.zero_point
            ))),
            DType::I32 if self.zero_point != 0 => Err(Error::Quant(format!(
                "i32 tensors must have zero point 0, got {}",
                self.zero_point
            ))),
            _ => Ok(()),
        }
    }

    /// Real value represented by `q`.
    #[inline]
    pub fn dequantize(&self, q: i32) -> f32 {
        self.scale * (q - self.zero_point) as f32
    }

    /// Nearest i8 code for `x`, ties to even, saturating.
    #[inline]
    pub fn quantize_i8(&self, x: f32) -> i8 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }
}

impl Eq for QuantParams {}

/// Flat element storage.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// An n-dimensional array with optional quantization metadata.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    quant: Option<QuantParams>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length and dtype/quant invariants.
    pub fn new(shape: Vec<usize>, data: TensorData, quant: Option<QuantParams>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, data has {}",
                data.len()
            )));
        }
        let dtype = data.dtype();
        match (&quant, dtype.is_integer()) {
            (None, true) => {
                return Err(Error::Quant(format!("{dtype:?} tensor requires quantization parameters")))
            }
            (Some(_), false) => return Err(Error::Quant("f32 tensor must not carry quantization parameters".into())),
            (Some(q), true) => q.check_for(dtype)?,
            (None, false) => {}
        }
        Ok(Self { shape, data, quant })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data), None)
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, quant: QuantParams) -> Result<Self> {
        Self::new(shape, TensorData::I8(data), Some(quant))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>, quant: QuantParams) -> Result<Self> {
        Self::new(shape, TensorData::I32(data), Some(quant))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub(crate) fn f32_or_err(&self, what: &str) -> Result<&[f32]> {
        self.as_f32()
            .ok_or_else(|| Error::InvalidArgument(format!("{what}: expected f32 tensor, got {:?}", self.dtype())))
    }

    /// Raw bit pattern of element `index`, zero-extended to 32 bits.
    pub fn raw_bits(&self, index: usize) -> Option<u32> {
        match &self.data {
            TensorData::F32(v) => v.get(index).map(|x| x.to_bits()),
            TensorData::I8(v) => v.get(index).map(|&x| x as u8 as u32),
            TensorData::I32(v) => v.get(index).map(|&x| x as u32),
        }
    }

    /// Overwrites element `index` with the low `bit_width` bits of `bits`.
    pub fn set_raw_bits(&mut self, index: usize, bits: u32) -> Result<()> {
        let len = self.len();
        let oob = || Error::InvalidArgument(format!("index {index} out of range for {len} elements"));
        match &mut self.data {
            TensorData::F32(v) => *v.get_mut(index).ok_or_else(oob)? = f32::from_bits(bits),
            TensorData::I8(v) => *v.get_mut(index).ok_or_else(oob)? = bits as u8 as i8,
            TensorData::I32(v) => *v.get_mut(index).ok_or_else(oob)? = bits as i32,
        }
        Ok(())
    }

    /// Element `index` as a real number (dequantized on integer tensors).
    pub fn real_value(&self, index: usize) -> Option<f64> {
        match &self.data {
            TensorData::F32(v) => v.get(index).map(|&x| x as f64),
            TensorData::I8(v) => v.get(index).map(|&x| x as f64),
            TensorData::I32(v) => v.get(index).map(|&x| x as f64),
        }
        .map(|raw| match (self.dtype(), self.quant) {
            (DType::F32, _) | (_, None) => raw,
            (_, Some(q)) => q.scale as f64 * (raw - q.zero_point as f64),
        })
    }

    /// Copies of the slices selected along `axis`.
    pub(crate) fn select_axis(&self, axis: usize, keep: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&k| k >= dim) {
            return Err(Error::Shape(format!("index {bad} out of range for axis {axis} of size {dim}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        fn gather<T: Copy>(src: &[T], outer: usize, dim: usize, inner: usize, keep: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(outer * keep.len() * inner);
            for o in 0..outer {
                for &k in keep {
                    let start = (o * dim + k) * inner;
                    out.extend_from_slice(&src[start..start + inner]);
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(gather(v, outer, dim, inner, keep)),
            TensorData::I8(v) => TensorData::I8(gather(v, outer, dim, inner, keep)),
            TensorData::I32(v) => TensorData::I32(gather(v, outer, dim, inner, keep)),
        };
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor::new(shape, data, self.quant)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape || self.quant != other.quant {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::I8(a), TensorData::I8(b)) => a == b,
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            _ => false,
        }
    }
}

/// Per-pixel predicted class indices, row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if height * width != classes.len() {
            return Err(Error::Shape(format!(
                "{height}x{width} class map needs {} entries, got {}",
                height * width,
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn same_shape(&self, other: &ClassMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn quant_presence_follows_dtype() {
        let q = QuantParams::new(0.5, 0).unwrap();
        assert!(Tensor::new(vec![1], TensorData::I8(vec![1]), None).is_err());
        assert!(Tensor::new(vec![1], TensorData::F32(vec![1.0]), Some(q)).is_err());
        assert!(Tensor::from_i8(vec![1], vec![1], q).is_ok());
    }

    #[test]
    fn i32_zero_point_must_be_zero() {
        let q = QuantParams { scale: 0.1, zero_point: 3 };
        assert!(Tensor::from_i32(vec![1], vec![5], q).is_err());
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(-1.0, 0).is_err());
    }

    #[test]
    fn equality_is_bitwise() {
        let a = Tensor::from_f32(vec![2], vec![f32::NAN, 0.0]).unwrap();
        let b = Tensor::from_f32(vec![2], vec![f32::NAN, 0.0]).unwrap();
        let c = Tensor::from_f32(vec![2], vec![f32::NAN, -0.0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn raw_bits_roundtrip_i8() {
        let q = QuantParams::new(1.0, 0).unwrap();
        let mut t = Tensor::from_i8(vec![2], vec![-1, 5], q).unwrap();
        assert_eq!(t.raw_bits(0), Some(0xff));
        t.set_raw_bits(1, 0x81).unwrap();
        assert_eq!(t.as_i8().unwrap()[1], -127);
    }

    #[test]
    fn select_axis_picks_slices() {
        let t = Tensor::from_f32(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = t.select_axis(0, &[2, 0]).unwrap();
        assert_eq!(s.as_f32().unwrap(), &[4.0, 5.0, 0.0, 1.0]);
        let s = t.select_axis(1, &[1]).unwrap();
        assert_eq!(s.shape(), &[3, 1]);
        assert_eq!(s.as_f32().unwrap(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn quantize_rounds_half_even() {
        let q = QuantParams::new(1.0, 0).unwrap();
        assert_eq!(q.quantize_i8(2.5), 2);
        assert_eq!(q.quantize_i8(3.5), 4);
        assert_eq!(q.quantize_i8(1000.0), 127);
        assert_eq!(q.quantize_i8(-1000.0), -128);
    }
}
