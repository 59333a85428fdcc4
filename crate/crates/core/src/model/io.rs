//! Binary model and tensor files. Byte layout is documented in
//! `docs/model-format.md`; all integers are little-endian and every file
//! ends with a SHA-256 of the bytes before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DTypeMode, LayerKind, LayerNode, ModelGraph, ParamKind};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::tensor::{DType, QuantParams, Tensor, TensorData};

pub const FORMAT_VERSION: u16 = 1;
const MODEL_MAGIC: &[u8; 4] = b"SBUM";
const TENSOR_MAGIC: &[u8; 4] = b"SBUT";
const DIGEST_LEN: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn quant(&mut self, q: Option<QuantParams>) {
        match q {
            None => self.u8(0),
            Some(q) => {
                self.u8(1);
                self.u32(q.scale.to_bits());
                self.i32(q.zero_point);
            }
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.dtype().tag());
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.quant(t.quant());
        match t.data() {
            TensorData::F32(v) => v.iter().for_each(|x| self.u32(x.to_bits())),
            TensorData::I8(v) => v.iter().for_each(|&x| self.u8(x as u8)),
            TensorData::I32(v) => v.iter().for_each(|&x| self.i32(x)),
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn quant(&mut self) -> Result<Option<QuantParams>> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let scale = f32::from_bits(self.u32()?);
                let zero_point = self.i32()?;
                Ok(Some(QuantParams { scale, zero_point }))
            }
            f => Err(Error::Corrupt(format!("bad quantization flag {f}"))),
        }
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let dtype = DType::from_tag(self.u8()?).ok_or_else(|| Error::Corrupt("unknown dtype tag".into()))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let quant = self.quant()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
        let width = dtype.bit_width() as usize / 8;
        if count.checked_mul(width).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Corrupt(format!("tensor of {count} elements exceeds remaining data")));
        }
        let raw = self.take(count * width)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect()),
            DType::I8 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Tensor::new(shape, data, quant).map_err(|e| Error::Corrupt(format!("invalid tensor: {e}")))
    }
}

/// Checks magic, version and trailing digest; returns a reader over the body.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 6 || &bytes[..4] != magic {
        return Err(Error::Corrupt("missing or wrong magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 6 + DIGEST_LEN {
        return Err(Error::Corrupt("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    Ok(Reader { buf: body, pos: 6 })
}

fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Input => 0,
        LayerKind::Conv { .. } => 1,
        LayerKind::BatchNorm { .. } => 2,
        LayerKind::Activation(_) => 3,
        LayerKind::MaxPool2 => 4,
        LayerKind::Upsample2 => 5,
        LayerKind::Concat => 6,
    }
}

pub fn model_to_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.u8(match model.dtype_mode() {
        DTypeMode::Float32 => 0,
        DTypeMode::Int8 => 1,
    });
    w.u8(model.activation().tag());
    w.u32(model.n_classes() as u32);
    w.u32(model.n_input_channels() as u32);
    w.u32(model.nodes().len() as u32);
    for n in model.nodes() {
        w.u8(kind_tag(&n.kind));
        match n.kind {
            LayerKind::Conv { stride, padding } => {
                w.u32(stride as u32);
                w.u32(padding as u32);
            }
            LayerKind::BatchNorm { eps } => w.u32(eps.to_bits()),
            LayerKind::Activation(a) => w.u8(a.tag()),
            _ => {}
        }
        w.u8(n.inputs.len() as u8);
        for &i in &n.inputs {
            w.u32(i as u32);
        }
        w.quant(n.out_quant);
        w.u8(n.params.len() as u8);
        for (k, t) in &n.params {
            w.u8(k.tag());
            w.tensor(t);
        }
    }
    w.finish()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = open(bytes, MODEL_MAGIC)?;
    let dtype_mode = match r.u8()? {
        0 => DTypeMode::Float32,
        1 => DTypeMode::Int8,
        m => return Err(Error::Corrupt(format!("unknown dtype mode {m}"))),
    };
    let activation = ActivationKind::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown activation tag".into()))?;
    let n_classes = r.u32()? as usize;
    let n_input_channels = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(count.min(1 << 16));
    for id in 0..count {
        let tag = r.u8()?;
        let kind = match tag {
            0 => LayerKind::Input,
            1 => LayerKind::Conv { stride: r.u32()? as usize, padding: r.u32()? as usize },
            2 => LayerKind::BatchNorm { eps: f32::from_bits(r.u32()?) },
            3 => LayerKind::Activation(
                ActivationKind::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown activation tag".into()))?,
            ),
            4 => LayerKind::MaxPool2,
            5 => LayerKind::Upsample2,
            6 => LayerKind::Concat,
            t => return Err(Error::Corrupt(format!("unknown layer tag {t} at node {id}"))),
        };
        let n_inputs = r.u8()? as usize;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            inputs.push(r.u32()? as usize);
        }
        let mut node = LayerNode::new(id, kind, inputs);
        node.out_quant = r.quant()?;
        for _ in 0..r.u8()? {
            let k = ParamKind::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown parameter kind".into()))?;
            let t = r.tensor()?;
            node.params.insert(k, t);
        }
        nodes.push(node);
    }
    if r.pos != r.buf.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    ModelGraph::new(nodes, n_classes, n_input_channels, dtype_mode, activation)
        .map_err(|e| Error::Corrupt(format!("decoded graph is invalid: {e}")))
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(TENSOR_MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.tensor(t);
    w.finish()
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = open(bytes, TENSOR_MAGIC)?;
    let t = r.tensor()?;
    if r.pos != r.buf.len() {
        return Err(Error::Corrupt("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}
