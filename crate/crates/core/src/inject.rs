//! Bit-exact single-bit upsets in stored parameters.
//!
//! [`flip_bit`] is the pure primitive. [`ModelView`] applies one transient
//! fault to a shared, read-only [`ModelGraph`] through a copy-on-write
//! overlay of the single affected tensor, so independent views can run
//! concurrently over the same model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamKind, ParamSource};
use crate::tensor::{DType, Tensor};

/// Address of one stored bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FaultLocation {
    pub layer_id: usize,
    pub kind: ParamKind,
    /// Flat row-major element index inside the parameter tensor.
    pub index: usize,
    /// Bit position, 0 = least significant.
    pub bit: u8,
}

impl fmt::Display for FaultLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {}[{}] bit {}", self.layer_id, self.kind, self.index, self.bit)
    }
}

/// Which part of the representation a bit belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitField {
    Sign,
    Exponent,
    Mantissa,
    /// Non-sign bit of a two's-complement integer.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Finite,
    Infinite,
    Nan,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(<$t>::$v => $s),* }
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)*
                    other => Err(Error::InvalidArgument(format!("unknown {} '{other}'", stringify!($t)))),
                }
            }
        }
    };
}

str_enum!(BitField { Sign => "sign", Exponent => "exponent", Mantissa => "mantissa", Magnitude => "magnitude" });
str_enum!(FlipDirection { ZeroToOne => "zero_to_one", OneToZero => "one_to_zero" });
str_enum!(ValueKind { Finite => "finite", Infinite => "infinite", Nan => "nan" });

/// What a flip did to one element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipClassification {
    pub field: BitField,
    pub direction: FlipDirection,
    /// Numeric value before the flip (the raw integer for i8/i32).
    pub pre_value: f64,
    pub post_value: f64,
    pub post_kind: ValueKind,
}

/// Field of bit `bit` in a value of type `dtype`.
pub fn bit_field(dtype: DType, bit: u8) -> BitField {
    match dtype {
        DType::F32 => match bit {
            31 => BitField::Sign,
            23..=30 => BitField::Exponent,
            _ => BitField::Mantissa,
        },
        _ if bit + 1 == dtype.bit_width() => BitField::Sign,
        _ => BitField::Magnitude,
    }
}

fn numeric(raw: u32, dtype: DType) -> f64 {
    match dtype {
        DType::F32 => f32::from_bits(raw) as f64,
        DType::I8 => raw as u8 as i8 as f64,
        DType::I32 => raw as i32 as f64,
    }
}

/// Toggles bit `bit` of the raw representation `raw` (low `bit_width` bits
/// significant) and classifies the effect. f32 layout: bit 31 sign, 30..23
/// exponent, 22..0 mantissa. Integers are two's complement.
pub fn flip_bit(raw: u32, dtype: DType, bit: u8) -> Result<(u32, FlipClassification)> {
    let width = dtype.bit_width();
    if bit >= width {
        return Err(Error::InvalidArgument(format!("bit {bit} out of range for {dtype:?} ({width} bits)")));
    }
    let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
    let raw = raw & mask;
    let flipped = raw ^ (1u32 << bit);
    let direction = if raw >> bit & 1 == 0 { FlipDirection::ZeroToOne } else { FlipDirection::OneToZero };
    let post_value = numeric(flipped, dtype);
    let post_kind = if post_value.is_nan() {
        ValueKind::Nan
    } else if post_value.is_infinite() {
        ValueKind::Infinite
    } else {
        ValueKind::Finite
    };
    Ok((
        flipped,
        FlipClassification {
            field: bit_field(dtype, bit),
            direction,
            pre_value: numeric(raw, dtype),
            post_value,
            post_kind,
        },
    ))
}

/// [`flip_bit`] on an f32 value.
pub fn flip_f32(v: f32, bit: u8) -> Result<(f32, FlipClassification)> {
    flip_bit(v.to_bits(), DType::F32, bit).map(|(b, c)| (f32::from_bits(b), c))
}

/// [`flip_bit`] on an i8 value.
pub fn flip_i8(v: i8, bit: u8) -> Result<(i8, FlipClassification)> {
    flip_bit(v as u8 as u32, DType::I8, bit).map(|(b, c)| (b as u8 as i8, c))
}

/// [`flip_bit`] on an i32 value.
pub fn flip_i32(v: i32, bit: u8) -> Result<(i32, FlipClassification)> {
    flip_bit(v as u32, DType::I32, bit).map(|(b, c)| (b as i32, c))
}

/// Receipt for an applied fault; pass it back to [`ModelView::revert`].
#[derive(Debug, Clone, PartialEq)]
pub struct FaultHandle {
    pub location: FaultLocation,
    pub dtype: DType,
    pub pre_bits: u32,
    pub post_bits: u32,
    pub classification: FlipClassification,
}

#[derive(Debug, Clone)]
struct Overlay {
    location: FaultLocation,
    tensor: Tensor,
}

/// A model seen through at most one active fault.
#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    base: &'a ModelGraph,
    overlay: Option<Overlay>,
}

impl<'a> ModelView<'a> {
    pub fn new(base: &'a ModelGraph) -> Self {
        Self { base, overlay: None }
    }

    pub fn base(&self) -> &'a ModelGraph {
        self.base
    }

    pub fn active_fault(&self) -> Option<FaultLocation> {
        self.overlay.as_ref().map(|o| o.location)
    }

    /// Checks that `loc` addresses an existing bit of the model.
    pub fn validate_location<'m>(model: &'m ModelGraph, loc: &FaultLocation) -> Result<&'m Tensor> {
        let t = model
            .node(loc.layer_id)
            .ok_or_else(|| Error::InvalidLocation(format!("{loc}: no layer {}", loc.layer_id)))?
            .param(loc.kind)
            .ok_or_else(|| Error::InvalidLocation(format!("{loc}: layer has no {}", loc.kind)))?;
        if loc.index >= t.len() {
            return Err(Error::InvalidLocation(format!("{loc}: tensor has {} elements", t.len())));
        }
        if loc.bit >= t.dtype().bit_width() {
            return Err(Error::InvalidLocation(format!("{loc}: {:?} has {} bits", t.dtype(), t.dtype().bit_width())));
        }
        Ok(t)
    }

    /// Flips one bit. Fails if a fault is already active.
    pub fn apply_fault(&mut self, loc: FaultLocation) -> Result<FaultHandle> {
        if let Some(o) = &self.overlay {
            return Err(Error::FaultActive(o.location.to_string()));
        }
        let original = Self::validate_location(self.base, &loc)?;
        let dtype = original.dtype();
        let pre_bits = original.raw_bits(loc.index).unwrap();
        let (post_bits, classification) = flip_bit(pre_bits, dtype, loc.bit)?;
        let mut tensor = original.clone();
        tensor.set_raw_bits(loc.index, post_bits)?;
        self.overlay = Some(Overlay { location: loc, tensor });
        Ok(FaultHandle { location: loc, dtype, pre_bits, post_bits, classification })
    }

    /// Removes the active fault, restoring the original bit pattern.
    pub fn revert(&mut self, handle: FaultHandle) -> Result<()> {
        match &self.overlay {
            Some(o) if o.location == handle.location => {
                self.overlay = None;
                Ok(())
            }
            _ => Err(Error::NoActiveFault),
        }
    }

    /// Owned copy of the model as currently seen, fault included.
    pub fn materialize(&self) -> ModelGraph {
        let mut m = self.base.clone();
        if let Some(o) = &self.overlay {
            *m.param_mut(o.location.layer_id, o.location.kind).unwrap() = o.tensor.clone();
        }
        m
    }
}

impl ParamSource for ModelView<'_> {
    fn param(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        match &self.overlay {
            Some(o) if o.location.layer_id == layer && o.location.kind == kind => Some(&o.tensor),
            _ => self.base.param(layer, kind),
        }
    }
}
