//! CSV forms of injection records and error matrices.
//!
//! Bit patterns are written as `0x`-prefixed hex so they survive text
//! round trips exactly; rates use the shortest representation that parses
//! back to the same `f64`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CellStats, ErrorMatrix, InjectionRecord};
use crate::error::{Error, Result};
use crate::inject::FaultLocation;

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    layer_id: usize,
    kind: String,
    index: usize,
    bit: u8,
    direction: String,
    field: String,
    pre_bits: String,
    post_bits: String,
    post_kind: String,
    input_id: usize,
    error_rate: f64,
}

fn hex(bits: u32) -> String {
    format!("{bits:#010x}")
}

fn parse_hex(s: &str) -> Result<u32> {
    let digits = s.strip_prefix("0x").ok_or_else(|| Error::InvalidArgument(format!("bit pattern '{s}' lacks 0x")))?;
    u32::from_str_radix(digits, 16).map_err(|e| Error::InvalidArgument(format!("bit pattern '{s}': {e}")))
}

pub fn write_records_csv<W: Write>(records: &[InjectionRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(RecordRow {
            layer_id: r.location.layer_id,
            kind: r.location.kind.name().to_string(),
            index: r.location.index,
            bit: r.location.bit,
            direction: r.direction.name().to_string(),
            field: r.field.name().to_string(),
            pre_bits: hex(r.pre_bits),
            post_bits: hex(r.post_bits),
            post_kind: r.post_kind.name().to_string(),
            input_id: r.input_id,
            error_rate: r.error_rate,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<InjectionRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: RecordRow = row?;
        if !(0.0..=1.0).contains(&row.error_rate) {
            return Err(Error::InvalidArgument(format!("error rate {} outside [0, 1]", row.error_rate)));
        }
        out.push(InjectionRecord {
            location: FaultLocation { layer_id: row.layer_id, kind: row.kind.parse()?, index: row.index, bit: row.bit },
            direction: row.direction.parse()?,
            field: row.field.parse()?,
            pre_bits: parse_hex(&row.pre_bits)?,
            post_bits: parse_hex(&row.post_bits)?,
            post_kind: row.post_kind.parse()?,
            input_id: row.input_id,
            error_rate: row.error_rate,
        });
    }
    Ok(out)
}

/// One line of the matrix CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub layer_id: usize,
    pub bit: u8,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub mean_nonzero: f64,
    pub max: f64,
}

impl MatrixRow {
    fn new((layer_id, bit): (usize, u8), c: &CellStats) -> Self {
        Self { layer_id, bit, count: c.count, mean: c.mean, std: c.std, mean_nonzero: c.mean_nonzero, max: c.max }
    }
}

impl ErrorMatrix {
    pub fn rows(&self) -> Vec<MatrixRow> {
        self.cells.iter().map(|(k, c)| MatrixRow::new(*k, c)).collect()
    }
}

pub fn write_matrix_csv<W: Write>(matrix: &ErrorMatrix, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in matrix.rows() {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<Vec<MatrixRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let rows: Vec<MatrixRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(bad) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.mean)) {
        return Err(Error::InvalidArgument(format!("cell ({}, {}) mean {} outside [0, 1]", bad.layer_id, bad.bit, bad.mean)));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::aggregate;
    use crate::inject::{flip_bit, ValueKind};
    use crate::model::ParamKind;
    use crate::tensor::DType;
    use proptest::prelude::*;

    fn arb_record() -> impl Strategy<Value = InjectionRecord> {
        (0usize..50, 0usize..6, 0usize..10_000, 0u8..32, any::<u32>(), 0usize..4, 0.0f64..=1.0).prop_map(
            |(layer_id, k, index, bit, raw, input_id, error_rate)| {
                let (post, c) = flip_bit(raw, DType::F32, bit).unwrap();
                InjectionRecord {
                    location: FaultLocation { layer_id, kind: ParamKind::ALL[k], index, bit },
                    direction: c.direction,
                    field: c.field,
                    pre_bits: raw,
                    post_bits: post,
                    post_kind: c.post_kind,
                    input_id,
                    error_rate,
                }
            },
        )
    }

    proptest! {
        #[test]
        fn records_round_trip(recs in prop::collection::vec(arb_record(), 1..40)) {
            let mut buf = Vec::new();
            write_records_csv(&recs, &mut buf).unwrap();
            prop_assert_eq!(read_records_csv(&buf[..]).unwrap(), recs.clone());

            let m = aggregate(&recs).unwrap();
            let mut buf = Vec::new();
            write_matrix_csv(&m, &mut buf).unwrap();
            prop_assert_eq!(read_matrix_csv(&buf[..]).unwrap(), m.rows());
        }
    }

    #[test]
    fn header_and_hex_format() {
        let (post, c) = flip_bit(0x3fc0_0000, DType::F32, 30).unwrap();
        let r = InjectionRecord {
            location: FaultLocation { layer_id: 3, kind: ParamKind::ConvBias, index: 2, bit: 30 },
            direction: c.direction,
            field: c.field,
            pre_bits: 0x3fc0_0000,
            post_bits: post,
            post_kind: c.post_kind,
            input_id: 0,
            error_rate: 0.5,
        };
        assert_eq!(r.post_kind, ValueKind::Nan);
        let mut buf = Vec::new();
        write_records_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "layer_id,kind,index,bit,direction,field,pre_bits,post_bits,post_kind,input_id,error_rate\n\
             3,conv_bias,2,30,zero_to_one,exponent,0x3fc00000,0x7fc00000,nan,0,0.5\n"
        );
        assert!(read_records_csv(text.replace("0x7fc00000", "7fc00000").as_bytes()).is_err());
    }
}
