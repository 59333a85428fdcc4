//! Run manifests and measured-versus-predicted comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::campaign::MatrixRow;
use crate::error::{Error, Result};
use crate::error_model::{Comparison, PredictionReport, Weighting};

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// What produced a set of output files, and their digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub model_digest: String,
    pub seed: u64,
    pub jobs: usize,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, model_digest: &str, seed: u64, jobs: usize) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            model_digest: model_digest.into(),
            seed,
            jobs,
            wall_seconds: 0.0,
            outputs: Vec::new(),
        })
    }

    /// Records `name` inside `dir` with its current digest.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let p = dir.join(name);
        let bytes = fs::metadata(&p)?.len();
        self.outputs.push(OutputFile { path: name.into(), bytes, sha256: file_sha256(&p)? });
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Names of listed outputs under `dir` whose digest no longer matches.
    pub fn stale_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            let p = dir.join(&o.path);
            if !p.exists() || file_sha256(&p)? != o.sha256 {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }
}

/// Result of comparing a prediction against a measured matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub layer_id: usize,
    /// Half-width in percentage points.
    pub half_width: f64,
    pub comparisons: Vec<Comparison>,
}

impl DeviationReport {
    pub fn any_flagged(&self) -> bool {
        self.comparisons.iter().any(|c| c.flagged)
    }
}

/// Compares a prediction with the measured cells of `layer`. Float
/// campaigns compare the bit-30 cell with the MSB expectation. Quantized
/// campaigns compare the cells of the profile's bit range: the saturated
/// cells' mean for a saturated-only profile, the plain mean over the
/// range for a linear ramp. `half_width` is in percentage points.
pub fn compare_prediction(
    rows: &[MatrixRow],
    prediction: &PredictionReport,
    layer: usize,
    half_width: f64,
    quantized: bool,
) -> Result<DeviationReport> {
    let cells: BTreeMap<u8, f64> = rows.iter().filter(|r| r.layer_id == layer).map(|r| (r.bit, r.mean)).collect();
    let mut comparisons = Vec::new();
    if !quantized {
        if let Some(m) = cells.get(&30) {
            comparisons.push(Comparison::new("msb", prediction.expected_msb, 100.0 * m, half_width));
        }
    } else {
        let prof = &prediction.profile;
        let bits: Vec<u8> = prof
            .bits()
            .filter(|&k| prof.weighting == Weighting::LinearRamp || prof.weight(k) > 0.0)
            .collect();
        if !bits.is_empty() && bits.iter().all(|k| cells.contains_key(k)) {
            let measured = bits.iter().map(|k| cells[k]).sum::<f64>() / bits.len() as f64;
            comparisons.push(Comparison::new("quantized", prediction.expected_quantized, 100.0 * measured, half_width));
        }
    }
    if comparisons.is_empty() {
        return Err(Error::Empty(format!("no matrix cells of layer {layer} overlap the prediction")));
    }
    Ok(DeviationReport { layer_id: layer, half_width, comparisons })
}
