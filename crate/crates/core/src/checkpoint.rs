//! On-disk checkpoints: `manifest.json` plus `params.bin`.
//!
//! `params.bin` is the concatenation of every parameter array as
//! little-endian `f64`, in the order listed by the manifest's `tensors`
//! table (which also records each array's shape and byte offset). The
//! manifest carries a SHA-256 of the binary so a mismatched pair is caught
//! on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{RobustScaler, StreamConfig};
use crate::error::{Error, Result};
use crate::export::write_json;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::uncertainty::{DetectorMode, MahalanobisDetector};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub streams: StreamConfig,
    pub scaler: RobustScaler,
    pub tau_learned: f64,
    pub tau_star: Option<f64>,
    /// Decision threshold on `σ(ℓ/τ_learned)`.
    pub threshold: Option<f64>,
    pub detectors: Vec<MahalanobisDetector>,
    pub seed: Option<u64>,
    pub best_epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub params_sha256: String,
}

/// A trained model with everything fitted after training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: RobustScaler,
    pub tau_star: Option<f64>,
    pub threshold: Option<f64>,
    pub detectors: Vec<MahalanobisDetector>,
    pub seed: Option<u64>,
    pub best_epoch: Option<usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(params: &ParamStore) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(params.scalar_count() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

fn decode(bytes: &[u8], entries: &[TensorEntry]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        let raw = bytes.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("`{}` extends past the end of {PARAMS_FILE}", e.name))
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("`{}`: {err}", e.name)))?;
        store.insert(e.name.clone(), t)?;
    }
    Ok(store)
}

impl Checkpoint {
    pub fn temperature(&self) -> f64 {
        self.model.temperature()
    }

    /// `τ*` when calibrated, otherwise the learned `τ`.
    pub fn inference_temperature(&self) -> f64 {
        self.tau_star.unwrap_or_else(|| self.temperature())
    }

    pub fn detector(&self, mode: DetectorMode) -> Option<&MahalanobisDetector> {
        self.detectors.iter().find(|d| d.mode == mode)
    }

    pub fn manifest(&self) -> (Manifest, Vec<u8>) {
        let (bytes, tensors) = encode(&self.model.params);
        let m = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            streams: self.model.streams.clone(),
            scaler: self.scaler.clone(),
            tau_learned: self.temperature(),
            tau_star: self.tau_star,
            threshold: self.threshold,
            detectors: self.detectors.clone(),
            seed: self.seed,
            best_epoch: self.best_epoch,
            tensors,
            params_sha256: sha256_hex(&bytes),
        };
        (m, bytes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (m, bytes) = self.manifest();
        let bin = dir.join(PARAMS_FILE);
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        write_json(&dir.join(MANIFEST_FILE), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        let bpath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let digest = sha256_hex(&bytes);
        if digest != m.params_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} does not match the manifest checksum",
                bpath.display()
            )));
        }
        let params = decode(&bytes, &m.tensors)?;
        let model = Model::from_params(m.model, m.streams, params)?;
        Ok(Self {
            model,
            scaler: m.scaler,
            tau_star: m.tau_star,
            threshold: m.threshold,
            detectors: m.detectors,
            seed: m.seed,
            best_epoch: m.best_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureStats, StreamId};
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let streams = StreamConfig::with_cross_product(2, 2, 3, StreamId::Attention, StreamId::Positional).unwrap();
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            d_z: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, streams, &mut RngStream::new(4)).unwrap();
        let stats = |n| FeatureStats {
            median: vec![0.1; n],
            iqr: vec![1.0 / 3.0; n],
        };
        Checkpoint {
            model,
            scaler: RobustScaler {
                a: stats(2),
                p: stats(2),
                s: stats(3),
                iqr_floor: 1e-6,
            },
            tau_star: Some(1.2345678901234567),
            threshold: Some(0.4),
            detectors: vec![],
            seed: Some(3),
            best_epoch: Some(7),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(bytes.len(), 8 * c.model.params.scalar_count());
        let first = c.model.params.tensors()[0].data()[0];
        assert_eq!(bytes[..8], first.to_le_bytes());
    }

    #[test]
    fn tampered_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
