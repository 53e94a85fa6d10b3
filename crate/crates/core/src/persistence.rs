//! Checkpoints as a JSON manifest plus a raw little-endian `f32` blob.
//!
//! `model.json` describes the network (kind, layer list, tensor directory
//! with byte ranges) and carries the blob's SHA-256; `model.bin` holds the
//! tensors concatenated in manifest order. Optimizer moments are not saved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ClassifierModel, DiscriminatorModel, ModelKind, Network, NoiserModel};
use crate::nnkernel::{LayerSpec, ParameterSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub byte_order: String,
    pub series_len: usize,
    /// Classifier only.
    pub num_classes: Option<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorRecord>,
    pub blob_file: String,
    pub blob_sha256: String,
    pub seed: u64,
    /// Free-form training metadata (epochs, best F1, loss weights...).
    pub metadata: serde_json::Value,
}

/// Any of the three networks.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Classifier(ClassifierModel),
    Noiser(NoiserModel),
    Discriminator(DiscriminatorModel),
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Classifier(_) => ModelKind::Classifier,
            SavedModel::Noiser(_) => ModelKind::Noiser,
            SavedModel::Discriminator(_) => ModelKind::Discriminator,
        }
    }

    pub fn network(&self) -> &Network {
        match self {
            SavedModel::Classifier(m) => &m.net,
            SavedModel::Noiser(m) => &m.net,
            SavedModel::Discriminator(m) => &m.net,
        }
    }

    fn series_len(&self) -> usize {
        match self {
            SavedModel::Classifier(m) => m.series_len,
            SavedModel::Noiser(m) => m.series_len,
            SavedModel::Discriminator(m) => m.series_len,
        }
    }
}

/// Blob path paired with a manifest path (`x.json` -> `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `path` (manifest) and its blob; returns the manifest.
pub fn save_checkpoint(model: &SavedModel, path: &Path, seed: u64, metadata: serde_json::Value) -> Result<Manifest> {
    let net = model.network();
    let mut blob = Vec::with_capacity(net.params().numel() * 4);
    let mut tensors = Vec::with_capacity(net.params().len());
    for e in net.params().iter() {
        if let Some(v) = e.value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{} parameter '{}'", model.kind(), e.name),
                context: format!("refusing to save value {v}"),
            });
        }
        let offset = blob.len() as u64;
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
            trainable: e.trainable,
        });
    }
    let blob_file = blob_path(path)
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
        .to_owned();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_kind: model.kind(),
        byte_order: "little".into(),
        series_len: model.series_len(),
        num_classes: match model {
            SavedModel::Classifier(m) => Some(m.num_classes),
            _ => None,
        },
        layers: net.layers().to_vec(),
        tensors,
        blob_file,
        blob_sha256: sha256_hex(&blob),
        seed,
        metadata,
    };
    let bp = blob_path(path);
    std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint(format!("{} has no format_version", path.display())))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    if manifest.byte_order != "little" {
        return Err(Error::Checkpoint(format!("unsupported byte order '{}'", manifest.byte_order)));
    }
    Ok(manifest)
}

/// Reads and verifies a checkpoint of any kind.
pub fn load_checkpoint(path: &Path) -> Result<(SavedModel, Manifest)> {
    let manifest = read_manifest(path)?;
    let bp = path.with_file_name(&manifest.blob_file);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!("blob {} does not match its recorded hash", bp.display())));
    }
    let mut params = ParameterSet::new(manifest.model_kind.to_string());
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor '{}' has unsupported dtype {}", t.name, t.dtype)));
        }
        let numel: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.length != numel as u64 * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' byte range {}+{} does not follow the directory layout",
                t.name, t.offset, t.length
            )));
        }
        let end = (t.offset + t.length) as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor '{}' runs past the end of the blob", t.name)));
        }
        let values = blob[t.offset as usize..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?, t.trainable)?;
        expected_offset = t.offset + t.length;
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, directory covers {expected_offset}",
            blob.len()
        )));
    }
    let net = Network::from_parts(manifest.layers.clone(), params)?;
    let model = match manifest.model_kind {
        ModelKind::Classifier => {
            let num_classes = manifest
                .num_classes
                .ok_or_else(|| Error::Checkpoint("classifier manifest lacks num_classes".into()))?;
            match net.layers().last() {
                Some(LayerSpec::Dense { outputs, .. }) if *outputs == num_classes => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "classifier layers do not end in a {num_classes}-way dense layer"
                    )))
                }
            }
            SavedModel::Classifier(ClassifierModel {
                net,
                num_classes,
                series_len: manifest.series_len,
            })
        }
        ModelKind::Noiser => SavedModel::Noiser(NoiserModel {
            net,
            series_len: manifest.series_len,
        }),
        ModelKind::Discriminator => SavedModel::Discriminator(DiscriminatorModel {
            net,
            series_len: manifest.series_len,
        }),
    };
    Ok((model, manifest))
}

fn kind_mismatch(path: &Path, wanted: ModelKind, found: ModelKind) -> Error {
    Error::Checkpoint(format!(
        "{} holds a {found} checkpoint, expected a {wanted}",
        path.display()
    ))
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel, Manifest)> {
    match load_checkpoint(path)? {
        (SavedModel::Classifier(m), man) => Ok((m, man)),
        (other, _) => Err(kind_mismatch(path, ModelKind::Classifier, other.kind())),
    }
}

pub fn load_noiser(path: &Path) -> Result<(NoiserModel, Manifest)> {
    match load_checkpoint(path)? {
        (SavedModel::Noiser(m), man) => Ok((m, man)),
        (other, _) => Err(kind_mismatch(path, ModelKind::Noiser, other.kind())),
    }
}

pub fn load_discriminator(path: &Path) -> Result<(DiscriminatorModel, Manifest)> {
    match load_checkpoint(path)? {
        (SavedModel::Discriminator(m), man) => Ok((m, man)),
        (other, _) => Err(kind_mismatch(path, ModelKind::Discriminator, other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::models::{NoiserConfig, TempCnnConfig};

    fn small_classifier() -> ClassifierModel {
        let cfg = TempCnnConfig {
            conv_channels: vec![4, 4],
            kernel: 3,
            dropout: 0.1,
            dense_units: 8,
        };
        ClassifierModel::new(&cfg, 6, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn probe() -> Tensor {
        Tensor::new(vec![2, 6], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        let clf = small_classifier();
        save_checkpoint(&SavedModel::Classifier(clf.clone()), &a, 3, serde_json::json!({"epochs": 2})).unwrap();
        let (back, man) = load_classifier(&a).unwrap();
        assert_eq!(man.seed, 3);
        assert_eq!(back.net.params().content_hash(), clf.net.params().content_hash());
        let (p, q) = (clf.predict_proba(&probe()).unwrap(), back.predict_proba(&probe()).unwrap());
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        save_checkpoint(&SavedModel::Classifier(back), &b, 3, serde_json::json!({"epochs": 2})).unwrap();
        assert_eq!(std::fs::read(blob_path(&a)).unwrap(), std::fs::read(blob_path(&b)).unwrap());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&SavedModel::Classifier(small_classifier()), &p, 0, serde_json::Value::Null).unwrap();
        let mut blob = std::fs::read(blob_path(&p)).unwrap();
        blob[5] ^= 0x40;
        std::fs::write(blob_path(&p), blob).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn version_bump_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&SavedModel::Classifier(small_classifier()), &p, 0, serde_json::Value::Null).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn kind_mismatch_and_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&SavedModel::Classifier(small_classifier()), &p, 0, serde_json::Value::Null).unwrap();
        let err = load_discriminator(&p).unwrap_err();
        assert!(err.to_string().contains("expected a discriminator"), "{err}");

        let mut man = read_manifest(&p).unwrap();
        let removed = man.tensors.pop().unwrap();
        let blob = std::fs::read(blob_path(&p)).unwrap();
        let cut = &blob[..removed.offset as usize];
        man.blob_sha256 = sha256_hex(cut);
        std::fs::write(blob_path(&p), cut).unwrap();
        std::fs::write(&p, serde_json::to_string(&man).unwrap()).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains(&removed.name), "{err}");
    }

    #[test]
    fn non_finite_parameters_are_refused() {
        let mut noiser = NoiserModel::new(&NoiserConfig::default(), 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut t = noiser.net.params().get("0.bias").unwrap().clone();
        t.data_mut()[0] = f32::NAN;
        noiser.net.params_mut().set("0.bias", t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(&SavedModel::Noiser(noiser), &dir.path().join("n.json"), 0, serde_json::Value::Null)
            .unwrap_err();
        assert!(err.to_string().contains("'0.bias'"), "{err}");
    }

    #[test]
    fn blob_is_little_endian_in_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let clf = small_classifier();
        let man = save_checkpoint(&SavedModel::Classifier(clf.clone()), &p, 0, serde_json::Value::Null).unwrap();
        let blob = std::fs::read(blob_path(&p)).unwrap();
        let first = &man.tensors[0];
        let v0 = f32::from_le_bytes(blob[0..4].try_into().unwrap());
        assert_eq!(v0.to_bits(), clf.net.params().get(&first.name).unwrap().data()[0].to_bits());
        assert_eq!(man.tensors.last().map(|t| t.offset + t.length), Some(blob.len() as u64));
    }
}
