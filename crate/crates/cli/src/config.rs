//! Run configuration: one JSON document, optionally patched by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sitscf::data::{SplitSpec, SERIES_LEN};
use sitscf::evalsuite::IsolationForestConfig;
use sitscf::training::TrainConfig;

use crate::failure::{Category, Failure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input dataset CSV. When unset, the output of `synth` is used.
    pub data: Option<PathBuf>,
    /// Names for labels `1..=K` of the input CSV; the eight-class table
    /// when unset.
    pub class_names: Option<Vec<String>>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            class_names: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub noise_sigma: f32,
    pub series_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            noise_sigma: 0.02,
            series_len: SERIES_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split the counterfactuals are generated and evaluated on.
    pub split: String,
    pub iforest: IsolationForestConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            iforest: IsolationForestConfig::default(),
        }
    }
}

/// Everything a command needs. `seed` is the single source of randomness;
/// the seeds inside `split`, `train` and `eval.iforest` are overwritten
/// with it when the config is resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a config document, or the `config` member of a `run.json`.
    pub fn load(path: &Path) -> Result<Value, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(Category::Config, format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::new(Category::Config, format!("config {} is not valid JSON: {e}", path.display())))?;
        if doc.get("command").is_some() {
            if let Some(cfg) = doc.get_mut("config") {
                return Ok(cfg.take());
            }
        }
        Ok(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self, Failure> {
        serde_json::from_value(doc).map_err(|e| Failure::new(Category::Config, format!("invalid config: {e}")))
    }

    pub fn resolve(mut self) -> Result<Self, Failure> {
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.iforest.seed = self.seed;
        let cfg_err = |e: sitscf::Error| Failure::new(Category::Config, e.to_string());
        self.split.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        self.eval.iforest.validate().map_err(cfg_err)?;
        if self.synth.n_per_class == 0 || self.synth.series_len == 0 {
            return Err(Failure::new(Category::Config, "synth.n_per_class and synth.series_len must be positive"));
        }
        if !(self.synth.noise_sigma >= 0.0) {
            return Err(Failure::new(Category::Config, "synth.noise_sigma must be non-negative"));
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(Failure::new(
                Category::Config,
                format!("eval.split must be train, val or test, got {:?}", self.eval.split),
            ));
        }
        Ok(self)
    }
}

/// Sets `key.path=value` in a JSON document. The value is parsed as JSON
/// and taken as a plain string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), Failure> {
    let bad = |msg: String| Failure::new(Category::Config, msg);
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(bad(format!("empty key segment in {key:?}")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(bad(format!("{key:?}: {part:?} is not inside an object")));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = map.entry(*part).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.train.classifier.epochs, 1000);
        assert_eq!(c.train.adversarial.epochs, 100);
        assert_eq!(c.train.classifier.batch_size, 32);
        assert_eq!(c.train.adversarial.batch_size, 128);
        assert_eq!(c.train.loss_weights.lambda_gen, 0.5);
        assert_eq!(c.train.loss_weights.lambda_wl1, 0.05);
        assert_eq!(c.eval.iforest.contamination, 0.10);
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "train.classifier.epochs=7").unwrap();
        apply_override(&mut doc, "paths.data=some/file.csv").unwrap();
        apply_override(&mut doc, "seed=42").unwrap();
        let c = RunConfig::from_value(doc).unwrap().resolve().unwrap();
        assert_eq!(c.train.classifier.epochs, 7);
        assert_eq!(c.paths.data.as_deref(), Some(Path::new("some/file.csv")));
        assert_eq!((c.split.seed, c.train.seed, c.eval.iforest.seed), (42, 42, 42));
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "trian.epochs=3").unwrap();
        assert_eq!(RunConfig::from_value(doc).unwrap_err().category, Category::Config);

        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "train.adversarial.batch_size=1").unwrap();
        let err = RunConfig::from_value(doc).unwrap().resolve().unwrap_err();
        assert_eq!(err.category, Category::Config);

        assert!(apply_override(&mut Value::Null, "novalue").is_err());
    }

    #[test]
    fn run_json_is_accepted_as_a_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        let doc = serde_json::json!({ "command": "synth", "config": cfg });
        std::fs::write(&path, doc.to_string()).unwrap();
        let back = RunConfig::from_value(RunConfig::load(&path).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
