//! Datasets of univariate NDVI series: CSV ingestion, stratified splitting
//! and a synthetic double-logistic phenology generator.
//!
//! Labels are 1-based in files (`1..=K`) and 0-based in memory.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::Tensor;

pub const SERIES_LEN: usize = 24;

pub const DEFAULT_CLASS_NAMES: [&str; 8] = [
    "Cereals",
    "Cotton",
    "Oleaginous",
    "Grassland",
    "Shrubland",
    "Forest",
    "Bare soil",
    "Water",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    /// 0-based class index.
    pub label: usize,
    pub series: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub series_len: usize,
}

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, series_len: usize) -> Result<Self> {
        let ds = Self {
            samples,
            class_names,
            series_len,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks lengths, NDVI range, label range and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("class table is empty".into()));
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.series.len() != self.series_len {
                return Err(Error::Data(format!(
                    "sample {} has length {}, expected {}",
                    s.id,
                    s.series.len(),
                    self.series_len
                )));
            }
            if s.label >= self.num_classes() {
                return Err(Error::Data(format!(
                    "sample {} has label {} outside 1..={}",
                    s.id,
                    s.label + 1,
                    self.num_classes()
                )));
            }
            if let Some(v) = s.series.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("sample {} has value {v} outside [-1, 1]", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            series_len: self.series_len,
        }
    }

    /// `[n, T]` tensor of the selected series.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.series_len);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].series);
        }
        Tensor::new(vec![indices.len(), self.series_len], data).expect("validated lengths")
    }

    pub fn all_series(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Reads `id,label,t0,...,t{T-1}` with 1-based labels. `class_names`
/// defaults to the eight-class table.
pub fn load_csv(path: &Path, class_names: Option<Vec<String>>) -> Result<Dataset> {
    let class_names = class_names.unwrap_or_else(default_class_names);
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::DataRow {
            row: 1,
            message: "header must start with 'id,label,t0'".into(),
        });
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("t{j}") {
            return Err(Error::DataRow {
                row: 1,
                message: format!("column {} should be 't{j}', found '{name}'", j + 3),
            });
        }
    }
    let series_len = header.len() - 2;
    let k = class_names.len();
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::DataRow {
                row,
                message: format!(
                    "expected {} columns ({} time steps), found {}",
                    header.len(),
                    series_len,
                    record.len()
                ),
            });
        }
        let bad = |message: String| Error::DataRow { row, message };
        let id: u64 = record[0]
            .parse()
            .map_err(|_| bad(format!("malformed id '{}'", &record[0])))?;
        let label: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("malformed label '{}'", &record[1])))?;
        if label == 0 || label > k {
            return Err(bad(format!("unknown label {label} (expected 1..={k})")));
        }
        let mut series = Vec::with_capacity(series_len);
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| bad(format!("malformed value '{field}' in t{j}")))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(bad(format!("value {v} in t{j} is outside [-1, 1]")));
            }
            series.push(v);
        }
        if !ids.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        samples.push(Sample {
            id,
            label: label - 1,
            series,
        });
    }
    Dataset::new(samples, class_names, series_len)
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::from("id,label");
    for t in 0..dataset.series_len {
        line.push_str(&format!(",t{t}"));
    }
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for s in &dataset.samples {
        line.clear();
        line.push_str(&format!("{},{}", s.id, s.label + 1));
        for v in &s.series {
            line.push_str(&format!(",{v:.6}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.50,
            val: 0.17,
            test: 0.33,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-6 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Train/validation/test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Sizes `(train, val, test)` for `n` items; train and validation are
/// rounded, test takes the remainder.
fn split_sizes(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let train = ((n as f64 * spec.train).round() as usize).min(n);
    let val = ((n as f64 * spec.val).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Seeded, optionally per-class, partition. Each output keeps the input
/// order of its members.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for (i, s) in dataset.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };
    let parts = [spec.train, spec.val, spec.test].iter().filter(|f| **f > 0.0).count();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        if group.len() < parts {
            let label = dataset.samples[group[0]].label;
            return Err(Error::Data(format!(
                "class '{}' has {} samples, fewer than the {parts} splits",
                dataset.class_names[label],
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let (a, b, _) = split_sizes(group.len(), spec);
        train.extend_from_slice(&group[..a]);
        val.extend_from_slice(&group[a..a + b]);
        test.extend_from_slice(&group[a + b..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok(Splits {
        train: dataset.subset(&train),
        val: dataset.subset(&val),
        test: dataset.subset(&test),
    })
}

/// Double-logistic seasonal profile:
/// `base + amplitude * (s((t - green_up) / up_slope) - s((t - senescence) / down_slope))`
/// with `s` the logistic function and `t` the time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenologyTemplate {
    pub class_name: String,
    pub base: f32,
    pub amplitude: f32,
    pub green_up: f32,
    pub up_slope: f32,
    pub senescence: f32,
    pub down_slope: f32,
}

impl PhenologyTemplate {
    pub fn series(&self, len: usize) -> Vec<f32> {
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        (0..len)
            .map(|t| {
                let t = t as f64;
                let v = self.base as f64
                    + self.amplitude as f64
                        * (s((t - self.green_up as f64) / self.up_slope as f64)
                            - s((t - self.senescence as f64) / self.down_slope as f64));
                v as f32
            })
            .collect()
    }
}

/// Template rows: (base, amplitude, green-up, up slope, senescence, down slope).
/// Crops have one strong, short season at staggered dates; grassland and
/// shrubland have weaker, broader seasons; forest a high broad plateau;
/// bare soil is low and nearly flat; water is negative throughout.
const TEMPLATE_TABLE: [(f32, f32, f32, f32, f32, f32); 8] = [
    (0.15, 0.60, 10.0, 0.8, 16.0, 0.8),
    (0.15, 0.55, 12.0, 0.8, 19.0, 0.9),
    (0.15, 0.50, 8.5, 0.9, 14.5, 1.0),
    (0.20, 0.35, 9.5, 1.5, 19.0, 1.5),
    (0.25, 0.30, 8.0, 2.0, 21.0, 2.0),
    (0.45, 0.30, 7.0, 2.0, 22.0, 2.5),
    (0.08, 0.08, 11.0, 1.5, 17.0, 1.5),
    (-0.30, 0.05, 11.0, 2.0, 18.0, 2.0),
];

pub fn default_templates() -> Vec<PhenologyTemplate> {
    TEMPLATE_TABLE
        .iter()
        .zip(DEFAULT_CLASS_NAMES)
        .map(|(&(base, amplitude, green_up, up_slope, senescence, down_slope), name)| PhenologyTemplate {
            class_name: name.to_string(),
            base,
            amplitude,
            green_up,
            up_slope,
            senescence,
            down_slope,
        })
        .collect()
}

/// Parameters of a synthetic dataset, written next to it as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_per_class: usize,
    pub seed: u64,
    pub noise_sigma: f32,
    pub series_len: usize,
    pub templates: Vec<PhenologyTemplate>,
}

/// Eight classes of template + i.i.d. Gaussian noise, clipped to [-1, 1].
/// Samples are ordered by class; ids run from 0.
pub fn synth_generate(n_per_class: usize, seed: u64, noise_sigma: f32) -> Result<Dataset> {
    synth_generate_with(n_per_class, seed, noise_sigma, SERIES_LEN).map(|(d, _)| d)
}

pub fn synth_generate_with(
    n_per_class: usize,
    seed: u64,
    noise_sigma: f32,
    series_len: usize,
) -> Result<(Dataset, SynthParams)> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be a non-negative number, got {noise_sigma}"
        )));
    }
    let templates = default_templates();
    let normal = Normal::new(0.0f32, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_per_class * templates.len());
    for (label, tpl) in templates.iter().enumerate() {
        let base = tpl.series(series_len);
        for _ in 0..n_per_class {
            let series = base
                .iter()
                .map(|&v| {
                    let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    (v + noise).clamp(-1.0, 1.0)
                })
                .collect();
            samples.push(Sample {
                id: samples.len() as u64,
                label,
                series,
            });
        }
    }
    let params = SynthParams {
        n_per_class,
        seed,
        noise_sigma,
        series_len,
        templates,
    };
    Ok((Dataset::new(samples, default_class_names(), series_len)?, params))
}

pub fn write_synth_sidecar(params: &SynthParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(params)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
