//! One function per subcommand. Each writes into its own directory under
//! `paths.out_dir` and finishes with a `run.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sitscf::data::{load_csv, split_dataset, synth_generate_with, write_csv, write_synth_sidecar, Dataset, Splits};
use sitscf::evalsuite::{
    ablation_run, average_perturbation, pair_plausibility, perturbation_stats, summary_line, transition_matrix,
    write_json, IsolationForest, ADVERSARIAL_STREAM,
};
use sitscf::models::{ClassifierModel, CounterfactualPair};
use sitscf::persistence::{
    blob_path, load_classifier, load_noiser, save_checkpoint, sha256_hex, SavedModel,
};
use sitscf::report::fmt6;
use sitscf::training::{
    generate_counterfactuals, stream_rng, train_classifier, train_counterfactual, write_training_log,
};

use crate::config::RunConfig;
use crate::failure::{Category, Failure, Tag};

/// Stream of the run seed used by classifier training.
pub const CLASSIFIER_STREAM: u64 = 1;

/// Where every command reads and writes, relative to `out_dir`.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_owned() }
    }
    pub fn dir(&self, command: &str) -> PathBuf {
        self.root.join(command)
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir("synth").join("dataset.csv")
    }
    pub fn classifier(&self) -> PathBuf {
        self.dir("train-classifier").join("classifier.json")
    }
    pub fn noiser(&self) -> PathBuf {
        self.dir("train-cf").join("noiser.json")
    }
    pub fn pairs(&self) -> PathBuf {
        self.dir("generate").join("counterfactuals.csv")
    }
}

#[derive(Serialize)]
struct Seeds {
    seed: u64,
    split: u64,
    classifier_stream: u64,
    adversarial_stream: u64,
    iforest: u64,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    seeds: Seeds,
    /// sha256 of every file read, keyed by path.
    inputs: BTreeMap<String, String>,
    /// sha256 of every file written, keyed by path relative to the command directory.
    outputs: BTreeMap<String, String>,
}

/// Tracks files read and written by one command.
struct Run<'a> {
    command: &'static str,
    cfg: &'a RunConfig,
    layout: Layout,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

fn hash_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::new(Category::Data, format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl<'a> Run<'a> {
    fn start(command: &'static str, cfg: &'a RunConfig) -> Result<Self, Failure> {
        let layout = Layout::new(&cfg.paths.out_dir);
        let dir = layout.dir(command);
        fs::create_dir_all(&dir)
            .map_err(|e| Failure::new(Category::Config, format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            command,
            cfg,
            layout,
            dir,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Records an input file, failing with a pointer to `producer` when it
    /// does not exist.
    fn require(&mut self, path: &Path, what: &str, producer: &str) -> Result<(), Failure> {
        if !path.exists() {
            return Err(Failure::new(
                Category::Data,
                format!(
                    "missing {what} at {}; run `sitscf {producer}` first (with the same --out)",
                    path.display()
                ),
            ));
        }
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn require_checkpoint(&mut self, path: &Path, what: &str, producer: &str) -> Result<(), Failure> {
        self.require(path, what, producer)?;
        self.require(&blob_path(path), what, producer)
    }

    fn dataset(&mut self) -> Result<Dataset, Failure> {
        let path = match &self.cfg.paths.data {
            Some(p) => {
                if !p.exists() {
                    return Err(Failure::new(Category::Data, format!("dataset {} does not exist", p.display())));
                }
                self.inputs.insert(p.display().to_string(), hash_file(p)?);
                p.clone()
            }
            None => {
                let p = self.layout.dataset();
                self.require(&p, "dataset (paths.data is unset)", "synth")?;
                p
            }
        };
        load_csv(&path, self.cfg.paths.class_names.clone()).tag(Category::Data)
    }

    fn splits(&mut self) -> Result<Splits, Failure> {
        let data = self.dataset()?;
        split_dataset(&data, &self.cfg.split).tag(Category::Data)
    }

    fn classifier(&mut self) -> Result<ClassifierModel, Failure> {
        let path = self.layout.classifier();
        self.require_checkpoint(&path, "classifier checkpoint", "train-classifier")?;
        Ok(load_classifier(&path).tag(Category::Data)?.0)
    }

    fn finish(self) -> Result<(), Failure> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let key = p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
            outputs.insert(key, hash_file(p)?);
        }
        let record = RunRecord {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: self.cfg,
            seeds: Seeds {
                seed: self.cfg.seed,
                split: self.cfg.split.seed,
                classifier_stream: CLASSIFIER_STREAM,
                adversarial_stream: ADVERSARIAL_STREAM,
                iforest: self.cfg.eval.iforest.seed,
            },
            inputs: self.inputs,
            outputs,
        };
        write_json(&record, &self.dir.join("run.json")).tag(Category::Config)
    }
}

fn eval_split<'s>(splits: &'s Splits, name: &str) -> &'s Dataset {
    match name {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    }
}

/// Checkpoint manifest plus its blob as run outputs.
fn save(run: &mut Run, model: SavedModel, name: &str, metadata: serde_json::Value) -> Result<(), Failure> {
    let path = run.out(&format!("{name}.json"));
    run.outputs.push(blob_path(&path));
    save_checkpoint(&model, &path, run.cfg.seed, metadata).tag(Category::Train)?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("synth", cfg)?;
    let s = &cfg.synth;
    let (data, params) = synth_generate_with(s.n_per_class, cfg.seed, s.noise_sigma, s.series_len).tag(Category::Data)?;
    write_csv(&data, &run.out("dataset.csv")).tag(Category::Data)?;
    write_synth_sidecar(&params, &run.out("synth_params.json")).tag(Category::Data)?;
    println!("wrote {} samples to {}", data.len(), run.layout.dataset().display());
    run.finish()
}

pub fn train_clf(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("train-classifier", cfg)?;
    let splits = run.splits()?;
    let mut rng = stream_rng(cfg.seed, CLASSIFIER_STREAM);
    let out = train_classifier(&splits.train, &splits.val, &cfg.train, &mut rng).tag(Category::Train)?;
    let meta = json!({
        "epochs": cfg.train.classifier.epochs,
        "best_epoch": out.best_epoch,
        "best_val_f1": sitscf::report::round6(out.best_val_f1),
        "f1_average": cfg.train.f1_average,
    });
    save(&mut run, SavedModel::Classifier(out.model), "classifier", meta)?;
    write_training_log(&out.history, &run.out("training_log.csv")).tag(Category::Train)?;
    println!("best epoch {} val F1 {}", out.best_epoch, fmt6(out.best_val_f1));
    run.finish()
}

pub fn train_cf(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("train-cf", cfg)?;
    let classifier = run.classifier()?;
    let splits = run.splits()?;
    let mut rng = stream_rng(cfg.seed, ADVERSARIAL_STREAM);
    let out = train_counterfactual(&classifier, &splits.train, Some(&splits.val), &cfg.train, &mut rng)
        .tag(Category::Train)?;
    let meta = json!({
        "epochs": cfg.train.adversarial.epochs,
        "loss_weights": cfg.train.loss_weights,
    });
    save(&mut run, SavedModel::Noiser(out.noiser), "noiser", meta.clone())?;
    save(&mut run, SavedModel::Discriminator(out.discriminator), "discriminator", meta)?;
    write_training_log(&out.history, &run.out("training_log.csv")).tag(Category::Train)?;
    if let Some(last) = out.history.last().and_then(|h| h.val_swap_rate) {
        println!("final val swap rate {}", fmt6(last));
    }
    run.finish()
}

/// Header of the counterfactual pairs file.
fn pairs_header(len: usize) -> String {
    let mut h = String::from("id,y_src,y_cf,t_tilde");
    for t in 0..len {
        h.push_str(&format!(",delta_{t}"));
    }
    for t in 0..len {
        h.push_str(&format!(",x_cf_{t}"));
    }
    h
}

/// Labels are 1-based; values use the shortest form that reads back to the
/// same `f32`.
fn write_pairs(pairs: &[CounterfactualPair], len: usize, path: &Path) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::new(Category::Eval, format!("cannot write {}: {e}", path.display()));
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "{}", pairs_header(len)).map_err(io)?;
    for p in pairs {
        let (a, b) = (p.y_src.unwrap_or(0) + 1, p.y_cf.unwrap_or(0) + 1);
        let mut line = format!("{},{a},{b},{}", p.id, p.t_tilde);
        for v in p.delta.iter().chain(&p.x_cf) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a pairs file back, taking `x` and the ground truth from `data`.
fn read_pairs(path: &Path, data: &Dataset) -> Result<Vec<CounterfactualPair>, Failure> {
    let len = data.series_len;
    let bad = |row: usize, msg: String| Failure::new(Category::Data, format!("{} row {row}: {msg}", path.display()));
    let by_id: BTreeMap<u64, usize> = data.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut reader = csv::Reader::from_path(path).tag(Category::Data)?;
    let header = reader.headers().tag(Category::Data)?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != pairs_header(len) {
        return Err(bad(1, format!("header does not match a series length of {len}")));
    }
    let k = data.num_classes();
    let mut pairs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.tag(Category::Data)?;
        let num = |j: usize| -> Result<f64, Failure> {
            rec[j].parse::<f64>().map_err(|_| bad(row, format!("malformed value '{}'", &rec[j])))
        };
        let int = |j: usize| -> Result<u64, Failure> {
            rec[j].parse::<u64>().map_err(|_| bad(row, format!("malformed integer '{}'", &rec[j])))
        };
        let id = int(0)?;
        let &at = by_id.get(&id).ok_or_else(|| bad(row, format!("id {id} is not in the dataset")))?;
        let label = |j: usize| -> Result<usize, Failure> {
            let v = int(j)? as usize;
            if v == 0 || v > k {
                return Err(bad(row, format!("label {v} outside 1..={k}")));
            }
            Ok(v - 1)
        };
        let s = &data.samples[at];
        let mut values = Vec::with_capacity(2 * len);
        for j in 4..4 + 2 * len {
            values.push(num(j)? as f32);
        }
        pairs.push(CounterfactualPair {
            id,
            x: s.series.clone(),
            delta: values[..len].to_vec(),
            x_cf: values[len..].to_vec(),
            y_true: Some(s.label),
            y_src: Some(label(1)?),
            y_cf: Some(label(2)?),
            t_tilde: int(3)? as usize,
        });
    }
    if pairs.is_empty() {
        return Err(bad(1, "no counterfactual pairs".into()));
    }
    Ok(pairs)
}

pub fn generate(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("generate", cfg)?;
    let classifier = run.classifier()?;
    let noiser_path = run.layout.noiser();
    run.require_checkpoint(&noiser_path, "noiser checkpoint", "train-cf")?;
    let noiser = load_noiser(&noiser_path).tag(Category::Data)?.0;
    let splits = run.splits()?;
    let data = eval_split(&splits, &cfg.eval.split);
    let pairs = generate_counterfactuals(&classifier, &noiser, data).tag(Category::Eval)?;
    write_pairs(&pairs, data.series_len, &run.out("counterfactuals.csv"))?;
    println!(
        "{} counterfactuals on the {} split, swap rate {}",
        pairs.len(),
        cfg.eval.split,
        fmt6(sitscf::training::swap_rate(&pairs))
    );
    run.finish()
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("evaluate", cfg)?;
    let splits = run.splits()?;
    let pairs_path = run.layout.pairs();
    run.require(&pairs_path, "counterfactual pairs", "generate")?;
    let data = eval_split(&splits, &cfg.eval.split);
    let pairs = read_pairs(&pairs_path, data)?;

    let matrix = transition_matrix(&pairs, &data.class_names).tag(Category::Eval)?;
    let csv = run.out("transitions.csv");
    let chord = run.out("chord.json");
    fs::write(&csv, matrix.to_csv()).tag(Category::Eval)?;
    fs::write(&chord, matrix.chord_json().tag(Category::Eval)?).tag(Category::Eval)?;

    let stats = perturbation_stats(&pairs).tag(Category::Eval)?;
    write_json(&stats, &run.out("perturbation_stats.json")).tag(Category::Eval)?;

    let k = data.num_classes();
    for a in 0..k {
        for b in 0..k {
            if let Some(avg) = average_perturbation(&pairs, a, b).tag(Category::Eval)? {
                fs::write(run.out(&avg.file_name()), avg.to_csv()).tag(Category::Eval)?;
            }
        }
    }

    let forest = IsolationForest::fit_dataset(&splits.train, &cfg.eval.iforest).tag(Category::Eval)?;
    let plaus = pair_plausibility(&forest, &pairs, cfg.eval.iforest.contamination, &cfg.eval.split)
        .tag(Category::Eval)?;
    write_json(&plaus, &run.out("plausibility.json")).tag(Category::Eval)?;
    println!(
        "swap rate {} l2 {} iforest accuracy {} nmi {}",
        fmt6(stats.swap_rate),
        fmt6(stats.l2_mean),
        fmt6(plaus.accuracy),
        fmt6(plaus.nmi)
    );
    run.finish()
}

pub fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    let mut run = Run::start("ablate", cfg)?;
    let classifier = run.classifier()?;
    let splits = run.splits()?;
    let forest = IsolationForest::fit_dataset(&splits.train, &cfg.eval.iforest).tag(Category::Eval)?;
    let data = eval_split(&splits, &cfg.eval.split);
    let (report, runs) = ablation_run(
        &classifier,
        &splits.train,
        Some(&splits.val),
        data,
        &cfg.eval.split,
        &cfg.train,
        &forest,
        cfg.eval.iforest.contamination,
    )
    .tag(Category::Train)?;
    write_json(&report, &run.out("ablation.json")).tag(Category::Eval)?;
    for r in &runs {
        write_training_log(&r.history, &run.out(&format!("training_log_{}.csv", r.name))).tag(Category::Train)?;
    }
    for row in &report.rows {
        println!("{}", summary_line(row));
    }
    run.finish()
}
