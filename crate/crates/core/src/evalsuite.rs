//! Counterfactual evaluation: class-transition tallies, perturbation norms
//! and localization, per-transition average profiles, Isolation Forest
//! plausibility and the loss ablation.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{modulo_distance, LossWeights};
use crate::models::{ClassifierModel, CounterfactualPair, DiscriminatorModel, NoiserModel};
use crate::report::{fmt6, ser6, ser6_vec};
use crate::training::{generate_counterfactuals, stream_rng, train_counterfactual, EpochStats, TrainConfig};

/// Euler–Mascheroni constant used in the harmonic-number approximation.
const EULER_GAMMA: f64 = 0.5772156649;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn labels_of(p: &CounterfactualPair) -> Result<(usize, usize)> {
    match (p.y_src, p.y_cf) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Eval(format!("pair {} has no predicted labels", p.id))),
    }
}

/// `counts[src][cf]` over predicted classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

pub fn transition_matrix(pairs: &[CounterfactualPair], class_names: &[String]) -> Result<TransitionMatrix> {
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for p in pairs {
        let (a, b) = labels_of(p)?;
        if a >= k || b >= k {
            return Err(Error::Eval(format!(
                "pair {} has label outside the {k}-class table ({} -> {})",
                p.id,
                a + 1,
                b + 1
            )));
        }
        counts[a][b] += 1;
    }
    Ok(TransitionMatrix {
        class_names: class_names.to_vec(),
        counts,
    })
}

#[derive(Serialize)]
struct ChordNode<'a> {
    id: usize,
    name: &'a str,
}

#[derive(Serialize)]
struct ChordEdge {
    source: usize,
    target: usize,
    weight: u64,
}

#[derive(Serialize)]
struct ChordData<'a> {
    nodes: Vec<ChordNode<'a>>,
    edges: Vec<ChordEdge>,
}

impl TransitionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// `1 - diagonal / total`.
    pub fn swap_rate(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 1.0 - self.diagonal() as f64 / t as f64,
        }
    }

    /// Header `source,<class names...>` then one row per source class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    /// Nodes (1-based class ids) and the weighted off-diagonal edges.
    pub fn chord_json(&self) -> Result<String> {
        let nodes = self
            .class_names
            .iter()
            .enumerate()
            .map(|(i, name)| ChordNode { id: i + 1, name })
            .collect();
        let mut edges = Vec::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if i != j && w > 0 {
                    edges.push(ChordEdge {
                        source: i + 1,
                        target: j + 1,
                        weight: w,
                    });
                }
            }
        }
        Ok(serde_json::to_string_pretty(&ChordData { nodes, edges })? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("transitions.csv"), &self.to_csv())?;
        write_text(&dir.join("chord.json"), &self.chord_json()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub count: usize,
    #[serde(serialize_with = "ser6")]
    pub l2_mean: f64,
    #[serde(serialize_with = "ser6")]
    pub l2_std: f64,
    #[serde(serialize_with = "ser6")]
    pub l1_mean: f64,
    #[serde(serialize_with = "ser6")]
    pub l1_std: f64,
    #[serde(serialize_with = "ser6")]
    pub swap_rate: f64,
    /// Samples whose source prediction matches the ground truth.
    pub correct_count: usize,
    #[serde(serialize_with = "ser6")]
    pub swap_rate_correct: f64,
    /// Mean fraction of `sum |delta|` within circular radius `r` of the
    /// peak, for `r = 0..=T/2`. Pairs with an all-zero perturbation are
    /// left out.
    #[serde(serialize_with = "ser6_vec")]
    pub localization: Vec<f64>,
    /// Fraction of counterfactuals leaving `[-1, 1]` somewhere.
    #[serde(serialize_with = "ser6")]
    pub out_of_range_rate: f64,
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of `sum |delta|` within circular radius `r` of `t_tilde`, for
/// each `r` in `0..=T/2`; `None` when `delta` is all zero.
pub fn localization_curve(delta: &[f32], t_tilde: usize) -> Option<Vec<f64>> {
    let len = delta.len();
    let total: f64 = delta.iter().map(|d| d.abs() as f64).sum();
    if total == 0.0 {
        return None;
    }
    let mut by_radius = vec![0.0f64; len / 2 + 1];
    for (t, d) in delta.iter().enumerate() {
        by_radius[modulo_distance(t, t_tilde, len)] += d.abs() as f64;
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = by_radius
        .iter()
        .map(|m| {
            acc += m;
            (acc / total).min(1.0)
        })
        .collect();
    *curve.last_mut().expect("non-empty") = 1.0;
    Some(curve)
}

pub fn perturbation_stats(pairs: &[CounterfactualPair]) -> Result<PerturbationStats> {
    if pairs.is_empty() {
        return Err(Error::Eval("perturbation statistics need at least one pair".into()));
    }
    let len = pairs[0].delta.len();
    let mut l2 = Vec::with_capacity(pairs.len());
    let mut l1 = Vec::with_capacity(pairs.len());
    let mut swaps = 0usize;
    let (mut correct, mut correct_swaps) = (0usize, 0usize);
    let mut loc_sum = vec![0.0f64; len / 2 + 1];
    let mut loc_count = 0usize;
    let mut out_of_range = 0usize;
    for p in pairs {
        if p.delta.len() != len {
            return Err(Error::shape("perturbation_stats", "pairs have different series lengths"));
        }
        let (a, b) = labels_of(p)?;
        l2.push(p.delta.iter().map(|d| (*d as f64).powi(2)).sum::<f64>().sqrt());
        l1.push(p.delta.iter().map(|d| d.abs() as f64).sum());
        swaps += (a != b) as usize;
        if p.y_true == Some(a) {
            correct += 1;
            correct_swaps += (a != b) as usize;
        }
        if let Some(curve) = localization_curve(&p.delta, p.t_tilde) {
            for (s, c) in loc_sum.iter_mut().zip(curve) {
                *s += c;
            }
            loc_count += 1;
        }
        out_of_range += p.out_of_range() as usize;
    }
    let (l2_mean, l2_std) = mean_std(&l2);
    let (l1_mean, l1_std) = mean_std(&l1);
    let localization = if loc_count == 0 {
        vec![1.0; len / 2 + 1]
    } else {
        loc_sum.iter().map(|s| s / loc_count as f64).collect()
    };
    let n = pairs.len() as f64;
    Ok(PerturbationStats {
        count: pairs.len(),
        l2_mean,
        l2_std,
        l1_mean,
        l1_std,
        swap_rate: swaps as f64 / n,
        correct_count: correct,
        swap_rate_correct: if correct == 0 {
            0.0
        } else {
            correct_swaps as f64 / correct as f64
        },
        localization,
        out_of_range_rate: out_of_range as f64 / n,
    })
}

/// Mean and standard deviation of `delta` over successful pairs of one
/// transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragePerturbation {
    pub source: usize,
    pub target: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub support: usize,
}

/// `None` when no successful pair goes from `source` to `target`.
pub fn average_perturbation(
    pairs: &[CounterfactualPair],
    source: usize,
    target: usize,
) -> Result<Option<AveragePerturbation>> {
    let mut matching = Vec::new();
    for p in pairs {
        let (a, b) = labels_of(p)?;
        if a == source && b == target && a != b {
            matching.push(&p.delta);
        }
    }
    let Some(first) = matching.first() else {
        return Ok(None);
    };
    let len = first.len();
    let columns: Vec<(f64, f64)> = (0..len)
        .map(|t| mean_std(&matching.iter().map(|d| d[t] as f64).collect::<Vec<_>>()))
        .collect();
    Ok(Some(AveragePerturbation {
        source,
        target,
        mean: columns.iter().map(|c| c.0).collect(),
        std: columns.iter().map(|c| c.1).collect(),
        support: matching.len(),
    }))
}

impl AveragePerturbation {
    /// `avg_perturbation_<src>_<dst>.csv` with 1-based class ids.
    pub fn file_name(&self) -> String {
        format!("avg_perturbation_{}_{}.csv", self.source + 1, self.target + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# support={}\nt,mean,std\n", self.support);
        for (t, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{t},{},{}\n", fmt6(*m), fmt6(*s)));
        }
        out
    }
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

/// Average path length of an unsuccessful search in a binary search tree
/// of `m` points: `2 H(m - 1) - 2 (m - 1) / m`.
pub fn average_path_length(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    let m = m as f64;
    2.0 * ((m - 1.0).ln() + EULER_GAMMA) - 2.0 * (m - 1.0) / m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IsolationTree {
    nodes: Vec<TreeNode>,
}

impl IsolationTree {
    fn build(rows: &[&[f32]], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        let idx: Vec<usize> = (0..rows.len()).collect();
        tree.grow(rows, idx, 0, height_limit, rng);
        tree
    }

    fn grow(&mut self, rows: &[&[f32]], idx: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        if depth >= limit || idx.len() <= 1 {
            self.nodes.push(TreeNode::Leaf { size: idx.len() });
            return id;
        }
        let feature = rng.random_range(0..rows[0].len());
        let (lo, hi) = idx.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(rows[i][feature]), hi.max(rows[i][feature]))
        });
        let threshold = if hi > lo {
            loop {
                let t = rng.random_range(lo..hi);
                if t > lo {
                    break t;
                }
            }
        } else {
            lo
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| rows[i][feature] < threshold);
        self.nodes.push(TreeNode::Leaf { size: 0 });
        let l = self.grow(rows, left, depth + 1, limit, rng);
        let r = self.grow(rows, right, depth + 1, limit, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        id
    }

    /// Depth of the leaf reached plus `c(size)` for its remaining points.
    fn path_length(&self, x: &[f32]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold { *left } else { *right };
                    depth += 1;
                }
                TreeNode::Leaf { size } => return depth as f64 + average_path_length(*size),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    pub subsample: usize,
    pub height_limit: usize,
    pub num_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsolationForestConfig {
    pub trees: usize,
    pub subsample: usize,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for IsolationForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            subsample: 256,
            contamination: 0.10,
            seed: 0,
        }
    }
}

impl IsolationForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.subsample == 0 {
            return Err(Error::InvalidArgument("isolation forest needs trees >= 1 and subsample >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::InvalidArgument(format!(
                "contamination must lie in [0, 1), got {}",
                self.contamination
            )));
        }
        Ok(())
    }
}

impl IsolationForest {
    /// Each tree sees `min(subsample, n)` rows drawn without replacement;
    /// splits pick a feature and a threshold uniformly at random.
    pub fn fit(rows: &[&[f32]], trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Eval("isolation forest needs at least one training row".into()));
        }
        if trees == 0 || subsample == 0 {
            return Err(Error::InvalidArgument("isolation forest needs trees >= 1 and subsample >= 1".into()));
        }
        let num_features = rows[0].len();
        if num_features == 0 || rows.iter().any(|r| r.len() != num_features) {
            return Err(Error::shape("iforest_fit", "rows must share a positive length"));
        }
        let psi = subsample.min(rows.len());
        let height_limit = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees)
            .map(|_| {
                let mut pick = sample(&mut rng, rows.len(), psi).into_vec();
                pick.sort_unstable();
                let sub: Vec<&[f32]> = pick.iter().map(|&i| rows[i]).collect();
                IsolationTree::build(&sub, height_limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            subsample: psi,
            height_limit,
            num_features,
        })
    }

    pub fn fit_dataset(data: &Dataset, cfg: &IsolationForestConfig) -> Result<Self> {
        cfg.validate()?;
        let rows: Vec<&[f32]> = data.samples.iter().map(|s| s.series.as_slice()).collect();
        Self::fit(&rows, cfg.trees, cfg.subsample, cfg.seed)
    }

    pub fn mean_path_length(&self, x: &[f32]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(Error::State("isolation forest has no trees".into()));
        }
        if x.len() != self.num_features {
            return Err(Error::shape(
                "iforest_score",
                format!("series of length {} for a forest over {} features", x.len(), self.num_features),
            ));
        }
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// `2^(-E[h(x)] / c(psi))`, in (0, 1].
    pub fn score(&self, x: &[f32]) -> Result<f64> {
        Ok(anomaly_score(self.mean_path_length(x)?, self.subsample))
    }

    pub fn scores(&self, rows: &[&[f32]]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.score(r)).collect()
    }
}

/// `2^(-h / c(psi))`; a subsample of one point gives 1.
pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    let c = average_path_length(psi);
    if c == 0.0 {
        return 1.0;
    }
    2f64.powf(-mean_path / c)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `2 I(U; V) / (H(U) + H(V))`; two constant labelings give 0.
pub fn nmi(u: &[usize], v: &[usize]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Eval(format!(
            "NMI needs two equal non-empty labelings, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let ku = u.iter().max().copied().unwrap_or(0) + 1;
    let kv = v.iter().max().copied().unwrap_or(0) + 1;
    let mut joint = vec![vec![0.0f64; kv]; ku];
    for (&a, &b) in u.iter().zip(v) {
        joint[a][b] += 1.0;
    }
    let n = u.len() as f64;
    let row: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kv).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in joint.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (n * c / (row[i] * col[j])).ln();
            }
        }
    }
    let denom = entropy(&row, n) + entropy(&col, n);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * mi / denom).clamp(0.0, 1.0))
}

/// Linear-interpolation quantile of unsorted values.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Inlier/outlier agreement between real series and their counterfactuals.
/// `contingency[r][c]` counts real status `r` against counterfactual status
/// `c`, with 0 = inlier and 1 = outlier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub split: String,
    pub count: usize,
    #[serde(serialize_with = "ser6")]
    pub contamination: f64,
    #[serde(serialize_with = "ser6")]
    pub threshold: f64,
    pub contingency: [[u64; 2]; 2],
    #[serde(serialize_with = "ser6")]
    pub accuracy: f64,
    #[serde(serialize_with = "ser6")]
    pub nmi: f64,
    #[serde(serialize_with = "ser6")]
    pub real_inlier_ratio: f64,
    #[serde(serialize_with = "ser6")]
    pub cf_inlier_ratio: f64,
}

/// Scores above the `(1 - contamination)` quantile of the real scores are
/// outliers.
pub fn plausibility_report(
    forest: &IsolationForest,
    real: &[&[f32]],
    cf: &[&[f32]],
    contamination: f64,
    split: &str,
) -> Result<PlausibilityReport> {
    if real.len() != cf.len() || real.is_empty() {
        return Err(Error::Eval(format!(
            "plausibility needs paired non-empty lists, got {} real and {} counterfactual",
            real.len(),
            cf.len()
        )));
    }
    if !(0.0..1.0).contains(&contamination) {
        return Err(Error::InvalidArgument(format!("contamination must lie in [0, 1), got {contamination}")));
    }
    let real_scores = forest.scores(real)?;
    let cf_scores = forest.scores(cf)?;
    let threshold = quantile(&real_scores, 1.0 - contamination);
    let status = |s: &f64| (*s > threshold) as usize;
    let u: Vec<usize> = real_scores.iter().map(status).collect();
    let v: Vec<usize> = cf_scores.iter().map(status).collect();
    let mut contingency = [[0u64; 2]; 2];
    for (&a, &b) in u.iter().zip(&v) {
        contingency[a][b] += 1;
    }
    let n = u.len() as f64;
    Ok(PlausibilityReport {
        split: split.to_owned(),
        count: u.len(),
        contamination,
        threshold,
        contingency,
        accuracy: (contingency[0][0] + contingency[1][1]) as f64 / n,
        nmi: nmi(&u, &v)?,
        real_inlier_ratio: u.iter().filter(|&&s| s == 0).count() as f64 / n,
        cf_inlier_ratio: v.iter().filter(|&&s| s == 0).count() as f64 / n,
    })
}

/// `(real inliers, counterfactual inliers)` from a contingency table.
pub fn inlier_counts(contingency: &[[u64; 2]; 2]) -> (u64, u64) {
    (
        contingency[0][0] + contingency[0][1],
        contingency[0][0] + contingency[1][0],
    )
}

pub fn pair_plausibility(
    forest: &IsolationForest,
    pairs: &[CounterfactualPair],
    contamination: f64,
    split: &str,
) -> Result<PlausibilityReport> {
    let real: Vec<&[f32]> = pairs.iter().map(|p| p.x.as_slice()).collect();
    let cf: Vec<&[f32]> = pairs.iter().map(|p| p.x_cf.as_slice()).collect();
    plausibility_report(forest, &real, &cf, contamination, split)
}

/// The three loss configurations compared in the ablation.
pub fn ablation_variants(base: LossWeights) -> [(&'static str, LossWeights); 3] {
    [
        ("proposed", base),
        (
            "without_l_gen",
            LossWeights {
                lambda_gen: 0.0,
                ..base
            },
        ),
        (
            "without_l_wl1",
            LossWeights {
                lambda_wl1: 0.0,
                ..base
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(serialize_with = "ser6")]
    pub lambda_gen: f64,
    #[serde(serialize_with = "ser6")]
    pub lambda_wl1: f64,
    pub stats: PerturbationStats,
    pub plausibility: PlausibilityReport,
    /// Mean fraction of `sum |delta|` within radius 4 of the peak.
    #[serde(serialize_with = "ser6")]
    pub localization_r4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

/// Models and history of one ablation variant.
pub struct VariantRun {
    pub name: String,
    pub weights: LossWeights,
    pub noiser: NoiserModel,
    pub discriminator: DiscriminatorModel,
    pub history: Vec<EpochStats>,
    pub pairs: Vec<CounterfactualPair>,
}

pub const LOCALIZATION_RADIUS: usize = 4;

/// Stream of the run seed used by the adversarial stage.
pub const ADVERSARIAL_STREAM: u64 = 2;

/// Trains the three variants from the same seed against one frozen
/// classifier and evaluates each on `eval`.
pub fn ablation_run(
    classifier: &ClassifierModel,
    train: &Dataset,
    val: Option<&Dataset>,
    eval: &Dataset,
    split: &str,
    cfg: &TrainConfig,
    forest: &IsolationForest,
    contamination: f64,
) -> Result<(AblationReport, Vec<VariantRun>)> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (name, weights) in ablation_variants(cfg.loss_weights) {
        let variant_cfg = TrainConfig {
            loss_weights: weights,
            ..cfg.clone()
        };
        let mut rng = stream_rng(cfg.seed, ADVERSARIAL_STREAM);
        let out = train_counterfactual(classifier, train, val, &variant_cfg, &mut rng)?;
        let pairs = generate_counterfactuals(classifier, &out.noiser, eval)?;
        let stats = perturbation_stats(&pairs)?;
        let plausibility = pair_plausibility(forest, &pairs, contamination, split)?;
        rows.push(AblationRow {
            variant: name.to_owned(),
            lambda_gen: weights.lambda_gen as f64,
            lambda_wl1: weights.lambda_wl1 as f64,
            localization_r4: stats.localization[LOCALIZATION_RADIUS.min(stats.localization.len() - 1)],
            stats,
            plausibility,
        });
        runs.push(VariantRun {
            name: name.to_owned(),
            weights,
            noiser: out.noiser,
            discriminator: out.discriminator,
            history: out.history,
            pairs,
        });
    }
    Ok((
        AblationReport {
            split: split.to_owned(),
            rows,
        },
        runs,
    ))
}

/// One-line summary of an ablation row.
pub fn summary_line(row: &AblationRow) -> String {
    format!(
        "{}: swap={} l2={}±{} l1={}±{} loc4={} iforest_acc={} nmi={} cf_inlier={}",
        row.variant,
        fmt6(row.stats.swap_rate),
        fmt6(row.stats.l2_mean),
        fmt6(row.stats.l2_std),
        fmt6(row.stats.l1_mean),
        fmt6(row.stats.l1_std),
        fmt6(row.localization_r4),
        fmt6(row.plausibility.accuracy),
        fmt6(row.plausibility.nmi),
        fmt6(row.plausibility.cf_inlier_ratio),
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::models::compose_counterfactual;

    fn pair(id: u64, src: usize, cf: usize, delta: Vec<f32>) -> CounterfactualPair {
        let x = vec![0.0; delta.len()];
        let mut p = compose_counterfactual(id, &x, &delta).unwrap();
        p.y_true = Some(src);
        p.y_src = Some(src);
        p.y_cf = Some(cf);
        p
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn transitions_tally_directly() {
        let pairs = vec![pair(0, 0, 1, vec![0.0]), pair(1, 0, 1, vec![0.0]), pair(2, 1, 0, vec![0.0])];
        let m = transition_matrix(&pairs, &names(3)).unwrap();
        assert_eq!(m.counts[0][1], 2);
        assert_eq!(m.counts[1][0], 1);
        assert_eq!(m.total(), 3);
        assert_eq!(m.swap_rate(), 1.0);
        let chord: serde_json::Value = serde_json::from_str(&m.chord_json().unwrap()).unwrap();
        assert_eq!(chord["edges"].as_array().unwrap().len(), 2);
        assert_eq!(chord["edges"][0]["weight"], 2);
        assert!(m.to_csv().starts_with("source,c0,c1,c2\nc0,0,2,0\n"));

        let unswapped: Vec<_> = (0..4).map(|i| pair(i, i as usize % 2, i as usize % 2, vec![0.0])).collect();
        let m = transition_matrix(&unswapped, &names(2)).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(m.swap_rate(), 0.0);

        assert!(transition_matrix(&[pair(0, 0, 5, vec![0.0])], &names(3)).is_err());
    }

    #[test]
    fn perturbation_norm_examples() {
        let s = perturbation_stats(&[pair(0, 0, 0, vec![0.3, -0.4, 0.0, 0.0])]).unwrap();
        assert!((s.l2_mean - 0.5).abs() < 1e-6);
        assert!((s.l1_mean - 0.7).abs() < 1e-6);
        assert_eq!(s.l2_std, 0.0);
        assert_eq!(s.swap_rate, 0.0);

        let zeros: Vec<_> = (0..3).map(|i| pair(i, 1, 1, vec![0.0; 6])).collect();
        let s = perturbation_stats(&zeros).unwrap();
        assert_eq!((s.l2_mean, s.l2_std, s.l1_mean, s.swap_rate), (0.0, 0.0, 0.0, 0.0));
        assert!(perturbation_stats(&[]).is_err());
    }

    #[test]
    fn swap_rate_restricted_to_correct_sources() {
        let mut wrong = pair(0, 1, 2, vec![0.1]);
        wrong.y_true = Some(0);
        let s = perturbation_stats(&[wrong, pair(1, 0, 0, vec![0.1])]).unwrap();
        assert_eq!(s.swap_rate, 0.5);
        assert_eq!(s.correct_count, 1);
        assert_eq!(s.swap_rate_correct, 0.0);
    }

    #[test]
    fn localization_curve_is_monotone_and_ends_at_one() {
        let delta = [0.0, 0.5, 0.25, 0.0, 0.0, 0.25, 0.0, 0.0];
        let c = localization_curve(&delta, 1).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c[0], 0.5);
        assert_eq!(c[1], 0.75);
        assert_eq!(c[3], 0.75);
        assert_eq!(c[4], 1.0);
        assert!(localization_curve(&[0.0; 4], 0).is_none());
    }

    #[test]
    fn average_perturbation_examples() {
        let one = average_perturbation(&[pair(0, 0, 1, vec![0.1, -0.2])], 0, 1).unwrap().unwrap();
        assert_eq!(one.support, 1);
        assert!((one.mean[1] + 0.2).abs() < 1e-7);
        assert_eq!(one.std, vec![0.0, 0.0]);

        let both = vec![pair(0, 0, 1, vec![0.1, -0.2]), pair(1, 0, 1, vec![-0.1, 0.2])];
        let avg = average_perturbation(&both, 0, 1).unwrap().unwrap();
        assert!(avg.mean.iter().all(|m| m.abs() < 1e-7));
        assert_eq!(avg.file_name(), "avg_perturbation_1_2.csv");

        assert!(average_perturbation(&both, 1, 0).unwrap().is_none());
    }

    #[test]
    fn path_length_normalizer() {
        assert!((average_path_length(2) - 0.1544313298).abs() < 1e-3);
        assert_eq!(average_path_length(1), 0.0);
        let c256 = average_path_length(256);
        assert!((anomaly_score(c256, 256) - 0.5).abs() < 1e-12);
        assert!(anomaly_score(1e-9, 256) > 0.999_999);
    }

    #[test]
    fn constant_data_reaches_height_limit() {
        let rows: Vec<Vec<f32>> = vec![vec![0.3; 4]; 300];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let f = IsolationForest::fit(&refs, 20, 256, 1).unwrap();
        assert_eq!(f.height_limit, 8);
        let h = f.mean_path_length(&rows[0]).unwrap();
        assert!((h - (8.0 + average_path_length(256))).abs() < 1e-9);
        let s0 = f.score(&rows[0]).unwrap();
        assert!(refs.iter().all(|r| (f.score(r).unwrap() - s0).abs() < 1e-12));
    }

    #[test]
    fn two_points_isolate_at_depth_one() {
        let rows = [vec![0.0f32, 0.0, 0.0], vec![1.0, 1.0, 1.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let f = IsolationForest::fit(&refs, 100, 256, 5).unwrap();
        assert_eq!(f.subsample, 2);
        assert_eq!(f.height_limit, 1);
        for r in &refs {
            assert_eq!(f.mean_path_length(r).unwrap(), 1.0);
        }
    }

    #[test]
    fn forests_are_seeded() {
        let ds = crate::data::synth_generate(40, 3, 0.02).unwrap();
        let cfg = IsolationForestConfig {
            trees: 10,
            ..Default::default()
        };
        assert_eq!(
            IsolationForest::fit_dataset(&ds, &cfg).unwrap(),
            IsolationForest::fit_dataset(&ds, &cfg).unwrap()
        );
        let other = IsolationForestConfig { seed: 9, ..cfg };
        assert_ne!(
            IsolationForest::fit_dataset(&ds, &cfg).unwrap(),
            IsolationForest::fit_dataset(&ds, &other).unwrap()
        );
        assert!(IsolationForest::fit(&[], 10, 256, 0).is_err());
    }

    #[test]
    fn identical_lists_are_fully_plausible() {
        let ds = crate::data::synth_generate(30, 4, 0.02).unwrap();
        let f = IsolationForest::fit_dataset(&ds, &IsolationForestConfig::default()).unwrap();
        let rows: Vec<&[f32]> = ds.samples.iter().map(|s| s.series.as_slice()).collect();
        let r = plausibility_report(&f, &rows, &rows, 0.1, "test").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.nmi - 1.0).abs() < 1e-12);
        assert_eq!(r.contingency[0][1] + r.contingency[1][0], 0);
        assert_eq!(r.contingency.iter().flatten().sum::<u64>(), rows.len() as u64);
        assert!(plausibility_report(&f, &rows, &rows[1..], 0.1, "test").is_err());
    }

    #[test]
    fn more_outlier_to_inlier_conversions_raise_cf_inliers() {
        let (real, cf) = inlier_counts(&[[9900, 164], [215, 1000]]);
        assert_eq!((real, cf), (10064, 10115));
        assert!(cf > real);
    }

    #[test]
    fn nmi_examples() {
        let u = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let perm = [2, 2, 0, 0, 1, 1];
        assert!((nmi(&u, &perm).unwrap() - 1.0).abs() < 1e-12);
        let indep = [0, 1, 0, 1, 0, 1];
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert!(nmi(&u, &indep).unwrap() < 0.5);
        assert_eq!(nmi(&[0, 0, 0], &[0, 0, 0]).unwrap(), 0.0);
        assert!(nmi(&[0], &[]).is_err());
    }

    #[test]
    fn pearson_of_opposites_is_negative() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn nmi_is_symmetric(u in proptest::collection::vec(0usize..4, 2..60), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<usize> = u.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            let a = nmi(&u, &v).unwrap();
            let b = nmi(&v, &u).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn scores_in_unit_interval(seed in 0u64..50) {
            let ds = crate::data::synth_generate(8, seed, 0.05).unwrap();
            let f = IsolationForest::fit_dataset(&ds, &IsolationForestConfig { trees: 10, seed, ..Default::default() }).unwrap();
            for s in &ds.samples {
                let v = f.score(&s.series).unwrap();
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }
    }
}
