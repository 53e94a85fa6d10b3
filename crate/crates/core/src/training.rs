//! Two-stage training: classifier pretraining with best-validation-F1
//! snapshots, then the adversarial noiser/discriminator loop against the
//! frozen classifier.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    class_swap_loss_node, discriminator_loss_node, generator_loss, noiser_total_loss, weighted_l1_loss_node,
    LossBreakdown, LossWeights,
};
use crate::models::{
    compose_counterfactual, ClassifierModel, CounterfactualPair, DiscriminatorModel, Mode, NoiserConfig, NoiserModel,
    TempCnnConfig,
};
use crate::nnkernel::{adam_step, AdamConfig, Graph, NodeId, Tensor};
use crate::report::fmt6;

/// Rows per forward pass when evaluating without gradients.
const INFERENCE_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub noiser_lr: f32,
    pub disc_lr: f32,
    pub d_steps_per_g_step: usize,
}

impl Default for AdversarialStage {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            noiser_lr: 1e-4,
            disc_lr: 1e-4,
            d_steps_per_g_step: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classifier: ClassifierStage,
    pub adversarial: AdversarialStage,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub f1_average: F1Average,
    pub tempcnn: TempCnnConfig,
    pub noiser: NoiserConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.classifier;
        let a = &self.adversarial;
        if c.batch_size < 2 || a.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch sizes must be at least 2 (batch normalization)".into(),
            ));
        }
        if a.d_steps_per_g_step == 0 {
            return Err(Error::InvalidArgument("d_steps_per_g_step must be positive".into()));
        }
        for (name, lr) in [("classifier lr", c.lr), ("noiser lr", a.noiser_lr), ("discriminator lr", a.disc_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(c.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        if self.tempcnn.kernel % 2 == 0 || self.tempcnn.conv_channels.is_empty() {
            return Err(Error::InvalidArgument(
                "TempCNN needs an odd kernel and at least one convolution".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.tempcnn.dropout) || !(0.0..1.0).contains(&self.noiser.dropout) {
            return Err(Error::InvalidArgument("dropout rates must lie in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }
}

/// Per-epoch record. Classifier epochs fill `loss` (cross-entropy) and
/// `val_f1`; adversarial epochs fill `breakdown` and `val_swap_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub breakdown: Option<LossBreakdown>,
    pub val_f1: Option<f64>,
    pub val_swap_rate: Option<f64>,
}

/// F1 over the labels present in either vector.
pub fn f1_score(y_true: &[usize], y_pred: &[usize], num_classes: usize, average: F1Average) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "f1_score needs equal non-empty label vectors, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidArgument(format!("label out of range for {num_classes} classes")));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let (mut sum, mut weight) = (0.0f64, 0.0f64);
    for k in 0..num_classes {
        let support = tp[k] + fn_[k];
        if support + fp[k] == 0 {
            continue;
        }
        let f1 = 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64;
        let w = match average {
            F1Average::Macro => 1.0,
            F1Average::Weighted => support as f64,
        };
        sum += w * f1;
        weight += w;
    }
    Ok(if weight > 0.0 { sum / weight } else { 0.0 })
}

fn check_finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_owned(),
            context: format!("epoch {epoch}, step {step}"),
        })
    }
}

/// Shuffled batches of at least two rows.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn predict_all(model: &ClassifierModel, data: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.shape()[0]);
    for chunk in chunk_rows(data) {
        out.extend(model.predict(&chunk)?);
    }
    Ok(out)
}

fn chunk_rows(data: &Tensor) -> Vec<Tensor> {
    let (n, t) = (data.shape()[0], data.shape()[1]);
    (0..n)
        .step_by(INFERENCE_CHUNK)
        .map(|start| {
            let end = (start + INFERENCE_CHUNK).min(n);
            Tensor::new(vec![end - start, t], data.data()[start * t..end * t].to_vec()).expect("row slice")
        })
        .collect()
}

pub struct ClassifierOutcome {
    pub model: ClassifierModel,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the kept snapshot.
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Minibatch cross-entropy training with Adam; keeps the parameters of the
/// epoch with the highest validation F1 (earliest on ties).
pub fn train_classifier(train: &Dataset, val: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data(format!(
            "classifier training needs >= 2 training and >= 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let stage = &cfg.classifier;
    let adam = AdamConfig::new(stage.lr, stage.weight_decay);
    let mut model = ClassifierModel::new(&cfg.tempcnn, train.series_len, train.num_classes(), rng)?;
    let labels = train.labels();
    let val_x = val.all_series();
    let val_y = val.labels();

    let mut history = Vec::with_capacity(stage.epochs);
    let mut best: Option<(usize, f64, ClassifierModel)> = None;
    for epoch in 1..=stage.epochs {
        let batches = epoch_batches(train.len(), stage.batch_size, rng);
        let mut loss_sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.input(train.batch(idx));
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, updates) = model.logits(&mut g, x, &mut Mode::Train(rng), true)?;
            let loss = g.cross_entropy(logits, &y)?;
            let value = g.value(loss).item() as f64;
            check_finite(value, "classifier loss", epoch, step)?;
            let grads = g.backward(loss)?;
            adam_step(model.net.params_mut(), &grads, &adam)?;
            model.net.apply_running_updates(updates)?;
            loss_sum += value;
        }
        let pred = predict_all(&model, &val_x)?;
        let f1 = f1_score(&val_y, &pred, model.num_classes, cfg.f1_average)?;
        history.push(EpochStats {
            epoch,
            loss: loss_sum / batches.len().max(1) as f64,
            breakdown: None,
            val_f1: Some(f1),
            val_swap_rate: None,
        });
        if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
            best = Some((epoch, f1, model.clone()));
        }
    }
    let (best_epoch, best_val_f1, model) = best.unwrap_or((0, 0.0, model));
    Ok(ClassifierOutcome {
        model,
        history,
        best_epoch,
        best_val_f1,
    })
}

pub struct AdversarialOutcome {
    pub noiser: NoiserModel,
    pub discriminator: DiscriminatorModel,
    pub history: Vec<EpochStats>,
}

/// `sum_i w_i * term_i` over recorded scalar nodes.
fn weighted_sum(g: &mut Graph, terms: &[(NodeId, f32)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in terms {
        let scaled = if w == 1.0 { node } else { g.scale(node, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::State("empty loss".into()))
}

/// Alternating optimization of the noiser and discriminator. Per batch the
/// discriminator takes `d_steps_per_g_step` steps on real `x` against
/// detached `x + delta`, then the noiser takes one step on the total loss with the
/// classifier in evaluation mode and the discriminator frozen.
///
/// The classifier's labels in the class-swap term are the ground truth.
pub fn train_counterfactual(
    classifier: &ClassifierModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    if train.series_len != classifier.series_len {
        return Err(Error::shape(
            "train_counterfactual",
            format!("data length {} vs classifier length {}", train.series_len, classifier.series_len),
        ));
    }
    let stage = &cfg.adversarial;
    let weights = cfg.loss_weights;
    let frozen_hash = classifier.net.params().content_hash();
    let mut noiser = NoiserModel::new(&cfg.noiser, train.series_len, rng)?;
    let mut disc = DiscriminatorModel::new(&cfg.tempcnn, train.series_len, rng)?;
    let noiser_adam = AdamConfig::new(stage.noiser_lr, 0.0);
    let disc_adam = AdamConfig::new(stage.disc_lr, 0.0);
    let labels = train.labels();
    let mut history = Vec::with_capacity(stage.epochs);

    for epoch in 1..=stage.epochs {
        let batches = epoch_batches(train.len(), stage.batch_size, rng);
        let mut sums = LossBreakdown::default();
        for (step, idx) in batches.iter().enumerate() {
            let real = train.batch(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::new();
            let x = g.input(real.clone());
            let (delta, noiser_updates) = noiser.delta(&mut g, x, &mut Mode::Train(rng), true)?;
            let fake: Vec<f32> = real.data().iter().zip(g.value(delta).data()).map(|(a, d)| a + d).collect();
            let fake = Tensor::new(real.shape().to_vec(), fake)?;

            let mut l_dsc = 0.0;
            let mut l_gen = 0.0;
            for _ in 0..stage.d_steps_per_g_step {
                let mut gd = Graph::new();
                let xr = gd.input(real.clone());
                let xf = gd.input(fake.clone());
                let (sr, ur) = disc.scores(&mut gd, xr, &mut Mode::Train(rng), true)?;
                let (sf, uf) = disc.scores(&mut gd, xf, &mut Mode::Train(rng), true)?;
                l_gen = generator_loss(gd.value(sf).data())?;
                let loss = discriminator_loss_node(&mut gd, sr, sf)?;
                l_dsc = gd.value(loss).item() as f64;
                check_finite(l_dsc, "discriminator loss", epoch, step)?;
                let grads = gd.backward(loss)?;
                adam_step(disc.net.params_mut(), &grads, &disc_adam)?;
                disc.net.apply_running_updates(ur)?;
                disc.net.apply_running_updates(uf)?;
            }

            let x_cf = g.add(x, delta)?;
            let (probs, _) = classifier.forward_probs(&mut g, x_cf, &mut Mode::Eval, false)?;
            let cl = class_swap_loss_node(&mut g, probs, &y)?;
            let mut terms = vec![(cl, 1.0)];
            if weights.lambda_gen > 0.0 {
                let (sf, _) = disc.scores(&mut g, x_cf, &mut Mode::Train(rng), false)?;
                let gen = crate::losses::generator_loss_node(&mut g, sf)?;
                l_gen = g.value(gen).item() as f64;
                terms.push((gen, weights.lambda_gen));
            }
            let wl1 = weighted_l1_loss_node(&mut g, delta)?;
            if weights.lambda_wl1 > 0.0 {
                terms.push((wl1, weights.lambda_wl1));
            }
            let total = weighted_sum(&mut g, &terms)?;
            let breakdown = noiser_total_loss(
                g.value(cl).item() as f64,
                l_gen,
                g.value(wl1).item() as f64,
                l_dsc,
                &weights,
            )
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    context: format!("epoch {epoch}, step {step}"),
                },
                other => other,
            })?;
            let grads = g.backward(total)?;
            adam_step(noiser.net.params_mut(), &grads, &noiser_adam)?;
            noiser.net.apply_running_updates(noiser_updates)?;

            sums.l_cl += breakdown.l_cl;
            sums.l_gen += breakdown.l_gen;
            sums.l_wl1 += breakdown.l_wl1;
            sums.l_noiser_total += breakdown.l_noiser_total;
            sums.l_dsc += breakdown.l_dsc;
        }
        let n = batches.len().max(1) as f64;
        let mean = LossBreakdown {
            l_cl: sums.l_cl / n,
            l_gen: sums.l_gen / n,
            l_wl1: sums.l_wl1 / n,
            l_noiser_total: sums.l_noiser_total / n,
            l_dsc: sums.l_dsc / n,
        };
        let val_swap_rate = match val {
            Some(v) if !v.is_empty() => Some(swap_rate(&generate_counterfactuals(classifier, &noiser, v)?)),
            _ => None,
        };
        history.push(EpochStats {
            epoch,
            loss: mean.l_noiser_total,
            breakdown: Some(mean),
            val_f1: None,
            val_swap_rate,
        });
    }
    if classifier.net.params().content_hash() != frozen_hash {
        return Err(Error::State("classifier parameters changed during adversarial training".into()));
    }
    Ok(AdversarialOutcome {
        noiser,
        discriminator: disc,
        history,
    })
}

/// Fraction of pairs whose predicted class changed.
pub fn swap_rate(pairs: &[CounterfactualPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.success()).count() as f64 / pairs.len() as f64
}

/// Evaluation-mode counterfactuals for every sample of `data`.
pub fn generate_counterfactuals(
    classifier: &ClassifierModel,
    noiser: &NoiserModel,
    data: &Dataset,
) -> Result<Vec<CounterfactualPair>> {
    if data.series_len != noiser.series_len || data.series_len != classifier.series_len {
        return Err(Error::shape(
            "generate_counterfactuals",
            format!(
                "data length {} vs noiser {} and classifier {}",
                data.series_len, noiser.series_len, classifier.series_len
            ),
        ));
    }
    let mut pairs = Vec::with_capacity(data.len());
    let all = data.all_series();
    let mut offset = 0;
    for chunk in chunk_rows(&all) {
        let delta = noiser.generate(&chunk)?;
        let mut batch = Vec::with_capacity(chunk.shape()[0]);
        for (r, (x, d)) in chunk.rows().zip(delta.rows()).enumerate() {
            let s = &data.samples[offset + r];
            let mut p = compose_counterfactual(s.id, x, d)?;
            p.y_true = Some(s.label);
            batch.push(p);
        }
        let x_cf = Tensor::from_rows(&batch.iter().map(|p| p.x_cf.as_slice()).collect::<Vec<_>>())?;
        let y_src = classifier.predict(&chunk)?;
        let y_cf = classifier.predict(&x_cf)?;
        for (p, (a, b)) in batch.iter_mut().zip(y_src.into_iter().zip(y_cf)) {
            p.y_src = Some(a);
            p.y_cf = Some(b);
        }
        offset += batch.len();
        pairs.extend(batch);
    }
    Ok(pairs)
}

/// One CSV row per epoch.
pub fn write_training_log(history: &[EpochStats], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let opt = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,loss,l_cl,l_gen,l_wl1,l_noiser_total,l_dsc,val_f1,val_swap_rate").map_err(io)?;
    for s in history {
        let b = s.breakdown;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.epoch,
            fmt6(s.loss),
            opt(b.map(|b| b.l_cl)),
            opt(b.map(|b| b.l_gen)),
            opt(b.map(|b| b.l_wl1)),
            opt(b.map(|b| b.l_noiser_total)),
            opt(b.map(|b| b.l_dsc)),
            opt(s.val_f1),
            opt(s.val_swap_rate),
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Generator for one named stream of a run, derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
