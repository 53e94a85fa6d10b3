//! Noiser and discriminator objectives.
//!
//! Each loss comes in two forms: a plain `f64` evaluation over tensors
//! (used for reporting and as a reference) and a `*_node` form recorded on a
//! [`Graph`] so it can be minimized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::peak_index;
use crate::nnkernel::{Graph, NodeId, Tensor};

/// Probabilities and discriminator scores are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logarithms.
pub const PROB_CLAMP: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gen: f32,
    pub lambda_wl1: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gen: 0.5,
            lambda_wl1: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gen >= 0.0) || !(self.lambda_wl1 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got gen={} wl1={}",
                self.lambda_gen, self.lambda_wl1
            )));
        }
        Ok(())
    }
}

/// Per-step loss values kept for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_gen: f64,
    pub l_wl1: f64,
    pub l_noiser_total: f64,
    pub l_dsc: f64,
}

fn clamp_prob(p: f32) -> f64 {
    let eps = PROB_CLAMP as f64;
    (p as f64).clamp(eps, 1.0 - eps)
}

fn batch_dims(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape("class_swap_loss", format!("probabilities must be [N, K], got {s:?}"))),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::shape(
            "class_swap_loss",
            format!("{} labels for {n} probability rows", labels.len()),
        ));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// `-(1/n) sum log(1 - p(y_i))`: pushes probability mass away from each
/// sample's own class without naming a target.
pub fn class_swap_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = batch_dims(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(1.0 - clamp_prob(probs.data()[i * k + y])).ln())
        .sum();
    Ok(total / n as f64)
}

fn check_scores(scores: &[f32], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty score batch")));
    }
    Ok(())
}

/// `-(1/n) sum [log D(x_i) + log(1 - D(x_cf_i))]`.
pub fn discriminator_loss(scores_real: &[f32], scores_fake: &[f32]) -> Result<f64> {
    check_scores(scores_real, "discriminator_loss")?;
    if scores_real.len() != scores_fake.len() {
        return Err(Error::shape(
            "discriminator_loss",
            format!("{} real vs {} fake scores", scores_real.len(), scores_fake.len()),
        ));
    }
    let total: f64 = scores_real
        .iter()
        .zip(scores_fake)
        .map(|(&r, &f)| clamp_prob(r).ln() + (1.0 - clamp_prob(f)).ln())
        .sum();
    Ok(-total / scores_real.len() as f64)
}

/// Non-saturating generator loss `-(1/n) sum log D(x_cf_i)`.
pub fn generator_loss(scores_fake: &[f32]) -> Result<f64> {
    check_scores(scores_fake, "generator_loss")?;
    let total: f64 = scores_fake.iter().map(|&f| clamp_prob(f).ln()).sum();
    Ok(-total / scores_fake.len() as f64)
}

/// Circular distance between two time indices of a length-`len` series.
pub fn modulo_distance(t: usize, t_tilde: usize, len: usize) -> usize {
    let fwd = (t + len - t_tilde % len) % len;
    let back = (t_tilde + len - t % len) % len;
    fwd.min(back)
}

/// Squared circular distances to the peak of `delta`.
pub fn localization_weights(delta: &[f32]) -> Vec<f32> {
    let len = delta.len();
    let peak = peak_index(delta);
    (0..len)
        .map(|t| {
            let d = modulo_distance(t, peak, len) as f32;
            d * d
        })
        .collect()
}

fn delta_dims(deltas: &Tensor) -> Result<(usize, usize)> {
    match deltas.shape() {
        [n, t] if *n > 0 => Ok((*n, *t)),
        s => Err(Error::shape("weighted_l1_loss", format!("perturbations must be [N>0, T], got {s:?}"))),
    }
}

/// `(1/n) sum_i sum_t d(t, t~_i)^2 |delta_it|` with `t~_i` the peak of
/// `|delta_i|` (lowest index on ties).
pub fn weighted_l1_loss(deltas: &Tensor) -> Result<f64> {
    let (n, _) = delta_dims(deltas)?;
    let total: f64 = deltas
        .rows()
        .map(|row| {
            localization_weights(row)
                .iter()
                .zip(row)
                .map(|(&w, &d)| w as f64 * (d as f64).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Combines the three noiser terms; the discriminator loss is carried along
/// for logging only.
pub fn noiser_total_loss(l_cl: f64, l_gen: f64, l_wl1: f64, l_dsc: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_cl", l_cl), ("l_gen", l_gen), ("l_wl1", l_wl1), ("l_dsc", l_dsc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: name.to_owned(),
                context: "noiser loss composition".to_owned(),
            });
        }
    }
    Ok(LossBreakdown {
        l_cl,
        l_gen,
        l_wl1,
        l_noiser_total: l_cl + weights.lambda_gen as f64 * l_gen + weights.lambda_wl1 as f64 * l_wl1,
        l_dsc,
    })
}

pub fn class_swap_loss_node(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    batch_dims(g.value(probs), labels)?;
    let p = g.gather(probs, labels)?;
    let q = g.one_minus(p)?;
    let lq = g.clamp_log(q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let m = g.mean(lq)?;
    g.scale(m, -1.0)
}

pub fn discriminator_loss_node(g: &mut Graph, real: NodeId, fake: NodeId) -> Result<NodeId> {
    let (nr, nf) = (g.value(real).numel(), g.value(fake).numel());
    if nr != nf || nr == 0 {
        return Err(Error::shape("discriminator_loss", format!("{nr} real vs {nf} fake scores")));
    }
    let lr = g.clamp_log(real, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let mr = g.mean(lr)?;
    let q = g.one_minus(fake)?;
    let lf = g.clamp_log(q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let mf = g.mean(lf)?;
    let s = g.add(mr, mf)?;
    g.scale(s, -1.0)
}

pub fn generator_loss_node(g: &mut Graph, fake: NodeId) -> Result<NodeId> {
    if g.value(fake).numel() == 0 {
        return Err(Error::InvalidArgument("generator_loss: empty score batch".into()));
    }
    let l = g.clamp_log(fake, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let m = g.mean(l)?;
    g.scale(m, -1.0)
}

/// The peak index is read from the current values and the resulting
/// weights enter the graph as constants.
pub fn weighted_l1_loss_node(g: &mut Graph, delta: NodeId) -> Result<NodeId> {
    let (n, _) = delta_dims(g.value(delta))?;
    let weights: Vec<f32> = g.value(delta).rows().flat_map(localization_weights).collect();
    let a = g.abs(delta)?;
    let w = g.mul_const(a, weights)?;
    let s = g.sum(w)?;
    g.scale(s, 1.0 / n as f32)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn probs(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn class_swap_examples() {
        let l = class_swap_loss(&probs(&[&[0.5, 0.5]]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-4);
        let l = class_swap_loss(&probs(&[&[1e-9, 1.0]]), &[0]).unwrap();
        assert!(l < 1e-6);
        let l = class_swap_loss(&probs(&[&[0.5, 0.5], &[0.9, 0.1]]), &[0, 0]).unwrap();
        assert!((l - (std::f64::consts::LN_2 + std::f64::consts::LN_10) / 2.0).abs() < 1e-4, "{l}");
        // p(y) = 1 is clamped rather than producing infinity.
        let l = class_swap_loss(&probs(&[&[1.0, 0.0]]), &[0]).unwrap();
        assert!(l.is_finite() && (l - 16.118).abs() < 0.01, "{l}");
        assert!(class_swap_loss(&probs(&[&[0.5, 0.5]]), &[2]).is_err());
    }

    #[test]
    fn discriminator_examples() {
        let l = discriminator_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((l - 1.386294).abs() < 1e-4);
        let l = discriminator_loss(&[1.0], &[0.0]).unwrap();
        assert!(l < 1e-6);
        let l = discriminator_loss(&[0.8], &[0.3]).unwrap();
        assert!((l - 0.579818).abs() < 1e-4, "{l}");
        assert!(discriminator_loss(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn generator_examples() {
        assert!((generator_loss(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-4);
        assert!(generator_loss(&[1.0]).unwrap() < 1e-6);
        assert!((generator_loss(&[0.25]).unwrap() - 1.386294).abs() < 1e-4);
        assert!(generator_loss(&[0.0]).unwrap().is_finite());
    }

    #[test]
    fn generator_gradient_is_negative_at_half() {
        let mut g = Graph::new();
        let s = g.input_with_grad(Tensor::vector(vec![0.5, 0.5]));
        let l = generator_loss_node(&mut g, s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.node(s).unwrap().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn modulo_distance_examples() {
        assert_eq!(modulo_distance(0, 23, 24), 1);
        assert_eq!(modulo_distance(23, 0, 24), 1);
        assert_eq!(modulo_distance(5, 5, 24), 0);
        assert_eq!(modulo_distance(0, 12, 24), 12);
        assert_eq!(modulo_distance(3, 10, 24), 7);
    }

    #[test]
    fn weighted_l1_examples() {
        let d = Tensor::from_rows(&[[0.5f32, 0.1, 0.0, 0.0]]).unwrap();
        assert_eq!(weighted_l1_loss(&d).unwrap(), 0.1f32 as f64);
        let mut spike = vec![0.0f32; 24];
        spike[9] = -0.7;
        assert_eq!(weighted_l1_loss(&Tensor::from_rows(&[spike]).unwrap()).unwrap(), 0.0);
        assert_eq!(weighted_l1_loss(&Tensor::zeros(vec![3, 24])).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossWeights {
            lambda_gen: 0.0,
            lambda_wl1: 0.0,
        };
        assert_eq!(noiser_total_loss(1.3, 2.0, 4.0, 0.0, &zero).unwrap().l_noiser_total, 1.3);
        let b = noiser_total_loss(1.0, 2.0, 4.0, 0.7, &LossWeights::default()).unwrap();
        assert!((b.l_noiser_total - 2.2).abs() < 1e-6);
        assert_eq!(b.l_dsc, 0.7);
        let err = noiser_total_loss(1.0, f64::NAN, 0.0, 0.0, &zero).unwrap_err();
        assert!(err.to_string().contains("l_gen"), "{err}");
    }

    #[test]
    fn default_weights_round_trip_through_json() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_gen, 0.5);
        assert_eq!(w.lambda_wl1, 0.05);
        let back: LossWeights = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back, w);
        assert!(LossWeights { lambda_gen: -1.0, lambda_wl1: 0.0 }.validate().is_err());
    }

    #[test]
    fn node_forms_match_plain_forms() {
        let p = probs(&[&[0.2, 0.7, 0.1], &[0.6, 0.3, 0.1]]);
        let labels = [1, 0];
        let mut g = Graph::new();
        let pn = g.input(p.clone());
        let l = class_swap_loss_node(&mut g, pn, &labels).unwrap();
        assert!((g.value(l).item() as f64 - class_swap_loss(&p, &labels).unwrap()).abs() < 1e-6);

        let real = g.input(Tensor::vector(vec![0.8, 0.6]));
        let fake = g.input(Tensor::vector(vec![0.3, 0.1]));
        let l = discriminator_loss_node(&mut g, real, fake).unwrap();
        let want = discriminator_loss(&[0.8, 0.6], &[0.3, 0.1]).unwrap();
        assert!((g.value(l).item() as f64 - want).abs() < 1e-6);
        let l = generator_loss_node(&mut g, fake).unwrap();
        assert!((g.value(l).item() as f64 - generator_loss(&[0.3, 0.1]).unwrap()).abs() < 1e-6);

        let d = Tensor::from_rows(&[[0.1f32, -0.4, 0.2, 0.0, 0.05], [0.0, 0.0, 0.3, 0.3, -0.1]]).unwrap();
        let dn = g.input(d.clone());
        let l = weighted_l1_loss_node(&mut g, dn).unwrap();
        assert!((g.value(l).item() as f64 - weighted_l1_loss(&d).unwrap()).abs() < 1e-6);
    }

    fn delta_strategy() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-1.0f32..1.0, 2..30)
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            p in prop::collection::vec(0.0f32..=1.0, 1..20),
            q in prop::collection::vec(0.0f32..=1.0, 1..20),
            d in delta_strategy(),
        ) {
            let rows: Vec<[f32; 2]> = p.iter().map(|&v| [v, 1.0 - v]).collect();
            let t = Tensor::from_rows(&rows).unwrap();
            prop_assert!(class_swap_loss(&t, &vec![0; rows.len()]).unwrap() >= 0.0);
            let n = p.len().min(q.len());
            prop_assert!(discriminator_loss(&p[..n], &q[..n]).unwrap() >= 0.0);
            prop_assert!(generator_loss(&q).unwrap() >= 0.0);
            prop_assert!(weighted_l1_loss(&Tensor::from_rows(&[d]).unwrap()).unwrap() >= 0.0);
        }

        #[test]
        fn weighted_l1_is_rotation_invariant(d in delta_strategy(), shift in 0usize..30) {
            let len = d.len();
            let shift = shift % len;
            // Keep a unique peak so the rotated argmax moves with the data.
            let mut d = d;
            let p = peak_index(&d);
            d[p] = if d[p] >= 0.0 { 1.5 } else { -1.5 };
            let mut rotated = vec![0.0; len];
            for t in 0..len {
                rotated[(t + shift) % len] = d[t];
            }
            let a = weighted_l1_loss(&Tensor::from_rows(&[d]).unwrap()).unwrap();
            let b = weighted_l1_loss(&Tensor::from_rows(&[rotated]).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn weighted_l1_zero_iff_single_support(d in delta_strategy()) {
            let loss = weighted_l1_loss(&Tensor::from_rows(&[d.clone()]).unwrap()).unwrap();
            let p = peak_index(&d);
            let single = d.iter().enumerate().all(|(t, v)| t == p || *v == 0.0);
            prop_assert_eq!(loss == 0.0, single);
        }

        #[test]
        fn modulo_distance_symmetric_and_bounded(len in 1usize..50, a in 0usize..50, b in 0usize..50) {
            let (a, b) = (a % len, b % len);
            let d = modulo_distance(a, b, len);
            prop_assert_eq!(d, modulo_distance(b, a, len));
            prop_assert!(d <= len / 2);
            prop_assert_eq!(d == 0, a == b);
        }
    }
}
