//! InfoNCE and its importance-weighted form.
//!
//! Anchor `i` is scored against its positive (view row `i`) and the view rows
//! its weight mask includes:
//!
//! ```text
//! L_i = −log  exp(s_ii/τ) / ( exp(s_ii/τ) + Σ_j w_ij exp(s_ij/τ) )
//! ```
//!
//! evaluated as a log-sum-exp over `{s_ii/τ} ∪ {s_ij/τ + ln w_ij}`. The batch
//! loss is the mean over anchors. Weights are constants w.r.t. the encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, Matrix};
use crate::scoring::{
    aggregation_logit_gradient, uniform_weights, AggregationParams, ComponentScores,
    ImportanceWeights, WeightNorm,
};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub weight_mode: WeightNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            weight_mode: WeightNorm::MeanOne,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over anchors.
    pub value: f64,
    pub per_anchor: Vec<f64>,
    /// `∂L/∂` anchor embeddings (unit rows).
    pub d_anchor: Matrix,
    /// `∂L/∂` view embeddings (unit rows), including any extra negative rows.
    pub d_view: Matrix,
    /// `∂L/∂w` with the embeddings fixed; zero at excluded entries.
    pub d_weights: Matrix,
    /// `∂L/∂` aggregation logits; zero unless produced by [`loss_gradients`] in learned mode.
    pub d_logits: [f64; 3],
}

/// Plain InfoNCE over a square batch.
pub fn info_nce(anchor_unit: &Matrix, view_unit: &Matrix, cfg: &LossConfig) -> Result<LossOutput> {
    let w = uniform_weights(anchor_unit.rows())?;
    weighted_info_nce(anchor_unit, view_unit, &w, cfg)
}

/// Weighted InfoNCE. `view_unit` has at least as many rows as `anchor_unit`;
/// row `i` is the positive of anchor `i` and the weight mask picks the negatives.
pub fn weighted_info_nce(
    anchor_unit: &Matrix,
    view_unit: &Matrix,
    weights: &ImportanceWeights,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = anchor_unit.rows();
    let c = view_unit.rows();
    if n < 2 {
        return Err(Error::Usage(format!("contrastive loss needs N >= 2, got {n}")));
    }
    if anchor_unit.cols() != view_unit.cols() || c < n {
        return Err(Error::Shape(format!(
            "anchors {:?} vs view {:?}",
            anchor_unit.shape(),
            view_unit.shape()
        )));
    }
    if weights.w.shape() != (n, c) || weights.mask.shape() != (n, c) {
        return Err(Error::Shape(format!(
            "weights {:?} do not cover {n} anchors × {c} candidates",
            weights.w.shape()
        )));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Usage(format!("temperature must be positive, got {}", cfg.tau)));
    }
    let tau = cfg.tau;
    let inv_n = 1.0 / n as f64;
    let mut per_anchor = Vec::with_capacity(n);
    // ∂L/∂s for every (anchor, candidate) pair, already divided by N.
    let mut d_sim = Matrix::zeros(n, c);
    let mut d_weights = Matrix::zeros(n, c);
    for i in 0..n {
        let a = anchor_unit.row(i);
        let pos = dot(a, view_unit.row(i)) / tau;
        let negs: Vec<usize> = weights.mask.included(i).filter(|&j| j != i).collect();
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(pos);
        for &j in &negs {
            let w = weights.w.get(i, j);
            assert!(w > 0.0, "non-positive importance weight {w} at ({i}, {j})");
            logits.push(dot(a, view_unit.row(j)) / tau + w.ln());
        }
        let lse = log_sum_exp(&logits);
        per_anchor.push(lse - pos);
        let p_pos = (pos - lse).exp();
        d_sim.set(i, i, (p_pos - 1.0) / tau * inv_n);
        for (&j, &l) in negs.iter().zip(&logits[1..]) {
            let p = (l - lse).exp();
            d_sim.set(i, j, p / tau * inv_n);
            d_weights.set(i, j, p / weights.w.get(i, j) * inv_n);
        }
    }
    let value = per_anchor.iter().sum::<f64>() * inv_n;
    let d_anchor = d_sim.matmul(view_unit)?;
    let d_view = d_sim.matmul_tn(anchor_unit)?;
    Ok(LossOutput {
        value,
        per_anchor,
        d_anchor,
        d_view,
        d_weights,
        d_logits: [0.0; 3],
    })
}

/// Weighted loss plus the gradient w.r.t. the aggregation logits, flowing
/// through λ, the mixing, and mean-one renormalization. `weights` must have
/// been produced from `normalized` and `agg`.
pub fn loss_gradients(
    anchor_unit: &Matrix,
    view_unit: &Matrix,
    weights: &ImportanceWeights,
    aggregation: Option<(&ComponentScores, &AggregationParams)>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let mut out = weighted_info_nce(anchor_unit, view_unit, weights, cfg)?;
    if let Some((normalized, agg)) = aggregation {
        out.d_logits =
            aggregation_logit_gradient(&out.d_weights, normalized, agg, weights.normalization)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize_rows, ExclusionMask, SeededRng};
    use crate::scoring::{
        aggregate_importance, normalize_components, AggregationMode, ComponentMask, EPS_W,
    };

    fn unit(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
        normalize_rows(&Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()).0
    }

    #[test]
    fn identical_pair_gives_ln2() {
        let u = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let out = info_nce(&u, &u, &LossConfig::default()).unwrap();
        for l in &out.per_anchor {
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        // Same thing with zero similarities at τ = 1.
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let orth = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let cfg = LossConfig { tau: 1.0, ..Default::default() };
        let out = info_nce(&z, &Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        assert!(info_nce(&z, &orth, &cfg).unwrap().value > 2f64.ln());
    }

    #[test]
    fn separated_batch_has_near_zero_loss() {
        // Positives at similarity 1, the other anchor at −1: L = ln(1 + e^{−4}) at τ = 0.5.
        let u = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let out = info_nce(&u, &u, &LossConfig::default()).unwrap();
        assert!((out.value - (1.0 + (-4f64).exp()).ln()).abs() < 1e-12);
        assert!(out.value < 0.02);
    }

    #[test]
    fn vanishing_weights_annihilate_negatives() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let mut w = uniform_weights(2).unwrap();
        w.w.set(0, 1, EPS_W);
        w.w.set(1, 0, EPS_W);
        let cfg = LossConfig { tau: 1.0, ..Default::default() };
        let out = weighted_info_nce(&z, &z, &w, &cfg).unwrap();
        assert!(out.value < 2e-6);
        let ones = uniform_weights(2).unwrap();
        assert!((weighted_info_nce(&z, &z, &ones, &cfg).unwrap().value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_reduce_to_info_nce() {
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let n = 2 + rng.index(10);
            let (a, v) = (unit(&mut rng, n, 4), unit(&mut rng, n, 4));
            let cfg = LossConfig::default();
            let plain = info_nce(&a, &v, &cfg).unwrap();
            let w = weighted_info_nce(&a, &v, &uniform_weights(n).unwrap(), &cfg).unwrap();
            assert!((plain.value - w.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn stays_finite_at_low_temperature() {
        let mut rng = SeededRng::new(2);
        let a = unit(&mut rng, 16, 3);
        let v = unit(&mut rng, 16, 3);
        let out = info_nce(&a, &v, &LossConfig { tau: 0.05, ..Default::default() }).unwrap();
        assert!(out.value.is_finite() && out.d_anchor.is_finite() && out.d_view.is_finite());
    }

    #[test]
    fn raising_a_weight_never_lowers_the_loss() {
        let mut rng = SeededRng::new(3);
        let (a, v) = (unit(&mut rng, 6, 3), unit(&mut rng, 6, 3));
        let cfg = LossConfig::default();
        let base = uniform_weights(6).unwrap();
        let l0 = weighted_info_nce(&a, &v, &base, &cfg).unwrap();
        for i in 0..6 {
            for j in base.mask.included(i) {
                let mut w = base.clone();
                w.w.set(i, j, 3.0);
                let l1 = weighted_info_nce(&a, &v, &w, &cfg).unwrap();
                assert!(l1.per_anchor[i] >= l0.per_anchor[i]);
            }
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(4);
        let (a, v) = (unit(&mut rng, 5, 3), unit(&mut rng, 5, 3));
        let mut w = uniform_weights(5).unwrap();
        for i in 0..5 {
            for j in w.mask.included(i).collect::<Vec<_>>() {
                w.w.set(i, j, 0.2 + rng.uniform());
            }
        }
        let cfg = LossConfig { tau: 0.3, ..Default::default() };
        let out = weighted_info_nce(&a, &v, &w, &cfg).unwrap();
        let h = 1e-6;
        for (which, base) in [(0, &a), (1, &v)] {
            for k in 0..base.data().len() {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m.data_mut()[k] += delta;
                    let (aa, vv) = if which == 0 { (&m, &v) } else { (&a, &m) };
                    weighted_info_nce(aa, vv, &w, &cfg).unwrap().value
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if which == 0 { out.d_anchor.data()[k] } else { out.d_view.data()[k] };
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let n = 6;
        let (a, v) = (unit(&mut rng, n, 3), unit(&mut rng, n, 3));
        let comp = |rng: &mut SeededRng| {
            Matrix::from_vec(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap()
        };
        let raw = ComponentScores {
            u: comp(&mut rng),
            s: comp(&mut rng),
            r: comp(&mut rng),
            mask: ExclusionMask::diagonal(n),
        };
        let normalized = normalize_components(&raw);
        let cfg = LossConfig::default();
        let mut agg = AggregationParams::new(AggregationMode::Learned, ComponentMask::ALL);
        agg.logits = [0.4, -0.3, 0.1];
        let loss_at = |agg: &AggregationParams| {
            let w = aggregate_importance(&normalized, agg, WeightNorm::MeanOne).unwrap();
            weighted_info_nce(&a, &v, &w, &cfg).unwrap().value
        };
        let w = aggregate_importance(&normalized, &agg, WeightNorm::MeanOne).unwrap();
        let out = loss_gradients(&a, &v, &w, Some((&normalized, &agg)), &cfg).unwrap();
        for e in 0..3 {
            let h = 1e-6;
            let mut p = agg;
            p.logits[e] += h;
            let mut m = agg;
            m.logits[e] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            assert!(
                (fd - out.d_logits[e]).abs() <= 1e-5 * fd.abs().max(out.d_logits[e].abs()).max(1e-8),
                "logit {e}: {fd} vs {}",
                out.d_logits[e]
            );
        }

        let fixed = AggregationParams::new(AggregationMode::Fixed, ComponentMask::ALL);
        let wf = aggregate_importance(&normalized, &fixed, WeightNorm::MeanOne).unwrap();
        let out = loss_gradients(&a, &v, &wf, Some((&normalized, &fixed)), &cfg).unwrap();
        assert_eq!(out.d_logits, [0.0; 3]);
    }

    #[test]
    fn rectangular_candidates_use_only_unmasked_columns() {
        let mut rng = SeededRng::new(6);
        let (a, v) = (unit(&mut rng, 3, 2), unit(&mut rng, 5, 2));
        let mut mask = ExclusionMask::none(3, 5);
        for i in 0..3 {
            for j in 0..3 {
                mask.exclude(i, j);
            }
        }
        let w = ImportanceWeights::uniform_masked(mask);
        let cfg = LossConfig::default();
        let out = weighted_info_nce(&a, &v, &w, &cfg).unwrap();
        for i in 0..3 {
            let pos = dot(a.row(i), v.row(i)) / cfg.tau;
            let mut terms = vec![pos];
            terms.extend((3..5).map(|j| dot(a.row(i), v.row(j)) / cfg.tau));
            assert!((out.per_anchor[i] - (log_sum_exp(&terms) - pos)).abs() < 1e-12);
        }
        assert!(weighted_info_nce(&a, &unit(&mut rng, 2, 2), &w, &cfg).is_err());
    }
}
