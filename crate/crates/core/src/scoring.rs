//! Per-pair importance scores for negatives and their aggregation.
//!
//! For anchor `i` (first view) and negative `j` (second view, `j ≠ i`):
//!
//! * `u[i][j] = g_iᵀ g_j`, where `g` is the gradient of a cross-entropy loss
//!   against the sample's pseudo-label w.r.t. the last encoder layer. The
//!   pseudo-posterior of sample `j` is a softmax (no temperature) of its
//!   similarities to the `N − 1` opposite-view samples `i' ≠ j`, and the
//!   pseudo-label is its argmax. With the opposite view held constant the
//!   gradient factors as `g_j = a_j h_jᵀ`, so `u` is evaluated as
//!   `(a_i·a_j)(h_i·h_j)` without materializing `d·d_prev` vectors.
//! * `s[i][j]` is the cosine similarity of the two embeddings.
//! * `r[i][j] = 1/(N−2) Σ_{j'∉{i,j}} (1 − s(x̃_j, x̃_j'))`.
//!
//! Components are min-max rescaled per anchor row before mixing with
//! `λ = softmax(logits)` (or fixed equal weights), then clamped and rescaled
//! so that each row averages one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ForwardTrace;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, ExclusionMask, Matrix};

/// Smallest weight a negative can receive.
pub const EPS_W: f64 = 1e-6;

/// Loss whose last-layer gradient is used as the uncertainty feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossKind {
    /// Cross-entropy of the pseudo-posterior against the pseudo-label.
    #[default]
    #[serde(rename = "ce")]
    CrossEntropy,
    /// Temperature-scaled contrastive loss with the pseudo-label anchor as positive.
    #[serde(rename = "nt-xent")]
    NtXent,
}

/// Which view a row of [`GradientFactors`] was computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewRole {
    Anchor,
    Negative,
}

/// Probability vector over the eligible opposite-view samples (all but the sample's own index).
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

fn check_pair(anchor_unit: &Matrix, neg_unit: &Matrix) -> Result<()> {
    if anchor_unit.shape() != neg_unit.shape() {
        return Err(Error::Shape(format!(
            "views differ in shape: {:?} vs {:?}",
            anchor_unit.shape(),
            neg_unit.shape()
        )));
    }
    if anchor_unit.rows() < 2 {
        return Err(Error::Usage(format!(
            "pseudo-posterior needs at least 2 samples, got {}",
            anchor_unit.rows()
        )));
    }
    Ok(())
}

fn similarities_to(classes_unit: &Matrix, sample: &[f64], j: usize) -> (Vec<usize>, Vec<f64>) {
    let classes: Vec<usize> = (0..classes_unit.rows()).filter(|&k| k != j).collect();
    let sims = classes
        .iter()
        .map(|&k| dot(classes_unit.row(k), sample).clamp(-1.0, 1.0))
        .collect();
    (classes, sims)
}

/// Pseudo-posterior of sample `j` of `neg_unit` over the rows of `anchor_unit` other than `j`.
pub fn pseudo_posterior(anchor_unit: &Matrix, neg_unit: &Matrix, j: usize) -> Result<Posterior> {
    check_pair(anchor_unit, neg_unit)?;
    if j >= neg_unit.rows() {
        return Err(Error::Usage(format!("sample index {j} out of range")));
    }
    let (classes, sims) = similarities_to(anchor_unit, neg_unit.row(j), j);
    Ok(Posterior {
        classes,
        probs: softmax(&sims),
    })
}

/// Position of the largest probability; ties go to the lowest position.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// Most confident class of a posterior (lowest class index on ties).
pub fn pseudo_label(posterior: &Posterior) -> usize {
    posterior.classes[argmax(&posterior.probs)]
}

pub fn pseudo_labels(posteriors: &[Posterior]) -> Vec<usize> {
    posteriors.iter().map(pseudo_label).collect()
}

/// Factored last-layer gradients: the gradient for sample `j` is `a_j h_jᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFactors {
    /// `N × d` pullbacks of the loss onto the raw output `z_j`.
    pub a: Matrix,
    /// `N × d_prev` penultimate activations.
    pub h: Matrix,
    pub pseudo_labels: Vec<usize>,
    /// Rows whose output had zero norm; their `a` row is zero.
    pub degenerate: Vec<bool>,
    pub role: ViewRole,
}

impl GradientFactors {
    /// Explicit `d × d_prev` gradient of sample `j`, row-major.
    pub fn materialize(&self, j: usize) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.a.cols() * self.h.cols());
        for &a in self.a.row(j) {
            g.extend(self.h.row(j).iter().map(|h| a * h));
        }
        g
    }
}

/// Gradient features of every sample of `own` against the opposite view.
///
/// For cross-entropy, with `s_k = ô_k·ẑ_j` over eligible opposite-view rows `k`,
/// `a_j = Σ_k (p_k − 1[k = ŷ_j]) (ô_k − s_k ẑ_j) / ‖z_j‖`. The NT-Xent kind uses
/// the same class set with `(q_k − 1[k = ŷ_j]) / τ` where `q = softmax(s / τ)`.
pub fn gradient_factors(
    own: &ForwardTrace,
    other_unit: &Matrix,
    kind: LossKind,
    tau: f64,
    role: ViewRole,
) -> Result<GradientFactors> {
    check_pair(other_unit, &own.unit_output)?;
    if kind == LossKind::NtXent && tau <= 0.0 {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    let n = own.batch_size();
    let d = own.output.cols();
    let rows: Vec<(Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let z_hat = own.unit_output.row(j);
            let (classes, sims) = similarities_to(other_unit, z_hat, j);
            let p = softmax(&sims);
            let label_pos = argmax(&p);
            let mut a = vec![0.0; d];
            if own.degenerate[j] {
                return (a, classes[label_pos]);
            }
            let coeffs: Vec<f64> = match kind {
                LossKind::CrossEntropy => p,
                LossKind::NtXent => {
                    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
                    softmax(&scaled)
                }
            };
            let scale = match kind {
                LossKind::CrossEntropy => 1.0,
                LossKind::NtXent => 1.0 / tau,
            };
            let inv_norm = 1.0 / own.norms[j];
            for (pos, (&k, &s)) in classes.iter().zip(&sims).enumerate() {
                let target = if pos == label_pos { 1.0 } else { 0.0 };
                let c = scale * (coeffs[pos] - target) * inv_norm;
                if c == 0.0 {
                    continue;
                }
                for ((ai, &o), &zh) in a.iter_mut().zip(other_unit.row(k)).zip(z_hat) {
                    *ai += c * (o - s * zh);
                }
            }
            (a, classes[label_pos])
        })
        .collect();
    let mut a = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for (j, (row, label)) in rows.into_iter().enumerate() {
        a.row_mut(j).copy_from_slice(&row);
        labels.push(label);
    }
    Ok(GradientFactors {
        a,
        h: own.penultimate.clone(),
        pseudo_labels: labels,
        degenerate: own.degenerate.clone(),
        role,
    })
}

fn zero_diagonal(m: &mut Matrix) {
    for i in 0..m.rows().min(m.cols()) {
        m.set(i, i, 0.0);
    }
}

/// `s[i][j]` = cosine of anchor `i` with second-view sample `j`; diagonal zeroed (masked).
pub fn similarity_scores(anchor: &ForwardTrace, view: &ForwardTrace) -> Result<Matrix> {
    if anchor.unit_output.shape() != view.unit_output.shape() {
        return Err(Error::Shape(format!(
            "anchor embeddings {:?} vs view embeddings {:?}",
            anchor.unit_output.shape(),
            view.unit_output.shape()
        )));
    }
    let mut s = anchor.unit_output.matmul_nt(&view.unit_output)?;
    for v in s.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    zero_diagonal(&mut s);
    Ok(s)
}

/// `u[i][j] = (a_i·a_j)(h_i·h_j)`; diagonal zeroed (masked).
pub fn uncertainty_scores(anchor: &GradientFactors, negative: &GradientFactors) -> Result<Matrix> {
    if anchor.a.cols() != negative.a.cols() || anchor.h.cols() != negative.h.cols() {
        return Err(Error::Shape(format!(
            "gradient factors differ: a {} vs {}, h {} vs {}",
            anchor.a.cols(),
            negative.a.cols(),
            anchor.h.cols(),
            negative.h.cols()
        )));
    }
    let aa = anchor.a.matmul_nt(&negative.a)?;
    let hh = anchor.h.matmul_nt(&negative.h)?;
    let mut u = aa;
    for (x, y) in u.data_mut().iter_mut().zip(hh.data()) {
        *x *= y;
    }
    zero_diagonal(&mut u);
    Ok(u)
}

/// Mean cosine distance of negative `j` to the other negatives, excluding anchor index `i`.
pub fn representativeness_scores(neg_unit: &Matrix) -> Result<Matrix> {
    let n = neg_unit.rows();
    if n < 3 {
        return Err(Error::Usage(format!(
            "representativeness needs N >= 3 (divides by N - 2), got N = {n}"
        )));
    }
    let mut dist = neg_unit.matmul_nt(neg_unit)?;
    for v in dist.data_mut() {
        *v = 1.0 - v.clamp(-1.0, 1.0);
    }
    let totals: Vec<f64> = (0..n)
        .map(|j| (0..n).filter(|&k| k != j).map(|k| dist.get(j, k)).sum())
        .collect();
    let denom = (n - 2) as f64;
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                r.set(i, j, ((totals[j] - dist.get(j, i)) / denom).clamp(0.0, 2.0));
            }
        }
    }
    Ok(r)
}

/// The three score matrices for one batch, with the positive diagonal masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScores {
    pub u: Matrix,
    pub s: Matrix,
    pub r: Matrix,
    pub mask: ExclusionMask,
}

impl ComponentScores {
    pub fn components(&self) -> [&Matrix; 3] {
        [&self.u, &self.s, &self.r]
    }
}

/// Scores plus the intermediate gradient features, for audits.
#[derive(Debug, Clone)]
pub struct ScoreBreakdown {
    pub raw: ComponentScores,
    pub anchor_factors: GradientFactors,
    pub negative_factors: GradientFactors,
}

/// Computes u, s and r for a batch. The anchor-side gradient uses the same
/// construction as the negative side with the views swapped.
pub fn component_scores(
    anchor: &ForwardTrace,
    view: &ForwardTrace,
    kind: LossKind,
    tau: f64,
) -> Result<ScoreBreakdown> {
    let s = similarity_scores(anchor, view)?;
    let negative_factors =
        gradient_factors(view, &anchor.unit_output, kind, tau, ViewRole::Negative)?;
    let anchor_factors = gradient_factors(anchor, &view.unit_output, kind, tau, ViewRole::Anchor)?;
    let u = uncertainty_scores(&anchor_factors, &negative_factors)?;
    let r = representativeness_scores(&view.unit_output)?;
    let mask = ExclusionMask::diagonal(s.rows());
    Ok(ScoreBreakdown {
        raw: ComponentScores { u, s, r, mask },
        anchor_factors,
        negative_factors,
    })
}

fn is_constant(lo: f64, hi: f64) -> bool {
    hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs())
}

/// Min-max rescales one component per row over included entries; constant rows map to 0.5.
fn min_max_rows(m: &Matrix, mask: &ExclusionMask) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in mask.included(i) {
            lo = lo.min(m.get(i, j));
            hi = hi.max(m.get(i, j));
        }
        for j in mask.included(i) {
            let v = if is_constant(lo, hi) {
                0.5
            } else {
                (m.get(i, j) - lo) / (hi - lo)
            };
            out.set(i, j, v);
        }
    }
    out
}

pub fn normalize_components(scores: &ComponentScores) -> ComponentScores {
    ComponentScores {
        u: min_max_rows(&scores.u, &scores.mask),
        s: min_max_rows(&scores.s, &scores.mask),
        r: min_max_rows(&scores.r, &scores.mask),
        mask: scores.mask.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Fixed,
    #[default]
    Learned,
}

/// Enabled subset of `{u, s, r}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentMask {
    pub u: bool,
    pub s: bool,
    pub r: bool,
}

impl ComponentMask {
    pub const ALL: ComponentMask = ComponentMask {
        u: true,
        s: true,
        r: true,
    };

    pub fn only(component: usize) -> ComponentMask {
        ComponentMask {
            u: component == 0,
            s: component == 1,
            r: component == 2,
        }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.u, self.s, self.r]
    }

    pub fn is_empty(&self) -> bool {
        !(self.u || self.s || self.r)
    }
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Mixing weights `(λ_u, λ_s, λ_r)` and how they are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    pub logits: [f64; 3],
    pub mode: AggregationMode,
    pub mask: ComponentMask,
}

impl AggregationParams {
    pub fn new(mode: AggregationMode, mask: ComponentMask) -> Self {
        AggregationParams {
            logits: [0.0; 3],
            mode,
            mask,
        }
    }

    /// λ over the enabled components (disabled ones get 0). Learned mode is a
    /// softmax over the enabled logits; fixed mode splits evenly.
    pub fn lambda(&self) -> [f64; 3] {
        let enabled = self.mask.as_array();
        let idx: Vec<usize> = (0..3).filter(|&c| enabled[c]).collect();
        let mut lambda = [0.0; 3];
        if idx.is_empty() {
            return lambda;
        }
        match self.mode {
            AggregationMode::Fixed => {
                for &c in &idx {
                    lambda[c] = 1.0 / idx.len() as f64;
                }
            }
            AggregationMode::Learned => {
                let logits: Vec<f64> = idx.iter().map(|&c| self.logits[c]).collect();
                for (&c, p) in idx.iter().zip(softmax(&logits)) {
                    lambda[c] = p;
                }
            }
        }
        lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WeightNorm {
    /// Each row rescaled to sum to its number of negatives.
    #[default]
    #[serde(rename = "mean-one")]
    MeanOne,
    #[serde(rename = "raw")]
    Raw,
}

/// Weights on the negatives of each anchor. Excluded entries are 0 and never used.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub w: Matrix,
    pub mask: ExclusionMask,
    pub normalization: WeightNorm,
}

impl ImportanceWeights {
    /// All included entries set to 1.
    pub fn uniform_masked(mask: ExclusionMask) -> Self {
        let (rows, cols) = mask.shape();
        let mut w = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in mask.included(i) {
                w.set(i, j, 1.0);
            }
        }
        ImportanceWeights {
            w,
            mask,
            normalization: WeightNorm::MeanOne,
        }
    }

    /// Included columns of row `i`, by weight descending then index ascending.
    pub fn ranked(&self, i: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self.mask.included(i).collect();
        idx.sort_by(|&a, &b| {
            self.w
                .get(i, b)
                .total_cmp(&self.w.get(i, a))
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn top_k(&self, i: usize, k: usize) -> Vec<usize> {
        let mut r = self.ranked(i);
        r.truncate(k);
        r
    }
}

/// Clamps to `EPS_W` and, for mean-one normalization, rescales each row to sum
/// to its included count. A row whose entries are all equal becomes exactly 1.
fn finish_weights(mut w: Matrix, mask: ExclusionMask, normalization: WeightNorm) -> ImportanceWeights {
    for i in 0..w.rows() {
        let included: Vec<usize> = mask.included(i).collect();
        for &j in &included {
            w.set(i, j, w.get(i, j).max(EPS_W));
        }
        if normalization == WeightNorm::MeanOne && !included.is_empty() {
            let first = w.get(i, included[0]);
            if included.iter().all(|&j| w.get(i, j) == first) {
                for &j in &included {
                    w.set(i, j, 1.0);
                }
                continue;
            }
            let total: f64 = included.iter().map(|&j| w.get(i, j)).sum();
            let scale = included.len() as f64 / total;
            for &j in &included {
                w.set(i, j, w.get(i, j) * scale);
            }
        }
    }
    ImportanceWeights {
        w,
        mask,
        normalization,
    }
}

/// Mixes normalized components: `w = λ_u u + λ_s s + λ_r r` over enabled components.
pub fn aggregate_importance(
    normalized: &ComponentScores,
    agg: &AggregationParams,
    normalization: WeightNorm,
) -> Result<ImportanceWeights> {
    if agg.mask.is_empty() {
        return Err(Error::Usage("aggregation needs at least one enabled component".into()));
    }
    let lambda = agg.lambda();
    let (rows, cols) = normalized.mask.shape();
    let mut w = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in normalized.mask.included(i) {
            let v: f64 = normalized
                .components()
                .iter()
                .zip(lambda)
                .filter(|(_, l)| *l != 0.0)
                .map(|(c, l)| l * c.get(i, j))
                .sum();
            w.set(i, j, v);
        }
    }
    Ok(finish_weights(w, normalized.mask.clone(), normalization))
}

pub fn uniform_weights(n: usize) -> Result<ImportanceWeights> {
    if n < 2 {
        return Err(Error::Usage(format!("a batch needs at least 2 samples, got {n}")));
    }
    Ok(ImportanceWeights::uniform_masked(ExclusionMask::diagonal(n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HclConfig {
    pub beta: f64,
}

impl Default for HclConfig {
    fn default() -> Self {
        HclConfig { beta: 1.0 }
    }
}

/// Similarity-only baseline: `w ∝ exp(β s)`.
pub fn hcl_weights(
    s: &Matrix,
    mask: &ExclusionMask,
    cfg: HclConfig,
    normalization: WeightNorm,
) -> Result<ImportanceWeights> {
    if !cfg.beta.is_finite() || cfg.beta < 0.0 {
        return Err(Error::Usage(format!("beta must be finite and >= 0, got {}", cfg.beta)));
    }
    if s.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "similarities {:?} vs mask {:?}",
            s.shape(),
            mask.shape()
        )));
    }
    let mut w = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        for j in mask.included(i) {
            w.set(i, j, (cfg.beta * s.get(i, j)).exp());
        }
    }
    Ok(finish_weights(w, mask.clone(), normalization))
}

/// Chains `dL/dw` (with `w` from [`aggregate_importance`]) back to the
/// aggregation logits. Components are constants; clamped entries pass no gradient.
pub fn aggregation_logit_gradient(
    d_weights: &Matrix,
    normalized: &ComponentScores,
    agg: &AggregationParams,
    normalization: WeightNorm,
) -> Result<[f64; 3]> {
    if agg.mode == AggregationMode::Fixed {
        return Ok([0.0; 3]);
    }
    if d_weights.shape() != normalized.mask.shape() {
        return Err(Error::Shape(format!(
            "dL/dw {:?} vs scores {:?}",
            d_weights.shape(),
            normalized.mask.shape()
        )));
    }
    let lambda = agg.lambda();
    let comps = normalized.components();
    let mut d_lambda = [0.0; 3];
    for i in 0..d_weights.rows() {
        let included: Vec<usize> = normalized.mask.included(i).collect();
        let raw: Vec<f64> = included
            .iter()
            .map(|&j| (0..3).map(|c| lambda[c] * comps[c].get(i, j)).sum::<f64>())
            .collect();
        let clamped: Vec<f64> = raw.iter().map(|v| v.max(EPS_W)).collect();
        let g: Vec<f64> = included.iter().map(|&j| d_weights.get(i, j)).collect();
        // dL/d(raw) for this row.
        let d_raw: Vec<f64> = match normalization {
            WeightNorm::Raw => g,
            WeightNorm::MeanOne => {
                let count = included.len() as f64;
                let total: f64 = clamped.iter().sum();
                let weighted: f64 = g.iter().zip(&clamped).map(|(g, r)| g * r).sum::<f64>() / total;
                g.iter().map(|gk| count / total * (gk - weighted)).collect()
            }
        };
        for (k, &j) in included.iter().enumerate() {
            if raw[k] < EPS_W {
                continue;
            }
            for c in 0..3 {
                d_lambda[c] += d_raw[k] * comps[c].get(i, j);
            }
        }
    }
    let enabled = agg.mask.as_array();
    let mut d_logits = [0.0; 3];
    for e in 0..3 {
        if !enabled[e] {
            continue;
        }
        d_logits[e] = (0..3)
            .filter(|&c| enabled[c])
            .map(|c| {
                let jac = lambda[c] * (if c == e { 1.0 } else { 0.0 } - lambda[e]);
                d_lambda[c] * jac
            })
            .sum();
    }
    Ok(d_logits)
}
