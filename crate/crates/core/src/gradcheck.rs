//! Finite-difference checks of the analytic gradients on random small instances.

use crate::encoder::{forward, init_encoder, EncoderParams};
use crate::error::Result;
use crate::loss::{weighted_info_nce, LossConfig};
use crate::numerics::{normalize_rows, normalize_rows_backward, Matrix, SeededRng};
use crate::scoring::{
    aggregate_importance, gradient_factors, pseudo_posterior, AggregationMode, AggregationParams,
    ComponentMask, ComponentScores, ImportanceWeights, LossKind, ViewRole, WeightNorm,
};

pub const FACTOR_TOLERANCE: f64 = 1e-4;
pub const EMBEDDING_TOLERANCE: f64 = 1e-4;
pub const LOGIT_TOLERANCE: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        SuiteReport {
            name,
            tolerance,
            instances: 0,
            max_rel_err: 0.0,
            worst_seed: 0,
        }
    }

    fn record(&mut self, seed: u64, err: f64) {
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
            self.worst_seed = seed;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    /// Scales every analytic gradient by `1 + 1e-2`, so the checks must fail.
    pub corrupt: bool,
}

impl CheckOptions {
    fn analytic(&self, v: f64) -> f64 {
        if self.corrupt {
            v * 1.01
        } else {
            v
        }
    }
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Random sizes within `N ≤ 6, d ≤ 4, d_prev ≤ 5`.
fn random_instance(rng: &mut SeededRng) -> Result<(EncoderParams, Matrix, Matrix)> {
    let n = 3 + rng.index(4);
    let d_in = 2 + rng.index(3);
    let d_prev = 2 + rng.index(4);
    let d = 2 + rng.index(3);
    let params = init_encoder(&[d_in, d_prev, d], rng)?;
    let x_anchor = random_matrix(rng, n, d_in);
    let x_view = random_matrix(rng, n, d_in);
    Ok((params, x_anchor, x_view))
}

/// `−log p_{ŷ_j}` of the pseudo-posterior for the negative view, with the
/// last layer replaced by `last` and the anchors held fixed.
fn pseudo_label_loss(
    params: &EncoderParams,
    last: &Matrix,
    x_view: &Matrix,
    anchor_unit: &Matrix,
    j: usize,
    label: usize,
) -> Result<f64> {
    let mut p = params.clone();
    p.last = last.clone();
    let view = forward(&p, x_view)?;
    let post = pseudo_posterior(anchor_unit, &view.unit_output, j)?;
    let k = post.classes.iter().position(|&c| c == label).expect("label is eligible");
    Ok(-post.probs[k].ln())
}

/// Factored last-layer gradients `a_j h_jᵀ` against central differences of
/// the pseudo-label cross-entropy, one instance per seed.
pub fn factor_suite(seeds: &[u64], opts: CheckOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("factored-gradient", FACTOR_TOLERANCE);
    for &seed in seeds {
        let mut rng = SeededRng::new(seed);
        let (params, x_anchor, x_view) = random_instance(&mut rng)?;
        let anchor_unit = forward(&params, &x_anchor)?.unit_output;
        let view = forward(&params, &x_view)?;
        let factors = gradient_factors(&view, &anchor_unit, LossKind::CrossEntropy, 1.0, ViewRole::Negative)?;
        let (d, d_prev) = params.last.shape();
        let mut worst: f64 = 0.0;
        for j in 0..view.batch_size() {
            if factors.degenerate[j] {
                continue;
            }
            let analytic = factors.materialize(j);
            let label = factors.pseudo_labels[j];
            for e in 0..d * d_prev {
                let h = 1e-5 * params.last.data()[e].abs().max(1.0);
                let mut plus = params.last.clone();
                plus.data_mut()[e] += h;
                let mut minus = params.last.clone();
                minus.data_mut()[e] -= h;
                let fd = (pseudo_label_loss(&params, &plus, &x_view, &anchor_unit, j, label)?
                    - pseudo_label_loss(&params, &minus, &x_view, &anchor_unit, j, label)?)
                    / (2.0 * h);
                worst = worst.max(relative_error(opts.analytic(analytic[e]), fd, 1e-6));
            }
        }
        report.instances += 1;
        report.record(seed, worst);
    }
    Ok(report)
}

fn random_weights(rng: &mut SeededRng, n: usize) -> Result<ImportanceWeights> {
    let mut w = crate::scoring::uniform_weights(n)?;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w.w.set(i, j, 0.2 + 1.6 * rng.uniform());
            }
        }
    }
    Ok(w)
}

fn weighted_loss_of_raw(za: &Matrix, zv: &Matrix, w: &ImportanceWeights, cfg: &LossConfig) -> Result<f64> {
    Ok(weighted_info_nce(&normalize_rows(za).0, &normalize_rows(zv).0, w, cfg)?.value)
}

/// Gradients of the weighted loss w.r.t. raw (pre-normalization) embeddings of both views.
pub fn embedding_suite(seeds: &[u64], opts: CheckOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("loss-embeddings", EMBEDDING_TOLERANCE);
    for &seed in seeds {
        let mut rng = SeededRng::new(seed);
        let n = 3 + rng.index(4);
        let d = 2 + rng.index(3);
        let za = random_matrix(&mut rng, n, d);
        let zv = random_matrix(&mut rng, n, d);
        let w = random_weights(&mut rng, n)?;
        let cfg = LossConfig {
            tau: 0.2 + rng.uniform(),
            weight_mode: WeightNorm::MeanOne,
        };
        let (ua, na, da) = normalize_rows(&za);
        let (uv, nv, dv) = normalize_rows(&zv);
        let out = weighted_info_nce(&ua, &uv, &w, &cfg)?;
        let grads = [
            normalize_rows_backward(&ua, &na, &da, &out.d_anchor)?,
            normalize_rows_backward(&uv, &nv, &dv, &out.d_view)?,
        ];
        let mut worst: f64 = 0.0;
        for (side, grad) in grads.iter().enumerate() {
            for e in 0..n * d {
                let base = if side == 0 { &za } else { &zv };
                let h = 1e-5 * base.data()[e].abs().max(1.0);
                let shifted = |delta: f64| -> Result<f64> {
                    let mut m = base.clone();
                    m.data_mut()[e] += delta;
                    if side == 0 {
                        weighted_loss_of_raw(&m, &zv, &w, &cfg)
                    } else {
                        weighted_loss_of_raw(&za, &m, &w, &cfg)
                    }
                };
                let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                worst = worst.max(relative_error(opts.analytic(grad.data()[e]), fd, 1e-6));
            }
        }
        report.instances += 1;
        report.record(seed, worst);
    }
    Ok(report)
}

/// Gradient of the weighted loss w.r.t. the aggregation logits, through λ,
/// mixing, clamping and mean-one renormalization.
pub fn logit_suite(seeds: &[u64], opts: CheckOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("loss-logits", LOGIT_TOLERANCE);
    for &seed in seeds {
        let mut rng = SeededRng::new(seed);
        let n = 3 + rng.index(4);
        let d = 2 + rng.index(3);
        let ua = normalize_rows(&random_matrix(&mut rng, n, d)).0;
        let uv = normalize_rows(&random_matrix(&mut rng, n, d)).0;
        let mask = crate::numerics::ExclusionMask::diagonal(n);
        let mut comps = [Matrix::zeros(n, n), Matrix::zeros(n, n), Matrix::zeros(n, n)];
        for c in &mut comps {
            for i in 0..n {
                for j in mask.included(i) {
                    c.set(i, j, rng.uniform());
                }
            }
        }
        let [u, s, r] = comps;
        let scores = ComponentScores { u, s, r, mask };
        let mut agg = AggregationParams::new(AggregationMode::Learned, ComponentMask::ALL);
        for l in &mut agg.logits {
            *l = rng.normal();
        }
        let cfg = LossConfig::default();
        let loss_at = |logits: [f64; 3]| -> Result<f64> {
            let a = AggregationParams { logits, ..agg };
            let w = aggregate_importance(&scores, &a, WeightNorm::MeanOne)?;
            Ok(weighted_info_nce(&ua, &uv, &w, &cfg)?.value)
        };
        let w = aggregate_importance(&scores, &agg, WeightNorm::MeanOne)?;
        let out = crate::loss::loss_gradients(&ua, &uv, &w, Some((&scores, &agg)), &cfg)?;
        let mut worst: f64 = 0.0;
        for e in 0..3 {
            let h = 1e-5;
            let mut plus = agg.logits;
            plus[e] += h;
            let mut minus = agg.logits;
            minus[e] -= h;
            let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
            worst = worst.max(relative_error(opts.analytic(out.d_logits[e]), fd, 1e-8));
        }
        report.instances += 1;
        report.record(seed, worst);
    }
    Ok(report)
}

/// All three suites over the same seeds.
pub fn run_all(seeds: &[u64], opts: CheckOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        factor_suite(seeds, opts)?,
        embedding_suite(seeds, opts)?,
        logit_suite(seeds, opts)?,
    ])
}
