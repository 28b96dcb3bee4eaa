//! Frozen-representation evaluation and negative audits. Labels are read here.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchPair, Dataset};
use crate::encoder::{forward, EncoderParams, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::numerics::{dot, normalize_rows, softmax, Matrix, SeededRng};
use crate::scoring::{component_scores, normalize_components, AggregationParams, ImportanceWeights};
use crate::trainer::{batch_weights, train, TrainConfig};

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    /// Held-out accuracy.
    pub accuracy: f64,
    /// Held-out accuracy per class; `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub split_seed: u64,
}

fn check_labels(embeddings: &Matrix, labels: &[usize]) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on standardized features, trained full
/// batch with Adam on a deterministic 80/20 split.
pub fn linear_probe(embeddings: &Matrix, labels: &[usize], split_seed: u64) -> Result<ProbeResult> {
    check_labels(embeddings, labels)?;
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Usage("linear probe needs at least 2 classes".into()));
    }
    if n < 2 {
        return Err(Error::Usage("linear probe needs at least 2 rows".into()));
    }
    let perm = SeededRng::new(split_seed).permutation(n);
    let n_test = (n / 5).max(1);
    let (test, train) = perm.split_at(n_test);
    let d = embeddings.cols();

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += x / train.len() as f64;
        }
    }
    for &i in train {
        for c in 0..d {
            sd[c] += (embeddings.get(i, c) - mean[c]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let feature = |i: usize| -> Vec<f64> {
        (0..d).map(|c| (embeddings.get(i, c) - mean[c]) / sd[c]).collect()
    };
    let train_x: Vec<Vec<f64>> = train.iter().map(|&i| feature(i)).collect();

    let mut weight = vec![0.0; classes * d];
    let mut bias = vec![0.0; classes];
    let mut opt = OptimizerState::new(OptimizerKind::Adam, &[classes * d, classes]);
    let scale = 1.0 / train.len() as f64;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for (x, &i) in train_x.iter().zip(train) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| dot(&weight[c * d..(c + 1) * d], x) + bias[c])
                .collect();
            let p = softmax(&logits);
            for c in 0..classes {
                let err = (p[c] - f64::from(u8::from(c == labels[i]))) * scale;
                gb[c] += err;
                for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        opt.step(&mut [&mut weight, &mut bias], &[&gw, &gb], PROBE_LR)?;
    }

    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for &i in test {
        let x = feature(i);
        let logits: Vec<f64> = (0..classes)
            .map(|c| dot(&weight[c * d..(c + 1) * d], &x) + bias[c])
            .collect();
        totals[labels[i]] += 1;
        if argmax(&logits) == labels[i] {
            hits[labels[i]] += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: hits.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        split_seed,
    })
}

/// Leave-one-out KNN with cosine distance. Distance ties go to the smaller
/// index, vote ties to the smaller label.
pub fn knn_accuracy(embeddings: &Matrix, labels: &[usize], k_neighbors: usize) -> Result<f64> {
    check_labels(embeddings, labels)?;
    let n = labels.len();
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::Usage(format!(
            "k_neighbors must lie in [1, {}], got {k_neighbors}",
            n.saturating_sub(1)
        )));
    }
    let (unit, _, _) = normalize_rows(embeddings);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let correct: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (1.0 - dot(unit.row(i), unit.row(j)), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &others[..k_neighbors] {
                votes[labels[j]] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            usize::from(best == labels[i])
        })
        .sum();
    Ok(correct as f64 / n as f64)
}

fn check_top_k(weights: &ImportanceWeights, labels: &[usize], k: usize) -> Result<()> {
    let n = weights.w.rows();
    if weights.w.cols() != n || labels.len() != n {
        return Err(Error::Shape(format!(
            "weights {:?} with {} labels",
            weights.w.shape(),
            labels.len()
        )));
    }
    if k == 0 || k + 1 > n {
        return Err(Error::Usage(format!("k must lie in [1, {}], got {k}", n.saturating_sub(1))));
    }
    Ok(())
}

/// Mean over anchors of the fraction of top-k negatives that share the anchor's label.
pub fn false_negative_rate_at_k(weights: &ImportanceWeights, labels: &[usize], k: usize) -> Result<f64> {
    check_top_k(weights, labels, k)?;
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| {
            let same = weights.top_k(i, k).iter().filter(|&&j| labels[j] == labels[i]).count();
            same as f64 / k as f64
        })
        .sum();
    Ok(total / n as f64)
}

/// Shannon entropy (nats) of a label histogram, with `0 ln 0 = 0`.
pub fn label_entropy(labels: impl IntoIterator<Item = usize>) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
        total += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean over anchors of the class-histogram entropy of the top-k negatives.
pub fn diversity_entropy_at_k(weights: &ImportanceWeights, labels: &[usize], k: usize) -> Result<f64> {
    check_top_k(weights, labels, k)?;
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| label_entropy(weights.top_k(i, k).into_iter().map(|j| labels[j])))
        .sum();
    Ok(total / n as f64)
}

/// One row of the audit CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub anchor_index: usize,
    pub negative_index: usize,
    pub u_raw: f64,
    pub s_raw: f64,
    pub r_raw: f64,
    pub u_norm: f64,
    pub s_norm: f64,
    pub r_norm: f64,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub weight: f64,
    pub pseudo_label: usize,
    pub negative_true_label: i64,
}

/// Top-k negatives of one anchor, sorted by weight descending.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeAudit {
    pub anchor_index: usize,
    pub anchor_label: Option<usize>,
    pub k: usize,
    pub negatives: Vec<AuditRecord>,
}

/// Audits the first `anchors` anchors of a batch. Indices in the output are
/// dataset (source) indices; the pseudo-label is the source index of the
/// anchor the negative most resembles. Component columns are always filled,
/// the weight column follows `config.sampler`.
pub fn audit_batch(
    params: &EncoderParams,
    aggregation: &AggregationParams,
    batch: &BatchPair,
    config: &TrainConfig,
    anchors: usize,
    k: usize,
) -> Result<Vec<NegativeAudit>> {
    let n = batch.len();
    if k == 0 || k + 1 > n {
        return Err(Error::Usage(format!("topk must lie in [1, N - 1 = {}], got {k}", n - 1)));
    }
    if anchors == 0 || anchors > n {
        return Err(Error::Usage(format!("anchors must lie in [1, N = {n}], got {anchors}")));
    }
    let anchor = forward(params, &batch.anchor_view)?;
    let view = forward(params, &batch.second_view)?;
    let scores = component_scores(&anchor, &view, config.loss_kind, config.tau)?;
    let normalized = normalize_components(&scores.raw);
    let weights = batch_weights(&anchor, &view, aggregation, config)?.weights;
    let lambda = aggregation.lambda();
    let labels = batch.labels();
    let src = &batch.source_indices;
    Ok((0..anchors)
        .map(|i| NegativeAudit {
            anchor_index: src[i],
            anchor_label: labels.map(|l| l[i]),
            k,
            negatives: weights
                .top_k(i, k)
                .into_iter()
                .map(|j| AuditRecord {
                    anchor_index: src[i],
                    negative_index: src[j],
                    u_raw: scores.raw.u.get(i, j),
                    s_raw: scores.raw.s.get(i, j),
                    r_raw: scores.raw.r.get(i, j),
                    u_norm: normalized.u.get(i, j),
                    s_norm: normalized.s.get(i, j),
                    r_norm: normalized.r.get(i, j),
                    lambda_u: lambda[0],
                    lambda_s: lambda[1],
                    lambda_r: lambda[2],
                    weight: weights.w.get(i, j),
                    pseudo_label: src[scores.negative_factors.pseudo_labels[j]],
                    negative_true_label: labels.map_or(-1, |l| l[j] as i64),
                })
                .collect(),
        })
        .collect())
}

pub fn write_audit_csv(path: &Path, audits: &[NegativeAudit]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for a in audits {
        for r in &a.negatives {
            w.serialize(r)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_audit_csv(path: &Path) -> Result<Vec<AuditRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub knn_accuracy: f64,
    pub seed: u64,
}

/// Trains one run per `(k, seed)` with negatives drawn from classes `0..k`
/// and reports final KNN accuracy. Rows come out ordered by k, then seed.
pub fn sweep_classes(config: &TrainConfig, dataset: &Dataset, k_values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let classes = dataset
        .class_count()
        .ok_or_else(|| Error::Usage("the class sweep needs a labeled dataset".into()))?;
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::Usage(format!("k must lie in [1, {classes}], got {k}")));
    }
    let jobs: Vec<(usize, u64)> = k_values
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(k, seed)| {
            let cfg = sweep_config(config, k, seed);
            let out = train(&cfg, dataset, &mut |_| Ok(()))?;
            let knn = match out.records.last().and_then(|r| r.knn_acc) {
                Some(v) => v,
                None => final_knn(&out.state.params, dataset, &cfg)?,
            };
            Ok(SweepRow {
                k,
                knn_accuracy: knn,
                seed,
            })
        })
        .collect()
}

/// The configuration a sweep uses for one `(k, seed)` cell.
pub fn sweep_config(config: &TrainConfig, k: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        negative_classes: Some(k),
        sampler: crate::trainer::SamplerKind::Uniform,
        ..config.clone()
    }
}

fn final_knn(params: &EncoderParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Usage("KNN needs labels".into()))?;
    let emb = forward(params, dataset.features())?.unit_output;
    knn_accuracy(&emb, labels, cfg.eval.knn_k.min(dataset.len() - 1))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{augment_pair, generate_gaussian_mixture, AugmentConfig};
    use crate::numerics::ExclusionMask;
    use crate::scoring::{uniform_weights, AggregationMode, ComponentMask};
    use crate::trainer::{DataSource, SamplerKind};
    use proptest::prelude::*;

    fn matrix(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn probe_separates_clusters() {
        let ds = generate_gaussian_mixture(&mut SeededRng::new(1), 2, 100, 2, 10.0).unwrap();
        let res = linear_probe(ds.features(), ds.labels().unwrap(), 7).unwrap();
        assert!(res.accuracy >= 0.99, "{}", res.accuracy);
        assert_eq!(res.per_class.len(), 2);
    }

    #[test]
    fn probe_is_at_chance_on_shuffled_labels() {
        let mut rng = SeededRng::new(2);
        let x = matrix(&mut rng, 400, 4);
        let labels: Vec<usize> = (0..400).map(|_| rng.index(4)).collect();
        let acc = linear_probe(&x, &labels, 3).unwrap().accuracy;
        assert!((acc - 0.25).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn probe_on_constant_embeddings_predicts_the_majority() {
        let x = Matrix::filled(100, 3, 0.7);
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let res = linear_probe(&x, &labels, 5).unwrap();
        // Every prediction is class 0, so accuracy is its share of the test split.
        let perm = SeededRng::new(5).permutation(100);
        let zeros = perm[..20].iter().filter(|&&i| labels[i] == 0).count();
        assert_eq!(res.accuracy, zeros as f64 / 20.0);
        assert!(linear_probe(&x, &[1; 100], 5).is_err());
    }

    fn naive_knn(x: &Matrix, labels: &[usize], k: usize) -> f64 {
        let n = x.rows();
        let mut correct = 0;
        for i in 0..n {
            let mut taken = vec![false; n];
            taken[i] = true;
            let mut votes = std::collections::HashMap::new();
            for _ in 0..k {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if taken[j] {
                        continue;
                    }
                    let cos = crate::numerics::cosine_sim(x.row(i), x.row(j)).unwrap();
                    let dist = 1.0 - cos;
                    if best.is_none_or(|(d, _)| dist < d) {
                        best = Some((dist, j));
                    }
                }
                let (_, j) = best.unwrap();
                taken[j] = true;
                *votes.entry(labels[j]).or_insert(0) += 1;
            }
            let top = votes.values().max().unwrap();
            let pred = votes.iter().filter(|(_, v)| *v == top).map(|(l, _)| *l).min().unwrap();
            correct += usize::from(pred == labels[i]);
        }
        correct as f64 / n as f64
    }

    #[test]
    fn knn_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]]).unwrap();
        assert_eq!(knn_accuracy(&x, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        let dup = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(knn_accuracy(&dup, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        assert!(knn_accuracy(&x, &[0, 0, 1, 1], 4).is_err());
        assert!(knn_accuracy(&x, &[0, 0, 1, 1], 0).is_err());

        let mut rng = SeededRng::new(4);
        for k in [1, 3, 5] {
            let x = matrix(&mut rng, 30, 3);
            let labels: Vec<usize> = (0..30).map(|_| rng.index(3)).collect();
            assert_eq!(knn_accuracy(&x, &labels, k).unwrap(), naive_knn(&x, &labels, k));
        }
    }

    fn weights_from(rows: &[[f64; 4]]) -> ImportanceWeights {
        let mut w = ImportanceWeights::uniform_masked(ExclusionMask::diagonal(4));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..4 {
                if i != j {
                    w.w.set(i, j, r[j]);
                }
            }
        }
        w
    }

    #[test]
    fn fnr_and_entropy_fixtures() {
        let w = uniform_weights(4).unwrap();
        assert_eq!(false_negative_rate_at_k(&w, &[0, 1, 2, 3], 2).unwrap(), 0.0);
        assert_eq!(false_negative_rate_at_k(&w, &[1, 1, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(diversity_entropy_at_k(&w, &[1, 1, 1, 1], 3).unwrap(), 0.0);
        assert!((label_entropy([0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-15);

        // Labels 0,0,1,1. Anchor 0 ranks 1 then 3; anchor 1 ranks 2 then 0;
        // anchor 2 ranks 3 then 0; anchor 3 ranks 0 then 1.
        let w = weights_from(&[
            [0.0, 3.0, 1.0, 2.0],
            [2.0, 0.0, 3.0, 1.0],
            [2.0, 1.0, 0.0, 3.0],
            [3.0, 2.0, 1.0, 0.0],
        ]);
        let labels = [0, 0, 1, 1];
        // Same-label hits among top-2: 1, 1, 1, 0.
        assert_eq!(false_negative_rate_at_k(&w, &labels, 2).unwrap(), 3.0 / 8.0);
        // Histograms: {0,1}, {1,0}, {1,0}, {0,0}.
        let expect = 3.0 * 2f64.ln() / 4.0;
        assert!((diversity_entropy_at_k(&w, &labels, 2).unwrap() - expect).abs() < 1e-15);
        assert!(false_negative_rate_at_k(&w, &labels, 4).is_err());
    }

    proptest! {
        #[test]
        fn top_k_metrics_ignore_monotone_rescaling(seed in 0u64..200, k in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let n = 7;
            let mut w = uniform_weights(n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        w.w.set(i, j, rng.uniform() + 0.01);
                    }
                }
            }
            let labels: Vec<usize> = (0..n).map(|_| rng.index(3)).collect();
            let mut warped = w.clone();
            for v in warped.w.data_mut() {
                *v = (3.0 * *v).exp() + 0.5;
            }
            prop_assert_eq!(
                false_negative_rate_at_k(&w, &labels, k).unwrap(),
                false_negative_rate_at_k(&warped, &labels, k).unwrap()
            );
            prop_assert_eq!(
                diversity_entropy_at_k(&w, &labels, k).unwrap(),
                diversity_entropy_at_k(&warped, &labels, k).unwrap()
            );
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            encoder_dims: vec![2, 6, 3],
            data: DataSource::GaussianMixture {
                n_classes: 4,
                n_per_class: 8,
                d_in: 2,
                separation: 3.0,
                seed: 2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn uniform_audit_ranks_by_index() {
        let cfg = TrainConfig { sampler: SamplerKind::Uniform, ..small_config() };
        let ds = cfg.data.load().unwrap();
        let idx = [3, 9, 14, 20, 27];
        let batch = augment_pair(&mut SeededRng::new(1), &ds, &idx, &AugmentConfig::IDENTITY).unwrap();
        let state = crate::trainer::TrainState::new(&cfg).unwrap();
        let audits = audit_batch(&state.params, &state.aggregation, &batch, &cfg, 5, 4).unwrap();
        assert_eq!(audits.len(), 5);
        for (i, a) in audits.iter().enumerate() {
            let expect: Vec<usize> = (0..5).filter(|&j| j != i).map(|j| idx[j]).collect();
            let got: Vec<usize> = a.negatives.iter().map(|r| r.negative_index).collect();
            assert_eq!(got, expect);
            assert_eq!(a.anchor_label, Some(idx[i] / 8));
        }
        assert!(audit_batch(&state.params, &state.aggregation, &batch, &cfg, 5, 5).is_err());
    }

    #[test]
    fn audit_csv_round_trips() {
        let cfg = small_config();
        let ds = cfg.data.load().unwrap();
        let batch = augment_pair(&mut SeededRng::new(1), &ds, &[0, 7, 8, 15, 16, 31], &cfg.augment).unwrap();
        let mut state = crate::trainer::TrainState::new(&cfg).unwrap();
        state.aggregation = AggregationParams {
            logits: [0.3, -0.1, 0.05],
            mode: AggregationMode::Learned,
            mask: ComponentMask::ALL,
        };
        let audits = audit_batch(&state.params, &state.aggregation, &batch, &cfg, 4, 3).unwrap();
        for a in &audits {
            let w: Vec<f64> = a.negatives.iter().map(|r| r.weight).collect();
            assert!(w.windows(2).all(|p| p[0] >= p[1]));
            assert_eq!(a.negatives.len(), 3);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.csv");
        write_audit_csv(&path, &audits).unwrap();
        let back = read_audit_csv(&path).unwrap();
        let flat: Vec<AuditRecord> = audits.into_iter().flat_map(|a| a.negatives).collect();
        assert_eq!(back, flat);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "anchor_index,negative_index,u_raw,s_raw,r_raw,u_norm,s_norm,r_norm,\
             lambda_u,lambda_s,lambda_r,weight,pseudo_label,negative_true_label\n"
        ));
    }

    #[test]
    fn sweep_has_one_row_per_cell_and_full_k_matches_a_plain_run() {
        let cfg = small_config();
        let ds = cfg.data.load().unwrap();
        let rows = sweep_classes(&cfg, &ds, &[1, 4], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| (r.k, r.seed)).collect::<Vec<_>>(), vec![(1, 0), (1, 1), (4, 0), (4, 1)]);

        let plain = train(&sweep_config(&cfg, 4, 1), &ds, &mut |_| Ok(())).unwrap();
        assert_eq!(plain.records.last().unwrap().knn_acc, Some(rows[3].knn_accuracy));
        assert!(sweep_classes(&cfg, &ds, &[5], &[0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("k,knn_accuracy,seed\n"));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
