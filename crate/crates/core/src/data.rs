//! Datasets, two-view augmentation and batching.
//!
//! Labels are carried for evaluation only. Every label accessor reports to
//! [`crate::firewall`], so a read on the training path is detectable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firewall;
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    labels: Option<Vec<usize>>,
    class_count: Option<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Usage("dataset has no rows".into()));
        }
        let class_count = match &labels {
            Some(l) if l.len() != x.rows() => {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    x.rows()
                )))
            }
            Some(l) => Some(l.iter().max().map_or(0, |m| m + 1)),
            None => None,
        };
        Ok(Dataset {
            x,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Evaluation-only access to the labels.
    pub fn labels(&self) -> Option<&[usize]> {
        firewall::record_label_read();
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
        }
    }
}

/// Gaussian mixture with unit-variance isotropic clusters.
///
/// Class means sit on a circle in the first two coordinates, spaced so that
/// neighbouring means are `separation` apart. With `d_in = 1` they sit on a
/// line with the same spacing. Rows are ordered by class.
pub fn generate_gaussian_mixture(
    rng: &mut SeededRng,
    n_classes: usize,
    n_per_class: usize,
    d_in: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_classes < 2 || n_per_class == 0 || d_in == 0 {
        return Err(Error::Usage(format!(
            "mixture needs >= 2 classes, >= 1 point per class and d_in >= 1 \
             (got {n_classes}, {n_per_class}, {d_in})"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::Usage(format!("separation must be positive, got {separation}")));
    }
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; d_in];
            if d_in == 1 {
                m[0] = separation * (c as f64 - (n_classes - 1) as f64 / 2.0);
            } else {
                let step = std::f64::consts::TAU / n_classes as f64;
                let radius = separation / (2.0 * (step / 2.0).sin());
                m[0] = radius * (step * c as f64).cos();
                m[1] = radius * (step * c as f64).sin();
            }
            m
        })
        .collect();
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    let mut ds = Dataset::new(Matrix::from_vec(n, d_in, data)?, Some(labels))?;
    ds.class_count = Some(n_classes);
    Ok(ds)
}

/// Reads a CSV with a header row. A column named `label` (if present) holds
/// non-negative integer labels; every other column is a feature.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != label_col).collect();
    if feature_cols.is_empty() {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for &c in &feature_cols {
            let v: f64 = record[c].parse().map_err(|_| {
                parse_err(line, format!("column `{}`: `{}` is not a number", &headers[c], &record[c]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column `{}`: non-finite value", &headers[c])));
            }
            data.push(v);
        }
        if let Some(lc) = label_col {
            let l: usize = record[lc].parse().map_err(|_| {
                parse_err(line, format!("label `{}` is not a non-negative integer", &record[lc]))
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    let x = Matrix::from_vec(rows, feature_cols.len(), data)?;
    Dataset::new(x, label_col.map(|_| labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate.
    pub dropout_prob: f64,
    /// Each coordinate is scaled by `1 + U(−scale_jitter, scale_jitter)`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.3,
            dropout_prob: 0.0,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        noise_sigma: 0.0,
        dropout_prob: 0.0,
        scale_jitter: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("augment.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("augment.dropout_prob", "must lie in [0, 1)"));
        }
        if !(self.scale_jitter >= 0.0) || !self.scale_jitter.is_finite() {
            return Err(Error::config("augment.scale_jitter", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Two augmented views of the same source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub anchor_view: Matrix,
    pub second_view: Matrix,
    pub source_indices: Vec<usize>,
    labels: Option<Vec<usize>>,
    /// Extra negatives appended after the in-batch candidates (class-restricted runs).
    pub extra_negatives: Option<Matrix>,
}

impl BatchPair {
    pub fn new(anchor_view: Matrix, second_view: Matrix, source_indices: Vec<usize>) -> Result<Self> {
        if anchor_view.shape() != second_view.shape() || anchor_view.rows() != source_indices.len() {
            return Err(Error::Shape(format!(
                "views {:?} / {:?} for {} sources",
                anchor_view.shape(),
                second_view.shape(),
                source_indices.len()
            )));
        }
        if anchor_view.rows() < 2 {
            return Err(Error::Usage(format!(
                "a batch needs at least 2 rows, got {}",
                anchor_view.rows()
            )));
        }
        Ok(BatchPair {
            anchor_view,
            second_view,
            source_indices,
            labels: None,
            extra_negatives: None,
        })
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    /// Evaluation-only access to the labels of the source rows.
    pub fn labels(&self) -> Option<&[usize]> {
        firewall::record_label_read();
        self.labels.as_deref()
    }
}

fn augment_view(rng: &mut SeededRng, rows: &Matrix, cfg: &AugmentConfig) -> Matrix {
    let mut out = rows.clone();
    for v in out.data_mut() {
        if cfg.scale_jitter > 0.0 {
            *v *= 1.0 + rng.uniform_range(-cfg.scale_jitter, cfg.scale_jitter);
        }
        if cfg.noise_sigma > 0.0 {
            *v += cfg.noise_sigma * rng.normal();
        }
        if cfg.dropout_prob > 0.0 && rng.bernoulli(cfg.dropout_prob) {
            *v = 0.0;
        }
    }
    out
}

/// Builds the two views for the given source rows. Labels are attached
/// without being inspected.
pub fn augment_pair(
    rng: &mut SeededRng,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
) -> Result<BatchPair> {
    if indices.len() < 2 {
        return Err(Error::Usage(format!("a batch needs at least 2 rows, got {}", indices.len())));
    }
    let rows = dataset.x.select_rows(indices);
    let anchor_view = augment_view(rng, &rows, cfg);
    let second_view = augment_view(rng, &rows, cfg);
    let mut batch = BatchPair::new(anchor_view, second_view, indices.to_vec())?;
    batch.labels = dataset
        .labels
        .as_ref()
        .map(|l| indices.iter().map(|&i| l[i]).collect());
    Ok(batch)
}

/// Single augmented view of arbitrary rows (used for extra negatives).
pub fn augment_rows(rng: &mut SeededRng, dataset: &Dataset, indices: &[usize], cfg: &AugmentConfig) -> Matrix {
    augment_view(rng, &dataset.x.select_rows(indices), cfg)
}

/// Shuffles `0..n` and cuts it into batches of `batch_size`. The trailing
/// short batch is kept only if it has at least 3 rows.
pub fn epoch_batches(rng: &mut SeededRng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch_size.max(1))
        .filter(|c| c.len() == batch_size || c.len() >= 3)
        .map(|c| c.to_vec())
        .collect()
}

/// Draws `count` indices from `pool`: without replacement when the pool is
/// large enough, with replacement otherwise.
pub fn sample_from_pool(rng: &mut SeededRng, pool: &[usize], count: usize) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    if count <= pool.len() {
        let mut p = pool.to_vec();
        for i in 0..count {
            let j = i + rng.index(p.len() - i);
            p.swap(i, j);
        }
        p.truncate(count);
        p
    } else {
        (0..count).map(|_| pool[rng.index(pool.len())]).collect()
    }
}

/// Rows whose label lies in `0..k`.
pub fn restricted_class_pool(dataset: &Dataset, k: usize) -> Result<Vec<usize>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Usage("class-restricted sampling needs a labeled dataset".into()))?;
    let classes = dataset.class_count().unwrap_or(0);
    if k == 0 || k > classes {
        return Err(Error::Usage(format!("k must lie in [1, {classes}], got {k}")));
    }
    Ok((0..labels.len()).filter(|&i| labels[i] < k).collect())
}

/// Samples `count` negative rows whose labels lie in `0..k`.
pub fn restricted_class_sampler(
    rng: &mut SeededRng,
    dataset: &Dataset,
    k: usize,
    count: usize,
) -> Result<Vec<usize>> {
    let pool = restricted_class_pool(dataset, k)?;
    Ok(sample_from_pool(rng, &pool, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn mixture_is_deterministic_and_labeled() {
        let a = generate_gaussian_mixture(&mut SeededRng::new(1), 8, 100, 2, 3.0).unwrap();
        let b = generate_gaussian_mixture(&mut SeededRng::new(1), 8, 100, 2, 3.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 800);
        assert_eq!(a.class_count(), Some(8));
        let labels = a.labels().unwrap();
        for c in 0..8 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(generate_gaussian_mixture(&mut SeededRng::new(1), 1, 10, 2, 1.0).is_err());
        assert!(generate_gaussian_mixture(&mut SeededRng::new(1), 2, 10, 2, 0.0).is_err());
    }

    #[test]
    fn neighbouring_means_are_separation_apart() {
        let ds = generate_gaussian_mixture(&mut SeededRng::new(2), 8, 2000, 2, 4.0).unwrap();
        let mean = |c: usize| {
            let rows: Vec<usize> = (c * 2000..(c + 1) * 2000).collect();
            let m = ds.features().select_rows(&rows);
            let mut out = [0.0; 2];
            for r in m.row_iter() {
                out[0] += r[0] / 2000.0;
                out[1] += r[1] / 2000.0;
            }
            out
        };
        let (m0, m1) = (mean(0), mean(1));
        let dist = ((m0[0] - m1[0]).powi(2) + (m0[1] - m1[1]).powi(2)).sqrt();
        assert!((dist - 4.0).abs() < 0.15, "{dist}");
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_with_and_without_labels() {
        let f = write_tmp("f0,f1,label\n1.0,2.0,0\n3,4,1\n-1e-3,0.5,2\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), Some(&[0, 1, 2][..]));
        assert_eq!(ds.features().row(2), &[-1e-3, 0.5]);

        let f = write_tmp("a,b,c\n1,2,3\n");
        let ds = load_csv(f.path()).unwrap();
        assert!(!ds.has_labels());
        assert_eq!(ds.dim(), 3);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let f = write_tmp("f0,f1,label\n1.0,2.0,0\n1.0,abc,1\n");
        match load_csv(f.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("abc"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("f0\nNaN\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("f0,label\n1.0,-1\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            load_csv(Path::new("/definitely/not/here.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn identity_augmentation_copies_rows() {
        let ds = generate_gaussian_mixture(&mut SeededRng::new(3), 2, 5, 3, 1.0).unwrap();
        let idx = [0, 3, 7];
        let b = augment_pair(&mut SeededRng::new(4), &ds, &idx, &AugmentConfig::IDENTITY).unwrap();
        let src = ds.features().select_rows(&idx);
        assert_eq!(b.anchor_view, src);
        assert_eq!(b.second_view, src);
    }

    #[test]
    fn augmentation_is_seeded_and_views_differ() {
        let ds = generate_gaussian_mixture(&mut SeededRng::new(3), 2, 5, 3, 1.0).unwrap();
        let cfg = AugmentConfig {
            noise_sigma: 0.1,
            ..AugmentConfig::IDENTITY
        };
        let a = augment_pair(&mut SeededRng::new(9), &ds, &[1, 2], &cfg).unwrap();
        let b = augment_pair(&mut SeededRng::new(9), &ds, &[1, 2], &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.anchor_view, a.second_view);
    }

    #[test]
    fn dropout_zeroes_about_the_requested_fraction() {
        let x = Matrix::filled(500, 10, 1.0);
        let ds = Dataset::new(x, None).unwrap();
        let idx: Vec<usize> = (0..500).collect();
        let cfg = AugmentConfig {
            dropout_prob: 0.5,
            ..AugmentConfig::IDENTITY
        };
        let b = augment_pair(&mut SeededRng::new(5), &ds, &idx, &cfg).unwrap();
        let zeros = b.anchor_view.data().iter().filter(|&&v| v == 0.0).count() as f64;
        // 5000 Bernoulli(0.5) draws: sd = 35.4, allow 4 sd.
        assert!((zeros - 2500.0).abs() < 4.0 * 35.4, "{zeros}");
    }

    #[test]
    fn epoch_batches_partition_and_reshuffle() {
        let mut rng = SeededRng::new(6);
        let e1 = epoch_batches(&mut rng, 10, 5);
        let e2 = epoch_batches(&mut rng, 10, 5);
        let mut seen: Vec<usize> = e1.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(e1, e2);
        assert_eq!(e1, epoch_batches(&mut SeededRng::new(6), 10, 5));

        // 9 = 4 + 4 + 1: the trailing single row is dropped.
        let e = epoch_batches(&mut SeededRng::new(7), 9, 4);
        assert_eq!(e.len(), 2);
        assert!(e.iter().all(|b| b.len() == 4));
        // 11 = 4 + 4 + 3: kept.
        assert_eq!(epoch_batches(&mut SeededRng::new(7), 11, 4).len(), 3);
    }

    #[test]
    fn restricted_sampler_respects_class_range() {
        let ds = generate_gaussian_mixture(&mut SeededRng::new(8), 5, 20, 2, 1.0).unwrap();
        let labels = ds.labels().unwrap().to_vec();
        let mut rng = SeededRng::new(1);
        let only0 = restricted_class_sampler(&mut rng, &ds, 1, 15).unwrap();
        assert!(only0.iter().all(|&i| labels[i] == 0));
        let three = restricted_class_sampler(&mut rng, &ds, 3, 40).unwrap();
        assert_eq!(three.len(), 40);
        assert!(three.iter().all(|&i| labels[i] < 3));
        assert_eq!(restricted_class_pool(&ds, 5).unwrap().len(), 100);
        assert!(restricted_class_sampler(&mut rng, &ds, 6, 3).is_err());

        let unlabeled = Dataset::new(ds.features().clone(), None).unwrap();
        assert!(restricted_class_sampler(&mut rng, &unlabeled, 1, 3).is_err());
    }

    #[test]
    fn pool_sampling_without_replacement_when_possible() {
        let pool: Vec<usize> = (10..20).collect();
        let mut s = sample_from_pool(&mut SeededRng::new(2), &pool, 10);
        s.sort_unstable();
        assert_eq!(s, pool);
        assert_eq!(sample_from_pool(&mut SeededRng::new(2), &pool, 25).len(), 25);
    }
}
