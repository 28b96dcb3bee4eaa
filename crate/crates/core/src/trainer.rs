//! Training loop, run configuration and metrics.
//!
//! Random streams derived from `seed`:
//!
//! | stream | use                                   |
//! |--------|---------------------------------------|
//! | 0      | encoder initialization                |
//! | 1      | epoch shuffles                        |
//! | 2      | augmentation (both views, then extras)|
//! | 3      | extra-negative draws                  |
//! | 4      | evaluation batch and probe split      |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    augment_pair, augment_rows, epoch_batches, generate_gaussian_mixture, load_csv,
    restricted_class_pool, sample_from_pool, AugmentConfig, BatchPair, Dataset,
};
use crate::encoder::{
    apply_update, backward, forward, init_encoder, Checkpoint, EncoderParams, ForwardTrace,
    OptimizerKind, OptimizerState,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::firewall;
use crate::loss::{loss_gradients, LossConfig, DEFAULT_TAU};
use crate::numerics::{normalize_rows_backward, ExclusionMask, SeededRng};
use crate::scoring::{
    aggregate_importance, component_scores, hcl_weights, normalize_components, similarity_scores,
    AggregationMode, AggregationParams, ComponentMask, ComponentScores, HclConfig,
    ImportanceWeights, LossKind, ScoreBreakdown, WeightNorm,
};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_AUGMENT: u64 = 2;
pub const STREAM_NEGATIVES: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Unremix,
    Uniform,
    Hcl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    GaussianMixture {
        n_classes: usize,
        n_per_class: usize,
        d_in: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::GaussianMixture {
            n_classes: 8,
            n_per_class: 100,
            d_in: 2,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::GaussianMixture {
                n_classes,
                n_per_class,
                d_in,
                separation,
                seed,
            } => generate_gaussian_mixture(
                &mut SeededRng::new(*seed),
                *n_classes,
                *n_per_class,
                *d_in,
                *separation,
            ),
            DataSource::Csv { path } => load_csv(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Neighbours for leave-one-out KNN.
    pub knn_k: usize,
    /// Top-k used for the false-negative rate and diversity entropy.
    pub audit_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { knn_k: 5, audit_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the aggregation logits; the encoder rate when absent.
    pub lambda_learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub aggregation: AggregationMode,
    pub components: ComponentMask,
    pub loss_kind: LossKind,
    pub tau: f64,
    pub weight_mode: WeightNorm,
    pub hcl_beta: f64,
    pub augment: AugmentConfig,
    /// Evaluate every this many epochs (the last epoch is always evaluated); 0 = last only.
    pub eval_every: usize,
    pub encoder_dims: Vec<usize>,
    pub data: DataSource,
    pub eval: EvalSettings,
    /// When set, each batch's negatives are replaced by rows drawn from
    /// classes `0..negative_classes` (requires `sampler = uniform`).
    pub negative_classes: Option<usize>,
    /// Record wall time per epoch. Off by default so metrics files are reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            lambda_learning_rate: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            sampler: SamplerKind::Unremix,
            aggregation: AggregationMode::Learned,
            components: ComponentMask::ALL,
            loss_kind: LossKind::CrossEntropy,
            tau: DEFAULT_TAU,
            weight_mode: WeightNorm::MeanOne,
            hcl_beta: 1.0,
            augment: AugmentConfig::default(),
            eval_every: 10,
            encoder_dims: vec![2, 16, 8, 4],
            data: DataSource::default(),
            eval: EvalSettings::default(),
            negative_classes: None,
            log_wall_time: false,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    /// Checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        let min_batch = if self.sampler == SamplerKind::Unremix { 3 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::config(
                "batch_size",
                format!("must be at least {min_batch} for this sampler, got {}", self.batch_size),
            ));
        }
        positive("learning_rate", self.learning_rate)?;
        if let Some(lr) = self.lambda_learning_rate {
            positive("lambda_learning_rate", lr)?;
        }
        positive("tau", self.tau)?;
        if !(self.hcl_beta >= 0.0) || !self.hcl_beta.is_finite() {
            return Err(Error::config("hcl_beta", "must be finite and >= 0"));
        }
        if self.sampler == SamplerKind::Unremix && self.components.is_empty() {
            return Err(Error::config("components", "at least one component must be enabled"));
        }
        self.augment.validate()?;
        if self.encoder_dims.len() < 2 || self.encoder_dims.contains(&0) {
            return Err(Error::config(
                "encoder_dims",
                format!("need at least [d_in, d] with positive sizes, got {:?}", self.encoder_dims),
            ));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::config("eval.knn_k", "must be at least 1"));
        }
        if self.eval.audit_k == 0 || self.eval.audit_k >= self.batch_size {
            return Err(Error::config(
                "eval.audit_k",
                format!("must lie in [1, batch_size - 1], got {}", self.eval.audit_k),
            ));
        }
        if let Some(k) = self.negative_classes {
            if self.sampler != SamplerKind::Uniform {
                return Err(Error::config("negative_classes", "requires sampler = uniform"));
            }
            if k == 0 {
                return Err(Error::config("negative_classes", "must be at least 1"));
            }
        }
        match &self.data {
            DataSource::GaussianMixture {
                n_classes,
                n_per_class,
                d_in,
                separation,
                ..
            } => {
                if *n_classes < 2 {
                    return Err(Error::config("data.n_classes", "must be at least 2"));
                }
                if *n_per_class == 0 {
                    return Err(Error::config("data.n_per_class", "must be at least 1"));
                }
                if *d_in == 0 {
                    return Err(Error::config("data.d_in", "must be at least 1"));
                }
                positive("data.separation", *separation)?;
            }
            DataSource::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.path", "must not be empty"));
                }
            }
        }
        Ok(())
    }

    /// Full validation against the loaded dataset.
    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        if self.encoder_dims[0] != dataset.dim() {
            return Err(Error::config(
                "encoder_dims",
                format!("input size {} does not match {} data columns", self.encoder_dims[0], dataset.dim()),
            ));
        }
        if dataset.len() < self.batch_size {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds the {} available rows", self.batch_size, dataset.len()),
            ));
        }
        if let Some(k) = self.negative_classes {
            match dataset.class_count() {
                None => return Err(Error::config("negative_classes", "needs a labeled dataset")),
                Some(c) if k > c => {
                    return Err(Error::config(
                        "negative_classes",
                        format!("{k} exceeds the {c} classes in the dataset"),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn lambda_lr(&self) -> f64 {
        self.lambda_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            weight_mode: self.weight_mode,
        }
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().to_string();
            let key = match msg.split('`').nth(1) {
                Some(field) if msg.starts_with("unknown field") || msg.starts_with("missing field") => {
                    if path == "." {
                        field.to_string()
                    } else if path == field || path.ends_with(&format!(".{field}")) {
                        path
                    } else {
                        format!("{path}.{field}")
                    }
                }
                _ => path,
            };
            Error::config(key, msg)
        })
    }

    /// Reads a JSON config, applies `key=value` overrides and makes a CSV
    /// path absolute (relative paths are taken from the config's directory).
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config("(document)", format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        if let DataSource::Csv { path: csv } = &mut cfg.data {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *csv = base.join(&*csv);
            }
            if let Ok(abs) = csv.canonicalize() {
                *csv = abs;
            }
        }
        Ok(cfg)
    }
}

/// Sets a dotted key, e.g. `data.separation=4` or `sampler=uniform`. The value
/// is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    if !doc.is_object() {
        *doc = Value::Object(Default::default());
    }
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..depth].join("."), "is not an object"))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub probe_acc: Option<f64>,
    pub knn_acc: Option<f64>,
    pub fnr_at_k: Option<f64>,
    pub diversity_entropy: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub aggregation: AggregationParams,
    pub lambda_optimizer: OptimizerState,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = init_encoder(&config.encoder_dims, &mut SeededRng::stream(config.seed, STREAM_INIT))?;
        Ok(TrainState {
            optimizer: OptimizerState::for_params(config.optimizer, &params),
            params,
            aggregation: AggregationParams::new(config.aggregation, config.components),
            lambda_optimizer: OptimizerState::new(config.optimizer, &[3]),
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, config: &TrainConfig) -> Self {
        TrainState {
            params: ck.params,
            optimizer: ck.optimizer,
            aggregation: AggregationParams {
                logits: ck.aggregation_logits,
                mode: config.aggregation,
                mask: config.components,
            },
            lambda_optimizer: ck.lambda_optimizer,
            step: ck.step,
        }
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            aggregation_logits: self.aggregation.logits,
            lambda_optimizer: self.lambda_optimizer.clone(),
            seed,
            step: self.step,
        }
    }
}

/// Weights for one batch plus the scores they came from (UnReMix only).
#[derive(Debug, Clone)]
pub struct BatchWeights {
    pub weights: ImportanceWeights,
    pub breakdown: Option<ScoreBreakdown>,
    pub normalized: Option<ComponentScores>,
}

/// Negative weights under the configured sampler. When the view has more rows
/// than the anchors, the extra rows are the only negatives.
pub fn batch_weights(
    anchor: &ForwardTrace,
    view: &ForwardTrace,
    aggregation: &AggregationParams,
    config: &TrainConfig,
) -> Result<BatchWeights> {
    let n = anchor.batch_size();
    let c = view.batch_size();
    if c != n && config.sampler != SamplerKind::Uniform {
        return Err(Error::Usage("extra negatives are only supported with sampler = uniform".into()));
    }
    let weights = match config.sampler {
        SamplerKind::Uniform => {
            let mut mask = ExclusionMask::none(n, c);
            for i in 0..n {
                if c == n {
                    mask.exclude(i, i);
                } else {
                    (0..n).for_each(|j| mask.exclude(i, j));
                }
            }
            ImportanceWeights::uniform_masked(mask)
        }
        SamplerKind::Hcl => {
            let s = similarity_scores(anchor, view)?;
            hcl_weights(
                &s,
                &ExclusionMask::diagonal(n),
                HclConfig { beta: config.hcl_beta },
                config.weight_mode,
            )?
        }
        SamplerKind::Unremix => {
            let breakdown = component_scores(anchor, view, config.loss_kind, config.tau)?;
            let normalized = normalize_components(&breakdown.raw);
            let weights = aggregate_importance(&normalized, aggregation, config.weight_mode)?;
            return Ok(BatchWeights {
                weights,
                breakdown: Some(breakdown),
                normalized: Some(normalized),
            });
        }
    };
    Ok(BatchWeights {
        weights,
        breakdown: None,
        normalized: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub lambda: [f64; 3],
}

/// Forward both views, weight the negatives, take one encoder step and (in
/// learned mode) one step on the aggregation logits. Weights are treated as
/// constants for the encoder update.
pub fn train_step(state: &mut TrainState, batch: &BatchPair, config: &TrainConfig) -> Result<StepMetrics> {
    firewall::training_scope(|| {
        let anchor = forward(&state.params, &batch.anchor_view)?;
        let view = match &batch.extra_negatives {
            Some(extra) => forward(&state.params, &batch.second_view.vstack(extra)?)?,
            None => forward(&state.params, &batch.second_view)?,
        };
        let bw = batch_weights(&anchor, &view, &state.aggregation, config)?;
        let learned = config.sampler == SamplerKind::Unremix
            && state.aggregation.mode == AggregationMode::Learned;
        let chain = if learned {
            bw.normalized.as_ref().map(|n| (n, &state.aggregation))
        } else {
            None
        };
        let out = loss_gradients(
            &anchor.unit_output,
            &view.unit_output,
            &bw.weights,
            chain,
            &config.loss_config(),
        )?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!("loss ({})", out.value)));
        }
        let d_anchor = normalize_rows_backward(&anchor.unit_output, &anchor.norms, &anchor.degenerate, &out.d_anchor)?;
        let d_view = normalize_rows_backward(&view.unit_output, &view.norms, &view.degenerate, &out.d_view)?;
        let mut grads = backward(&state.params, &anchor, &d_anchor)?;
        grads.add_assign(&backward(&state.params, &view, &d_view)?)?;
        if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder gradient".into()));
        }
        apply_update(&mut state.params, &grads, &mut state.optimizer, config.learning_rate)?;
        if learned {
            if !out.d_logits.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("aggregation gradient".into()));
            }
            state.lambda_optimizer.step(
                &mut [&mut state.aggregation.logits[..]],
                &[&out.d_logits[..]],
                config.lambda_lr(),
            )?;
        }
        state.step += 1;
        Ok(StepMetrics {
            loss: out.value,
            lambda: state.aggregation.lambda(),
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub step_losses: Vec<f64>,
}

/// Rows used for the per-epoch negative audit: the first `batch_size` rows of
/// a permutation drawn from the evaluation stream.
pub fn eval_batch_indices(config: &TrainConfig, n: usize) -> Vec<usize> {
    let mut perm = SeededRng::stream(config.seed, STREAM_EVAL).permutation(n);
    perm.truncate(config.batch_size.min(n));
    perm
}

/// Identity-augmented batch over [`eval_batch_indices`].
pub fn eval_batch(config: &TrainConfig, dataset: &Dataset) -> Result<BatchPair> {
    let idx = eval_batch_indices(config, dataset.len());
    augment_pair(&mut SeededRng::new(0), dataset, &idx, &AugmentConfig::IDENTITY)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSnapshot {
    pub probe_acc: f64,
    pub knn_acc: f64,
    pub fnr_at_k: f64,
    pub diversity_entropy: f64,
}

/// Label-based evaluation of the current state. Returns `None` for unlabeled data.
pub fn evaluate(state: &TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<Option<EvalSnapshot>> {
    let Some(labels) = dataset.labels() else {
        return Ok(None);
    };
    let emb = forward(&state.params, dataset.features())?.unit_output;
    let probe = eval::linear_probe(&emb, labels, config.seed)?;
    let knn = eval::knn_accuracy(&emb, labels, config.eval.knn_k.min(dataset.len() - 1))?;
    let batch = eval_batch(config, dataset)?;
    let anchor = forward(&state.params, &batch.anchor_view)?;
    let view = forward(&state.params, &batch.second_view)?;
    let bw = batch_weights(&anchor, &view, &state.aggregation, config)?;
    let batch_labels = batch.labels().unwrap_or_default();
    let k = config.eval.audit_k.min(batch.len() - 1);
    Ok(Some(EvalSnapshot {
        probe_acc: probe.accuracy,
        knn_acc: knn,
        fnr_at_k: eval::false_negative_rate_at_k(&bw.weights, batch_labels, k)?,
        diversity_entropy: eval::diversity_entropy_at_k(&bw.weights, batch_labels, k)?,
    }))
}

/// Runs the full schedule, handing each epoch's record to `sink` as soon as it exists.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate_for(dataset)?;
    let pool = match config.negative_classes {
        Some(k) => Some(restricted_class_pool(dataset, k)?),
        None => None,
    };
    let mut state = TrainState::new(config)?;
    let mut shuffle = SeededRng::stream(config.seed, STREAM_SHUFFLE);
    let mut augment = SeededRng::stream(config.seed, STREAM_AUGMENT);
    let mut negatives = SeededRng::stream(config.seed, STREAM_NEGATIVES);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in epoch_batches(&mut shuffle, dataset.len(), config.batch_size) {
            let mut batch = augment_pair(&mut augment, dataset, &idx, &config.augment)?;
            if let Some(pool) = &pool {
                let drawn = sample_from_pool(&mut negatives, pool, idx.len());
                batch.extra_negatives = Some(augment_rows(&mut augment, dataset, &drawn, &config.augment));
            }
            let m = train_step(&mut state, &batch, config).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence {
                    step: state.step + 1,
                    epoch,
                    detail,
                },
                other => other,
            })?;
            total += m.loss;
            count += 1;
            step_losses.push(m.loss);
        }
        let due = epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
        let snapshot = if due { evaluate(&state, dataset, config)? } else { None };
        let lambda = state.aggregation.lambda();
        let record = MetricsRecord {
            step: state.step,
            epoch,
            loss: total / count.max(1) as f64,
            lambda_u: lambda[0],
            lambda_s: lambda[1],
            lambda_r: lambda[2],
            probe_acc: snapshot.map(|s| s.probe_acc),
            knn_acc: snapshot.map(|s| s.knn_acc),
            fnr_at_k: snapshot.map(|s| s.fnr_at_k),
            diversity_entropy: snapshot.map(|s| s.diversity_entropy),
            wall_ms: config
                .log_wall_time
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        sink(&record)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        state,
        records,
        step_losses,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Creates `out` (if needed) and refuses to clobber any of `files` unless `force`.
pub fn prepare_out_dir(out: &Path, files: &[&str], force: bool) -> Result<()> {
    if !force {
        if let Some(f) = files.iter().find(|f| out.join(f).exists()) {
            return Err(Error::Usage(format!(
                "{} already exists (use --force to overwrite)",
                out.join(f).display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Trains and writes `metrics.jsonl`, `checkpoint.json` and `resolved-config.json` into `out`.
pub fn run_to_dir(config: &TrainConfig, out: &Path, force: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.data.load()?;
    config.validate_for(&dataset)?;
    prepare_out_dir(out, &[METRICS_FILE, CHECKPOINT_FILE, RESOLVED_CONFIG_FILE], force)?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&resolved, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let outcome = train(config, &dataset, &mut |r| {
        serde_json::to_writer(&mut writer, r)?;
        writer
            .write_all(b"\n")
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(&metrics_path, e))
    })?;
    outcome.state.checkpoint(config.seed).save(&out.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}
