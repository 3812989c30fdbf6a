//! Self-paced training loop.
//!
//! Training starts by fitting the forest on every sample. Each pace then ranks
//! the training set by current likelihood, freezes `(lambda, epsilon)` so that
//! the pace admits its scheduled fraction, and continues optimizing from the
//! previous pace's parameters. Within a pace, mini-batches are drawn from the
//! whole training set; each member's selection is re-evaluated against the
//! frozen thresholds and unselected members are masked out of the gradient.
//! Leaf Gaussians are refit by EM on the full selected set at a fixed period.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    self, Activation, BackboneConfig, BackboneGrads, BackboneParams, LearningRateSchedule,
};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::forest::{self, ForestModel, ForestShape, DENSITY_FLOOR};
use crate::metrics::{Metrics, CS_LEVELS};
use crate::persist::write_atomic;
use crate::selfpaced::{self, PaceSchedule, SelectionState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Rows per backbone forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tree_count: usize,
    pub tree_depth: usize,
    pub hidden_dims: Vec<usize>,
    /// Backbone output width, i.e. the number of features available to splits.
    pub feature_dim: usize,
    pub activation: Activation,
    pub batch_size: usize,
    /// Optimizer steps spent fitting on all samples before the first pace.
    pub pretrain_steps: usize,
    pub steps_per_pace: usize,
    pub leaf_update_period: usize,
    pub leaf_em_iterations: usize,
    /// Restarts at the beginning of pretraining and of every pace.
    pub learning_rate: LearningRateSchedule,
    pub schedule: PaceSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tree_count: 5,
            tree_depth: 6,
            hidden_dims: vec![64],
            feature_dim: 128,
            activation: Activation::Tanh,
            batch_size: 32,
            pretrain_steps: 500,
            steps_per_pace: 500,
            leaf_update_period: 50,
            leaf_em_iterations: 2,
            learning_rate: LearningRateSchedule::default(),
            schedule: PaceSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tree_count", self.tree_count),
            ("tree_depth", self.tree_depth),
            ("feature_dim", self.feature_dim),
            ("batch_size", self.batch_size),
            ("leaf_update_period", self.leaf_update_period),
            ("leaf_em_iterations", self.leaf_em_iterations),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden layer widths must be positive".into(),
            ));
        }
        let lr = &self.learning_rate;
        if !(lr.initial >= 0.0
            && lr.initial.is_finite()
            && lr.factor > 0.0
            && lr.factor.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "bad learning-rate schedule {lr:?}"
            )));
        }
        self.schedule.validate()
    }
}

/// Everything needed to resume training or to evaluate the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub normalization: Normalization,
    pub backbone: BackboneParams,
    pub forest: ForestModel,
    pub selection: SelectionState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Canonical JSON encoding; fields appear in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let malformed = |message: String| Error::Malformed {
            path: "<checkpoint>".into(),
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| malformed("missing format_version".into()))?;
        if found != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(Error::FormatVersion {
                found: found as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Malformed { message, .. } => Error::Malformed {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn digest(&self) -> String {
        model_digest(&self.backbone, &self.forest)
    }
}

/// SHA-256 over the canonical encoding of the learnable parameters.
pub fn model_digest(backbone: &BackboneParams, forest: &ForestModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(backbone).expect("backbone serializes"));
    hasher.update(serde_json::to_vec(forest).expect("forest serializes"));
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaceRecord {
    pub pace_index: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub selected_count: usize,
    pub excluded_count: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    pub test_cs: [f64; CS_LEVELS],
    pub seconds: f64,
    /// Parameter digests at the start and end of the pace; not part of the CSV.
    pub start_digest: String,
    pub end_digest: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PaceReport {
    pub records: Vec<PaceRecord>,
}

pub const PACE_REPORT_HEADER: [&str; 17] = [
    "pace_index",
    "lambda",
    "epsilon",
    "selected_count",
    "excluded_count",
    "train_mae",
    "test_mae",
    "cs_1",
    "cs_2",
    "cs_3",
    "cs_4",
    "cs_5",
    "cs_6",
    "cs_7",
    "cs_8",
    "cs_9",
    "cs_10",
];

impl PaceReport {
    /// One row per pace; the last column is `seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = PACE_REPORT_HEADER.join(",");
        out.push_str(",seconds\n");
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.pace_index,
                r.lambda,
                r.epsilon,
                r.selected_count,
                r.excluded_count,
                r.train_mae,
                r.test_mae
            )
            .unwrap();
            for c in r.test_cs {
                write!(out, ",{c}").unwrap();
            }
            writeln!(out, ",{}", r.seconds).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::BadHeader(e.to_string()))?
            .clone();
        let expected: Vec<&str> = PACE_REPORT_HEADER
            .iter()
            .copied()
            .chain(["seconds"])
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::BadHeader(format!(
                "pace report header must be {}",
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::ParseError {
                row: row + 2,
                column: String::new(),
                message: e.to_string(),
            })?;
            let num = |col: usize| -> Result<f64> {
                rec[col].parse::<f64>().map_err(|_| Error::ParseError {
                    row: row + 2,
                    column: expected[col].to_string(),
                    message: format!("{:?} is not a number", &rec[col]),
                })
            };
            let count = |col: usize| -> Result<usize> {
                rec[col].parse::<usize>().map_err(|_| Error::ParseError {
                    row: row + 2,
                    column: expected[col].to_string(),
                    message: format!("{:?} is not a count", &rec[col]),
                })
            };
            let mut test_cs = [0.0; CS_LEVELS];
            for (l, slot) in test_cs.iter_mut().enumerate() {
                *slot = num(7 + l)?;
            }
            records.push(PaceRecord {
                pace_index: count(0)?,
                lambda: num(1)?,
                epsilon: num(2)?,
                selected_count: count(3)?,
                excluded_count: count(4)?,
                train_mae: num(5)?,
                test_mae: num(6)?,
                test_cs,
                seconds: num(17)?,
                start_digest: String::new(),
                end_digest: String::new(),
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// How mini-batch members are admitted to the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission {
    /// Every sample participates; used for plain forest training.
    All,
    Thresholds {
        lambda: f64,
        epsilon: f64,
    },
}

/// Mutable training state: one optimization thread owns it.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    normalization: Normalization,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    backbone: BackboneParams,
    forest: ForestModel,
    selection: SelectionState,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(train: &Dataset, config: &TrainConfig) -> Result<Self> {
        Self::with_normalization(train, train.stats().clone(), config)
    }

    /// Like [`Trainer::new`] but with externally supplied normalization statistics.
    pub fn with_normalization(
        train: &Dataset,
        normalization: Normalization,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("training split is empty".into()));
        }
        if normalization.feature_mean.len() != train.feature_dim() {
            return Err(Error::shape(
                "normalization statistics",
                train.feature_dim(),
                normalization.feature_mean.len(),
            ));
        }
        let features: Vec<Vec<f64>> = train
            .samples()
            .iter()
            .map(|s| normalization.normalize_features(&s.x))
            .collect();
        let targets: Vec<f64> = train
            .samples()
            .iter()
            .map(|s| normalization.normalize_target(s.t))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone_config = BackboneConfig {
            input_dim: train.feature_dim(),
            hidden_dims: config.hidden_dims.clone(),
            output_dim: config.feature_dim,
            activation: config.activation,
            seed: rng.gen(),
        };
        let backbone = backbone::init(&backbone_config)?;
        let forest = ForestModel::init(
            ForestShape {
                tree_count: config.tree_count,
                depth: config.tree_depth,
                feature_dim: config.feature_dim,
            },
            &targets,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            normalization,
            selection: SelectionState::all(targets.len()),
            features,
            targets,
            backbone,
            forest,
            rng,
            step: 0,
        })
    }

    /// Swaps in the targets of `dataset` (same samples, same order), normalized
    /// with this trainer's statistics.
    pub fn replace_targets(&mut self, dataset: &Dataset) -> Result<()> {
        if dataset.len() != self.targets.len() {
            return Err(Error::shape(
                "replacement targets",
                self.targets.len(),
                dataset.len(),
            ));
        }
        self.targets = dataset
            .samples()
            .iter()
            .map(|s| self.normalization.normalize_target(s.t))
            .collect();
        Ok(())
    }

    pub fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn forest(&self) -> &ForestModel {
        &self.forest
    }

    pub fn selection(&self) -> &SelectionState {
        &self.selection
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn digest(&self) -> String {
        model_digest(&self.backbone, &self.forest)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            normalization: self.normalization.clone(),
            backbone: self.backbone.clone(),
            forest: self.forest.clone(),
            selection: self.selection.clone(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    fn backbone_features(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(EVAL_CHUNK) {
            out.extend(backbone::forward(chunk, &self.backbone)?.0);
        }
        Ok(out)
    }

    /// Exact log-densities of every training sample, in normalized target units.
    pub fn log_densities(&self) -> Result<Vec<f64>> {
        let feats = self.backbone_features(&self.features)?;
        feats
            .iter()
            .zip(&self.targets)
            .map(|(f, &t)| Ok(self.forest.route(f)?.log_density(t, &self.forest)))
            .collect()
    }

    /// Unfloored likelihoods and floored log-likelihoods of every training sample.
    pub fn likelihoods(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let logs = self.log_densities()?;
        Ok(split_likelihoods(&logs))
    }

    fn admitted(&self, admission: Admission) -> Result<Vec<bool>> {
        match admission {
            Admission::All => Ok(vec![true; self.targets.len()]),
            Admission::Thresholds { lambda, epsilon } => {
                let (p, logs) = self.likelihoods()?;
                selfpaced::select(&logs, &p, lambda, epsilon)
            }
        }
    }

    /// Refits the leaf Gaussians on the samples admitted under `admission`.
    pub fn update_leaves(&mut self, admission: Admission) -> Result<forest::LeafUpdate> {
        let v = self.admitted(admission)?;
        if !v.iter().any(|&s| s) {
            return Err(Error::EmptySelection(format!(
                "no sample admitted for the leaf update at step {}",
                self.step
            )));
        }
        let feats = self.backbone_features(&self.features)?;
        let update = forest::update_leaves(
            &self.targets,
            &v,
            &feats,
            &self.forest,
            self.config.leaf_em_iterations,
        )?;
        self.forest = update.model.clone();
        self.selection.v = v;
        Ok(update)
    }

    /// One mini-batch gradient-ascent step on the backbone. Returns the number
    /// of batch members that contributed.
    pub fn step(&mut self, admission: Admission, learning_rate: f64) -> Result<usize> {
        let n = self.targets.len();
        let batch: Vec<usize> =
            index::sample(&mut self.rng, n, self.config.batch_size.min(n)).into_vec();
        let rows: Vec<Vec<f64>> = batch.iter().map(|&i| self.features[i].clone()).collect();
        let (feats, cache) = backbone::forward(&rows, &self.backbone)?;

        let mut grad_rows = Vec::with_capacity(batch.len());
        let mut used = 0;
        for (&i, f) in batch.iter().zip(&feats) {
            let routing = self.forest.route(f)?;
            let (log_p, grad) = routing.log_density_and_grad(self.targets[i], &self.forest);
            let keep = match admission {
                Admission::All => true,
                Admission::Thresholds { lambda, epsilon } => {
                    let (p, ll) = (log_p.exp(), log_p.max(DENSITY_FLOOR.ln()));
                    selfpaced::select(&[ll], &[p], lambda, epsilon)?[0]
                }
            };
            self.selection.v[i] = keep;
            if keep {
                used += 1;
                grad_rows.push(grad);
            } else {
                grad_rows.push(vec![0.0; grad.len()]);
            }
        }
        self.step += 1;
        if used == 0 {
            return Ok(0);
        }
        let mut grads: BackboneGrads = backbone::backward(&grad_rows, &cache, &self.backbone)?;
        // unselected members count as zero terms of the batch average
        grads.scale(1.0 / batch.len() as f64);
        backbone::sgd_step(&mut self.backbone, &grads, learning_rate)?;
        Ok(used)
    }

    /// `steps` optimizer steps with a leaf refit before the first step and
    /// after every `leaf_update_period` steps. The learning-rate schedule
    /// restarts at the beginning of each phase.
    pub fn optimize(&mut self, steps: usize, admission: Admission) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        self.update_leaves(admission)?;
        for k in 0..steps {
            let lr = self.config.learning_rate.rate(k);
            self.step(admission, lr)?;
            if (k + 1) % self.config.leaf_update_period == 0 {
                self.update_leaves(admission)?;
            }
        }
        Ok(())
    }

    /// Plain forest training on every sample.
    pub fn pretrain(&mut self) -> Result<()> {
        self.selection = SelectionState::all(self.targets.len());
        self.optimize(self.config.pretrain_steps, Admission::All)
    }

    /// Ranks the training set and freezes the thresholds for a pace admitting
    /// `fraction` of the data.
    pub fn begin_pace(&mut self, pace_index: usize, fraction: f64) -> Result<PaceStart> {
        let (p, logs) = self.likelihoods()?;
        let (lambda, epsilon) =
            selfpaced::schedule_thresholds(&p, fraction, self.config.schedule.exclude_fraction)?;
        let v = selfpaced::select(&logs, &p, lambda, epsilon)?;
        let selected_count = v.iter().filter(|&&s| s).count();
        let excluded_count = p.iter().filter(|&&p| p <= epsilon).count();
        if selected_count == 0 {
            return Err(Error::EmptySelection(format!(
                "pace {pace_index} (fraction {fraction}) admits no samples"
            )));
        }
        self.selection = SelectionState {
            v,
            lambda,
            epsilon,
            pace_index,
        };
        Ok(PaceStart {
            lambda,
            epsilon,
            selected_count,
            excluded_count,
        })
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        predict_with(&self.normalization, &self.backbone, &self.forest, dataset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaceStart {
    pub lambda: f64,
    pub epsilon: f64,
    pub selected_count: usize,
    pub excluded_count: usize,
}

fn split_likelihoods(logs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let floor = DENSITY_FLOOR.ln();
    logs.iter().map(|&l| (l.exp(), l.max(floor))).unzip()
}

fn predict_with(
    normalization: &Normalization,
    backbone: &BackboneParams,
    forest: &ForestModel,
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    if dataset.feature_dim() != backbone.input_dim() {
        return Err(Error::shape(
            "dataset features",
            backbone.input_dim(),
            dataset.feature_dim(),
        ));
    }
    let rows: Vec<Vec<f64>> = dataset
        .samples()
        .iter()
        .map(|s| normalization.normalize_features(&s.x))
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        for f in backbone::forward(chunk, backbone)?.0 {
            out.push(normalization.denormalize_target(forest::predict_mean(&f, forest)?));
        }
    }
    Ok(out)
}

/// Fits the initial model on all samples.
pub fn pretrain(train: &Dataset, config: &TrainConfig) -> Result<(BackboneParams, ForestModel)> {
    let mut trainer = Trainer::new(train, config)?;
    trainer.pretrain()?;
    Ok((trainer.backbone, trainer.forest))
}

/// Plain forest training: pretraining followed by one more phase of
/// `steps_per_pace` steps, all samples always admitted.
pub fn fit_drf(train: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(train, config)?;
    trainer.pretrain()?;
    trainer.optimize(config.steps_per_pace, Admission::All)?;
    Ok(trainer.checkpoint())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: PaceReport,
}

/// Pretraining followed by one optimization phase per scheduled pace.
pub fn train(train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(train, config)?;
    trainer.pretrain()?;
    let truths_train = train.targets();
    let truths_test = test.targets();
    let mut report = PaceReport::default();

    for (pace_index, &fraction) in config.schedule.fractions.iter().enumerate() {
        let clock = Instant::now();
        let start_digest = trainer.digest();
        let start = trainer.begin_pace(pace_index, fraction)?;
        trainer.optimize(
            config.steps_per_pace,
            Admission::Thresholds {
                lambda: start.lambda,
                epsilon: start.epsilon,
            },
        )?;
        let train_metrics = Metrics::compute(&trainer.predict(train)?, &truths_train)?;
        let test_metrics = Metrics::compute(&trainer.predict(test)?, &truths_test)?;
        report.records.push(PaceRecord {
            pace_index,
            lambda: start.lambda,
            epsilon: start.epsilon,
            selected_count: start.selected_count,
            excluded_count: start.excluded_count,
            train_mae: train_metrics.mae,
            test_mae: test_metrics.mae,
            test_cs: test_metrics.cs,
            seconds: clock.elapsed().as_secs_f64(),
            start_digest,
            end_digest: trainer.digest(),
        });
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        report,
    })
}

pub fn predict(dataset: &Dataset, checkpoint: &Checkpoint) -> Result<Vec<f64>> {
    predict_with(
        &checkpoint.normalization,
        &checkpoint.backbone,
        &checkpoint.forest,
        dataset,
    )
}

/// MAE and CS(1..=10) of the checkpoint's predictions, in original target units.
pub fn evaluate(dataset: &Dataset, checkpoint: &Checkpoint) -> Result<Metrics> {
    Metrics::compute(&predict(dataset, checkpoint)?, &dataset.targets())
}

/// Training variants compared by the robustness benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Configured pace schedule with its likelihood cap.
    SpdrfCapped,
    /// Configured pace fractions, no cap.
    Spdrf,
    /// A single pace over all samples with no cap.
    DrfBaseline,
}

impl Mode {
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut out = config.clone();
        match self {
            Mode::SpdrfCapped => {}
            Mode::Spdrf => out.schedule.exclude_fraction = 0.0,
            Mode::DrfBaseline => out.schedule = PaceSchedule::baseline(),
        }
        out
    }
}
