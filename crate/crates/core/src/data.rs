//! Datasets, CSV ingestion and the synthetic noisy-regression benchmark.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub t: f64,
    pub id: u64,
    /// Ground truth for synthetic data only; the trainer never reads it.
    pub is_outlier: Option<bool>,
}

/// Per-feature and target standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // constant columns keep unit scale
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl Normalization {
    pub fn from_samples(samples: &[Sample], feature_dim: usize) -> Self {
        let (feature_mean, feature_std) = (0..feature_dim)
            .map(|j| mean_std(samples.iter().map(move |s| s.x[j])))
            .unzip();
        let (target_mean, target_std) = mean_std(samples.iter().map(|s| s.t));
        Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    pub fn normalize_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_target(&self, t: f64) -> f64 {
        (t - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_dim: usize,
    stats: Normalization,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptyDataset("dataset has no samples".into()))?;
        let feature_dim = first.x.len();
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.x.len() != feature_dim {
                return Err(Error::shape("sample features", feature_dim, s.x.len()));
            }
            if !s.t.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!(
                    "sample {} has non-finite values",
                    s.id
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate sample id {}",
                    s.id
                )));
            }
        }
        let stats = Normalization::from_samples(&samples, feature_dim);
        Ok(Self {
            samples,
            feature_dim,
            stats,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Statistics computed from this dataset alone.
    pub fn stats(&self) -> &Normalization {
        &self.stats
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Reads a dataset with columns `f0..f{d-1}`, the target column, and optional
/// `id` and `is_outlier` columns, in any order.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, target_column)
}

pub fn parse_csv(text: &str, target_column: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Err(Error::EmptyDataset("file is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::BadHeader(e.to_string()))?
        .clone();

    let mut target_col = None;
    let mut id_col = None;
    let mut outlier_col = None;
    let mut feature_cols: Vec<(usize, usize)> = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        if name == target_column {
            target_col = Some(col);
        } else if name == "id" {
            id_col = Some(col);
        } else if name == "is_outlier" {
            outlier_col = Some(col);
        } else if let Some(j) = name.strip_prefix('f').and_then(|r| r.parse::<usize>().ok()) {
            feature_cols.push((j, col));
        } else {
            return Err(Error::BadHeader(format!("unexpected column {name:?}")));
        }
    }
    let target_col = target_col
        .ok_or_else(|| Error::BadHeader(format!("target column {target_column:?} not found")))?;
    feature_cols.sort_unstable();
    if feature_cols.is_empty() {
        return Err(Error::BadHeader("no feature columns f0..".into()));
    }
    if feature_cols.iter().enumerate().any(|(k, &(j, _))| k != j) {
        return Err(Error::BadHeader(
            "feature columns must be f0..f{d-1} without gaps or duplicates".into(),
        ));
    }

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ParseError {
            row: row + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(row + 2, |p| p.line() as usize);
        let cell = |col: usize| record.get(col).unwrap_or("");
        let number = |col: usize| -> Result<f64> {
            let raw = cell(col);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ParseError {
                    row: line,
                    column: headers[col].to_string(),
                    message: format!("{raw:?} is not a finite number"),
                })
        };
        let x = feature_cols
            .iter()
            .map(|&(_, col)| number(col))
            .collect::<Result<Vec<_>>>()?;
        let t = number(target_col)?;
        let id = match id_col {
            Some(col) => cell(col).parse::<u64>().map_err(|_| Error::ParseError {
                row: line,
                column: "id".into(),
                message: format!("{:?} is not a non-negative integer", cell(col)),
            })?,
            None => row as u64,
        };
        let is_outlier = match outlier_col {
            Some(col) => Some(match cell(col) {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::ParseError {
                        row: line,
                        column: "is_outlier".into(),
                        message: format!("{other:?} is not a boolean"),
                    })
                }
            }),
            None => None,
        };
        samples.push(Sample {
            x,
            t,
            id,
            is_outlier,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("header present but no rows".into()));
    }
    Dataset::new(samples)
}

/// Canonical CSV encoding: `f0..f{d-1}`, target, `id`, and `is_outlier` when
/// any sample carries it. Values use the shortest round-trip decimal form.
pub fn to_csv(dataset: &Dataset, target_column: &str) -> Result<Vec<u8>> {
    let with_outlier = dataset.samples.iter().any(|s| s.is_outlier.is_some());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dataset.feature_dim).map(|j| format!("f{j}")).collect();
    header.push(target_column.to_string());
    header.push("id".into());
    if with_outlier {
        header.push("is_outlier".into());
    }
    let csv_err = |e: csv::Error| Error::Malformed {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        row.push(s.t.to_string());
        row.push(s.id.to_string());
        if with_outlier {
            row.push(if s.is_outlier == Some(true) { "1" } else { "0" }.into());
        }
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.into_inner().map_err(|e| Error::Malformed {
        path: "<csv>".into(),
        message: e.to_string(),
    })
}

pub fn write_csv(path: &Path, dataset: &Dataset, target_column: &str) -> Result<()> {
    write_atomic(path, &to_csv(dataset, target_column)?)
}

/// Smooth target functions for the synthetic benchmark. Terms that refer to
/// coordinates beyond the feature dimension are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetFunction {
    /// `40 + 15 sin(pi x0) + 10 x1`
    #[default]
    SineLinear,
    /// `20 + 40 clamp(x0 + 0.5 x1 + 0.5, 0, 1) + 5 cos(pi x2)`
    Ramp,
}

impl TargetFunction {
    pub fn eval(self, x: &[f64]) -> f64 {
        let at = |j: usize| x.get(j).copied();
        match self {
            TargetFunction::SineLinear => {
                40.0 + 15.0 * (PI * x[0]).sin() + at(1).map_or(0.0, |v| 10.0 * v)
            }
            TargetFunction::Ramp => {
                let u = x[0] + at(1).map_or(0.0, |v| 0.5 * v) + 0.5;
                20.0 + 40.0 * u.clamp(0.0, 1.0) + at(2).map_or(0.0, |v| 5.0 * (PI * v).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Training-split size.
    pub n_samples: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub function: TargetFunction,
    pub noise_std: f64,
    pub outlier_fraction: f64,
    pub outlier_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_test: 500,
            feature_dim: 8,
            function: TargetFunction::SineLinear,
            noise_std: 2.0,
            outlier_fraction: 0.15,
            outlier_shift: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_test == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_samples, n_test and feature_dim must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(Error::InvalidConfig(format!(
                "outlier_fraction {} outside [0, 0.5)",
                self.outlier_fraction
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.outlier_shift.is_finite()
        {
            return Err(Error::InvalidConfig(
                "noise_std must be finite and non-negative; outlier_shift finite".into(),
            ));
        }
        Ok(())
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.n_samples as f64).round() as usize
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Train and test splits for the robustness benchmark. Only the training split
/// is contaminated with outliers.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng, id: u64, flag: bool| {
        let x: Vec<f64> = (0..spec.feature_dim)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let noise = if spec.noise_std > 0.0 {
            spec.noise_std * standard_normal(rng)
        } else {
            0.0
        };
        let t = spec.function.eval(&x) + noise;
        Sample {
            x,
            t,
            id,
            is_outlier: flag.then_some(false),
        }
    };

    let mut train: Vec<Sample> = (0..spec.n_samples as u64)
        .map(|id| draw(&mut rng, id, true))
        .collect();
    for i in index::sample(&mut rng, spec.n_samples, spec.outlier_count()).into_vec() {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        train[i].t += sign * spec.outlier_shift;
        train[i].is_outlier = Some(true);
    }
    let test: Vec<Sample> = (0..spec.n_test as u64)
        .map(|k| draw(&mut rng, spec.n_samples as u64 + k, true))
        .collect();
    Ok((Dataset::new(train)?, Dataset::new(test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_row_stats() {
        let ds = parse_csv("f0,t\n1,10\n3,20\n", "t").unwrap();
        assert_eq!(ds.stats().feature_mean, vec![2.0]);
        assert_eq!(ds.stats().target_mean, 15.0);
        assert_eq!(ds.samples()[1].id, 1);
    }

    #[test]
    fn blank_trailing_line_ignored() {
        let ds = parse_csv("f0,f1,age,id\n1,2,30,7\n4,5,40,9\n\n", "age").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.samples()[1].id, 9);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv("", "t"), Err(Error::EmptyDataset(_))));
        assert!(matches!(
            parse_csv("f0,t\n", "t"),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            parse_csv("f0,y\n1,2\n", "t"),
            Err(Error::BadHeader(_))
        ));
        assert!(matches!(
            parse_csv("f0,f2,t\n1,2,3\n", "t"),
            Err(Error::BadHeader(_))
        ));
        assert!(matches!(
            parse_csv("f0,bogus,t\n1,2,3\n", "t"),
            Err(Error::BadHeader(_))
        ));
        match parse_csv("f0,t\n1,2\n1,abc\n", "t") {
            Err(Error::ParseError { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "t");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv("f0,t,id\n1,2,0\n1,3,0\n", "t").is_err());
    }

    #[test]
    fn csv_round_trip_of_generated_data() {
        let spec = SyntheticSpec {
            n_samples: 50,
            n_test: 10,
            feature_dim: 3,
            ..Default::default()
        };
        let (train, test) = synth_generate(&spec).unwrap();
        for ds in [train, test] {
            let bytes = to_csv(&ds, "t").unwrap();
            let back = parse_csv(std::str::from_utf8(&bytes).unwrap(), "t").unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn synth_clean_targets_are_exact() {
        let spec = SyntheticSpec {
            n_samples: 100,
            n_test: 20,
            feature_dim: 3,
            noise_std: 0.0,
            outlier_fraction: 0.0,
            function: TargetFunction::Ramp,
            ..Default::default()
        };
        let (train, test) = synth_generate(&spec).unwrap();
        for s in train.samples().iter().chain(test.samples()) {
            assert_eq!(s.t, TargetFunction::Ramp.eval(&s.x));
            assert!(s.x.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synth_outlier_count_and_clean_test() {
        let spec = SyntheticSpec {
            n_samples: 1000,
            n_test: 200,
            ..Default::default()
        };
        let (train, test) = synth_generate(&spec).unwrap();
        let outliers = train
            .samples()
            .iter()
            .filter(|s| s.is_outlier == Some(true))
            .count();
        assert_eq!(outliers, 150);
        assert!(test.samples().iter().all(|s| s.is_outlier == Some(false)));
        let train_ids: HashSet<u64> = train.samples().iter().map(|s| s.id).collect();
        assert!(test.samples().iter().all(|s| !train_ids.contains(&s.id)));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            synth_generate(&spec).unwrap(),
            synth_generate(&spec).unwrap()
        );
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(
            synth_generate(&other).unwrap().0,
            synth_generate(&SyntheticSpec::default()).unwrap().0
        );
    }

    #[test]
    fn synth_rejects_bad_spec() {
        let spec = SyntheticSpec {
            outlier_fraction: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(Error::InvalidConfig(_))
        ));
    }

    proptest! {
        #[test]
        fn target_normalization_round_trip(
            targets in prop::collection::vec(-1e3f64..1e3, 2..30),
            probe in -1e4f64..1e4,
        ) {
            let samples = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| Sample { x: vec![0.0], t, id: i as u64, is_outlier: None })
                .collect();
            let ds = Dataset::new(samples).unwrap();
            let back = ds.stats().denormalize_target(ds.stats().normalize_target(probe));
            prop_assert!((back - probe).abs() <= 1e-12 * probe.abs().max(1.0));
        }
    }

    #[test]
    fn constant_column_keeps_unit_scale() {
        let ds = parse_csv("f0,t\n2,5\n2,5\n", "t").unwrap();
        assert_eq!(ds.stats().feature_std, vec![1.0]);
        assert_abs_diff_eq!(ds.stats().normalize_target(5.0), 0.0);
    }
}
