//! Mean absolute error and cumulative score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error ranges reported by [`Metrics`]: `L = 1..=10`.
pub const CS_LEVELS: usize = 10;

fn check(predictions: &[f64], truths: &[f64]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(
            "prediction/truth vectors",
            truths.len(),
            predictions.len(),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    Ok(())
}

pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check(predictions, truths)?;
    let total: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Percentage of predictions with `|prediction - truth| <= l`.
pub fn cs(predictions: &[f64], truths: &[f64], l: f64) -> Result<f64> {
    check(predictions, truths)?;
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| (*p - *t).abs() <= l)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    /// `cs[i]` is CS(L = i + 1), in percent.
    pub cs: [f64; CS_LEVELS],
}

impl Metrics {
    pub fn compute(predictions: &[f64], truths: &[f64]) -> Result<Self> {
        let mae = mae(predictions, truths)?;
        let mut levels = [0.0; CS_LEVELS];
        for (i, slot) in levels.iter_mut().enumerate() {
            *slot = cs(predictions, truths, (i + 1) as f64)?;
        }
        Ok(Self { mae, cs: levels })
    }

    pub fn cs_at(&self, l: usize) -> f64 {
        self.cs[l - 1]
    }

    pub fn to_json(&self) -> String {
        let doc = MetricsDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let doc: MetricsDoc = serde_json::from_str(text)?;
        Ok(doc.into())
    }
}

/// On-disk layout: `mae` followed by `cs_1` .. `cs_10`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsDoc {
    mae: f64,
    cs_1: f64,
    cs_2: f64,
    cs_3: f64,
    cs_4: f64,
    cs_5: f64,
    cs_6: f64,
    cs_7: f64,
    cs_8: f64,
    cs_9: f64,
    cs_10: f64,
}

impl From<&Metrics> for MetricsDoc {
    fn from(m: &Metrics) -> Self {
        let c = m.cs;
        Self {
            mae: m.mae,
            cs_1: c[0],
            cs_2: c[1],
            cs_3: c[2],
            cs_4: c[3],
            cs_5: c[4],
            cs_6: c[5],
            cs_7: c[6],
            cs_8: c[7],
            cs_9: c[8],
            cs_10: c[9],
        }
    }
}

impl From<MetricsDoc> for Metrics {
    fn from(d: MetricsDoc) -> Self {
        Self {
            mae: d.mae,
            cs: [
                d.cs_1, d.cs_2, d.cs_3, d.cs_4, d.cs_5, d.cs_6, d.cs_7, d.cs_8, d.cs_9, d.cs_10,
            ],
        }
    }
}
