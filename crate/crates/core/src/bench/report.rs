use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{precision, success};
use super::vot::{expected_average_overlap, VotResult};
use crate::error::{Error, Result};
use crate::siamese::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One pass, no re-initialization.
    Ope,
    /// Re-initialize after each failure.
    Reset,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ope" => Ok(Protocol::Ope),
            "reset" => Ok(Protocol::Reset),
            other => Err(Error::Config(format!("unknown protocol {other:?} (ope, reset)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub frames: usize,
    pub precision: f64,
    pub success_rate: f64,
    pub success_auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failures: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eao: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceReport {
    pub name: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub precision_threshold: f64,
    pub success_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
    pub aggregate: Metrics,
    pub sequences: Vec<SequenceReport>,
}

/// Per-sequence input to [`EvalReport::build`].
pub struct SequenceEval<'a> {
    pub name: &'a str,
    pub results: &'a [BoundingBox],
    pub gt: &'a [BoundingBox],
    pub vot: Option<&'a VotResult>,
}

impl EvalReport {
    /// Aggregates are means over sequences, except EAO, which pools every
    /// sequence's segments.
    pub fn build(protocol: Protocol, precision_threshold: f64, success_threshold: f64, skip: Option<usize>, seqs: &[SequenceEval<'_>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Eval("no sequences to report".into()));
        }
        let mut sequences = Vec::with_capacity(seqs.len());
        for s in seqs {
            let p = precision(s.results, s.gt, precision_threshold)?;
            let (rate, auc) = success(s.results, s.gt, success_threshold)?;
            let mut m = Metrics {
                frames: s.gt.len(),
                precision: p,
                success_rate: rate,
                success_auc: auc,
                accuracy: None,
                robustness: None,
                failures: None,
                eao: None,
            };
            if let Some(v) = s.vot {
                m.accuracy = Some(v.accuracy);
                m.robustness = Some(v.robustness);
                m.failures = Some(v.failures.len());
                m.eao = Some(expected_average_overlap(&v.segments, &[v.frames]));
            }
            sequences.push(SequenceReport {
                name: s.name.to_string(),
                metrics: m,
            });
        }
        let k = sequences.len() as f64;
        let mean = |f: &dyn Fn(&Metrics) -> f64| sequences.iter().map(|s| f(&s.metrics)).sum::<f64>() / k;
        let vots: Vec<&VotResult> = seqs.iter().filter_map(|s| s.vot).collect();
        let has_vot = vots.len() == seqs.len();
        let aggregate = Metrics {
            frames: sequences.iter().map(|s| s.metrics.frames).sum(),
            precision: mean(&|m| m.precision),
            success_rate: mean(&|m| m.success_rate),
            success_auc: mean(&|m| m.success_auc),
            accuracy: has_vot.then(|| mean(&|m| m.accuracy.unwrap_or(0.0))),
            robustness: has_vot.then(|| mean(&|m| m.robustness.unwrap_or(0.0))),
            failures: has_vot.then(|| vots.iter().map(|v| v.failures.len()).sum()),
            eao: has_vot.then(|| {
                let segments: Vec<_> = vots.iter().flat_map(|v| v.segments.iter().cloned()).collect();
                let lengths: Vec<usize> = vots.iter().map(|v| v.frames).collect();
                expected_average_overlap(&segments, &lengths)
            }),
        };
        Ok(EvalReport {
            protocol,
            precision_threshold,
            success_threshold,
            skip,
            aggregate,
            sequences,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Eval(format!("cannot serialize report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            Error::format(e.span().map(|s| s.start as u64).unwrap_or(0), e.message().to_string())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
