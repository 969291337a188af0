//! Timing observations from the measurement harness, one JSON object per
//! line.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementRecord {
    pub model_id: String,
    pub gpu_id: String,
    pub n_gpus: u32,
    pub config: TrainConfig,
    /// Mean of three forward/backward passes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_seconds: Option<f64>,
    /// Mean of three optimizer updates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_seconds: Option<f64>,
    pub oom: bool,
    /// RFC 3339 time of measurement.
    pub timestamp: String,
}

impl MeasurementRecord {
    pub fn check(&self) -> Result<()> {
        let what = format!("record {}/{}x{}", self.model_id, self.gpu_id, self.n_gpus);
        if self.n_gpus == 0 {
            return Err(Error::invalid(what, "n_gpus must be positive"));
        }
        let positive = |v: Option<f64>| v.is_some_and(|x| x.is_finite() && x > 0.0);
        if self.oom {
            if self.pass_seconds.is_some() || self.update_seconds.is_some() {
                return Err(Error::invalid(what, "oom record carries timings"));
            }
        } else if !positive(self.pass_seconds) || !positive(self.update_seconds) {
            return Err(Error::invalid(what, "timings must be present and positive"));
        }
        Ok(())
    }

    /// Ordering key used before fitting.
    pub fn canonical_key(&self) -> (String, String, u32, TrainConfig, String) {
        (
            self.model_id.clone(),
            self.gpu_id.clone(),
            self.n_gpus,
            self.config,
            self.timestamp.clone(),
        )
    }
}

/// Parse JSONL; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<MeasurementRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MeasurementRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(format!("records line {}", i + 1), e))?;
        rec.check()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[MeasurementRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MeasurementRecord {
        MeasurementRecord {
            model_id: "pythia-160m".into(),
            gpu_id: "a100".into(),
            n_gpus: 1,
            config: TrainConfig::naive().with_batch(32, 32),
            pass_seconds: Some(0.41),
            update_seconds: Some(0.02),
            oom: false,
            timestamp: "2024-05-01T12:00:00Z".into(),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let oom = MeasurementRecord {
            oom: true,
            pass_seconds: None,
            update_seconds: None,
            ..sample()
        };
        let recs = vec![sample(), oom];
        let text = to_jsonl(&recs);
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().nth(1).unwrap().contains("pass_seconds"));
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
    }

    #[test]
    fn invariants() {
        let mut r = sample();
        r.oom = true;
        assert!(r.check().is_err());
        let mut r = sample();
        r.update_seconds = None;
        assert!(r.check().is_err());
        let mut r = sample();
        r.pass_seconds = Some(0.0);
        assert!(r.check().is_err());
        assert!(parse_jsonl("{\"model_id\": 3}\n").is_err());
    }
}
