//! Tidy result tables with a provenance block, serialized deterministically
//! to CSV (RFC 4180) and JSON.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub experiment: String,
    pub statistic: String,
    /// Generation or truncation size, when the statistic is indexed.
    pub n: Option<u64>,
    pub value: f64,
    /// None on both CI fields means the value is exact.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed_policy: String,
    /// sha256 of the canonical JSON encoding of the resolved config.
    pub config_hash: String,
    /// The resolved config itself; outputs reconstruct their run.
    pub config: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultTable {
    pub provenance: Provenance,
    pub rows: Vec<Row>,
    /// Experiment-specific structured payload (e.g. full condition reports).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

pub fn config_hash(config: &Value) -> String {
    // serde_json::Value keeps object keys sorted, so this encoding is
    // canonical for a given config.
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl ResultTable {
    pub fn new(config: Value) -> Self {
        ResultTable {
            provenance: Provenance {
                tool: "gwlab".to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed_policy: crate::model::SEED_POLICY.to_string(),
                config_hash: config_hash(&config),
                config,
            },
            rows: Vec::new(),
            details: None,
        }
    }

    pub fn push_exact(&mut self, experiment: &str, statistic: &str, n: Option<u64>, value: f64) {
        self.rows.push(Row {
            experiment: experiment.to_string(),
            statistic: statistic.to_string(),
            n,
            value,
            ci_low: None,
            ci_high: None,
        });
    }

    pub fn push_ci(
        &mut self,
        experiment: &str,
        statistic: &str,
        n: Option<u64>,
        value: f64,
        ci_half: f64,
    ) {
        self.rows.push(Row {
            experiment: experiment.to_string(),
            statistic: statistic.to_string(),
            n,
            value,
            ci_low: Some(value - ci_half),
            ci_high: Some(value + ci_half),
        });
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        wtr.write_record(["experiment", "statistic", "n", "value", "ci_low", "ci_high"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &self.rows {
            let n = r.n.map(|v| v.to_string()).unwrap_or_default();
            let (lo, hi) = match (r.ci_low, r.ci_high) {
                (Some(lo), Some(hi)) => (lo.to_string(), hi.to_string()),
                _ => ("exact".to_string(), "exact".to_string()),
            };
            wtr.write_record([
                r.experiment.as_str(),
                r.statistic.as_str(),
                &n,
                &r.value.to_string(),
                &lo,
                &hi,
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    /// Write `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv = self.to_csv_string()?;
        let json = self.to_json_string()?;
        for (ext, body) in [("csv", csv), ("json", json)] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = std::fs::File::create(&path)?;
            f.write_all(body.as_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_tags_exact_rows() {
        let mut t = ResultTable::new(json!({"seed": 1}));
        t.push_exact("forward", "w", Some(3), 1.0);
        t.push_ci("forward", "mean_w", Some(3), 1.0, 0.5);
        let s = t.to_csv_string().unwrap();
        assert!(s.contains("forward,w,3,1,exact,exact"));
        assert!(s.contains("forward,mean_w,3,1,0.5,1.5"));
    }

    #[test]
    fn hash_is_stable_and_key_order_free() {
        let a = config_hash(&json!({"a": 1, "b": 2}));
        let b = config_hash(&json!({"b": 2, "a": 1}));
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_ne!(a, config_hash(&json!({"a": 1, "b": 3})));
    }

    #[test]
    fn files_written_and_identical_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ResultTable::new(json!({"seed": 7}));
        t.push_exact("x", "y", None, 0.5);
        t.write(dir.path(), "run").unwrap();
        let c1 = std::fs::read(dir.path().join("run.csv")).unwrap();
        let j1 = std::fs::read(dir.path().join("run.json")).unwrap();
        t.write(dir.path(), "run").unwrap();
        assert_eq!(c1, std::fs::read(dir.path().join("run.csv")).unwrap());
        assert_eq!(j1, std::fs::read(dir.path().join("run.json")).unwrap());
    }
}
