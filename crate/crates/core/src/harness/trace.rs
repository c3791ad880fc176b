//! Metrics traces and their CSV/JSON forms.
//!
//! CSV files start with one `#` comment line carrying the header fields,
//! followed by the column row and one row per record:
//!
//! ```text
//! # config_digest=9f0c...,seed=1,code_version=0.1.0,algorithm=moniqua
//! k,loss,grad_norm_sq,consensus_inf,consensus_l2,theta_k,bits_cum,violations
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const COLUMNS: [&str; 8] = [
    "k",
    "loss",
    "grad_norm_sq",
    "consensus_inf",
    "consensus_l2",
    "theta_k",
    "bits_cum",
    "violations",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k: u64,
    /// `f(mean model)`.
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus_inf: f64,
    pub consensus_l2: f64,
    /// Modulo bound of the exchange at iteration `k`; 0 without a codec.
    pub theta_k: f64,
    pub bits_cum: u64,
    pub violations: u64,
}

impl MetricsRecord {
    pub fn value(&self, column: &str) -> Option<f64> {
        Some(match column {
            "k" => self.k as f64,
            "loss" => self.loss,
            "grad_norm_sq" => self.grad_norm_sq,
            "consensus_inf" => self.consensus_inf,
            "consensus_l2" => self.consensus_l2,
            "theta_k" => self.theta_k,
            "bits_cum" => self.bits_cum as f64,
            "violations" => self.violations as f64,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config_digest: String,
    pub seed: u64,
    pub code_version: String,
    pub algorithm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub header: TraceHeader,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    /// `.json` selects JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => TraceFormat::Json,
            _ => TraceFormat::Csv,
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn trace_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Trace(e.to_string())
}

impl MetricsTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(w);
        let h = &self.header;
        writeln!(
            w,
            "# config_digest={},seed={},code_version={},algorithm={}",
            h.config_digest, h.seed, h.code_version, h.algorithm
        )
        .map_err(trace_err)?;
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(COLUMNS).map_err(trace_err)?;
        for r in &self.records {
            out.serialize(r).map_err(trace_err)?;
        }
        out.flush().map_err(trace_err)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, HarnessError> {
        let mut r = BufReader::new(r);
        let mut first = String::new();
        r.read_line(&mut first).map_err(trace_err)?;
        let fields = first
            .trim()
            .strip_prefix("# ")
            .ok_or_else(|| trace_err("missing header comment"))?;
        let get = |name: &str| -> Result<String, HarnessError> {
            fields
                .split(',')
                .find_map(|kv| kv.strip_prefix(name)?.strip_prefix('=').map(str::to_string))
                .ok_or_else(|| trace_err(format!("header lacks {name}")))
        };
        let header = TraceHeader {
            config_digest: get("config_digest")?,
            seed: get("seed")?.parse().map_err(trace_err)?,
            code_version: get("code_version")?,
            algorithm: get("algorithm")?,
        };
        let mut rd = csv::Reader::from_reader(r);
        let cols = rd.headers().map_err(trace_err)?;
        if cols.iter().ne(COLUMNS) {
            return Err(trace_err(format!("unexpected columns {cols:?}")));
        }
        let records = rd
            .deserialize()
            .collect::<Result<Vec<MetricsRecord>, _>>()
            .map_err(trace_err)?;
        Ok(MetricsTrace { header, records })
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(BufWriter::new(w), self).map_err(trace_err)
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, HarnessError> {
        serde_json::from_reader(BufReader::new(r)).map_err(trace_err)
    }

    pub fn save(&self, path: &Path, format: TraceFormat) -> Result<(), HarnessError> {
        let f = File::create(path).map_err(|e| io(path, e))?;
        match format {
            TraceFormat::Csv => self.write_csv(f),
            TraceFormat::Json => self.write_json(f),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let f = File::open(path).map_err(|e| io(path, e))?;
        match TraceFormat::from_path(path) {
            TraceFormat::Csv => Self::read_csv(f),
            TraceFormat::Json => Self::read_json(f),
        }
    }

    /// `(k, value)` pairs of one column.
    pub fn column(&self, name: &str) -> Result<Vec<(u64, f64)>, HarnessError> {
        if !COLUMNS.contains(&name) {
            return Err(trace_err(format!("no column {name:?}")));
        }
        Ok(self
            .records
            .iter()
            .map(|r| (r.k, r.value(name).expect("known column")))
            .collect())
    }

    /// Two-column `k,<name>` CSV for plotting tools.
    pub fn write_extract<W: Write>(&self, name: &str, w: W) -> Result<(), HarnessError> {
        let rows = self.column(name)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", name]).map_err(trace_err)?;
        for (k, v) in rows {
            out.write_record([k.to_string(), v.to_string()]).map_err(trace_err)?;
        }
        out.flush().map_err(trace_err)
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> TraceHeader {
        TraceHeader {
            config_digest: "00ff".into(),
            seed: 3,
            code_version: "0.1.0".into(),
            algorithm: "moniqua".into(),
        }
    }

    fn record(k: u64, x: f64) -> MetricsRecord {
        MetricsRecord {
            k,
            loss: x,
            grad_norm_sq: x * x,
            consensus_inf: x.abs(),
            consensus_l2: 0.5 * x.abs(),
            theta_k: 0.25,
            bits_cum: k * 112,
            violations: 0,
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = MetricsTrace {
            header: header(),
            records: vec![],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], COLUMNS.join(","));
        assert_eq!(MetricsTrace::read_csv(text.as_bytes()).unwrap(), t);
    }

    #[test]
    fn csv_rows_and_extract() {
        let t = MetricsTrace {
            header: header(),
            records: (0..5).map(|k| record(k, 1.0 / (k + 1) as f64)).collect(),
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // comment line + column row + records
        assert_eq!(text.lines().count(), 1 + 1 + 5);
        assert_eq!(MetricsTrace::read_csv(text.as_bytes()).unwrap(), t);

        let mut ex = Vec::new();
        t.write_extract("bits_cum", &mut ex).unwrap();
        let ex = String::from_utf8(ex).unwrap();
        assert_eq!(ex.lines().next(), Some("k,bits_cum"));
        assert_eq!(ex.lines().nth(2), Some("1,112"));
        assert!(t.column("nope").is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 0..20)) {
            let t = MetricsTrace {
                header: header(),
                records: vals.iter().enumerate().map(|(k, &x)| record(k as u64, x)).collect(),
            };
            let mut buf = Vec::new();
            t.write_json(&mut buf).unwrap();
            prop_assert_eq!(MetricsTrace::read_json(buf.as_slice()).unwrap(), t.clone());
            let mut csv = Vec::new();
            t.write_csv(&mut csv).unwrap();
            prop_assert_eq!(MetricsTrace::read_csv(csv.as_slice()).unwrap(), t);
        }
    }
}
