//! One-axis parameter sweeps.
//!
//! Each value of the axis produces its own configuration and run; runs are
//! independent and execute in parallel. A failing run is recorded in its
//! entry and the sweep carries on.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{ExperimentConfig, KEYS};
use super::run::run;
use super::trace::{MetricsTrace, TraceFormat};
use super::HarnessError;

#[derive(Debug)]
pub struct SweepEntry {
    pub value: String,
    pub result: Result<MetricsTrace, HarnessError>,
    /// Where the trace was written, if an output directory was given.
    pub path: Option<PathBuf>,
}

/// `<stem>_<key>=<value>.<ext>`.
pub fn sweep_file_name(stem: &str, key: &str, value: &str, format: TraceFormat) -> String {
    let ext = match format {
        TraceFormat::Csv => "csv",
        TraceFormat::Json => "json",
    };
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{stem}_{key}={clean}.{ext}")
}

/// Runs `base` once per value of `key`. Traces are written to `out_dir` when
/// it is given.
pub fn sweep(
    base: &ExperimentConfig,
    key: &str,
    values: &[String],
    out_dir: Option<&Path>,
    format: TraceFormat,
) -> Result<Vec<SweepEntry>, HarnessError> {
    if !KEYS.contains(&key) {
        return Err(HarnessError::Invalid {
            key: key.to_string(),
            msg: "not a configuration key".into(),
        });
    }
    let entries = values
        .par_iter()
        .map(|value| {
            let result = (|| {
                let mut cfg = base.clone();
                cfg.set(key, value).map_err(|msg| HarnessError::Invalid {
                    key: key.to_string(),
                    msg,
                })?;
                cfg.validate()?;
                run(&cfg).map(|out| out.trace)
            })();
            let mut path = None;
            let result = match (result, out_dir) {
                (Ok(trace), Some(dir)) => {
                    let p = dir.join(sweep_file_name("trace", key, value, format));
                    let saved = trace.save(&p, format);
                    path = Some(p);
                    saved.map(|_| trace)
                }
                (r, _) => r,
            };
            SweepEntry {
                value: value.clone(),
                result,
                path,
            }
        })
        .collect();
    Ok(entries)
}
