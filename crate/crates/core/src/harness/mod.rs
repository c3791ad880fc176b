//! Experiment orchestration: configuration, runs, traces, sweeps and the
//! verification suite behind the command-line tool.

pub mod config;
pub mod params;
pub mod run;
pub mod sweep;
pub mod trace;
pub mod verify;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use params::{params_report, ParamsReport};
pub use run::{prepare, run, run_prepared, Prepared, RunOutput};
pub use sweep::{sweep, SweepEntry};
pub use trace::{MetricsRecord, MetricsTrace, TraceFormat, TraceHeader};
pub use verify::{verify_suite, Fault, SuiteReport, VerifyOptions};

use thiserror::Error;

use crate::algos::AlgoError;
use crate::codec::CodecError;
use crate::objectives::ObjectiveError;
use crate::quant::QuantError;
use crate::theory::TheoryError;
use crate::topo::TopoError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },
    #[error("invalid {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("I/O: {0}")]
    Io(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("{0}")]
    Topo(#[from] TopoError),
    #[error("{0}")]
    Theory(#[from] TheoryError),
    #[error("{0}")]
    Quant(#[from] QuantError),
    #[error("{0}")]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Objective(#[from] ObjectiveError),
    #[error("at iteration {k}: {source}")]
    Runtime {
        k: u64,
        #[source]
        source: AlgoError,
    },
    #[error("at iteration {k}: mean moved by {error:e} beyond the gradient drift")]
    MeanDrift { k: u64, error: f64 },
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. }
            | HarnessError::UnknownKey { .. }
            | HarnessError::Invalid { .. }
            | HarnessError::Topo(_)
            | HarnessError::Theory(_)
            | HarnessError::Quant(_)
            | HarnessError::Codec(_)
            | HarnessError::Objective(_) => 1,
            HarnessError::Io(_)
            | HarnessError::Trace(_)
            | HarnessError::Runtime { .. }
            | HarnessError::MeanDrift { .. } => 2,
        }
    }
}
