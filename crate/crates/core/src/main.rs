use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moniqua::harness::sweep::sweep;
use moniqua::harness::{
    load_config, params_report, prepare, run_prepared, verify_suite, Fault, HarnessError,
    MetricsTrace, TraceFormat, VerifyOptions,
};

#[derive(Parser)]
#[command(name = "moniqua", version, about = "Modulo-quantized decentralized SGD lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for TraceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TraceFormat::Csv,
            Format::Json => TraceFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics trace.
    Run {
        config: PathBuf,
        /// Output file; overrides the config's `output`. Without either the
        /// CSV trace goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trace format; defaults to the output file's extension.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Run invariant suites: lemma1, lemma2, quantizer, mixing, mean, shared or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Multiplier on every trial count.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Check the codec against half its error bound; the lemma2 suite must fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print the resolved theory parameters of a configuration.
    Params {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a configuration once per value of one key.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Write a two-column `k,<column>` CSV from a trace.
    Extract {
        trace: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: &HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn execute(command: Command) -> Result<ExitCode, HarnessError> {
    match command {
        Command::Run { config, out, format } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            let output = run_prepared(&prepared)?;
            match out.or(cfg.output.clone()) {
                Some(path) => {
                    let fmt = format.map_or_else(|| TraceFormat::from_path(&path), Into::into);
                    output.trace.save(&path, fmt)?;
                    let last = output.trace.last().expect("initial record");
                    eprintln!(
                        "wrote {} records to {}; final loss {:.6e}, grad_norm_sq {:.6e}, bits {}, violations {}",
                        output.trace.records.len(),
                        path.display(),
                        last.loss,
                        last.grad_norm_sq,
                        last.bits_cum,
                        last.violations
                    );
                }
                None => match format.map(Into::into) {
                    Some(TraceFormat::Json) => output.trace.write_json(std::io::stdout())?,
                    _ => output.trace.write_csv(std::io::stdout())?,
                },
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            suite,
            scale,
            seed,
            inject_fault,
            json,
        } => {
            let mut opts = VerifyOptions {
                scale,
                fault: inject_fault.then_some(Fault::HalveLemma2Bound),
                ..Default::default()
            };
            if let Some(s) = seed {
                opts.seed = s;
            }
            let reports = verify_suite(&suite, &opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports).expect("serializable"));
            } else {
                for r in &reports {
                    print!("{r}");
                }
            }
            Ok(if reports.iter().all(|r| r.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Params { config, json } => {
            let report = params_report(&prepare(&load_config(&config)?)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                print!("{report}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            out_dir,
            format,
        } => {
            let cfg = load_config(&config)?;
            let (key, values) = axis.split_once('=').ok_or_else(|| HarnessError::Invalid {
                key: "axis".into(),
                msg: format!("expected key=v1,v2,..., got {axis:?}"),
            })?;
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", out_dir.display())))?;
            let entries = sweep(&cfg, key, &values, Some(&out_dir), format.into())?;
            let mut failed = false;
            for e in &entries {
                match (&e.result, &e.path) {
                    (Ok(t), Some(p)) => {
                        let last = t.last().expect("initial record");
                        println!("{key}={}: {} (final loss {:.6e})", e.value, p.display(), last.loss);
                    }
                    (Ok(_), None) => println!("{key}={}: ok", e.value),
                    (Err(err), _) => {
                        failed = true;
                        println!("{key}={}: error: {err}", e.value);
                    }
                }
            }
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Extract { trace, column, out } => {
            let t = MetricsTrace::load(&trace)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p)
                        .map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?;
                    t.write_extract(&column, f)?;
                }
                None => t.write_extract(&column, std::io::stdout())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
