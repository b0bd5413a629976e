//! Command-line front end. Machine-readable output goes to stdout,
//! diagnostics to stderr.
//!
//! Exit codes: 0 ok, 2 configuration or argument error, 3 numeric failure,
//! 4 IO or protocol error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ckptplan::{self, CheckpointPlan};
use crate::ckptstore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fabric::ExecMode;
use crate::fsdp::{self, ScheduleSim};
use crate::netspec::{generate_widths, RegnetConfig};
use crate::probe::{self, ProbeConfig};
use crate::train::{self, Setup, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "shardtrain", version, about = "Sharded swapped-prediction training at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReshardMode {
    ToSlices,
    ToShards,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config; metrics stream to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from a sharded checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the collective event log (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write a sliced checkpoint of the final state.
        #[arg(long)]
        save_slices: Option<PathBuf>,
    },
    /// Plan checkpoint boundaries from `{"m": [...]}` plus one of
    /// `budget`, `n_segments` or `boundaries`; `flops` is optional.
    Plan {
        /// JSON file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// Convert between sharded and sliced checkpoints.
    Reshard {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, value_enum)]
        mode: ReshardMode,
        /// Target world size for `to-shards`.
        #[arg(long)]
        world: Option<usize>,
    },
    /// Linear probe on the frozen trunk of a sliced checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        slices: PathBuf,
        /// Optional JSON probe config.
        #[arg(long)]
        probe_config: Option<PathBuf>,
    },
    /// Stage widths and depths as CSV.
    Widths {
        /// Run config to read the `regnet` section from.
        #[arg(long, conflicts_with = "model")]
        config: Option<PathBuf>,
        /// Named model, e.g. rg-128gf.
        #[arg(long)]
        model: Option<String>,
    },
    /// Two-lane overlap simulation from `{"comm": [...], "compute": [...]}`.
    SimulateSchedule {
        /// JSON file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidArgument(_)
        | Error::InvalidPlan(_)
        | Error::Shape(_)
        | Error::Infeasible { .. } => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::State(_)
        | Error::Fabric(_)
        | Error::Format { .. }
        | Error::ReshardRequired { .. }
        | Error::MissingShard { .. }
        | Error::IncompleteSlices { .. }
        | Error::Io { .. }
        | Error::Json(_) => EXIT_IO,
    }
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", None, e))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, None, e))
}

fn parse_input<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_input(path)?)
        .map_err(|e| Error::InvalidConfig(format!("{}: line {}: {e}", path.display(), e.line())))
}

fn emit_json<T: Serialize>(out: &mut (dyn Write + Send), value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", None, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanRequest {
    m: Vec<u64>,
    budget: Option<u64>,
    n_segments: Option<usize>,
    boundaries: Option<Vec<usize>>,
    flops: Option<Vec<u64>>,
}

pub fn plan_request(text: &str) -> Result<CheckpointPlan> {
    let req: PlanRequest =
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("line {}: {e}", e.line())))?;
    let plan = match (req.budget, req.n_segments, req.boundaries) {
        (Some(b), None, None) => ckptplan::auto_plan(&req.m, b)?,
        (None, Some(s), None) => ckptplan::plan(&req.m, s)?,
        (None, None, Some(bs)) => CheckpointPlan::from_boundaries(&req.m, bs)?,
        _ => {
            return Err(Error::InvalidConfig(
                "give exactly one of budget, n_segments or boundaries".into(),
            ))
        }
    };
    match req.flops {
        Some(f) if f.len() != req.m.len() => Err(Error::InvalidConfig("flops and m differ in length".into())),
        Some(f) => plan.with_flops(&f),
        None => Ok(plan),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRequest {
    comm: Vec<f64>,
    compute: Vec<f64>,
    /// Multiplier on communication costs (0.5 models half-width exchange).
    #[serde(default = "one")]
    comm_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
pub struct ScheduleReport {
    pub serial_makespan: f64,
    pub prefetch_makespan: f64,
    pub serial: ScheduleSim,
    pub prefetch: ScheduleSim,
}

pub fn schedule_request(text: &str) -> Result<ScheduleReport> {
    let req: ScheduleRequest =
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("line {}: {e}", e.line())))?;
    if !(req.comm_scale >= 0.0) {
        return Err(Error::InvalidConfig("comm_scale must be >= 0".into()));
    }
    let comm: Vec<f64> = req.comm.iter().map(|c| c * req.comm_scale).collect();
    let serial = fsdp::simulate_schedule(&comm, &req.compute, false)?;
    let prefetch = fsdp::simulate_schedule(&comm, &req.compute, true)?;
    Ok(ScheduleReport {
        serial_makespan: serial.makespan,
        prefetch_makespan: prefetch.makespan,
        serial,
        prefetch,
    })
}

/// `stage,width,depth` rows with a header.
pub fn widths_csv(cfg: &RegnetConfig) -> Result<String> {
    let s = generate_widths(cfg)?;
    let mut out = String::from("stage,width,depth\n");
    for (i, (w, d)) in s.widths.iter().zip(&s.depths).enumerate() {
        out.push_str(&format!("{},{w},{d}\n", i + 1));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ProbeOutput {
    top1: f64,
    n_train: usize,
    n_test: usize,
}

fn cmd_train(
    config: &Path,
    metrics: Option<&Path>,
    resume: Option<PathBuf>,
    events: Option<&Path>,
    save_slices: Option<&Path>,
    stdout: &mut (dyn Write + Send),
) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let mode = ExecMode::from_env().map_err(Error::InvalidConfig)?;
    let setup = Setup::new(&cfg)?;
    let mut file_sink = match metrics {
        Some(p) => Some(io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, None, e))?)),
        None => None,
    };
    let sink: Mutex<&mut (dyn Write + Send)> = Mutex::new(match file_sink.as_mut() {
        Some(f) => f,
        None => stdout,
    });
    let write_err: Mutex<Option<io::Error>> = Mutex::new(None);
    let on_metrics = |rec: &train::MetricsRecord| {
        let line = serde_json::to_string(rec).expect("metrics serialize");
        if let Err(e) = writeln!(sink.lock().expect("sink"), "{line}") {
            write_err.lock().expect("err slot").get_or_insert(e);
        }
    };
    let opts = TrainOptions { resume, stop_at: None };
    let outcome = train::train(&setup, mode, &opts, &on_metrics);
    sink.lock().expect("sink").flush().map_err(|e| Error::io("<metrics>", None, e))?;
    if let Some(e) = write_err.into_inner().expect("err slot") {
        return Err(Error::io("<metrics>", None, e));
    }
    let outcome = outcome?;
    if let Some(p) = events {
        let text: String = outcome
            .events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect();
        fs::write(p, text).map_err(|e| Error::io(p, None, e))?;
    }
    if let Some(dir) = save_slices {
        ckptstore::save_sliced(&outcome.states, &setup.run_info(cfg.total_iters), dir)?;
    }
    Ok(())
}

fn cmd_probe(config: &Path, slices: &Path, probe_config: Option<&Path>, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let probe_cfg: ProbeConfig = match probe_config {
        Some(p) => parse_input(p)?,
        None => ProbeConfig::default(),
    };
    let setup = Setup::new(&cfg)?;
    let (state, _) = ckptstore::load_sliced(slices, 0, 1)?;
    if state.layout != setup.layout {
        return Err(Error::InvalidConfig("checkpoint layout differs from the config".into()));
    }
    let net = fsdp::consolidate(&[state])?.net;
    let features = probe::extract_features(&net, &setup.dataset.samples)?;
    let report = probe::train_probe(&features, &setup.dataset.labels, &probe_cfg)?;
    emit_json(
        stdout,
        &ProbeOutput {
            top1: report.top1,
            n_train: report.n_train,
            n_test: report.n_test,
        },
    )
}

pub fn execute(cli: Cli, stdout: &mut (dyn Write + Send)) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            metrics,
            resume,
            events,
            save_slices,
        } => cmd_train(&config, metrics.as_deref(), resume, events.as_deref(), save_slices.as_deref(), stdout),
        Command::Plan { input } => emit_json(stdout, &plan_request(&read_input(&input)?)?),
        Command::Reshard {
            input,
            output,
            mode,
            world,
        } => match (mode, world) {
            (ReshardMode::ToSlices, _) => {
                ckptstore::consolidate_to_sliced(&input, &output)?;
                emit_json(stdout, &serde_json::json!({"mode": "to-slices", "out": output}))
            }
            (ReshardMode::ToShards, Some(w)) if w >= 1 => {
                ckptstore::shards_from_sliced(&input, &output, w)?;
                emit_json(stdout, &serde_json::json!({"mode": "to-shards", "out": output, "world": w}))
            }
            (ReshardMode::ToShards, _) => Err(Error::InvalidArgument("to-shards needs --world N >= 1".into())),
        },
        Command::Probe {
            config,
            slices,
            probe_config,
        } => cmd_probe(&config, &slices, probe_config.as_deref(), stdout),
        Command::Widths { config, model } => {
            let regnet = match (config, model) {
                (Some(p), _) => RunConfig::from_path(&p)?.regnet,
                (None, Some(name)) => RegnetConfig::named(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown model {name}")))?,
                (None, None) => RunConfig::default().regnet,
            };
            let csv = widths_csv(&regnet)?;
            stdout.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", None, e))
        }
        Command::SimulateSchedule { input } => emit_json(stdout, &schedule_request(&read_input(&input)?)?),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
