//! Scenario files, batch execution and result emission.
//!
//! A scenario is a TOML document. Every command writes into `output.dir`:
//! a copy of the scenario as `scenario.toml`, `moments.csv` and
//! `summary.json`. Sweeps and μ probes add `sweep.csv`, trajectory commands
//! add `checkpoint.bin` and the restitution check writes `restitution.csv`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dsmc::checkpoint::Checkpoint;
use crate::dsmc::{InitKind, ObservableSchedule, SimConfig, Simulation};
use crate::error::{Error, Result};
use crate::observables::{MomentReport, MOMENTS_CSV_HEADER};
use crate::restitution::RestitutionSpec;
use crate::spectral_probe::{
    fit_haff, measure_mu_from, predicted_mu, scaling_fit, steady_state_from, LimitKernel, MuEstimate, MuOptions,
    SteadyOptions, SteadyState,
};

pub const SCHEMA_VERSION: u32 = 1;

/// `git describe` of the source tree at build time, or `unknown`.
pub const BUILD_ID: &str = env!("GRANULITE_BUILD_ID");

pub const SCENARIO_FILE: &str = "scenario.toml";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESTITUTION_FILE: &str = "restitution.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub lambda: f64,
    pub n_particles: usize,
    #[serde(default = "default_cells")]
    pub cells: [usize; 3],
    /// Time step; derived from the initial law when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_true")]
    pub thermostat: bool,
    #[serde(default = "default_true")]
    pub momentum_projection: bool,
    #[serde(default)]
    pub seed: u64,
    pub restitution: RestitutionSpec,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default)]
    pub schedule: ObservableSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Steady,
    MeasureMu,
    Haff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Replica run length for the μ probe; derived from the predicted rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Stationarity window in mean collision times.
    #[serde(default = "default_window")]
    pub window_collision_times: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Simulated time between checkpoints; only the final state is saved when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_period: Option<f64>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            checkpoint_period: None,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_cells() -> [usize; 3] {
    [1, 1, 1]
}
fn default_t_end() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_init() -> InitKind {
    InitKind::Maxwellian { theta: 1.0 }
}
fn default_delta() -> f64 {
    0.1
}
fn default_replicas() -> usize {
    8
}
fn default_window() -> f64 {
    20.0
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| Error::config(error_key(text, &e), e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Best guess at the dotted key a TOML error refers to.
fn error_key(text: &str, e: &toml::de::Error) -> String {
    let message = e.message();
    let named = ["unknown field `", "missing field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    let table = e.span().and_then(|span| {
        let line_start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
        let header = text[line_start..].trim_start().starts_with('[');
        (span.start > 0 && header).then(|| key_at(text, span.start)).flatten()
    });
    match (named, table) {
        (Some(field), Some(t)) => format!("{t}.{field}"),
        (Some(field), None) => field.to_string(),
        (None, _) => e
            .span()
            .and_then(|span| key_at(text, span.start))
            .unwrap_or_else(|| "scenario".into()),
    }
}

/// Dotted key of the assignment or table header on the line holding byte `at`.
fn key_at(text: &str, at: usize) -> Option<String> {
    let at = at.min(text.len());
    let line_start = text[..at].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("").trim();
    if let Some(header) = line.strip_prefix('[') {
        return Some(header.trim_end_matches(']').trim().to_string());
    }
    let key = line.split('=').next()?.trim();
    if key.is_empty() {
        return None;
    }
    let section = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match section {
        Some(s) => format!("{s}.{key}"),
        None => key.to_string(),
    })
}

impl Scenario {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("scenario", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let config = self.sim_config()?;
        self.init.validate().map_err(|e| Error::config("init", e.to_string()))?;
        if !(self.schedule.moments_period > 0.0 && self.schedule.moments_period.is_finite()) {
            return Err(Error::config("schedule.moments_period", "must be positive"));
        }
        if self.schedule.dissipation_samples == Some(0) {
            return Err(Error::config("schedule.dissipation_samples", "must be positive"));
        }
        if let Some((a, p)) = self.schedule.tail {
            if !(a > 0.0 && p > 0.0 && p <= 2.0) {
                return Err(Error::config("schedule.tail", "needs A > 0 and 0 < p <= 2"));
            }
        }
        if let Some(probe) = &self.probe {
            if !(probe.delta > 0.0 && probe.delta <= 0.2) {
                return Err(Error::config("probe.delta", format!("must lie in (0, 0.2], got {}", probe.delta)));
            }
            if probe.replicas < 2 {
                return Err(Error::config("probe.replicas", "needs at least two replicas"));
            }
            if let Some(d) = probe.duration {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::config("probe.duration", "must be positive"));
                }
            }
            if !(probe.window_collision_times > 0.0) {
                return Err(Error::config("probe.window_collision_times", "must be positive"));
            }
            match probe.kind {
                ProbeKind::Haff if config.thermostat => {
                    return Err(Error::config("thermostat", "the haff probe needs the thermostat off"))
                }
                ProbeKind::Steady | ProbeKind::MeasureMu if !config.thermostat => {
                    return Err(Error::config("thermostat", "stationary probes need the thermostat on"))
                }
                _ => {}
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.lambdas.is_empty() {
                return Err(Error::config("sweep.lambdas", "must list at least one value"));
            }
            for (i, &l) in sweep.lambdas.iter().enumerate() {
                if !(l > 0.0 && l < 1.0) {
                    return Err(Error::config("sweep.lambdas", format!("entry {i} = {l} must lie in (0,1)")));
                }
                if sweep.lambdas[..i].contains(&l) {
                    return Err(Error::config("sweep.lambdas", format!("value {l} appears twice")));
                }
                self.sim_config_at(l)
                    .map_err(|e| Error::config("sweep.lambdas", format!("at lambda = {l}: {e}")))?;
            }
            if !self.thermostat {
                return Err(Error::config("thermostat", "a lambda sweep needs the thermostat on"));
            }
        }
        if let Some(p) = self.output.checkpoint_period {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::config("output.checkpoint_period", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        self.sim_config_at(self.lambda)
    }

    /// Resolved simulation settings at `lambda`.
    pub fn sim_config_at(&self, lambda: f64) -> Result<SimConfig> {
        let model = self.restitution.resolve(lambda).map_err(|e| match e {
            Error::InvalidInput { what: "lambda", reason } => Error::config("lambda", reason),
            other => Error::config("restitution", other.to_string()),
        })?;
        let config = SimConfig {
            lambda,
            model,
            n_particles: self.n_particles,
            cells: self.cells,
            dt: self.dt.unwrap_or_else(|| SimConfig::default_dt(&self.init)),
            thermostat: self.thermostat,
            momentum_projection: self.momentum_projection,
            seed: self.seed,
            t_end: self.t_end,
        };
        config.validate()?;
        Ok(config)
    }

    fn probe_or_default(&self, kind: ProbeKind) -> ProbeSpec {
        self.probe.clone().unwrap_or(ProbeSpec {
            kind,
            delta: default_delta(),
            replicas: default_replicas(),
            duration: None,
            window_collision_times: default_window(),
        })
    }

    pub fn steady_options(&self) -> SteadyOptions {
        let probe = self.probe_or_default(ProbeKind::Steady);
        SteadyOptions {
            window_collision_times: probe.window_collision_times,
            ..SteadyOptions::default()
        }
    }

    pub fn mu_options(&self) -> MuOptions {
        let probe = self.probe_or_default(ProbeKind::MeasureMu);
        MuOptions {
            delta: probe.delta,
            replicas: probe.replicas,
            duration: probe.duration,
            steady: self.steady_options(),
            ..MuOptions::default()
        }
    }
}

/// What to do with a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    Steady,
    ProbeMu,
    SweepLambda,
    Haff,
    CheckRestitution,
    Resume,
}

impl Command {
    /// The command a bare `run` performs: the sweep if one is listed, else the probe, else a trajectory.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        if scenario.sweep.is_some() {
            return Command::SweepLambda;
        }
        match scenario.probe.as_ref().map(|p| p.kind) {
            Some(ProbeKind::Steady) => Command::Steady,
            Some(ProbeKind::MeasureMu) => Command::ProbeMu,
            Some(ProbeKind::Haff) => Command::Haff,
            None => Command::Run,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorInfo {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub build_id: String,
    pub command: Command,
    pub name: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
    pub wall_time_s: f64,
    pub scenario: Scenario,
    pub resolved: Option<SimConfig>,
    pub results: Value,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => 0,
            Status::Error => 1,
        }
    }
}

/// Runs `command` on `scenario` and writes `summary.json`, whatever the outcome.
pub fn execute(scenario: &Scenario, command: Command) -> Summary {
    let started = Instant::now();
    let out = scenario.output.dir.clone();
    let outcome = prepare_output(scenario, &out).and_then(|()| match command {
        Command::Run => run_command(scenario, &out),
        Command::Steady => steady_command(scenario, &out),
        Command::ProbeMu => probe_mu_command(scenario, &out),
        Command::SweepLambda => sweep_command(scenario, &out),
        Command::Haff => haff_command(scenario, &out),
        Command::CheckRestitution => check_restitution_command(scenario, &out),
        Command::Resume => Err(Error::config("command", "use resume_from_checkpoint")),
    });
    finish(scenario, command, &out, started, outcome)
}

/// Continues the trajectory stored in `checkpoint` under `scenario`,
/// replacing rows of `moments.csv` at or after the checkpoint time.
pub fn resume_from_checkpoint(checkpoint: &Path, scenario: &Scenario) -> Summary {
    let started = Instant::now();
    let out = scenario.output.dir.clone();
    let outcome = prepare_output(scenario, &out).and_then(|()| resume_command(checkpoint, scenario, &out));
    finish(scenario, Command::Resume, &out, started, outcome)
}

fn finish(scenario: &Scenario, command: Command, out: &Path, started: Instant, outcome: Result<Value>) -> Summary {
    let (status, error, results) = match outcome {
        Ok(v) => (Status::Ok, None, v),
        Err(e) => (Status::Error, Some(ErrorInfo::from(&e)), Value::Null),
    };
    let mut summary = Summary {
        schema_version: SCHEMA_VERSION,
        build_id: BUILD_ID.into(),
        command,
        name: scenario.name.clone(),
        status,
        error,
        wall_time_s: started.elapsed().as_secs_f64(),
        scenario: scenario.clone(),
        resolved: scenario.sim_config().ok(),
        results,
    };
    let written = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::config("summary", e.to_string()))
        .and_then(|text| fs::write(out.join(SUMMARY_FILE), text + "\n").map_err(Error::from));
    if let Err(e) = written {
        summary.status = Status::Error;
        summary.error = Some(ErrorInfo::from(&e));
    }
    summary
}

fn prepare_output(scenario: &Scenario, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(SCENARIO_FILE), scenario.to_toml()?)?;
    Ok(())
}

fn create_csv(path: &Path, header: &str) -> Result<BufWriter<fs::File>> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn checkpoint_of(sim: &Simulation) -> Checkpoint {
    let c = sim.config();
    Checkpoint {
        lambda: c.lambda,
        model: c.model,
        seed: c.seed,
        step: sim.step_count(),
        ensemble: sim.ensemble().clone(),
    }
}

/// Runs to `t_end`, streaming reports to `moments` and saving checkpoints.
fn run_trajectory(
    scenario: &Scenario,
    sim: &mut Simulation,
    out: &Path,
    mut moments: BufWriter<fs::File>,
    mut on_report: impl FnMut(&MomentReport),
) -> Result<Value> {
    let dt = sim.config().dt;
    let every = scenario
        .output
        .checkpoint_period
        .map(|p| ((p / dt).round() as u64).max(1));
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut next = every.map(|e| (sim.step_count() / e + 1) * e);
    let mut last = None;
    sim.run_with(&scenario.schedule, |s, r| {
        writeln!(moments, "{}", r.csv_row())?;
        on_report(&r);
        if let (Some(e), Some(n)) = (every, next.as_mut()) {
            if s.step_count() >= *n {
                moments.flush()?;
                checkpoint_of(s).write(&ckpt_path)?;
                *n = (s.step_count() / e + 1) * e;
            }
        }
        last = Some(r);
        Ok(())
    })?;
    moments.flush()?;
    checkpoint_of(sim).write(&ckpt_path)?;
    Ok(json!({
        "final": last,
        "steps": sim.step_count(),
        "time": sim.time(),
        "collisions": sim.totals(),
        "checkpoint": CHECKPOINT_FILE,
    }))
}

fn run_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let mut sim = Simulation::from_init(scenario.sim_config()?, &scenario.init)?;
    let moments = create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?;
    run_trajectory(scenario, &mut sim, out, moments, |_| {})
}

fn resume_command(checkpoint: &Path, scenario: &Scenario, out: &Path) -> Result<Value> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let config = scenario.sim_config()?;
    let mismatch = |what: &str| Error::Checkpoint {
        path: checkpoint.to_path_buf(),
        reason: format!("{what} differs from the scenario"),
    };
    if ckpt.lambda != config.lambda {
        return Err(mismatch("lambda"));
    }
    if ckpt.model != config.model {
        return Err(mismatch("restitution model"));
    }
    if ckpt.seed != config.seed {
        return Err(mismatch("seed"));
    }
    if ckpt.ensemble.time != ckpt.step as f64 * config.dt {
        return Err(mismatch("time step"));
    }
    let t0 = ckpt.ensemble.time;
    let mut sim = Simulation::resume(config, ckpt.ensemble, ckpt.step)?;
    let moments = truncate_moments(&out.join(MOMENTS_FILE), t0)?;
    let mut v = run_trajectory(scenario, &mut sim, out, moments, |_| {})?;
    v["resumed_from"] = json!({ "step": ckpt.step, "time": t0 });
    Ok(v)
}

/// Keeps the rows of an existing moments file strictly before `t0` and
/// opens it for appending; creates it when missing.
fn truncate_moments(path: &Path, t0: f64) -> Result<BufWriter<fs::File>> {
    let kept = match fs::read_to_string(path) {
        Ok(text) => {
            let mut lines = text.lines();
            let header = lines.next().unwrap_or(MOMENTS_CSV_HEADER);
            if header != MOMENTS_CSV_HEADER {
                return Err(Error::config(
                    "output.dir",
                    format!("{} has an unexpected header", path.display()),
                ));
            }
            let mut kept = vec![header.to_string()];
            for line in lines {
                let t: f64 = line.split(',').next().and_then(|s| s.parse().ok()).ok_or_else(|| {
                    Error::config("output.dir", format!("malformed row in {}: {line}", path.display()))
                })?;
                if t < t0 {
                    kept.push(line.to_string());
                }
            }
            kept
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![MOMENTS_CSV_HEADER.to_string()],
        Err(e) => return Err(e.into()),
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

fn steady_json(steady: &SteadyState, config: &SimConfig) -> Value {
    let d = steady.report.dissipation;
    json!({
        "state": steady,
        "injection": steady.injection,
        "dissipation": d,
        "balance_rel_error": d.map(|d| (d.value - steady.injection).abs() / steady.injection),
        "theta_bar_predicted": predicted_mu(config).map(|_| LimitKernel::for_model(&config.model).theta_bar()),
    })
}

fn steady_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let config = scenario.sim_config()?;
    let mut sim = Simulation::from_init(config.clone(), &scenario.init)?;
    let steady = steady_state_from(&mut sim, &scenario.steady_options())?;
    let mut moments = create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?;
    writeln!(moments, "{}", steady.report.csv_row())?;
    moments.flush()?;
    checkpoint_of(&sim).write(&out.join(CHECKPOINT_FILE))?;
    Ok(steady_json(&steady, &config))
}

/// Steady state then μ probe at `lambda`, appending to both CSV files.
fn probe_at(
    scenario: &Scenario,
    lambda: f64,
    moments: &mut impl Write,
    sweep: &mut impl Write,
) -> Result<(MuEstimate, Value)> {
    let config = scenario.sim_config_at(lambda)?;
    let opts = scenario.mu_options();
    let mut sim = Simulation::from_init(config.clone(), &scenario.init)?;
    let steady = steady_state_from(&mut sim, &opts.steady)?;
    writeln!(moments, "{}", steady.report.csv_row())?;
    moments.flush()?;
    let estimate = measure_mu_from(&config, &steady, &opts)?;
    writeln!(sweep, "{}", estimate.csv_row())?;
    sweep.flush()?;
    let v = json!({ "steady": steady_json(&steady, &config), "estimate": estimate });
    Ok((estimate, v))
}

fn probe_mu_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let mut moments = create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?;
    let mut sweep = create_csv(&out.join(SWEEP_FILE), MuEstimate::CSV_HEADER)?;
    let (_, v) = probe_at(scenario, scenario.lambda, &mut moments, &mut sweep)?;
    Ok(v)
}

fn sweep_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let lambdas = scenario
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep.lambdas", "the sweep-lambda command needs a [sweep] table"))?
        .lambdas
        .clone();
    let mut moments = create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?;
    let mut sweep = create_csv(&out.join(SWEEP_FILE), MuEstimate::CSV_HEADER)?;
    let mut estimates = Vec::new();
    let mut points = Vec::new();
    for &lambda in &lambdas {
        let (e, v) = probe_at(scenario, lambda, &mut moments, &mut sweep)?;
        estimates.push(e);
        points.push(v);
    }
    let constants: Vec<Value> = estimates
        .iter()
        .map(|e| {
            let scale = e.lambda.powf(e.gamma_used);
            json!({
                "lambda": e.lambda,
                "c_measured": -e.mu_measured / scale,
                "c_std_error": e.mu_std_error / scale,
                "c_predicted": e.mu_predicted.map(|m| -m / scale),
                "ratio": e.mu_predicted.map(|m| e.mu_measured / m),
            })
        })
        .collect();
    let (fit, fit_error) = match scaling_fit(&estimates) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(ErrorInfo::from(&e))),
    };
    Ok(json!({
        "points": points,
        "constants": constants,
        "scaling_fit": fit,
        "scaling_fit_error": fit_error,
    }))
}

fn haff_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let config = scenario.sim_config()?;
    if config.thermostat {
        return Err(Error::config("thermostat", "the haff probe needs the thermostat off"));
    }
    let mut sim = Simulation::from_init(config, &scenario.init)?;
    let moments = create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?;
    let mut series = Vec::new();
    let mut v = run_trajectory(scenario, &mut sim, out, moments, |r| series.push((r.time, r.theta)))?;
    let fit = fit_haff(&series)?;
    v["haff"] = json!({
        "p": fit.p,
        "t0": fit.t0,
        "initial_temperature": fit.initial_temperature,
        "r_squared": fit.r_squared,
        "window": fit.window,
        "strictly_decreasing": fit.strictly_decreasing,
    });
    Ok(v)
}

/// Grid for the restitution check: zero, then log-spaced speeds up to `1e4`.
pub fn restitution_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    let n = 2400;
    grid.extend((0..=n).map(|k| 10f64.powf(-8.0 + 12.0 * k as f64 / n as f64)));
    grid
}

fn check_restitution_command(scenario: &Scenario, out: &Path) -> Result<Value> {
    let model = scenario.sim_config()?.model;
    let grid = restitution_grid();
    let mut csv = create_csv(&out.join(RESTITUTION_FILE), "r,e,r_e")?;
    for &r in &grid {
        let e = model.eval(r)?;
        writeln!(csv, "{r},{e},{}", r * e)?;
    }
    csv.flush()?;
    // Moments are not part of this command; the file still exists with its header.
    create_csv(&out.join(MOMENTS_FILE), MOMENTS_CSV_HEADER)?.flush()?;
    let report = model.check_assumptions(&grid)?;
    if !report.all_passed() {
        return Err(Error::Quality(format!(
            "restitution law fails the assumption checks: {}",
            serde_json::to_string(&report).unwrap_or_default()
        )));
    }
    Ok(json!({ "model": model, "assumptions": report, "all_passed": true }))
}

/// Writes a plotting bundle under `dir/report` from the files of a finished
/// command and returns the paths written.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path)?;
    let summary: Value =
        serde_json::from_str(&text).map_err(|e| Error::config("summary", format!("{}: {e}", summary_path.display())))?;
    let bundle = dir.join("report");
    fs::create_dir_all(&bundle)?;
    let mut written = Vec::new();

    let mut rows = Vec::new();
    flatten("", &summary, &mut rows);
    let path = bundle.join("summary.csv");
    let mut w = create_csv(&path, "key,value")?;
    for (k, v) in rows {
        writeln!(w, "{k},{}", csv_field(&v))?;
    }
    w.flush()?;
    written.push(path);

    for name in [MOMENTS_FILE, RESTITUTION_FILE] {
        let src = dir.join(name);
        if src.exists() {
            let dst = bundle.join(name);
            fs::copy(&src, &dst)?;
            written.push(dst);
        }
    }

    let sweep = dir.join(SWEEP_FILE);
    if sweep.exists() {
        let path = bundle.join("scaling.csv");
        write_scaling(&fs::read_to_string(&sweep)?, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, x)| flatten(&join(k), x, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, x)| flatten(&join(&i.to_string()), x, out)),
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `sweep.csv` with the rate constants `C = -μ/λ^γ` and the measured-to-predicted ratio.
fn write_scaling(sweep: &str, path: &Path) -> Result<()> {
    let mut lines = sweep.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::config("sweep.csv", format!("missing column {name}")))
    };
    let (il, im, ie, ip, ig) = (
        col("lambda")?,
        col("mu_measured")?,
        col("mu_err")?,
        col("mu_predicted")?,
        col("gamma_used")?,
    );
    let mut w = create_csv(
        path,
        "lambda,mu_measured,mu_err,mu_predicted,ratio,c_measured,c_err,c_predicted",
    )?;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok());
        let (Some(l), Some(m), Some(e), Some(g)) = (num(il), num(im), num(ie), num(ig)) else {
            return Err(Error::config("sweep.csv", format!("malformed row: {line}")));
        };
        let p = num(ip);
        let scale = l.powf(g);
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{l},{m},{e},{},{},{},{},{}",
            opt(p),
            opt(p.map(|p| m / p)),
            -m / scale,
            e / scale,
            opt(p.map(|p| -p / scale))
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "lambda = 0.1\nn_particles = 100000\n\n[restitution]\nkind = \"constant\"\n";

    #[test]
    fn minimal_scenario_fills_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.cells, [1, 1, 1]);
        assert!(s.thermostat && s.momentum_projection);
        assert_eq!(s.init, InitKind::Maxwellian { theta: 1.0 });
        let c = s.sim_config().unwrap();
        assert!((c.dt - SimConfig::default_dt(&s.init)).abs() < 1e-15);
        assert_eq!(c.model, crate::restitution::RestitutionModel::Constant { e0: 0.9 });
    }

    #[test]
    fn errors_name_the_key() {
        let key = |text: &str| match parse_scenario(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(key(&MINIMAL.replace("0.1", "1.5")), "lambda");
        assert_eq!(key(&format!("{MINIMAL}\n[sweep]\nlambdas = [0.1, 0.2, 0.1]\n")), "sweep.lambdas");
        assert_eq!(key(&format!("{MINIMAL}bogus = 3\n")), "restitution.bogus");
        assert_eq!(key(&MINIMAL.replace("100000", "\"many\"")), "n_particles");
        assert_eq!(key("n_particles = 10\n[restitution]\nkind = \"constant\"\n"), "lambda");
        assert_eq!(key(&MINIMAL.replace("constant", "elastic")), "restitution.kind");
    }

    #[test]
    fn round_trip() {
        let text = format!(
            "{MINIMAL}\n[init]\nkind = \"modulated\"\ntheta = 0.5\nepsilon = 0.3\nk = [1, 0, 0]\n\n\
             [schedule]\nmoments_period = 0.05\nmodes = [[1, 0, 0]]\n\n[probe]\nkind = \"measure_mu\"\n\n\
             [sweep]\nlambdas = [0.02, 0.05]\n\n[output]\ndir = \"x\"\ncheckpoint_period = 0.5\n"
        );
        let s = parse_scenario(&text).unwrap();
        assert_eq!(parse_scenario(&s.to_toml().unwrap()).unwrap(), s);
    }

    #[test]
    fn key_lookup() {
        let text = "a = 1\n[init]\ntheta = 2\n";
        assert_eq!(key_at(text, 0).as_deref(), Some("a"));
        assert_eq!(key_at(text, text.find("theta").unwrap() + 3).as_deref(), Some("init.theta"));
        assert_eq!(key_at(text, 7).as_deref(), Some("init"));
    }
}
