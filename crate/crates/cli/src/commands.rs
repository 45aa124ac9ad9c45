//! Command dispatch: config assembly, output directory handling and the
//! per-command writers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fkdv_core::asymptotics::{commutator_ensemble, stein_derivative, stein_slope_fit, SLOPE_TOL};
use fkdv_core::experiments::{self, Check, ExperimentReport, Metric};
use fkdv_core::{solve, SimConfig, SteinRequest};

use crate::config::{parse_target, Document, RunSpec};
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::output::{self, float};

pub const EXPERIMENTS: &[&str] = &[
    "conservation",
    "moment-law",
    "tstar",
    "two-time-bh",
    "decay-threshold",
    "symmetry",
    "wave-breaking",
    "richardson",
    "picard",
    "determinism",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Simulate,
    Stein,
    Probe,
    Experiment(String),
    Convergence,
}

impl Command {
    pub fn label(&self) -> String {
        match self {
            Command::Simulate => "simulate".into(),
            Command::Stein => "stein".into(),
            Command::Probe => "probe".into(),
            Command::Experiment(name) => format!("experiment {name}"),
            Command::Convergence => "convergence".into(),
        }
    }

    /// Directory name under $FKDV_OUT or ./runs.
    fn dir_name(&self) -> String {
        match self {
            Command::Experiment(name) => name.clone(),
            other => other.label(),
        }
    }
}

/// Global options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub reports: Vec<ExperimentReport>,
    pub summary: String,
}

impl Outcome {
    /// Runs without metrics pass trivially.
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed())
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            2
        }
    }
}

pub fn load_spec(opts: &Options) -> Result<RunSpec, CliError> {
    let mut doc = match &opts.config {
        Some(p) => Document::load(p)?,
        None => Document::default(),
    };
    for s in &opts.set {
        doc.set(s)?;
    }
    let spec = RunSpec::from_document(&doc)?;
    Ok(match opts.seed {
        Some(s) => spec.with_seed(s),
        None => spec,
    })
}

/// --out, then [output] out_dir, then $FKDV_OUT/<command>, then ./runs/<command>.
pub fn resolve_out_dir(cmd: &Command, opts: &Options, spec: &RunSpec) -> PathBuf {
    if let Some(p) = &opts.out {
        return p.clone();
    }
    if let Some(p) = &spec.out_dir {
        return p.clone();
    }
    match std::env::var_os("FKDV_OUT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(cmd.dir_name()),
        _ => PathBuf::from("runs").join(cmd.dir_name()),
    }
}

/// Creates the directory and writes a probe file, so an unwritable target
/// fails before any computation starts.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| CliError::io(&probe, e))
}

pub fn execute(cmd: &Command, opts: &Options) -> Result<Outcome, CliError> {
    if let Command::Experiment(name) = cmd {
        if !EXPERIMENTS.contains(&name.as_str()) {
            return Err(CliError::Config(format!(
                "unknown experiment '{name}' (expected one of {})",
                EXPERIMENTS.join(", ")
            )));
        }
    }
    let spec = load_spec(opts)?;
    let out_dir = resolve_out_dir(cmd, opts, &spec);
    prepare_out_dir(&out_dir)?;
    let mut manifest = RunManifest::start(&cmd.label(), &spec);

    let mut summary = String::new();
    let reports = match cmd {
        Command::Simulate => {
            manifest.truncated = simulate(&spec, &out_dir, &mut summary)?;
            vec![]
        }
        Command::Stein => stein(&spec, &out_dir, &mut summary)?,
        Command::Probe => probe(&spec, &out_dir, &mut summary)?,
        Command::Experiment(name) => vec![experiment(name, &spec)?],
        Command::Convergence => {
            let c = &spec.sim;
            vec![
                experiments::richardson_order(c, spec.experiment.richardson_dt)?,
                experiments::picard_agreement(c, spec.experiment.picard_t)?,
                experiments::determinism_check(c)?,
            ]
        }
    };
    if !reports.is_empty() {
        output::write(&out_dir.join("report.csv"), &output::report_csv(&reports))?;
        output::write(&out_dir.join("notes.txt"), &output::notes_text(&reports))?;
        for r in &reports {
            let _ = writeln!(summary, "{r}");
        }
    }
    manifest.end_unix = crate::manifest::unix_now();
    output::write(&out_dir.join("manifest.txt"), &manifest.render())?;
    Ok(Outcome { out_dir, reports, summary })
}

/// Returns whether the run was truncated by the tail guard.
fn simulate(spec: &RunSpec, dir: &Path, summary: &mut String) -> Result<bool, CliError> {
    let cfg = &spec.sim;
    let traj = solve(cfg)?;
    output::write(
        &dir.join("diagnostics.csv"),
        &output::diagnostics_csv(&traj.diagnostics, &cfg.weight_orders),
    )?;
    let mut index = String::from("index,t,file\n");
    for (i, (t, f)) in traj.states.iter().enumerate() {
        let name = format!("state_{i:05}.csv");
        output::write(&dir.join("fields").join(&name), &output::field_csv(f))?;
        let _ = writeln!(index, "{i},{},{name}", float(*t));
    }
    if !traj.states.is_empty() {
        output::write(&dir.join("fields").join("index.csv"), &index)?;
    }
    output::write(&dir.join("fields").join("final.csv"), &output::field_csv(&traj.final_state))?;
    let _ = writeln!(
        summary,
        "simulate: {} steps, dt = {:e}, final t = {}, {} diagnostics rows",
        traj.steps,
        traj.dt_used,
        traj.final_time,
        traj.diagnostics.len()
    );
    if let Some(tr) = &traj.truncated {
        let _ = writeln!(
            summary,
            "truncated at t = {} (tail fraction {:.3e} > tail_tol {:.3e})",
            tr.t, tr.tail_frac, cfg.tail_tol
        );
    }
    Ok(traj.truncated.is_some())
}

fn stein(spec: &RunSpec, dir: &Path, summary: &mut String) -> Result<Vec<ExperimentReport>, CliError> {
    let p = &spec.stein;
    let target = parse_target(&p.target)?;
    let req = SteinRequest::new(p.b, target, p.eta.clone()).with_quad(p.quad);
    let res = stein_derivative(&req)?;
    let mut csv = String::from("eta,value,error_estimate\n");
    for ((e, v), err) in p.eta.iter().zip(&res.values).zip(&res.error_estimates) {
        let _ = writeln!(csv, "{},{},{}", float(*e), float(*v), float(*err));
    }
    output::write(&dir.join("stein.csv"), &csv)?;
    let _ = writeln!(summary, "stein: {} points, tail bound {:.3e}", p.eta.len(), res.tail_bound);
    for w in &res.warnings {
        let _ = writeln!(summary, "warning: {w}");
    }
    let Some(regime) = p.regime else {
        return Ok(vec![]);
    };
    let fit = stein_slope_fit(&req, regime)?;
    let mut rep = ExperimentReport {
        name: "stein_slope".into(),
        config: spec.sim.clone(),
        metrics: vec![],
        notes: res.warnings.clone(),
    };
    if fit.saturation {
        rep.metrics.push(Metric::within("saturation", 1.0, 1.0, 0.0));
    } else {
        rep.metrics.push(Metric::within("fitted_slope", fit.fitted_slope, fit.expected_slope, SLOPE_TOL));
    }
    rep.metrics.push(Metric::within("fit_accepted", f64::from(u8::from(fit.accepted)), 1.0, 0.0));
    rep.notes.push(format!(
        "regime {regime}: rms residual {:.3e}, log correction {}",
        fit.residual, fit.log_correction_detected
    ));
    Ok(vec![rep])
}

/// Ensemble at n and 2n (box length fixed): the bound is resolution
/// independent if the maximum stays finite and within a factor 2.
fn probe(spec: &RunSpec, dir: &Path, summary: &mut String) -> Result<Vec<ExperimentReport>, CliError> {
    let p = &spec.probe;
    let seed = spec.seed.unwrap_or(p.seed);
    let coarse = commutator_ensemble(p.kind, &p.params, p.n, p.length, p.pairs, seed)?;
    let fine = commutator_ensemble(p.kind, &p.params, 2 * p.n, p.length, p.pairs, seed)?;
    let mut csv = String::from("n,pair,ratio\n");
    for stats in [&coarse, &fine] {
        for (i, r) in stats.ratios.iter().enumerate() {
            let _ = writeln!(csv, "{},{i},{}", stats.n, float(*r));
        }
    }
    output::write(&dir.join("probe.csv"), &csv)?;
    let _ = writeln!(
        summary,
        "probe {}: max {:.4e} (n = {}), {:.4e} (n = {})",
        p.kind, coarse.max, coarse.n, fine.max, fine.n
    );
    // Change factor in either direction.
    let growth = (fine.max / coarse.max).max(coarse.max / fine.max);
    let finite = coarse.max.is_finite() && fine.max.is_finite();
    Ok(vec![ExperimentReport {
        name: format!("probe_{}", p.kind),
        config: spec.sim.clone(),
        metrics: vec![
            Metric::within("max_ratio_finite", f64::from(u8::from(finite)), 1.0, 0.0),
            Metric { name: "refinement_growth".into(), measured: growth, expected: 0.0, tolerance: 2.0, check: Check::AtMost },
        ],
        notes: vec![format!("median {:.4e} at n = {}, {:.4e} at n = {}", coarse.median, coarse.n, fine.median, fine.n)],
    }])
}

fn experiment(name: &str, spec: &RunSpec) -> Result<ExperimentReport, CliError> {
    let c = &spec.sim;
    let e = &spec.experiment;
    Ok(match name {
        "conservation" => experiments::run_conservation(c, e.i3_dt)?,
        "moment-law" => experiments::run_moment_law(c)?,
        "tstar" => experiments::run_tstar(c)?.to_report(c),
        "two-time-bh" => experiments::run_two_time_bh(c, e.t1, e.t2)?,
        "decay-threshold" => {
            let r = if e.r_probe.is_empty() { default_decay_orders(c)? } else { e.r_probe.clone() };
            experiments::run_decay_threshold(c, &r, &e.l_list)?
        }
        "symmetry" => experiments::run_symmetry_checks(c, e.lambda)?,
        "wave-breaking" => experiments::run_wave_breaking(c)?,
        "richardson" => experiments::richardson_order(c, e.richardson_dt)?,
        "picard" => experiments::picard_agreement(c, e.picard_t)?,
        "determinism" => experiments::determinism_check(c)?,
        other => return Err(CliError::Config(format!("unknown experiment '{other}'"))),
    })
}

/// The threshold order itself and one a quarter below it.
fn default_decay_orders(c: &SimConfig) -> Result<Vec<f64>, CliError> {
    let u0 = c.ic.build(&c.grid()?)?;
    let mass: f64 = u0.samples().iter().map(|v| v.abs()).sum::<f64>() * u0.grid().dx();
    let zero_mean = u0.integral().abs() <= 1e-12 * mass.max(f64::MIN_POSITIVE);
    let threshold = c.alpha + if zero_mean { 2.5 } else { 1.5 };
    Ok(vec![threshold, threshold - 0.25])
}
