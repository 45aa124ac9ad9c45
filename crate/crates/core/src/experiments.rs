//! Scripted campaigns: conservation, moment law, t*, the Burgers–Hilbert
//! jump evolution, decay thresholds, symmetry checks, wave breaking and the
//! solver-validity checks (Richardson order, Picard agreement, determinism).
//!
//! Every campaign returns an [`ExperimentReport`] whose metrics carry the
//! measured value, the expected value, the tolerance and the comparison kind;
//! pass/fail is always derived from those four entries.

use std::fmt;

use crate::diagnostics::{moment_first, spectral_jump, weighted_norm, decay_fit, WeightSpec};
use crate::error::{Error, Result};
use crate::solver::{
    linear_propagator, picard_oracle, solve_from, tail_fraction, InitialCondition, SimConfig,
    Trajectory,
};
use crate::spectral::{
    apply_multiplier, coordinate_multiply, derivative, frac_deriv, hilbert, require_zero_mean,
    Field, Grid, MultiplierSymbol,
};
use crate::Complex64;

/// How a metric's measured value is compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    /// |measured − expected| ≤ tolerance
    Within,
    /// measured ≤ tolerance (expected is the ideal value, usually 0)
    AtMost,
    /// measured ≥ tolerance
    AtLeast,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::Within => "within",
            Check::AtMost => "at_most",
            Check::AtLeast => "at_least",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub check: Check,
}

impl Metric {
    pub fn within(name: &str, measured: f64, expected: f64, tolerance: f64) -> Metric {
        Metric { name: name.into(), measured, expected, tolerance, check: Check::Within }
    }

    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Metric {
        Metric { name: name.into(), measured, expected: 0.0, tolerance, check: Check::AtMost }
    }

    pub fn at_least(name: &str, measured: f64, expected: f64, tolerance: f64) -> Metric {
        Metric { name: name.into(), measured, expected, tolerance, check: Check::AtLeast }
    }

    /// NaN never passes.
    pub fn pass(&self) -> bool {
        match self.check {
            Check::Within => (self.measured - self.expected).abs() <= self.tolerance,
            Check::AtMost => self.measured <= self.tolerance,
            Check::AtLeast => self.measured >= self.tolerance,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} measured={:.6e} expected={:.6e} {} {:.3e} -> {}",
            self.name,
            self.measured,
            self.expected,
            self.check,
            self.tolerance,
            if self.pass() { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub config: SimConfig,
    pub metrics: Vec<Metric>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    fn new(name: &str, config: &SimConfig) -> Self {
        ExperimentReport { name: name.into(), config: config.clone(), metrics: vec![], notes: vec![] }
    }

    pub fn passed(&self) -> bool {
        !self.metrics.is_empty() && self.metrics.iter().all(Metric::pass)
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    fn push(&mut self, m: Metric) {
        self.metrics.push(m);
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment {} ({})", self.name, if self.passed() { "pass" } else { "FAIL" })?;
        for m in &self.metrics {
            writeln!(f, "  {m}")?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// helpers

fn no_observer() -> impl FnMut(usize, f64, &Field) {
    |_: usize, _: f64, _: &Field| {}
}

fn run(cfg: &SimConfig) -> Result<(Field, Trajectory)> {
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    let traj = solve_from(cfg, &u0, &mut no_observer())?;
    Ok((u0, traj))
}

/// The same physical data in a box scaled by `factor` at the same dx.
fn rescaled_box(cfg: &SimConfig, factor: f64) -> Result<SimConfig> {
    let n = cfg.n as f64 * factor;
    if (n - n.round()).abs() > 1e-9 || n.round() < 8.0 || n.round() as usize % 2 != 0 {
        return Err(Error::Config(format!(
            "box factor {factor} does not give an even grid size from n = {}",
            cfg.n
        )));
    }
    let mut out = cfg.clone();
    out.n = n.round() as usize;
    out.length = cfg.length * factor;
    Ok(out)
}

fn zero_mean_hypothesis(u0: &Field, hypothesis: &str) -> Result<()> {
    require_zero_mean(u0, hypothesis).map_err(|e| {
        Error::Config(format!("{hypothesis}: the data must have zero mean û₀(0) = 0 ({e})"))
    })
}

fn max_abs_ux(u: &Field) -> f64 {
    derivative(u).max_abs()
}

fn truncation_note(rep: &mut ExperimentReport, label: &str, traj: &Trajectory) {
    if let Some(tr) = &traj.truncated {
        rep.note(format!(
            "{label}: run truncated at t = {:.4} (tail fraction {:.3e})",
            tr.t, tr.tail_frac
        ));
    }
}

/// Largest relative drift |I(t) − I(0)| / scale over the diagnostics rows.
fn drift(values: impl Iterator<Item = f64>, scale: f64) -> f64 {
    let v: Vec<f64> = values.collect();
    let Some(&first) = v.first() else { return 0.0 };
    if scale == 0.0 {
        return 0.0;
    }
    v.iter().map(|x| (x - first).abs()).fold(0.0, f64::max) / scale
}

// ---------------------------------------------------------------------------
// conservation

/// Relative I₂ drift and absolute-scaled I₁ drift at `cfg.dt`; the I₃ drift
/// ratio comes from a separate pair of runs at `i3_dt` and `i3_dt/2` (at
/// reference dt the I₃ drift already sits at round-off).
pub fn run_conservation(cfg: &SimConfig, i3_dt: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = ExperimentReport::new("conservation", cfg);
    let (u0, traj) = run(cfg)?;
    truncation_note(&mut rep, "reference run", &traj);
    let i2 = traj.diagnostics[0].i2;
    let l1: f64 = u0.samples().iter().map(|v| v.abs()).sum::<f64>() * u0.grid().dx();
    rep.push(Metric::at_most(
        "i2_relative_drift",
        drift(traj.diagnostics.iter().map(|d| d.i2), i2),
        1e-8,
    ));
    rep.push(Metric::at_most("i1_drift", drift(traj.diagnostics.iter().map(|d| d.i1), l1), 1e-12));

    let i3_drift = |dt: f64| -> Result<Option<f64>> {
        let mut c = cfg.clone();
        c.dt = dt;
        let (_, t) = run(&c)?;
        let vals: Option<Vec<f64>> = t.diagnostics.iter().map(|d| d.i3).collect();
        Ok(vals.map(|v| {
            let s = v[0].abs().max(f64::MIN_POSITIVE);
            drift(v.into_iter(), s)
        }))
    };
    let (coarse, fine) = rayon::join(|| i3_drift(i3_dt), || i3_drift(0.5 * i3_dt));
    match (coarse?, fine?) {
        (Some(c), Some(f)) => {
            rep.note(format!("I3 relative drift: {c:.3e} at dt = {i3_dt}, {f:.3e} at dt/2"));
            rep.push(Metric::at_least("i3_drift_ratio", c / f, 8.0, 8.0));
        }
        _ => rep.note("I3 undefined for this data (α < 0 with nonzero mean)"),
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// moment law

/// Tolerance of the moment law, relative to ‖u₀‖².
pub const MOMENT_LAW_TOL: f64 = 1e-5;

/// Checks ∫xu(t) = ∫xu₀ + (t/2)‖u₀‖² at every diagnostics row.
///
/// The box moment carries a bias from the odd ξ³|ξ|^{2α} part of the
/// dispersive response that decays like L^{−(2+2α)}; the run is repeated in a
/// box of size 2L at the same dx and the deviations are Richardson-combined
/// with that exponent.
pub fn run_moment_law(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if !(cfg.alpha > -1.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!(
            "moment law needs alpha in (-1, 1) \\ {{0}}, got {}",
            cfg.alpha
        )));
    }
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    zero_mean_hypothesis(&u0, "moment law")?;
    let big = rescaled_box(cfg, 2.0)?;
    let (a, b) = rayon::join(|| run(cfg), || run(&big));
    let ((u0, ta), (_, tb)) = (a?, b?);
    let mut rep = ExperimentReport::new("moment_law", cfg);
    truncation_note(&mut rep, "box L", &ta);
    truncation_note(&mut rep, "box 2L", &tb);

    let l2sq = u0.l2_norm_sq();
    let dev = |t: &Trajectory| -> Vec<(f64, f64)> {
        let d0 = &t.diagnostics[0];
        t.diagnostics.iter().map(|d| (d.t, d.moment_x - d0.moment_x - 0.5 * d.t * d0.i2)).collect()
    };
    let (da, db) = (dev(&ta), dev(&tb));
    let p = 2.0 + 2.0 * cfg.alpha;
    let w = 2f64.powf(p);
    let rows = da.len().min(db.len());
    let mut worst_ext = 0.0f64;
    let mut worst_raw = 0.0f64;
    let rel = |v: f64| if l2sq > 0.0 { v / l2sq } else { 0.0 };
    let mut per_row = Vec::with_capacity(rows);
    for i in 0..rows {
        let ext = (w * db[i].1 - da[i].1) / (w - 1.0);
        worst_ext = worst_ext.max(ext.abs());
        worst_raw = worst_raw.max(da[i].1.abs());
        per_row.push(format!("{:.3}:{:.2e}", da[i].0, rel(ext)));
    }
    rep.push(Metric::at_most("moment_law_relative_deviation", rel(worst_ext), MOMENT_LAW_TOL));
    rep.note(format!("relative deviation by checkpoint (t:dev) {}", per_row.join(" ")));
    rep.push(Metric::at_most("tail_fraction_max", max_tail(&ta).max(max_tail(&tb)), cfg.tail_tol));
    rep.note(format!(
        "box-L raw deviation {:.3e}, extrapolated with exponent {p} from L = {} and {}",
        rel(worst_raw),
        cfg.length,
        big.length
    ));
    let dint = apply_multiplier(&ta.final_state, &MultiplierSymbol::frac_deriv(cfg.alpha))?.integral();
    rep.push(Metric::at_most("frac_deriv_integral", dint.abs(), 1e-12 * (1.0 + l2sq)));
    rep.note("∫D^αu vanishes identically by the zero-mode convention; listed as a consistency check");
    let (g0, g1) = (max_abs_ux(&u0), max_abs_ux(&ta.final_state));
    if g0 > 0.0 && g1 > 10.0 * g0 {
        rep.note(format!(
            "‖u_x‖∞ grew from {g0:.3} to {g1:.3}: the data steepens into a shock and the \
             moment quadrature inherits the unresolved gradient"
        ));
    }
    Ok(rep)
}

fn max_tail(t: &Trajectory) -> f64 {
    t.diagnostics.iter().map(|d| d.tail_frac).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// t*

#[derive(Clone, Debug, PartialEq)]
pub struct TStarReport {
    pub moment0: f64,
    pub l2sq: f64,
    pub t_star_predicted: f64,
    /// ∫₀^{t*}∫xu dx dτ, trapezoidal over every step.
    pub integral_of_moment: f64,
    /// |integral_of_moment| / (|moment0|·t*)
    pub residual: f64,
    /// First sign change of ∫xu(t), linearly interpolated between steps.
    pub zero_crossing: Option<f64>,
    pub steps: usize,
    pub dt_used: f64,
}

pub const TSTAR_RESIDUAL_TOL: f64 = 1e-4;
pub const TSTAR_CROSSING_TOL: f64 = 1e-3;

impl TStarReport {
    pub fn to_report(&self, cfg: &SimConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("tstar", cfg);
        rep.push(Metric::at_most("tstar_residual", self.residual, TSTAR_RESIDUAL_TOL));
        rep.push(Metric::within(
            "moment_zero_crossing",
            self.zero_crossing.unwrap_or(f64::NAN),
            0.5 * self.t_star_predicted,
            TSTAR_CROSSING_TOL,
        ));
        rep.note(format!(
            "moment0 = {:.12e}, ‖u0‖² = {:.12e}, t* = {:.12}, ∫∫xu = {:.3e}",
            self.moment0, self.l2sq, self.t_star_predicted, self.integral_of_moment
        ));
        rep
    }

    pub fn passed(&self) -> bool {
        self.residual <= TSTAR_RESIDUAL_TOL
            && self
                .zero_crossing
                .is_some_and(|t| (t - 0.5 * self.t_star_predicted).abs() <= TSTAR_CROSSING_TOL)
    }
}

/// Integrates the first moment up to t* = −4∫xu₀/‖u₀‖² (which must lie in (0, T]).
pub fn run_tstar(cfg: &SimConfig) -> Result<TStarReport> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    zero_mean_hypothesis(&u0, "t* reduction")?;
    let moment0 = moment_first(&u0);
    let l2sq = u0.l2_norm_sq();
    let t_star = -4.0 * moment0 / l2sq;
    if !(t_star > 0.0) {
        return Err(Error::Config(format!(
            "t* = {t_star:.6} is not positive: the data needs ∫x u0 dx < 0 (got {moment0:.6e})"
        )));
    }
    if t_star > cfg.t_final * (1.0 + 1e-12) {
        return Err(Error::Horizon(format!(
            "t* = {t_star:.6} exceeds the horizon T = {}; rerun with t_final >= {t_star:.6}",
            cfg.t_final
        )));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.t_final = t_star;
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let traj = solve_from(&run_cfg, &u0, &mut |_: usize, t: f64, u: &Field| {
        samples.push((t, moment_first(u)))
    })?;
    if let Some(tr) = &traj.truncated {
        return Err(Error::Horizon(format!(
            "tail contamination at t = {:.4} before t* = {t_star:.4} (tail fraction {:.3e})",
            tr.t, tr.tail_frac
        )));
    }
    let mut integral = 0.0;
    let mut crossing = None;
    for w in samples.windows(2) {
        let ((t0, m0), (t1, m1)) = (w[0], w[1]);
        integral += 0.5 * (t1 - t0) * (m0 + m1);
        if crossing.is_none() && m0 != 0.0 && m0.signum() != m1.signum() {
            crossing = Some(t0 + (t1 - t0) * m0 / (m0 - m1));
        }
    }
    Ok(TStarReport {
        moment0,
        l2sq,
        t_star_predicted: t_star,
        integral_of_moment: integral,
        residual: integral.abs() / (moment0.abs() * t_star),
        zero_crossing: crossing,
        steps: traj.steps,
        dt_used: traj.dt_used,
    })
}

// ---------------------------------------------------------------------------
// Burgers–Hilbert jump evolution

/// Duhamel prediction for the one-sided derivative ∂_ξû(0⁺, t) of a
/// Burgers–Hilbert solution: e^{it}m₊(0) − (‖u₀‖²/2)(e^{it} − 1), or pure
/// rotation when the nonlinearity is off.
pub fn bh_jump_prediction(m0: Complex64, l2sq: f64, t: f64, nonlinear: bool) -> Complex64 {
    let rot = Complex64::from_polar(1.0, t);
    if nonlinear {
        rot * m0 - 0.5 * l2sq * (rot - 1.0)
    } else {
        rot * m0
    }
}

pub const BH_JUMP_TOL: f64 = 1e-3;
pub const BH_ROTATION_TOL: f64 = 1e-6;

/// Tracks m₊(t) in boxes L and 2L, extrapolates 2m(2L) − m(L), compares with
/// [`bh_jump_prediction`], and evaluates the two-time identity residual
/// R = 2 sin(t₂−t₁)∫xu(t₁) − (cos(t₂−t₁) − 1)‖u₀‖².
pub fn run_two_time_bh(cfg: &SimConfig, t1: f64, t2: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.alpha != -1.0 {
        return Err(Error::Config(format!(
            "the jump evolution is specific to alpha = -1, got {}",
            cfg.alpha
        )));
    }
    if !(t1 >= 0.0 && t2 > t1) {
        return Err(Error::Config(format!("need 0 <= t1 < t2, got t1 = {t1}, t2 = {t2}")));
    }
    if t1 > cfg.t_final {
        return Err(Error::Horizon(format!("t1 = {t1} exceeds the horizon T = {}", cfg.t_final)));
    }
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    zero_mean_hypothesis(&u0, "jump evolution")?;
    let big = rescaled_box(cfg, 2.0)?;

    // m₊ at every step of each run; t1 is matched to the nearest step.
    let track = |c: &SimConfig| -> Result<(Vec<(f64, Complex64)>, Trajectory)> {
        let g = c.grid()?;
        let u = c.ic.build(&g)?;
        let mut rows = Vec::new();
        let every = c.diag_every;
        let tr = solve_from(c, &u, &mut |step: usize, t: f64, f: &Field| {
            if step % every == 0 {
                if let Ok(j) = spectral_jump(f) {
                    rows.push((t, j.m_plus));
                }
            }
        })?;
        Ok((rows, tr))
    };
    let (a, b) = rayon::join(|| track(cfg), || track(&big));
    let ((ra, ta), (rb, tb)) = (a?, b?);
    let mut rep = ExperimentReport::new("two_time_bh", cfg);
    truncation_note(&mut rep, "box L", &ta);
    truncation_note(&mut rep, "box 2L", &tb);

    let n = ra.len().min(rb.len());
    let ext: Vec<(f64, Complex64)> =
        (0..n).map(|i| (ra[i].0, 2.0 * rb[i].1 - ra[i].1)).collect();
    let l2sq = u0.l2_norm_sq();
    let m0 = ext[0].1;
    let mut scale = 0.0f64;
    let mut err = 0.0f64;
    let mut err_raw = 0.0f64;
    for (i, &(t, m)) in ext.iter().enumerate() {
        let pred = bh_jump_prediction(m0, l2sq, t, cfg.nonlinear);
        scale = scale.max(pred.norm());
        err = err.max((m - pred).norm());
        let pred_raw = bh_jump_prediction(ra[0].1, l2sq, t, cfg.nonlinear);
        err_raw = err_raw.max((ra[i].1 - pred_raw).norm());
    }
    let tol = if cfg.nonlinear { BH_JUMP_TOL } else { BH_ROTATION_TOL };
    let rel = if scale > 0.0 { err / scale } else { 0.0 };
    rep.push(Metric::at_most("jump_relative_error", rel, tol));
    rep.note(format!(
        "box-L jump error without extrapolation {:.3e}",
        if scale > 0.0 { err_raw / scale } else { 0.0 }
    ));

    // ∫xu = −Im m₊ for real u (mean of the one-sided derivatives).
    let dt_rows = ext.get(1).map(|r| r.0).unwrap_or(f64::INFINITY);
    let at_t1 = ext.iter().min_by(|x, y| (x.0 - t1).abs().total_cmp(&(y.0 - t1).abs()));
    if let Some(&(tm, m)) = at_t1.filter(|r| (r.0 - t1).abs() <= 0.5 * dt_rows + 1e-12) {
        let d = t2 - t1;
        let residual = |mom: f64| 2.0 * d.sin() * mom - (d.cos() - 1.0) * l2sq;
        let r_meas = residual(-m.im);
        let r_pred = residual(-bh_jump_prediction(m0, l2sq, tm, cfg.nonlinear).im);
        let r_scale = l2sq + 2.0 * m0.norm();
        rep.push(Metric::within("identity_residual", r_meas, r_pred, tol * r_scale));
        rep.note(format!(
            "two-time identity residual R = {r_meas:.6e} at t1 = {tm}, t2 = {t2} (nonzero R: the \
             two-time decay condition fails for this data)"
        ));
    } else {
        rep.note(format!("t1 = {t1} falls between diagnostics rows; identity residual skipped"));
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// decay thresholds

/// Box of the linear-evolution oracle used for the pointwise tail exponent.
pub const DECAY_ORACLE_N: usize = 65536;
pub const DECAY_ORACLE_L: f64 = 6400.0;
pub const DECAY_FIT_WINDOW: (f64, f64) = (20.0, 400.0);
/// Successive weighted-norm increments must not shrink below this fraction
/// of the first one for the norm to count as growing.
pub const GROWTH_MIN_RATIO: f64 = 0.85;
pub const CONVERGENCE_TOL: f64 = 0.02;

/// Tail exponent of the free evolution at t = T (large-box oracle), then the
/// weighted norms ‖⟨x⟩^r u(T)‖ in boxes `l_list` at the dx of `cfg`. Orders
/// at or above the threshold (3/2+α, or 5/2+α for zero-mean data) must grow
/// with L; orders below it must settle to within 2%.
pub fn run_decay_threshold(cfg: &SimConfig, r_probe: &[f64], l_list: &[f64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if l_list.len() < 3 || l_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("l_list needs at least three increasing box sizes".into()));
    }
    let mut rep = ExperimentReport::new("decay_threshold", cfg);
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    let zero_mean = require_zero_mean(&u0, "").is_ok();
    let alpha = cfg.alpha;
    let threshold = if zero_mean { 2.5 + alpha } else { 1.5 + alpha };

    if !zero_mean {
        let og = Grid::new(DECAY_ORACLE_N, DECAY_ORACLE_L)?;
        let free = linear_propagator(&cfg.ic.build(&og)?, cfg.t_final, alpha);
        let fit = decay_fit(&free, DECAY_FIT_WINDOW, 24)?;
        let tol = if alpha == -1.0 { 0.05 } else { 0.15 };
        rep.push(Metric::within("tail_exponent", fit.fitted_p, 2.0 + alpha, tol));
        rep.note(format!("tail fit residual {:.3e} on window {:?}", fit.residual, DECAY_FIT_WINDOW));
    }

    let dx = cfg.length / cfg.n as f64;
    let cfgs: Vec<SimConfig> = l_list
        .iter()
        .map(|&l| rescaled_box(cfg, l / cfg.length))
        .collect::<Result<_>>()?;
    let runs: Vec<Result<(Field, Trajectory)>> = {
        use rayon::prelude::*;
        cfgs.par_iter().map(run).collect()
    };
    let mut finals = Vec::new();
    for (c, r) in cfgs.iter().zip(runs) {
        let (_, t) = r?;
        if let Some(tr) = &t.truncated {
            return Err(Error::Horizon(format!(
                "box L = {} contaminated at t = {:.4} (tail fraction {:.3e}) before T = {}",
                c.length, tr.t, tr.tail_frac, cfg.t_final
            )));
        }
        finals.push(t.final_state);
    }
    rep.note(format!("boxes {l_list:?} at dx = {dx}; threshold r = {threshold}"));
    for &r in r_probe {
        let w: Vec<f64> = finals
            .iter()
            .map(|f| weighted_norm(f, r, WeightSpec::Exact))
            .collect::<Result<_>>()?;
        rep.note(format!("r = {r}: weighted norms {w:?}"));
        if r >= threshold - 1e-12 {
            let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
            let first = w2[1] - w2[0];
            let ratio = if first > 1e-3 * w2[0] {
                w2.windows(2).skip(1).map(|p| (p[1] - p[0]) / first).fold(f64::INFINITY, f64::min)
            } else {
                0.0
            };
            rep.push(Metric::at_least(&format!("growth_r{r}"), ratio, 1.0, GROWTH_MIN_RATIO));
        } else {
            let k = w.len();
            let change = (w[k - 1] / w[k - 2] - 1.0).abs();
            rep.push(Metric::at_most(&format!("convergence_r{r}"), change, CONVERGENCE_TOL));
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// symmetry and operator identities

pub const SCALING_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-8;
/// Zero-padding factor for the identity probes: the algebraic tails of D^αf
/// wrap around the periodic box, so the identities are evaluated on a box
/// this many times larger and compared on the original one.
pub const IDENTITY_PAD: usize = 256;

fn rel_l2_on(a: &Field, b: &Field, half_width: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&x, &p), &q) in a.grid().nodes().iter().zip(a.samples()).zip(b.samples()) {
        if x.abs() <= half_width {
            num += (p - q) * (p - q);
            den += q * q;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// The concentrated zero-mean probe f = x e^{−x²} on a box padded by
/// [`IDENTITY_PAD`].
fn identity_probe(cfg: &SimConfig) -> Result<Field> {
    let g = Grid::new(cfg.n * IDENTITY_PAD, cfg.length * IDENTITY_PAD as f64)?;
    Ok(Field::from_fn(&g, |x| x * (-x * x).exp()))
}

/// Residuals of ∂ₓD^αf + 𝓗D^{1+α}f and [x, ∂ₓD^α]f + (1+α)D^αf, relative,
/// on the unpadded box.
pub fn operator_identity_residuals(cfg: &SimConfig) -> Result<(f64, f64)> {
    let a = cfg.alpha;
    let f = identity_probe(cfg)?;
    let half = 0.5 * cfg.length;
    let lhs = derivative(&frac_deriv(&f, a)?);
    let rhs = &hilbert(&frac_deriv(&f, 1.0 + a)?) * -1.0;
    let r1 = rel_l2_on(&lhs, &rhs, half);

    let dxa = |g: &Field| -> Result<Field> {
        apply_multiplier(g, &MultiplierSymbol::dispersion(a))
    };
    let comm = &coordinate_multiply(&dxa(&f)?) - &dxa(&coordinate_multiply(&f))?;
    let rhs = &frac_deriv(&f, a)? * -(1.0 + a);
    let r2 = rel_l2_on(&comm, &rhs, 0.25 * cfg.length);
    Ok((r1, r2))
}

/// x·e^{tL}f against e^{tL}(xf) − (1+α)t D^α e^{tL}f for the padded probe.
pub fn commuting_field_residual(cfg: &SimConfig, t: f64) -> Result<f64> {
    let a = cfg.alpha;
    let f = identity_probe(cfg)?;
    let ef = linear_propagator(&f, t, a);
    let lhs = coordinate_multiply(&ef);
    let rhs = &linear_propagator(&coordinate_multiply(&f), t, a) - &(&frac_deriv(&ef, a)? * ((1.0 + a) * t));
    Ok(rel_l2_on(&lhs, &rhs, 0.25 * cfg.length))
}

/// Scaling check λ^α u(λx, λ^{1+α}t) vs the run from λ^α u₀(λx), plus the
/// commuting-field and commutator identities.
pub fn run_symmetry_checks(cfg: &SimConfig, lambda: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    if !(cfg.alpha > -1.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("symmetry checks need alpha in (-1, 1), got {}", cfg.alpha)));
    }
    if !(0.5..=2.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [1/2, 2], got {lambda}")));
    }
    let a = cfg.alpha;
    let mut rep = ExperimentReport::new("symmetry", cfg);
    let time_factor = lambda.powf(1.0 + a);

    // Original problem on the box λL at the same dx, run to λ^{1+α}T.
    let mut big = rescaled_box(cfg, lambda)?;
    big.t_final = cfg.t_final * time_factor;
    big.dt = cfg.dt * time_factor;
    let ug = big.grid()?;
    let u0 = cfg.ic.build(&ug)?;
    if tail_fraction(&u0) > cfg.tail_tol {
        return Err(Error::Config("initial data does not fit the rescaled box".into()));
    }
    let grid = cfg.grid()?;
    let u0_spec = u0.spectrum();
    let sample = |u: &Field, spec: &crate::spectral::Spectrum, x: f64| -> f64 {
        let g = u.grid();
        let s = (x + 0.5 * g.length()) / g.dx();
        let j = s.round();
        if (s - j).abs() < 1e-9 && j >= 0.0 && (j as usize) < g.n() {
            u.samples()[j as usize]
        } else {
            spec.eval_at(x)
        }
    };
    let scale_amp = lambda.powf(a);
    let v0 = Field::new(
        &grid,
        grid.nodes().iter().map(|&x| scale_amp * sample(&u0, &u0_spec, lambda * x)).collect(),
    )?;
    if tail_fraction(&v0) > cfg.tail_tol {
        return Err(Error::Config("rescaled data exceeds the box".into()));
    }
    let (ua, vb) = rayon::join(
        || solve_from(&big, &u0, &mut no_observer()),
        || solve_from(cfg, &v0, &mut no_observer()),
    );
    let (ua, vb) = (ua?, vb?);
    for (label, t) in [("original", &ua), ("rescaled", &vb)] {
        if let Some(tr) = &t.truncated {
            return Err(Error::Horizon(format!(
                "{label} run contaminated at t = {:.4} (tail fraction {:.3e}); raise tail_tol or enlarge the box",
                tr.t, tr.tail_frac
            )));
        }
    }
    let uf = &ua.final_state;
    let uf_spec = uf.spectrum();
    let pred = Field::new(
        &grid,
        grid.nodes().iter().map(|&x| scale_amp * sample(uf, &uf_spec, lambda * x)).collect(),
    )?;
    let scaling = rel_l2_on(&vb.final_state, &pred, 0.5 * cfg.length);
    rep.push(Metric::at_most("scaling_residual", scaling, SCALING_TOL));

    let cf = commuting_field_residual(cfg, cfg.t_final)?;
    rep.push(Metric::at_most("commuting_field_residual", cf, IDENTITY_TOL));
    let (r1, r2) = operator_identity_residuals(cfg)?;
    rep.push(Metric::at_most("dx_dalpha_hilbert_residual", r1, IDENTITY_TOL));
    rep.push(Metric::at_most("commutator_residual", r2, IDENTITY_TOL));
    rep.note(format!(
        "identities on f = x·exp(-x²), box padded ×{IDENTITY_PAD}, compared on |x| <= L/4"
    ));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// wave breaking

pub const BREAKING_FACTOR: f64 = 10.0;
pub const ONSET_STABILITY_TOL: f64 = 0.05;
pub const CONTROL_ALPHA: f64 = 0.5;

/// First time ‖uₓ‖∞ exceeds [`BREAKING_FACTOR`] times its initial value.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTrack {
    pub initial: f64,
    pub peak: f64,
    pub onset: Option<f64>,
    pub contaminated_at: Option<f64>,
}

pub fn track_gradient(cfg: &SimConfig) -> Result<GradientTrack> {
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    let initial = max_abs_ux(&u0);
    let mut peak = initial;
    let mut onset = None;
    let traj = solve_from(cfg, &u0, &mut |_: usize, t: f64, u: &Field| {
        let g = max_abs_ux(u);
        peak = peak.max(g);
        if onset.is_none() && g > BREAKING_FACTOR * initial {
            onset = Some(t);
        }
    })?;
    Ok(GradientTrack {
        initial,
        peak,
        onset,
        contaminated_at: traj.truncated.map(|t| t.t),
    })
}

/// Breaking onset at dt and dt/2 plus an α = 0.5 control run of the same data.
pub fn run_wave_breaking(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if !(cfg.alpha >= -1.0 && cfg.alpha < -1.0 / 3.0) {
        return Err(Error::Config(format!(
            "wave breaking is expected for alpha in [-1, -1/3), got {}",
            cfg.alpha
        )));
    }
    let mut half = cfg.clone();
    half.dt *= 0.5;
    let mut control = cfg.clone();
    control.alpha = CONTROL_ALPHA;
    let ((a, b), c) = rayon::join(
        || rayon::join(|| track_gradient(cfg), || track_gradient(&half)),
        || track_gradient(&control),
    );
    let (a, b, c) = (a?, b?, c?);
    let mut rep = ExperimentReport::new("wave_breaking", cfg);
    let inconclusive = match (a.onset, a.contaminated_at) {
        (None, Some(_)) => true,
        (Some(t), Some(tc)) => tc < t,
        _ => false,
    };
    if inconclusive {
        rep.note("inconclusive: tail contamination before any breaking onset");
    }
    rep.push(Metric::at_least(
        "onset_detected",
        if a.onset.is_some() && !inconclusive { 1.0 } else { 0.0 },
        1.0,
        1.0,
    ));
    let stability = match (a.onset, b.onset) {
        (Some(x), Some(y)) => (x - y).abs() / x,
        _ => f64::NAN,
    };
    rep.push(Metric::at_most("onset_dt_stability", stability, ONSET_STABILITY_TOL));
    rep.push(Metric::at_most("control_gradient_growth", c.peak / c.initial, BREAKING_FACTOR));
    rep.note(format!(
        "‖u_x‖∞: initial {:.4}, peak {:.4}; onset {:?} (dt), {:?} (dt/2); control peak {:.4}",
        a.initial, a.peak, a.onset, b.onset, c.peak
    ));
    Ok(rep)
}

// ---------------------------------------------------------------------------
// solver validity

pub const RICHARDSON_TOL: f64 = 0.2;
pub const PICARD_TOL: f64 = 1e-6;

/// Observed order log₂(e(dt)/e(dt/2)) against a dt/8 reference.
pub fn richardson_order(cfg: &SimConfig, dt: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let final_at = |h: f64| -> Result<Field> {
        let mut c = cfg.clone();
        c.dt = h;
        Ok(run(&c)?.1.final_state)
    };
    let ((c, f), r) = rayon::join(
        || rayon::join(|| final_at(dt), || final_at(0.5 * dt)),
        || final_at(dt / 8.0),
    );
    let (c, f, r) = (c?, f?, r?);
    let (ec, ef) = ((&c - &r).l2_norm(), (&f - &r).l2_norm());
    let mut rep = ExperimentReport::new("richardson", cfg);
    rep.push(Metric::within("observed_order", (ec / ef).log2(), 4.0, RICHARDSON_TOL));
    rep.note(format!("errors {ec:.3e} at dt = {dt}, {ef:.3e} at dt/2 (reference dt/8)"));
    Ok(rep)
}

/// Stepper against the Picard–Duhamel oracle at time t.
pub fn picard_agreement(cfg: &SimConfig, t: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    let mut c = cfg.clone();
    c.t_final = t;
    let stepped = solve_from(&c, &u0, &mut no_observer())?.final_state;
    let oracle = picard_oracle(&u0, &c, t, 30)?;
    let rel = (&stepped - &oracle).l2_norm() / oracle.l2_norm().max(f64::MIN_POSITIVE);
    let mut rep = ExperimentReport::new("picard", cfg);
    rep.push(Metric::at_most("picard_relative_difference", rel, PICARD_TOL));
    Ok(rep)
}

/// Two identical runs must agree bit for bit.
pub fn determinism_check(cfg: &SimConfig) -> Result<ExperimentReport> {
    let (a, b) = (run(cfg)?.1, run(cfg)?.1);
    let same_state = a.final_state.samples().iter().zip(b.final_state.samples()).all(|(x, y)| x.to_bits() == y.to_bits());
    let same_diag = a.diagnostics == b.diagnostics;
    let mut rep = ExperimentReport::new("determinism", cfg);
    rep.push(Metric::within(
        "bitwise_identical",
        if same_state && same_diag { 1.0 } else { 0.0 },
        1.0,
        0.0,
    ));
    Ok(rep)
}

/// Convenience: the moment-law data −4x e^{−x²}.
pub fn moment_law_data() -> InitialCondition {
    InitialCondition::odd_gaussian(-4.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(alpha: f64, ic: InitialCondition, t: f64) -> SimConfig {
        let mut c = SimConfig::reference(alpha, ic, t);
        c.n = 1024;
        c.length = 100.0;
        c.diag_every = 10;
        c
    }

    #[test]
    fn metric_pass_is_derived() {
        assert!(Metric::within("a", 1.05, 1.0, 0.1).pass());
        assert!(!Metric::within("a", 1.2, 1.0, 0.1).pass());
        assert!(Metric::at_most("b", 1e-9, 1e-8).pass());
        assert!(!Metric::at_most("b", f64::NAN, 1e-8).pass());
        assert!(!Metric::at_least("c", f64::NAN, 1.0, 0.5).pass());
        assert!(Metric::at_least("c", 0.9, 1.0, 0.85).pass());
        let mut rep = ExperimentReport::new("x", &small(0.5, InitialCondition::gaussian(0.0, 1.0, 0.0), 1.0));
        assert!(!rep.passed(), "an empty report never passes");
        rep.push(Metric::at_most("ok", 0.0, 1.0));
        assert!(rep.passed());
        rep.push(Metric::at_most("bad", 2.0, 1.0));
        assert!(!rep.passed());
        assert!(rep.to_string().contains("bad measured=2.000000e0"));
    }

    #[test]
    fn moment_law_on_zero_data_is_exactly_zero() {
        let cfg = small(0.5, InitialCondition::gaussian(0.0, 1.0, 0.0), 0.1);
        let rep = run_moment_law(&cfg).unwrap();
        assert_eq!(rep.metric("moment_law_relative_deviation").unwrap().measured, 0.0);
        assert!(rep.passed());
    }

    #[test]
    fn moment_law_rejects_nonzero_mean() {
        let cfg = small(0.5, InitialCondition::gaussian(1.0, 1.0, 0.0), 0.1);
        let err = run_moment_law(&cfg).unwrap_err().to_string();
        assert!(err.contains("zero mean"), "{err}");
        let cfg = small(-1.0, moment_law_data(), 0.1);
        assert!(run_moment_law(&cfg).is_err());
    }

    #[test]
    fn tstar_preconditions() {
        let pos = small(0.5, InitialCondition::odd_gaussian(4.0, 1.0), 3.0);
        assert!(matches!(run_tstar(&pos), Err(Error::Config(_))));
        let short = small(0.5, moment_law_data(), 1.0);
        match run_tstar(&short) {
            Err(Error::Horizon(m)) => assert!(m.contains("t* = 2.828"), "{m}"),
            other => panic!("expected a horizon error, got {other:?}"),
        }
    }

    #[test]
    fn bh_prediction_closed_form() {
        let m0 = Complex64::new(0.0, -0.4);
        assert_eq!(bh_jump_prediction(m0, 1.0, 0.0, true), m0);
        // After a full period the source term vanishes.
        let p = bh_jump_prediction(m0, 3.0, 2.0 * std::f64::consts::PI, true);
        assert!((p - m0).norm() < 1e-14);
        let q = bh_jump_prediction(m0, 3.0, std::f64::consts::PI, true);
        assert!((q - (-m0 + 3.0)).norm() < 1e-14);
    }

    #[test]
    fn bh_linear_flow_is_a_rotation_and_full_period_identity_vanishes() {
        let mut cfg = small(-1.0, InitialCondition::odd_gaussian(1.0, 1.0), 0.5);
        cfg.nonlinear = false;
        cfg.tail_tol = 1e-2;
        let rep = run_two_time_bh(&cfg, 0.5, 0.5 + 2.0 * std::f64::consts::PI).unwrap();
        assert!(rep.metric("jump_relative_error").unwrap().measured < 1e-12);
        let r = rep.metric("identity_residual").unwrap();
        let l2sq = cfg.ic.build(&cfg.grid().unwrap()).unwrap().l2_norm_sq();
        assert!(r.measured.abs() <= 1e-6 * l2sq, "{r}");
        assert!(rep.passed());
    }

    #[test]
    fn bh_requires_alpha_minus_one() {
        let cfg = small(-0.5, InitialCondition::odd_gaussian(1.0, 1.0), 0.5);
        assert!(run_two_time_bh(&cfg, 0.1, 0.2).is_err());
    }

    #[test]
    fn symmetry_with_unit_lambda_is_round_off() {
        let cfg = small(0.5, InitialCondition::gaussian(0.1, 1.0, 0.0), 0.2);
        let rep = run_symmetry_checks(&cfg, 1.0).unwrap();
        assert!(rep.metric("scaling_residual").unwrap().measured < 1e-14);
        assert!(run_symmetry_checks(&cfg, 3.0).is_err());
        assert!(run_symmetry_checks(&small(-1.0, cfg.ic.clone(), 0.2), 1.0).is_err());
    }

    #[test]
    fn rescaled_box_needs_an_even_grid() {
        let cfg = small(0.5, InitialCondition::gaussian(0.1, 1.0, 0.0), 0.2);
        assert_eq!(rescaled_box(&cfg, 2.0).unwrap().n, 2048);
        assert!(rescaled_box(&cfg, 1.0 / 3.0).is_err());
    }

    #[test]
    fn wave_breaking_needs_the_breaking_range() {
        let cfg = small(0.5, InitialCondition::odd_gaussian(-6.0, 1.0), 1.0);
        assert!(run_wave_breaking(&cfg).is_err());
    }

    #[test]
    fn operator_identities_hold_to_round_off_for_positive_alpha() {
        let cfg = small(0.5, InitialCondition::gaussian(0.1, 1.0, 0.0), 0.2);
        let (r1, r2) = operator_identity_residuals(&cfg).unwrap();
        assert!(r1 < 1e-12 && r2 < 1e-10, "{r1} {r2}");
    }

    #[test]
    fn determinism_on_a_short_run() {
        let cfg = small(0.5, InitialCondition::gaussian(0.2, 1.0, 0.0), 0.05);
        assert!(determinism_check(&cfg).unwrap().passed());
    }
}
