//! Time integration of ∂ₜu = ∂ₓD^αu − uuₓ on the periodic box.
//!
//! The linear part is propagated exactly by e^{tk|k|^α i}; the nonlinearity is
//! advanced with classical RK4 on the integrating-factor variable (Lawson's
//! scheme). A Duhamel/Picard iteration provides an independent cross-check.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diagnostics::{self, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::spectral::{Field, Grid, Spectrum};
use crate::Complex64;

/// CFL safety factor against the advective speed max|u|.
pub const C_CFL: f64 = 0.5;

/// Default admissible fraction of L² mass in the outer 10% of the box.
pub const DEFAULT_TAIL_TOL: f64 = 1e-8;

/// Initial-data families.
#[derive(Clone, Debug, PartialEq)]
pub enum IcFamily {
    /// A·exp(−((x−x₀)/σ)²)
    Gaussian { amplitude: f64, sigma: f64, center: f64 },
    /// A·(x/σ)·exp(−(x/σ)²)
    OddGaussian { amplitude: f64, sigma: f64 },
    /// A·sin(kx)·exp(−(x/σ)²)
    SinePacket { amplitude: f64, k: f64, sigma: f64 },
    /// Seeded Gaussian coefficients on grid modes with k_lo ≤ |k| ≤ k_hi,
    /// localized by exp(−(x/(L/16))²) and scaled to max|u| = A.
    RandomBand { seed: u64, k_lo: f64, k_hi: f64, amplitude: f64 },
    /// Two-column CSV (x,u) with one row per grid node.
    File(PathBuf),
}

/// Initial condition: a family plus the optional zero-mean projection.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialCondition {
    pub family: IcFamily,
    pub zero_mean_projected: bool,
}

impl InitialCondition {
    pub fn new(family: IcFamily) -> Self {
        InitialCondition {
            family,
            zero_mean_projected: false,
        }
    }

    pub fn gaussian(amplitude: f64, sigma: f64, center: f64) -> Self {
        Self::new(IcFamily::Gaussian { amplitude, sigma, center })
    }

    pub fn odd_gaussian(amplitude: f64, sigma: f64) -> Self {
        Self::new(IcFamily::OddGaussian { amplitude, sigma })
    }

    pub fn sine_packet(amplitude: f64, k: f64, sigma: f64) -> Self {
        Self::new(IcFamily::SinePacket { amplitude, k, sigma })
    }

    pub fn random_band(seed: u64, k_lo: f64, k_hi: f64, amplitude: f64) -> Self {
        Self::new(IcFamily::RandomBand { seed, k_lo, k_hi, amplitude })
    }

    pub fn projected(mut self) -> Self {
        self.zero_mean_projected = true;
        self
    }

    /// Replaces the seed of a random_band family; other families are unchanged.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let IcFamily::RandomBand { seed: s, .. } = &mut self.family {
            *s = seed;
        }
        self
    }

    /// Samples the initial condition on `grid`.
    pub fn build(&self, grid: &Grid) -> Result<Field> {
        let field = match &self.family {
            IcFamily::Gaussian { amplitude, sigma, center } => {
                positive("sigma", *sigma)?;
                Field::from_fn(grid, |x| amplitude * (-((x - center) / sigma).powi(2)).exp())
            }
            IcFamily::OddGaussian { amplitude, sigma } => {
                positive("sigma", *sigma)?;
                Field::from_fn(grid, |x| {
                    let s = x / sigma;
                    amplitude * s * (-s * s).exp()
                })
            }
            IcFamily::SinePacket { amplitude, k, sigma } => {
                positive("sigma", *sigma)?;
                Field::from_fn(grid, |x| {
                    amplitude * (k * x).sin() * (-(x / sigma).powi(2)).exp()
                })
            }
            IcFamily::RandomBand { seed, k_lo, k_hi, amplitude } => {
                random_band(grid, *seed, *k_lo, *k_hi, *amplitude)?
            }
            IcFamily::File(path) => read_field_csv(grid, path)?,
        };
        if !field.is_finite() {
            return Err(Error::Numeric("initial condition is not finite".into()));
        }
        if self.zero_mean_projected {
            Ok(project_zero_mean(&field, self.center(), self.projection_width()))
        } else {
            Ok(field)
        }
    }

    fn center(&self) -> f64 {
        match self.family {
            IcFamily::Gaussian { center, .. } => center,
            _ => 0.0,
        }
    }

    fn projection_width(&self) -> f64 {
        match self.family {
            IcFamily::Gaussian { sigma, .. }
            | IcFamily::OddGaussian { sigma, .. }
            | IcFamily::SinePacket { sigma, .. } => 2.0 * sigma,
            _ => 2.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

/// Removes the mean by subtracting (∫u)·G for a unit-mass Gaussian G of the
/// given width at `center`, then zeroes the spectral zero mode.
pub fn project_zero_mean(f: &Field, center: f64, width: f64) -> Field {
    let grid = f.grid();
    let mass = f.integral();
    let norm = 1.0 / (width * std::f64::consts::PI.sqrt());
    let samples = grid
        .nodes()
        .iter()
        .zip(f.samples())
        .map(|(&x, &v)| v - mass * norm * (-((x - center) / width).powi(2)).exp())
        .collect();
    let shifted = Field::from_vec_unchecked(grid, samples);
    let mut spec = shifted.spectrum();
    spec.coefficients_mut()[0] = Complex64::new(0.0, 0.0);
    spec.to_field()
}

fn random_band(grid: &Grid, seed: u64, k_lo: f64, k_hi: f64, amplitude: f64) -> Result<Field> {
    if !(k_lo >= 0.0 && k_hi > k_lo) {
        return Err(Error::Config(format!(
            "random_band needs 0 <= k_lo < k_hi, got ({k_lo}, {k_hi})"
        )));
    }
    if k_hi >= grid.k_max() {
        return Err(Error::Config(format!(
            "random_band k_hi = {k_hi} must be below the Nyquist wavenumber {}",
            grid.k_max()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
    let mut any = false;
    for m in 1..(n as i64 / 2) {
        let k = grid.k1() * m as f64;
        if k < k_lo || k > k_hi {
            continue;
        }
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let z = Complex64::new(re, im);
        coeffs[grid.slot(m)] = z;
        coeffs[grid.slot(-m)] = z.conj();
        any = true;
    }
    if !any {
        return Err(Error::Config(format!(
            "random_band ({k_lo}, {k_hi}) contains no grid wavenumber"
        )));
    }
    let band = Spectrum::new(grid, coeffs)?.to_field();
    let width = grid.length() / 16.0;
    let env = Field::from_fn(grid, |x| (-(x / width).powi(2)).exp());
    let g = band.pointwise(&env);
    let peak = g.max_abs();
    Ok(&g * (amplitude / peak))
}

/// Reads a two-column x,u CSV (header optional) with one row per node.
pub fn read_field_csv(grid: &Grid, path: &std::path::Path) -> Result<Field> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(grid.n());
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let mut parts = line.split(',');
        let (_, u) = (parts.next(), parts.next());
        let u = u
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("{}:{}: expected x,u", path.display(), lineno + 1)))?;
        samples.push(u);
    }
    Field::new(grid, samples)
}

impl fmt::Display for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            IcFamily::Gaussian { amplitude, sigma, center } => {
                write!(f, "gaussian({amplitude:?},{sigma:?},{center:?})")
            }
            IcFamily::OddGaussian { amplitude, sigma } => {
                write!(f, "odd_gaussian({amplitude:?},{sigma:?})")
            }
            IcFamily::SinePacket { amplitude, k, sigma } => {
                write!(f, "sine_packet({amplitude:?},{k:?},{sigma:?})")
            }
            IcFamily::RandomBand { seed, k_lo, k_hi, amplitude } => {
                write!(f, "random_band({seed},{k_lo:?},{k_hi:?},{amplitude:?})")
            }
            IcFamily::File(p) => write!(f, "file({})", p.display()),
        }
    }
}

impl FromStr for InitialCondition {
    type Err = Error;

    /// Parses `name(arg,...)`; the projection flag is carried separately.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse initial condition '{s}'"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = s[..open].trim();
        let inner = &s[open + 1..s.len() - 1];
        if name == "file" {
            return Ok(Self::new(IcFamily::File(PathBuf::from(inner.trim()))));
        }
        let args: Vec<&str> = inner.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            args.get(i)
                .and_then(|a| a.parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("{name}: argument {} must be a number", i + 1)))
        };
        let arity = |k: usize| -> Result<()> {
            if args.len() == k {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} takes {k} arguments, got {}", args.len())))
            }
        };
        let family = match name {
            "gaussian" => {
                arity(3)?;
                IcFamily::Gaussian { amplitude: num(0)?, sigma: num(1)?, center: num(2)? }
            }
            "odd_gaussian" => {
                arity(2)?;
                IcFamily::OddGaussian { amplitude: num(0)?, sigma: num(1)? }
            }
            "sine_packet" => {
                arity(3)?;
                IcFamily::SinePacket { amplitude: num(0)?, k: num(1)?, sigma: num(2)? }
            }
            "random_band" => {
                arity(4)?;
                let seed = args[0]
                    .parse::<u64>()
                    .map_err(|_| Error::Config("random_band: seed must be a non-negative integer".into()))?;
                IcFamily::RandomBand { seed, k_lo: num(1)?, k_hi: num(2)?, amplitude: num(3)? }
            }
            other => {
                return Err(Error::Config(format!("unknown initial-condition family '{other}'")))
            }
        };
        Ok(Self::new(family))
    }
}

/// Full run configuration (grid included).
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub length: f64,
    pub alpha: f64,
    pub dt: f64,
    pub t_final: f64,
    pub dealias: bool,
    pub diag_every: usize,
    pub ic: InitialCondition,
    pub tail_tol: f64,
    pub weight_orders: Vec<f64>,
    /// Turns off −uuₓ; the run is then pure linear propagation.
    pub nonlinear: bool,
    /// Admits α up to 2 (Benjamin–Ono, KdV) beyond the studied range.
    pub extended: bool,
    /// Store the state at every `store_every`-th diagnostics row (0 = never).
    pub store_every: usize,
}

impl SimConfig {
    /// Reference-resolution defaults: n = 4096, L = 200, dt = 1e−3.
    pub fn reference(alpha: f64, ic: InitialCondition, t_final: f64) -> Self {
        SimConfig {
            n: 4096,
            length: 200.0,
            alpha,
            dt: 1e-3,
            t_final,
            dealias: true,
            diag_every: 100,
            ic,
            tail_tol: DEFAULT_TAIL_TOL,
            weight_orders: vec![],
            nonlinear: true,
            extended: false,
            store_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0.0 {
            return Err(Error::Config("alpha must be nonzero".into()));
        }
        let hi = if self.extended { 2.0 } else { 1.0 };
        let ok = if self.extended {
            self.alpha >= -1.0 && self.alpha <= hi
        } else {
            self.alpha >= -1.0 && self.alpha < hi
        };
        if !ok || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must lie in [-1, {hi}{} (got {})",
                if self.extended { "]" } else { ")" },
                self.alpha
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("t_final must be positive, got {}", self.t_final)));
        }
        if self.diag_every == 0 {
            return Err(Error::Config("diag_every must be a positive integer".into()));
        }
        if !(self.tail_tol > 0.0 && self.tail_tol <= 1.0) {
            return Err(Error::Config(format!("tail_tol must lie in (0, 1], got {}", self.tail_tol)));
        }
        if let Some(r) = self.weight_orders.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("weight orders must be non-negative, got {r}")));
        }
        Grid::new(self.n, self.length)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n, self.length)
    }

    /// Number of steps and the step actually used so that t_final is hit exactly.
    pub fn step_plan(&self) -> (usize, f64) {
        let steps = ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize;
        (steps, self.t_final / steps as f64)
    }
}

/// e^{t·∂ₓD^α} f.
pub fn linear_propagator(f: &Field, t: f64, alpha: f64) -> Field {
    let mut spec = f.spectrum();
    let ks = f.grid().wavenumbers();
    for (c, &k) in spec.coefficients_mut().iter_mut().zip(ks) {
        *c *= Complex64::from_polar(1.0, t * dispersion_frequency(k, alpha));
    }
    spec.to_field()
}

/// ω(k) = k|k|^α, with ω(0) = 0.
pub fn dispersion_frequency(k: f64, alpha: f64) -> f64 {
    if k == 0.0 {
        0.0
    } else {
        k * k.abs().powf(alpha)
    }
}

/// 2/3-rule mask: keeps |m| ≤ ⌊n/3⌋.
pub fn dealias_mask(grid: &Grid) -> Vec<f64> {
    let cut = (grid.n() / 3) as i64;
    (0..grid.n())
        .map(|i| if grid.mode(i).abs() <= cut { 1.0 } else { 0.0 })
        .collect()
}

/// Precomputed spectral operators for one grid and α.
struct Kernel {
    grid: Grid,
    omega: Vec<f64>,
    /// −ik/2 (Nyquist slot zeroed), times the dealias mask when enabled.
    nl_factor: Vec<Complex64>,
    mask: Option<Vec<f64>>,
    scratch: Vec<Complex64>,
}

impl Kernel {
    fn new(grid: &Grid, alpha: f64, dealias: bool) -> Kernel {
        let n = grid.n();
        let mask = dealias.then(|| dealias_mask(grid));
        let nl_factor = (0..n)
            .map(|i| {
                let k = grid.wavenumbers()[i];
                let mut v = if grid.mode(i) == -(n as i64) / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, -0.5 * k)
                };
                if let Some(m) = &mask {
                    v *= m[i];
                }
                v
            })
            .collect();
        Kernel {
            grid: grid.clone(),
            omega: grid.wavenumbers().iter().map(|&k| dispersion_frequency(k, alpha)).collect(),
            nl_factor,
            mask,
            scratch: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    fn propagator(&self, t: f64) -> Vec<Complex64> {
        self.omega.iter().map(|w| Complex64::from_polar(1.0, t * w)).collect()
    }

    /// N̂(û) = −(ik/2)·FFT(u²), with u dealiased first when the mask is on.
    fn nonlinear(&mut self, u_hat: &[Complex64], out: &mut [Complex64]) {
        match &self.mask {
            Some(m) => {
                for ((s, u), w) in self.scratch.iter_mut().zip(u_hat).zip(m) {
                    *s = u * w;
                }
            }
            None => self.scratch.copy_from_slice(u_hat),
        }
        self.grid.inverse_in_place(&mut self.scratch);
        for s in self.scratch.iter_mut() {
            *s = Complex64::new(s.re * s.re, 0.0);
        }
        self.grid.forward_in_place(&mut self.scratch);
        for ((o, s), f) in out.iter_mut().zip(&self.scratch).zip(&self.nl_factor) {
            *o = s * f;
        }
    }
}

/// −½∂ₓ(u²), dealiased before and after squaring when requested.
pub fn nonlinear_term(f: &Field, dealias: bool) -> Result<Field> {
    let mut kernel = Kernel::new(f.grid(), 1.0, dealias);
    let spec = f.spectrum();
    let mut out = vec![Complex64::new(0.0, 0.0); f.grid().n()];
    kernel.nonlinear(spec.coefficients(), &mut out);
    let field = Spectrum::new(f.grid(), out)?.to_field();
    if !field.is_finite() {
        return Err(Error::Numeric("nonlinear term overflowed".into()));
    }
    Ok(field)
}

/// Largest admissible step for the current state.
pub fn cfl_dt(f: &Field) -> f64 {
    C_CFL * f.grid().dx() / f.max_abs().max(1.0)
}

/// Stateful IFRK4 integrator.
pub struct Stepper {
    kernel: Kernel,
    nonlinear: bool,
    h: f64,
    e_half: Vec<Complex64>,
    e_full: Vec<Complex64>,
    u_hat: Vec<Complex64>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    d: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

impl Stepper {
    pub fn new(u0: &Field, alpha: f64, dealias: bool, nonlinear: bool, h: f64) -> Stepper {
        let kernel = Kernel::new(u0.grid(), alpha, dealias);
        let n = u0.grid().n();
        let zero = vec![Complex64::new(0.0, 0.0); n];
        Stepper {
            e_half: kernel.propagator(0.5 * h),
            e_full: kernel.propagator(h),
            kernel,
            nonlinear,
            h,
            u_hat: u0.spectrum().into_coefficients(),
            a: zero.clone(),
            b: zero.clone(),
            c: zero.clone(),
            d: zero.clone(),
            tmp: zero,
        }
    }

    pub fn dt(&self) -> f64 {
        self.h
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.u_hat
    }

    pub fn field(&self) -> Field {
        Spectrum::new(&self.kernel.grid, self.u_hat.clone())
            .expect("spectrum length matches grid")
            .to_field()
    }

    /// Advances one step of size h.
    pub fn step(&mut self) {
        let h = self.h;
        if !self.nonlinear {
            for (u, e) in self.u_hat.iter_mut().zip(&self.e_full) {
                *u *= e;
            }
            return;
        }
        let n = self.u_hat.len();
        self.kernel.nonlinear(&self.u_hat, &mut self.a);
        for i in 0..n {
            self.a[i] *= h;
            self.tmp[i] = self.e_half[i] * (self.u_hat[i] + 0.5 * self.a[i]);
        }
        self.kernel.nonlinear(&self.tmp, &mut self.b);
        for i in 0..n {
            self.b[i] *= h;
            self.tmp[i] = self.e_half[i] * self.u_hat[i] + 0.5 * self.b[i];
        }
        self.kernel.nonlinear(&self.tmp, &mut self.c);
        for i in 0..n {
            self.c[i] *= h;
            self.tmp[i] = self.e_full[i] * self.u_hat[i] + self.e_half[i] * self.c[i];
        }
        self.kernel.nonlinear(&self.tmp, &mut self.d);
        for i in 0..n {
            self.d[i] *= h;
            self.u_hat[i] = self.e_full[i] * self.u_hat[i]
                + (self.e_full[i] * self.a[i]
                    + 2.0 * self.e_half[i] * (self.b[i] + self.c[i])
                    + self.d[i])
                    / 6.0;
        }
    }
}

/// One IFRK4 step of size `dt` from `f` (CFL checked).
pub fn step_ifrk4(f: &Field, dt: f64, cfg: &SimConfig) -> Result<Field> {
    let bound = cfl_dt(f);
    if cfg.nonlinear && dt > bound {
        return Err(Error::Cfl { step: 0, t: 0.0, dt, suggested_dt: bound });
    }
    let mut s = Stepper::new(f, cfg.alpha, cfg.dealias, cfg.nonlinear, dt);
    s.step();
    let out = s.field();
    if !out.is_finite() {
        return Err(Error::NonFinite { step: 1, last_good_t: 0.0 });
    }
    Ok(out)
}

/// Fraction of L² mass in the outer 10% of the box (|x| ≥ 0.45 L).
pub fn tail_fraction(f: &Field) -> f64 {
    let edge = 0.45 * f.grid().length();
    let (mut tail, mut total) = (0.0, 0.0);
    for (x, v) in f.grid().nodes().iter().zip(f.samples()) {
        let w = v * v;
        total += w;
        if x.abs() >= edge {
            tail += w;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        tail / total
    }
}

/// Where and why a run stopped early.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncation {
    pub t: f64,
    pub tail_frac: f64,
}

/// Solution history of one run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<(f64, Field)>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub truncated: Option<Truncation>,
    pub final_state: Field,
    pub final_time: f64,
    pub steps: usize,
    pub dt_used: f64,
}

/// Per-step observer used by experiments that need more than the diagnostics rows.
pub trait StepObserver {
    fn observe(&mut self, step: usize, t: f64, u: &Field);
}

impl<F: FnMut(usize, f64, &Field)> StepObserver for F {
    fn observe(&mut self, step: usize, t: f64, u: &Field) {
        self(step, t, u)
    }
}

/// Runs `cfg` from its initial condition.
pub fn solve(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let u0 = cfg.ic.build(&grid)?;
    solve_from(cfg, &u0, &mut |_: usize, _: f64, _: &Field| {})
}

/// Runs `cfg` from explicit data, calling `observer` after every step (and at t = 0).
pub fn solve_from(cfg: &SimConfig, u0: &Field, observer: &mut dyn StepObserver) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = u0.grid().clone();
    if grid.n() != cfg.n || grid.length() != cfg.length {
        return Err(Error::Config("initial field grid does not match the configuration".into()));
    }
    let tail0 = tail_fraction(u0);
    if tail0 > cfg.tail_tol {
        return Err(Error::Config(format!(
            "initial tail fraction {tail0:.3e} exceeds tail_tol {:.3e}",
            cfg.tail_tol
        )));
    }
    let (steps, h) = cfg.step_plan();
    let mut stepper = Stepper::new(u0, cfg.alpha, cfg.dealias, cfg.nonlinear, h);
    let mut traj = Trajectory {
        times: vec![],
        states: vec![],
        diagnostics: vec![],
        truncated: None,
        final_state: u0.clone(),
        final_time: 0.0,
        steps: 0,
        dt_used: h,
    };
    let mut rows = 0usize;
    let mut record = |traj: &mut Trajectory, t: f64, u: &Field| {
        traj.times.push(t);
        traj.diagnostics.push(diagnostics::record(u, t, cfg.alpha, &cfg.weight_orders));
        if cfg.store_every > 0 && rows % cfg.store_every == 0 {
            traj.states.push((t, u.clone()));
        }
        rows += 1;
    };
    record(&mut traj, 0.0, u0);
    observer.observe(0, 0.0, u0);
    let mut u = u0.clone();
    for step in 1..=steps {
        let t_prev = (step - 1) as f64 * h;
        if cfg.nonlinear {
            let bound = cfl_dt(&u);
            if h > bound {
                return Err(Error::Cfl { step, t: t_prev, dt: h, suggested_dt: bound });
            }
        }
        stepper.step();
        let t = step as f64 * h;
        u = stepper.field();
        if !u.is_finite() {
            return Err(Error::NonFinite { step, last_good_t: t_prev });
        }
        traj.steps = step;
        traj.final_time = t;
        observer.observe(step, t, &u);
        let tail = tail_fraction(&u);
        if tail > cfg.tail_tol {
            record(&mut traj, t, &u);
            traj.truncated = Some(Truncation { t, tail_frac: tail });
            break;
        }
        if step % cfg.diag_every == 0 || step == steps {
            record(&mut traj, t, &u);
        }
    }
    traj.final_state = u;
    Ok(traj)
}

/// Duhamel fixed point on τ-nodes with spacing ≈ cfg.dt, returned at time t.
///
/// With w(σ) = e^{−σL}N̂(u(σ)), the iterate is û(τ_i) = e^{τ_i L}(û₀ + ∫₀^{τ_i} w).
/// The cumulative integral uses the third-order rule
/// W₁ = h(5w₀ + 8w₁ − w₂)/12, W_i = W_{i−1} + h(−w_{i−2} + 8w_{i−1} + 5w_i)/12.
pub fn picard_oracle(u0: &Field, cfg: &SimConfig, t: f64, iterations: usize) -> Result<Field> {
    let grid = u0.grid().clone();
    let mut kernel = Kernel::new(&grid, cfg.alpha, cfg.dealias);
    let n = grid.n();
    let nodes = ((t / cfg.dt).ceil() as usize).max(2);
    let h = t / nodes as f64;
    let u0_hat = u0.spectrum().into_coefficients();
    let prop: Vec<Vec<Complex64>> = (0..=nodes).map(|i| kernel.propagator(i as f64 * h)).collect();
    let mut iterate: Vec<Vec<Complex64>> = prop
        .iter()
        .map(|e| e.iter().zip(&u0_hat).map(|(a, b)| a * b).collect())
        .collect();
    let mut prev_diff = f64::INFINITY;
    let norm = u0.l2_norm().max(1e-300);
    let mut w = vec![vec![Complex64::new(0.0, 0.0); n]; nodes + 1];
    let mut nl = vec![Complex64::new(0.0, 0.0); n];
    for it in 1..=iterations {
        for i in 0..=nodes {
            kernel.nonlinear(&iterate[i], &mut nl);
            for j in 0..n {
                w[i][j] = prop[i][j].conj() * nl[j];
            }
        }
        let mut cum = vec![Complex64::new(0.0, 0.0); n];
        let mut next = Vec::with_capacity(nodes + 1);
        next.push(u0_hat.clone());
        for i in 1..=nodes {
            for j in 0..n {
                cum[j] += if i == 1 {
                    h * (5.0 * w[0][j] + 8.0 * w[1][j] - w[2][j]) / 12.0
                } else {
                    h * (-w[i - 2][j] + 8.0 * w[i - 1][j] + 5.0 * w[i][j]) / 12.0
                };
            }
            next.push(
                (0..n)
                    .map(|j| prop[i][j] * (u0_hat[j] + cum[j]))
                    .collect::<Vec<_>>(),
            );
        }
        let diff = spectral_l2(&grid, &next[nodes], &iterate[nodes]);
        iterate = next;
        if !diff.is_finite() || (it >= 2 && diff > prev_diff && diff > 1e-13 * norm) {
            return Err(Error::OracleDivergence { iteration: it, prev: prev_diff, next: diff });
        }
        prev_diff = diff;
    }
    let out = Spectrum::new(&grid, iterate.pop().expect("nodes >= 2"))?.to_field();
    Ok(out)
}

fn spectral_l2(grid: &Grid, a: &[Complex64], b: &[Complex64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    (s * grid.dx() / grid.n() as f64).sqrt()
}
