//! Periodic grid, spectral transforms and the Fourier-multiplier operators
//! (D^s, Hilbert, Bessel potential, smooth low-pass projector) together with
//! the truncated weight ⟨x⟩_N^θ.
//!
//! Transform convention: `Spectrum` stores the unnormalized DFT
//! `F_m = Σ_j f_j e^{-2πi jm/n}` in FFT order. The continuous Fourier transform
//! û(ξ) = ∫ e^{-ixξ} u(x) dx is approximated at ξ = k_m by `dx·e^{-ik_m x_0}·F_m`
//! with x_0 = -L/2. Plancherel reads `Σ|f_j|² dx = (dx/n) Σ|F_m|²`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

struct GridInner {
    n: usize,
    length: f64,
    dx: f64,
    nodes: Vec<f64>,
    wavenumbers: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Uniform periodic grid on [-L/2, L/2) with its wavenumbers in FFT order.
///
/// Cloning is cheap; clones share the FFT plans.
#[derive(Clone)]
pub struct Grid {
    inner: Arc<GridInner>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n", &self.n())
            .field("length", &self.length())
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.n() == other.n() && self.length() == other.length())
    }
}

impl Grid {
    /// Builds a grid with `n` samples on a box of length `length`.
    pub fn new(n: usize, length: f64) -> Result<Grid> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "grid size n must be even and at least 8, got {n}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Config(format!(
                "box length must be positive and finite, got {length}"
            )));
        }
        let dx = length / n as f64;
        let x0 = -0.5 * length;
        let nodes = (0..n).map(|j| x0 + j as f64 * dx).collect();
        let wavenumbers = (0..n)
            .map(|i| 2.0 * PI * signed_mode(i, n) as f64 / length)
            .collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        Ok(Grid {
            inner: Arc::new(GridInner {
                n,
                length,
                dx,
                nodes,
                wavenumbers,
                forward,
                inverse,
            }),
        })
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn length(&self) -> f64 {
        self.inner.length
    }

    pub fn dx(&self) -> f64 {
        self.inner.dx
    }

    /// x_j = -L/2 + j·dx.
    pub fn nodes(&self) -> &[f64] {
        &self.inner.nodes
    }

    /// k for each FFT slot; slot i carries mode m = i for i < n/2 and i - n otherwise.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.inner.wavenumbers
    }

    /// Smallest positive wavenumber 2π/L.
    pub fn k1(&self) -> f64 {
        2.0 * PI / self.inner.length
    }

    /// Largest resolved |k| (the Nyquist wavenumber π/dx).
    pub fn k_max(&self) -> f64 {
        PI / self.inner.dx
    }

    /// FFT slot of the signed mode index m ∈ [-n/2, n/2).
    pub fn slot(&self, m: i64) -> usize {
        let n = self.inner.n as i64;
        debug_assert!(-n / 2 <= m && m < n / 2);
        m.rem_euclid(n) as usize
    }

    /// Signed mode index for an FFT slot.
    pub fn mode(&self, slot: usize) -> i64 {
        signed_mode(slot, self.inner.n)
    }

    pub(crate) fn forward_in_place(&self, data: &mut [Complex64]) {
        self.inner.forward.process(data);
    }

    /// Inverse DFT including the 1/n normalization.
    pub(crate) fn inverse_in_place(&self, data: &mut [Complex64]) {
        self.inner.inverse.process(data);
        let s = 1.0 / self.inner.n as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

fn signed_mode(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Real field sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    samples: Vec<f64>,
}

impl Field {
    /// Wraps samples, checking length and finiteness.
    pub fn new(grid: &Grid, samples: Vec<f64>) -> Result<Field> {
        if samples.len() != grid.n() {
            return Err(Error::Config(format!(
                "expected {} samples, got {}",
                grid.n(),
                samples.len()
            )));
        }
        if let Some(j) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at node {j}")));
        }
        Ok(Field {
            grid: grid.clone(),
            samples,
        })
    }

    pub(crate) fn from_vec_unchecked(grid: &Grid, samples: Vec<f64>) -> Field {
        Field {
            grid: grid.clone(),
            samples,
        }
    }

    pub fn zeros(grid: &Grid) -> Field {
        Field::from_vec_unchecked(grid, vec![0.0; grid.n()])
    }

    /// Samples `f` at the grid nodes.
    pub fn from_fn<F: Fn(f64) -> f64>(grid: &Grid, f: F) -> Field {
        Field::from_vec_unchecked(grid, grid.nodes().iter().map(|&x| f(x)).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub fn spectrum(&self) -> Spectrum {
        let mut data: Vec<Complex64> = self
            .samples
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.grid.forward_in_place(&mut data);
        Spectrum {
            grid: self.grid.clone(),
            coefficients: data,
        }
    }

    /// Σ f_j dx.
    pub fn integral(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.grid.dx()
    }

    /// Σ f_j g_j dx.
    pub fn inner(&self, other: &Field) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.grid.dx()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Pointwise map.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Field {
        Field::from_vec_unchecked(&self.grid, self.samples.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise product.
    pub fn pointwise(&self, other: &Field) -> Field {
        Field::from_vec_unchecked(
            &self.grid,
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    /// Trigonometric interpolant evaluated at an arbitrary x (the Nyquist
    /// mode enters as a cosine so the result stays real).
    pub fn eval_at(&self, x: f64) -> f64 {
        self.spectrum().eval_at(x)
    }
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        Field::from_vec_unchecked(
            &self.grid,
            self.samples
                .iter()
                .zip(&rhs.samples)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        Field::from_vec_unchecked(
            &self.grid,
            self.samples
                .iter()
                .zip(&rhs.samples)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.map(|v| v * rhs)
    }
}

/// DFT coefficients of a field, in FFT order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    grid: Grid,
    coefficients: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(grid: &Grid, coefficients: Vec<Complex64>) -> Result<Spectrum> {
        if coefficients.len() != grid.n() {
            return Err(Error::Config(format!(
                "expected {} coefficients, got {}",
                grid.n(),
                coefficients.len()
            )));
        }
        Ok(Spectrum {
            grid: grid.clone(),
            coefficients,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<Complex64> {
        self.coefficients
    }

    /// Coefficient of the signed mode m.
    pub fn mode(&self, m: i64) -> Complex64 {
        self.coefficients[self.grid.slot(m)]
    }

    /// Approximation of the continuous transform û(k_m) = ∫ e^{-ik_m x} u dx.
    pub fn continuous_ft(&self, m: i64) -> Complex64 {
        let k = 2.0 * PI * m as f64 / self.grid.length();
        let x0 = -0.5 * self.grid.length();
        self.mode(m) * Complex64::from_polar(self.grid.dx(), -k * x0)
    }

    /// Inverse transform, complex samples.
    pub fn to_complex_samples(&self) -> Vec<Complex64> {
        let mut data = self.coefficients.clone();
        self.grid.inverse_in_place(&mut data);
        data
    }

    /// Inverse transform keeping the real part.
    pub fn to_field(&self) -> Field {
        let data = self.to_complex_samples();
        Field::from_vec_unchecked(&self.grid, data.iter().map(|c| c.re).collect())
    }

    /// Pointwise product with precomputed symbol values (FFT order).
    pub fn multiply(&mut self, symbol: &[Complex64]) {
        for (c, s) in self.coefficients.iter_mut().zip(symbol) {
            *c *= s;
        }
    }

    /// Trigonometric interpolant at x.
    pub fn eval_at(&self, x: f64) -> f64 {
        let n = self.grid.n();
        let x0 = -0.5 * self.grid.length();
        let mut acc = 0.0;
        for (i, c) in self.coefficients.iter().enumerate() {
            let m = self.grid.mode(i);
            let k = self.grid.wavenumbers()[i];
            let phase = k * (x - x0);
            if m == -(n as i64) / 2 {
                acc += c.re * phase.cos();
            } else {
                acc += c.re * phase.cos() - c.im * phase.sin();
            }
        }
        acc / n as f64
    }
}

type SymbolFn = dyn Fn(f64) -> Complex64 + Send + Sync;

/// Fourier multiplier m(k) with an explicit value at k = 0.
#[derive(Clone)]
pub struct MultiplierSymbol {
    name: String,
    zero_mode_value: Complex64,
    evaluator: Arc<SymbolFn>,
}

impl fmt::Debug for MultiplierSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiplierSymbol")
            .field("name", &self.name)
            .field("zero_mode_value", &self.zero_mode_value)
            .finish()
    }
}

impl MultiplierSymbol {
    /// General symbol; `evaluator` is only called for k ≠ 0.
    pub fn new<F>(name: impl Into<String>, zero_mode_value: Complex64, evaluator: F) -> Self
    where
        F: Fn(f64) -> Complex64 + Send + Sync + 'static,
    {
        MultiplierSymbol {
            name: name.into(),
            zero_mode_value,
            evaluator: Arc::new(evaluator),
        }
    }

    /// Real-valued symbol.
    pub fn real<F>(name: impl Into<String>, zero_mode_value: f64, evaluator: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(name, Complex64::new(zero_mode_value, 0.0), move |k| {
            Complex64::new(evaluator(k), 0.0)
        })
    }

    pub fn identity() -> Self {
        Self::real("identity", 1.0, |_| 1.0)
    }

    /// ∂ₓ, symbol ik.
    pub fn derivative() -> Self {
        Self::new("d/dx", Complex64::new(0.0, 0.0), |k| Complex64::new(0.0, k))
    }

    /// D^s, symbol |k|^s; zero mode 1 when s = 0 and 0 otherwise.
    pub fn frac_deriv(s: f64) -> Self {
        let z = if s == 0.0 { 1.0 } else { 0.0 };
        Self::real(format!("D^{s}"), z, move |k| k.abs().powf(s))
    }

    /// Hilbert transform, symbol -i·sign(k) with sign(0) = 0.
    pub fn hilbert() -> Self {
        Self::new("H", Complex64::new(0.0, 0.0), |k| {
            Complex64::new(0.0, -k.signum())
        })
    }

    /// Bessel potential J^s, symbol (1+k²)^{s/2}.
    pub fn bessel(s: f64) -> Self {
        Self::real(format!("J^{s}"), 1.0, move |k| (1.0 + k * k).powf(0.5 * s))
    }

    /// Dispersion ∂ₓD^α, symbol ik|k|^α.
    pub fn dispersion(alpha: f64) -> Self {
        Self::new(
            format!("d/dx D^{alpha}"),
            Complex64::new(0.0, 0.0),
            move |k| Complex64::new(0.0, k * k.abs().powf(alpha)),
        )
    }

    /// Linear propagator e^{itk|k|^α}.
    pub fn propagator(alpha: f64, t: f64) -> Self {
        Self::new(
            format!("exp(t d/dx D^{alpha}), t={t}"),
            Complex64::new(1.0, 0.0),
            move |k| Complex64::from_polar(1.0, t * k * k.abs().powf(alpha)),
        )
    }

    /// Smooth low-pass φ(k/a).
    pub fn cutoff(spec: CutoffSpec) -> Self {
        let a = spec.a;
        Self::real(format!("P^phi(a={a})"), 1.0, move |k| bump(k / a))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_mode_value(&self) -> Complex64 {
        self.zero_mode_value
    }

    pub fn eval(&self, k: f64) -> Complex64 {
        if k == 0.0 {
            self.zero_mode_value
        } else {
            (self.evaluator)(k)
        }
    }

    /// Pointwise product of two symbols.
    pub fn product(&self, other: &MultiplierSymbol) -> MultiplierSymbol {
        let (a, b) = (self.evaluator.clone(), other.evaluator.clone());
        MultiplierSymbol {
            name: format!("{}*{}", self.name, other.name),
            zero_mode_value: self.zero_mode_value * other.zero_mode_value,
            evaluator: Arc::new(move |k| a(k) * b(k)),
        }
    }

    /// Symbol values on the grid's wavenumbers, FFT order.
    pub fn sample(&self, grid: &Grid) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(grid.n());
        for &k in grid.wavenumbers() {
            let v = self.eval(k);
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::Numeric(format!(
                    "symbol {} is not finite at k = {k}",
                    self.name
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Whether m(-k) = conj(m(k)) on every grid pair (the Nyquist slot is
    /// self-paired and excluded).
    pub fn is_hermitian_on(&self, grid: &Grid) -> bool {
        let n = grid.n() as i64;
        (1..n / 2).all(|m| {
            let k = grid.k1() * m as f64;
            let (p, q) = (self.eval(k), self.eval(-k));
            (p - q.conj()).norm() <= 1e-14 * (1.0 + p.norm())
        }) && self.zero_mode_value.im == 0.0
    }
}

/// Flat-top bump: 1 on |ξ| ≤ 1, 0 on |ξ| ≥ 2, C^∞ in between.
pub fn bump(xi: f64) -> f64 {
    let r = xi.abs();
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        1.0 - smooth_step(r - 1.0)
    }
}

/// S(r) = e^{-1/r} / (e^{-1/r} + e^{-1/(1-r)}) on (0,1), clamped outside.
pub fn smooth_step(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else if r >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / r).exp();
        let b = (-1.0 / (1.0 - r)).exp();
        a / (a + b)
    }
}

/// Low-pass cutoff radius: φ(k/a) is 1 for |k| ≤ a and 0 for |k| ≥ 2a.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffSpec {
    pub a: f64,
}

/// Multiplies the spectrum of `f` by `m` and returns the real field.
/// Fails for symbols that are not Hermitian on the grid; use
/// [`apply_multiplier_complex`] for those.
pub fn apply_multiplier(f: &Field, m: &MultiplierSymbol) -> Result<Field> {
    let symbol = m.sample(f.grid())?;
    if !m.is_hermitian_on(f.grid()) {
        return Err(Error::Domain(format!(
            "symbol {} lacks conjugate symmetry; output would be complex",
            m.name()
        )));
    }
    let mut spec = f.spectrum();
    spec.multiply(&symbol);
    Ok(spec.to_field())
}

/// Multiplier application keeping the complex output.
pub fn apply_multiplier_complex(f: &Field, m: &MultiplierSymbol) -> Result<Vec<Complex64>> {
    let symbol = m.sample(f.grid())?;
    let mut spec = f.spectrum();
    spec.multiply(&symbol);
    Ok(spec.to_complex_samples())
}

/// Relative tolerance on the mean for negative-order derivatives:
/// |∫f| ≤ MEAN_TOL·√L·‖f‖₂ (the Cauchy–Schwarz bound scaled down).
pub const MEAN_TOL: f64 = 1e-10;

/// Checks that `f` has zero mean to within [`MEAN_TOL`].
pub fn require_zero_mean(f: &Field, what: &str) -> Result<()> {
    let mean = f.integral();
    let scale = f.grid().length().sqrt() * f.l2_norm();
    if mean.abs() > MEAN_TOL * scale {
        return Err(Error::Domain(format!(
            "{what} requires a zero-mean field; ∫f dx = {mean:.6e}"
        )));
    }
    Ok(())
}

/// D^s f.
pub fn frac_deriv(f: &Field, s: f64) -> Result<Field> {
    if s < 0.0 {
        require_zero_mean(f, &format!("D^{s}"))?;
    }
    apply_multiplier(f, &MultiplierSymbol::frac_deriv(s))
}

/// Hilbert transform.
pub fn hilbert(f: &Field) -> Field {
    apply_multiplier(f, &MultiplierSymbol::hilbert()).expect("Hilbert symbol is finite")
}

/// ∂ₓf.
pub fn derivative(f: &Field) -> Field {
    apply_multiplier(f, &MultiplierSymbol::derivative()).expect("derivative symbol is finite")
}

/// J^s f.
pub fn bessel(f: &Field, s: f64) -> Field {
    apply_multiplier(f, &MultiplierSymbol::bessel(s)).expect("Bessel symbol is finite")
}

/// ∂ₓD^α f.
pub fn dispersion(f: &Field, alpha: f64) -> Result<Field> {
    apply_multiplier(f, &MultiplierSymbol::dispersion(alpha))
}

/// P^φ f with cutoff radius `cutoff.a`.
pub fn projector_low(f: &Field, cutoff: CutoffSpec) -> Result<Field> {
    if !(cutoff.a > 0.0) || cutoff.a > f.grid().k_max() {
        return Err(Error::Config(format!(
            "cutoff a = {} must lie in (0, {}] (Nyquist)",
            cutoff.a,
            f.grid().k_max()
        )));
    }
    apply_multiplier(f, &MultiplierSymbol::cutoff(cutoff))
}

/// x·f.
pub fn coordinate_multiply(f: &Field) -> Field {
    Field::from_vec_unchecked(
        f.grid(),
        f.samples()
            .iter()
            .zip(f.grid().nodes())
            .map(|(v, x)| v * x)
            .collect(),
    )
}

/// ⟨x⟩_N^θ: (1+x²)^{θ/2} for |x| ≤ N, (2N)^θ for |x| ≥ 3N.
///
/// On [N, 3N] the derivative is the inner derivative faded out by a quintic
/// smoothstep over the first fraction σ of the interval, plus a non-negative
/// multiple of the bump 140τ³(1-τ)³ that makes the total rise land exactly on
/// (2N)^θ. σ = 1 unless the faded inner rise alone would overshoot. The result
/// is C³ across both joins and needs N > 1/√3 so that (2N)^θ exceeds ⟨N⟩^θ.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedWeight {
    n_w: f64,
    theta: f64,
    fade: f64,
    bump_amplitude: f64,
}

impl TruncatedWeight {
    pub fn new(n_w: f64, theta: f64) -> Result<TruncatedWeight> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::Config(format!(
                "weight exponent theta must lie in (0, 1], got {theta}"
            )));
        }
        if !(n_w > 0.0 && n_w.is_finite()) {
            return Err(Error::Config(format!(
                "weight radius N must be positive, got {n_w}"
            )));
        }
        let mut w = TruncatedWeight {
            n_w,
            theta,
            fade: 1.0,
            bump_amplitude: 0.0,
        };
        let rise = (2.0 * n_w).powf(theta) - w.inner(n_w);
        if rise <= 0.0 {
            return Err(Error::Config(format!(
                "weight radius N = {n_w} too small: need N > 1/sqrt(3) for a monotone profile"
            )));
        }
        let mut faded = w.integrate_derivative(n_w, 3.0 * n_w);
        if faded > rise {
            // Shrink the fade window until the inner part uses half the rise.
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..80 {
                w.fade = 0.5 * (lo + hi);
                if w.integrate_derivative(n_w, 3.0 * n_w) > 0.5 * rise {
                    hi = w.fade;
                } else {
                    lo = w.fade;
                }
            }
            w.fade = lo;
            faded = w.integrate_derivative(n_w, 3.0 * n_w);
        }
        w.bump_amplitude = (rise - faded) / (2.0 * n_w);
        Ok(w)
    }

    pub fn n_w(&self) -> f64 {
        self.n_w
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn inner(&self, r: f64) -> f64 {
        (1.0 + r * r).powf(0.5 * self.theta)
    }

    fn inner_derivative(&self, r: f64) -> f64 {
        self.theta * r * (1.0 + r * r).powf(0.5 * self.theta - 1.0)
    }

    /// d/dr of the weight for r ≥ 0.
    pub fn derivative_radial(&self, r: f64) -> f64 {
        let n = self.n_w;
        if r <= n {
            self.inner_derivative(r)
        } else if r >= 3.0 * n {
            0.0
        } else {
            let tau = (r - n) / (2.0 * n);
            let s = (tau / self.fade).min(1.0);
            let q = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
            let b = 140.0 * (tau * (1.0 - tau)).powi(3);
            self.inner_derivative(r) * (1.0 - q) + self.bump_amplitude * b
        }
    }

    fn integrate_derivative(&self, a: f64, b: f64) -> f64 {
        // The fade edge is a breakpoint of the integrand's smoothness class.
        let rule = GaussLegendre::g32();
        let edge = self.n_w + 2.0 * self.n_w * self.fade;
        let mut cuts = vec![a];
        if edge > a && edge < b {
            cuts.push(edge);
        }
        cuts.push(b);
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let pieces = 4;
            let h = (w[1] - w[0]) / pieces as f64;
            for i in 0..pieces {
                let lo = w[0] + i as f64 * h;
                acc += rule.integrate(lo, lo + h, |r| self.derivative_radial(r));
            }
        }
        acc
    }

    /// ⟨x⟩_N^θ.
    pub fn eval(&self, x: f64) -> f64 {
        let r = x.abs();
        let n = self.n_w;
        if r <= n {
            self.inner(r)
        } else if r >= 3.0 * n {
            (2.0 * n).powf(self.theta)
        } else {
            self.inner(n) + self.integrate_derivative(n, r)
        }
    }

    /// d/dx ⟨x⟩_N^θ.
    pub fn derivative(&self, x: f64) -> f64 {
        self.derivative_radial(x.abs()) * x.signum()
    }
}

/// Samples ⟨x⟩_N^θ on the grid nodes; requires the flat region to fit in the box.
pub fn truncated_weight(grid: &Grid, n_w: f64, theta: f64) -> Result<Vec<f64>> {
    if 3.0 * n_w >= 0.5 * grid.length() {
        return Err(Error::Config(format!(
            "truncated weight needs 3N < L/2; N = {n_w}, L = {}",
            grid.length()
        )));
    }
    let w = TruncatedWeight::new(n_w, theta)?;
    Ok(grid.nodes().iter().map(|&x| w.eval(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pi_grid(n: usize) -> Grid {
        Grid::new(n, 2.0 * PI).unwrap()
    }

    fn max_diff(a: &Field, b: &Field) -> f64 {
        a.samples()
            .iter()
            .zip(b.samples())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn grid_basics() {
        let g = Grid::new(8, 2.0 * PI).unwrap();
        assert!((g.dx() - PI / 4.0).abs() < 1e-15);
        let mut ks: Vec<f64> = g.wavenumbers().to_vec();
        ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(ks, vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.nodes()[0], -PI);

        let g = Grid::new(4096, 200.0).unwrap();
        assert!((g.dx() - 0.048828125).abs() < 1e-15);
        assert!((g.k_max() - 64.339).abs() < 1e-3);

        assert!(matches!(Grid::new(8, -1.0), Err(Error::Config(_))));
        assert!(matches!(Grid::new(9, 1.0), Err(Error::Config(_))));
        assert!(matches!(Grid::new(6, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn multiplier_examples() {
        let g = two_pi_grid(64);
        let c2 = Field::from_fn(&g, |x| (2.0 * x).cos());
        let out = apply_multiplier(&c2, &MultiplierSymbol::identity()).unwrap();
        assert!(max_diff(&out, &c2) < 1e-14);

        let s1 = Field::from_fn(&g, f64::sin);
        let out = apply_multiplier(&s1, &MultiplierSymbol::derivative()).unwrap();
        assert!(max_diff(&out, &Field::from_fn(&g, f64::cos)) < 1e-13);

        let out = apply_multiplier(&c2, &MultiplierSymbol::frac_deriv(0.5)).unwrap();
        assert!(max_diff(&out, &(&c2 * 2f64.sqrt())) < 1e-13);
    }

    #[test]
    fn non_finite_symbol_is_numeric_error() {
        let g = two_pi_grid(16);
        let f = Field::from_fn(&g, f64::sin);
        let m = MultiplierSymbol::real("bad", 0.0, |k| if k > 2.5 { f64::NAN } else { 1.0 });
        assert!(matches!(apply_multiplier(&f, &m), Err(Error::Numeric(_))));
    }

    #[test]
    fn frac_deriv_examples() {
        let g = two_pi_grid(64);
        let c3 = Field::from_fn(&g, |x| (3.0 * x).cos());
        let out = frac_deriv(&c3, 0.5).unwrap();
        assert!(max_diff(&out, &(&c3 * 3f64.sqrt())) < 1e-13);

        let f = Field::from_fn(&g, |x| x.sin() + (2.0 * x).sin());
        let out = frac_deriv(&f, -0.5).unwrap();
        let want = Field::from_fn(&g, |x| x.sin() + (2.0 * x).sin() / 2f64.sqrt());
        assert!(max_diff(&out, &want) < 1e-13);

        let g = Grid::new(1024, 40.0).unwrap();
        let gauss = Field::from_fn(&g, |x| (-x * x).exp());
        match frac_deriv(&gauss, -0.5) {
            Err(Error::Domain(msg)) => assert!(msg.contains("1.772"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
        // D^0 is the identity, mean included.
        let out = frac_deriv(&gauss, 0.0).unwrap();
        assert!(max_diff(&out, &gauss) < 1e-14);
    }

    #[test]
    fn hilbert_examples() {
        let g = two_pi_grid(64);
        let s2 = Field::from_fn(&g, |x| (2.0 * x).sin());
        let c2 = Field::from_fn(&g, |x| (2.0 * x).cos());
        assert!(max_diff(&hilbert(&s2), &(&c2 * -1.0)) < 1e-14);
        assert!(max_diff(&hilbert(&c2), &s2) < 1e-14);
        let s1 = Field::from_fn(&g, f64::sin);
        assert!(max_diff(&hilbert(&hilbert(&s1)), &(&s1 * -1.0)) < 1e-14);
        // H² = -(I - mean).
        let f = Field::from_fn(&g, |x| 0.3 + x.cos());
        let hh = hilbert(&hilbert(&f));
        assert!(max_diff(&hh, &Field::from_fn(&g, |x| -x.cos())) < 1e-14);
    }

    #[test]
    fn projector_examples() {
        let g = two_pi_grid(64);
        let s1 = Field::from_fn(&g, f64::sin);
        let c = CutoffSpec { a: 4.0 };
        assert!(max_diff(&projector_low(&s1, c).unwrap(), &s1) < 1e-14);
        let s10 = Field::from_fn(&g, |x| (10.0 * x).sin());
        assert!(projector_low(&s10, c).unwrap().max_abs() < 1e-14);
        let sum = &s1 + &s10;
        let lhs = projector_low(&sum, c).unwrap();
        let rhs = &projector_low(&s1, c).unwrap() + &projector_low(&s10, c).unwrap();
        assert!(max_diff(&lhs, &rhs) < 1e-14);
        assert!(matches!(
            projector_low(&s1, CutoffSpec { a: 40.0 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coordinate_multiply_examples() {
        let g = Grid::new(1024, 40.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let xf = coordinate_multiply(&f);
        assert!(max_diff(&xf, &Field::from_fn(&g, |x| x * (-x * x).exp())) < 1e-15);
        let xxf = coordinate_multiply(&xf);
        assert!(max_diff(&xxf, &Field::from_fn(&g, |x| x * x * (-x * x).exp())) < 1e-15);
        assert!(xf.integral().abs() < 1e-12 * f.l2_norm());
    }

    #[test]
    fn spectrum_continuous_ft_of_gaussian() {
        // ∫ e^{-ikx} e^{-x²} dx = √π e^{-k²/4}
        let g = Grid::new(2048, 80.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let s = f.spectrum();
        for m in [0i64, 1, 5, -7] {
            let k = 2.0 * PI * m as f64 / 80.0;
            let got = s.continuous_ft(m);
            let want = PI.sqrt() * (-k * k / 4.0).exp();
            assert!((got.re - want).abs() < 1e-13 && got.im.abs() < 1e-13);
        }
    }

    #[test]
    fn eval_at_interpolates() {
        let g = Grid::new(256, 40.0).unwrap();
        let f = Field::from_fn(&g, |x| (-(x - 0.3) * (x - 0.3)).exp());
        for x in [0.123, -1.7, 2.5] {
            assert!((f.eval_at(x) - (-(x - 0.3) * (x - 0.3)).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn dispersion_equals_minus_hilbert_of_derivative_order() {
        let g = Grid::new(2048, 100.0).unwrap();
        let f = Field::from_fn(&g, |x| x * (-x * x).exp());
        for alpha in [-0.9, -0.5, 0.3, 0.5, 0.99] {
            let lhs = dispersion(&f, alpha).unwrap();
            let rhs = &hilbert(&frac_deriv(&f, 1.0 + alpha).unwrap()) * -1.0;
            let err = (&lhs - &rhs).l2_norm() / lhs.l2_norm();
            assert!(err < 1e-12, "alpha {alpha}: {err}");
        }
    }

    #[test]
    fn hilbert_commutes_with_x_on_zero_mean() {
        let g = Grid::new(4096, 400.0).unwrap();
        let f = Field::from_fn(&g, |x| x * (-x * x).exp());
        // On the core |x| ≤ 10 the residual is the periodic-kernel defect, O(L^{-2}).
        let core = |g: &Grid, v: &Field| -> f64 {
            g.nodes()
                .iter()
                .zip(v.samples())
                .filter(|(x, _)| x.abs() <= 10.0)
                .map(|(_, r)| r * r * g.dx())
                .sum::<f64>()
                .sqrt()
        };
        let lhs = &hilbert(&coordinate_multiply(&f)) - &coordinate_multiply(&hilbert(&f));
        let r_small = core(&g, &lhs) / f.l2_norm();
        assert!(r_small < 1e-3, "{r_small}");
        let g2 = Grid::new(8192, 800.0).unwrap();
        let f2 = Field::from_fn(&g2, |x| x * (-x * x).exp());
        let lhs2 = &hilbert(&coordinate_multiply(&f2)) - &coordinate_multiply(&hilbert(&f2));
        let r_large = core(&g2, &lhs2) / f2.l2_norm();
        assert!(r_large < 0.3 * r_small, "{r_small} {r_large}");
        let gauss = Field::from_fn(&g, |x| (-x * x).exp());
        let lhs = &hilbert(&coordinate_multiply(&gauss)) - &coordinate_multiply(&hilbert(&gauss));
        // nonzero mean: [H,x]f = -(1/π)∫f, a constant.
        let mid = lhs.samples()[g.n() / 2];
        assert!((mid + PI.sqrt() / PI).abs() < 1e-3, "{mid}");
    }

    #[test]
    fn truncated_weight_examples() {
        let w = TruncatedWeight::new(5.0, 0.5).unwrap();
        assert_eq!(w.eval(0.0), 1.0);
        assert!((w.eval(20.0) - 10f64.sqrt()).abs() < 1e-12);
        assert!((w.eval(15.0) - 10f64.sqrt()).abs() < 1e-12);
        let w = TruncatedWeight::new(7.0, 1.0).unwrap();
        assert!((w.eval(7.0) - 50f64.sqrt()).abs() < 1e-14);
        let g = Grid::new(256, 100.0).unwrap();
        assert!(matches!(truncated_weight(&g, 17.0, 0.5), Err(Error::Config(_))));
        assert_eq!(truncated_weight(&g, 16.0, 0.5).unwrap().len(), 256);
    }

    #[test]
    fn truncated_weight_monotone_and_lipschitz() {
        for n_w in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            for theta in [0.25, 0.5, 0.9, 1.0] {
                let w = TruncatedWeight::new(n_w, theta).unwrap();
                let mut prev = w.eval(0.0);
                let steps = 4000;
                for i in 1..=steps {
                    let r = 4.0 * n_w * i as f64 / steps as f64;
                    let d = w.derivative_radial(r);
                    assert!(d >= -1e-12, "N={n_w} θ={theta} r={r}: d={d}");
                    assert!(d <= 1.0 + 1e-10, "N={n_w} θ={theta} r={r}: d={d}");
                    let v = w.eval(r);
                    assert!(v >= prev - 1e-12);
                    prev = v;
                }
                // continuity at 3N
                let right = (2.0 * n_w).powf(theta);
                assert!((w.eval(3.0 * n_w - 1e-9) - right).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn truncated_weight_higher_derivatives_uniform_in_n() {
        // Any bridge from slope ~1 to slope 0 over [N, 3N] has |∂²| ~ 1/N, so the
        // achievable uniform bound is |∂^l ⟨x⟩_N| ≤ c_l ⟨x⟩^{1-l}.
        let mut worst = [0.0f64; 2];
        for n_w in [4.0, 8.0, 16.0, 32.0, 64.0] {
            let w = TruncatedWeight::new(n_w, 1.0).unwrap();
            let h = 1e-3 * n_w;
            for i in 1..400 {
                let r = 0.5 * n_w + 3.0 * n_w * i as f64 / 400.0;
                let d = |x: f64| w.derivative_radial(x);
                let d2 = (d(r + h) - d(r - h)) / (2.0 * h);
                let d3 = (d(r + h) - 2.0 * d(r) + d(r - h)) / (h * h);
                let jr = (1.0 + r * r).sqrt();
                worst[0] = worst[0].max(d2.abs() * jr);
                worst[1] = worst[1].max(d3.abs() * jr * jr);
            }
        }
        assert!(worst[0] < 3.0 && worst[1] < 30.0, "{worst:?}");
    }

    #[test]
    fn propfracweighapp_probe_bounded_in_n() {
        // max |D^β ⟨x⟩_N^θ| stays bounded as N grows.
        for theta in [0.25, 0.5, 0.9] {
            for beta in [theta + 0.1, 1.0, 2.0] {
                let mut maxima = vec![];
                for n_w in [8.0, 16.0, 32.0, 64.0] {
                    let g = Grid::new(16384, 1024.0).unwrap();
                    let w = truncated_weight(&g, n_w, theta).unwrap();
                    let flat = (2.0 * n_w).powf(theta);
                    let f = Field::new(&g, w.iter().map(|v| v - flat).collect()).unwrap();
                    // D^β kills constants for β > 0, so subtracting the plateau is harmless
                    // and removes the box-wide mean.
                    let d = apply_multiplier(&f, &MultiplierSymbol::frac_deriv(beta)).unwrap();
                    maxima.push(d.max_abs());
                }
                // Increments shrink geometrically, so the sequence has a finite limit.
                let first = maxima[1] - maxima[0];
                let last = maxima[3] - maxima[2];
                assert!(maxima.iter().all(|m| *m < 5.0), "θ={theta} β={beta}: {maxima:?}");
                assert!(last <= 0.9 * first.abs() + 1e-9, "θ={theta} β={beta}: {maxima:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip(samples in proptest::collection::vec(-1e3f64..1e3, 64)) {
            let g = two_pi_grid(64);
            let f = Field::new(&g, samples).unwrap();
            let back = f.spectrum().to_field();
            let err = (&back - &f).l2_norm();
            prop_assert!(err <= 1e-12 * f.l2_norm().max(1e-300));
        }

        #[test]
        fn plancherel(samples in proptest::collection::vec(-10f64..10.0, 128), len in 1.0f64..500.0) {
            let g = Grid::new(128, len).unwrap();
            let f = Field::new(&g, samples).unwrap();
            let lhs = f.l2_norm_sq();
            let rhs: f64 = f.spectrum().coefficients().iter().map(|c| c.norm_sqr()).sum::<f64>()
                * g.dx() / g.n() as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1e-300));
        }

        #[test]
        fn multiplier_composition(samples in proptest::collection::vec(-1f64..1.0, 64),
                                  s1 in -0.9f64..2.0, s2 in 0.1f64..2.0) {
            let g = two_pi_grid(64);
            let f = Field::new(&g, samples).unwrap();
            let a = MultiplierSymbol::frac_deriv(s1);
            let b = MultiplierSymbol::bessel(s2);
            let lhs = apply_multiplier(&apply_multiplier(&f, &b).unwrap(), &a).unwrap();
            let rhs = apply_multiplier(&f, &a.product(&b)).unwrap();
            let scale = rhs.l2_norm().max(f.l2_norm());
            prop_assert!((&lhs - &rhs).l2_norm() <= 1e-12 * scale);
        }

        #[test]
        fn hermitian_spectrum(samples in proptest::collection::vec(-1f64..1.0, 32)) {
            let g = two_pi_grid(32);
            let f = Field::new(&g, samples).unwrap();
            let s = f.spectrum();
            for m in 1..16i64 {
                let d = (s.mode(m) - s.mode(-m).conj()).norm();
                prop_assert!(d < 1e-12);
            }
        }
    }
}
