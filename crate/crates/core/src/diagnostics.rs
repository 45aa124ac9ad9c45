//! Quadratures of the conserved functionals, first moment, weighted and
//! Sobolev norms, algebraic tail fits, the interpolation probe and the
//! one-sided spectral derivative at ξ = 0.

use crate::error::{Error, Result};
use crate::quadrature::linear_fit;
use crate::spectral::{
    apply_multiplier, bessel, require_zero_mean, Field, MultiplierSymbol, TruncatedWeight,
};
use crate::solver::tail_fraction;
use crate::Complex64;

/// One row of run diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub i1: f64,
    pub i2: f64,
    /// Absent when α < 0 and the field has a nonzero mean.
    pub i3: Option<f64>,
    /// Spectral zero mode û(0) (continuous normalization).
    pub mean: f64,
    pub moment_x: f64,
    pub max_u: f64,
    pub min_ux: f64,
    pub tail_frac: f64,
    /// (r, ‖⟨x⟩^r u‖₂) in request order.
    pub wnorms: Vec<(f64, f64)>,
    pub zsnorm: Option<f64>,
    /// One-sided ∂_ξû(0⁺) estimate, present for zero-mean fields.
    pub jump: Option<Complex64>,
}

/// Builds the diagnostics row for `u` at time `t`.
pub fn record(u: &Field, t: f64, alpha: f64, weight_orders: &[f64]) -> DiagnosticsRecord {
    let inv = invariants(u, alpha);
    let ux = crate::spectral::derivative(u);
    let mean = u.spectrum().continuous_ft(0).re;
    DiagnosticsRecord {
        t,
        i1: inv.i1,
        i2: inv.i2,
        i3: inv.i3,
        mean,
        moment_x: moment_first(u),
        max_u: u.samples().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min_ux: ux.samples().iter().cloned().fold(f64::INFINITY, f64::min),
        tail_frac: tail_fraction(u),
        wnorms: weight_orders
            .iter()
            .map(|&r| (r, weighted_norm(u, r, WeightSpec::Exact).unwrap_or(f64::NAN)))
            .collect(),
        zsnorm: None,
        jump: spectral_jump(u).ok().map(|j| j.m_plus),
    }
}

/// I₁ = ∫u, I₂ = ∫u², I₃ = ∫(D^{α/2}u)² − ⅓∫u³.
#[derive(Clone, Debug, PartialEq)]
pub struct Invariants {
    pub i1: f64,
    pub i2: f64,
    pub i3: Option<f64>,
    pub i3_absent_reason: Option<String>,
}

pub fn invariants(f: &Field, alpha: f64) -> Invariants {
    let i1 = f.integral();
    let i2 = f.l2_norm_sq();
    let cube: f64 = f.samples().iter().map(|v| v * v * v).sum::<f64>() * f.grid().dx();
    let half = 0.5 * alpha;
    let (i3, reason) = if half < 0.0 {
        match require_zero_mean(f, "I3 with alpha < 0") {
            Ok(()) => (Some(dispersive_energy(f, half) - cube / 3.0), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (Some(dispersive_energy(f, half) - cube / 3.0), None)
    };
    Invariants { i1, i2, i3, i3_absent_reason: reason }
}

/// ∫(D^s f)² computed on the spectral side (Plancherel).
fn dispersive_energy(f: &Field, s: f64) -> f64 {
    let g = f.grid();
    let spec = f.spectrum();
    let sum: f64 = spec
        .coefficients()
        .iter()
        .zip(g.wavenumbers())
        .map(|(c, &k)| if k == 0.0 { 0.0 } else { c.norm_sqr() * k.abs().powf(2.0 * s) })
        .sum();
    sum * g.dx() / g.n() as f64
}

/// ∫x u dx on the box coordinate.
pub fn moment_first(f: &Field) -> f64 {
    f.grid()
        .nodes()
        .iter()
        .zip(f.samples())
        .map(|(x, v)| x * v)
        .sum::<f64>()
        * f.grid().dx()
}

/// ∫x u dx together with a reliability flag (tail fraction below `tail_tol`).
pub fn moment_first_checked(f: &Field, tail_tol: f64) -> (f64, bool) {
    (moment_first(f), tail_fraction(f) <= tail_tol)
}

/// Weight used by [`weighted_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightSpec {
    /// ⟨x⟩^r
    Exact,
    /// ⟨x⟩_N^r, i.e. the truncated θ = 1 weight raised to r.
    Truncated(f64),
}

/// (Σ w(x_j)^{2} f_j² dx)^{1/2} with w = ⟨x⟩^r or ⟨x⟩_N^r.
pub fn weighted_norm(f: &Field, r: f64, weight: WeightSpec) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Config(format!("weight order must be non-negative, got {r}")));
    }
    if r == 0.0 {
        return Ok(f.l2_norm());
    }
    let g = f.grid();
    let s = match weight {
        WeightSpec::Exact => g
            .nodes()
            .iter()
            .zip(f.samples())
            .map(|(x, v)| (1.0 + x * x).powf(r) * v * v)
            .sum::<f64>(),
        WeightSpec::Truncated(n_w) => {
            if 3.0 * n_w >= 0.5 * g.length() {
                return Err(Error::Config(format!(
                    "truncated weight needs 3N < L/2; N = {n_w}, L = {}",
                    g.length()
                )));
            }
            let w = TruncatedWeight::new(n_w, 1.0)?;
            g.nodes()
                .iter()
                .zip(f.samples())
                .map(|(x, v)| w.eval(*x).powf(2.0 * r) * v * v)
                .sum::<f64>()
        }
    };
    Ok((s * g.dx()).sqrt())
}

/// ‖J^s f‖₂.
pub fn sobolev_norm(f: &Field, s: f64) -> f64 {
    bessel(f, s).l2_norm()
}

/// ‖⟨x⟩^{1/2} 𝓗u‖₂, tracked alongside the weighted norms for α = −1.
pub fn hilbert_weighted_norm(f: &Field) -> f64 {
    weighted_norm(&crate::spectral::hilbert(f), 0.5, WeightSpec::Exact).expect("r = 1/2 is valid")
}

/// Power-law fit of the tail mass Φ(R) = ∫_{|x|>R} |u|².
#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    pub radii: Vec<f64>,
    pub tail_mass: Vec<f64>,
    /// Pointwise decay exponent p from Φ ∝ R^{1−2p}; ∞ when the tail is
    /// super-algebraic.
    pub fitted_p: f64,
    /// p − 1/2, the largest r with ⟨x⟩^r u ∈ L².
    pub r_critical: f64,
    pub fit_window: (f64, f64),
    /// RMS residual of log Φ about the fitted line.
    pub residual: f64,
    pub accepted: bool,
    pub super_algebraic: bool,
}

/// Accepted when the RMS log-residual is below this.
pub const DECAY_FIT_MAX_RESIDUAL: f64 = 0.05;

/// Fits log Φ(R) against log R over `n_radii` log-spaced radii in `window`.
pub fn decay_fit(f: &Field, window: (f64, f64), n_radii: usize) -> Result<DecayFit> {
    let (lo, hi) = window;
    let l = f.grid().length();
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Config(format!("invalid fit window ({lo}, {hi})")));
    }
    if hi > 0.35 * l {
        return Err(Error::Config(format!(
            "fit window upper radius {hi} exceeds 0.35·L = {}",
            0.35 * l
        )));
    }
    if n_radii < 3 {
        return Err(Error::Config("decay_fit needs at least 3 radii".into()));
    }
    let radii = crate::quadrature::logspace(lo, hi, n_radii);
    let tail_mass: Vec<f64> = radii.iter().map(|&r| tail_mass(f, r)).collect();
    let total = f.l2_norm_sq();
    let floor = 1e-26 * total;
    if tail_mass.iter().any(|&m| m <= floor) {
        return Ok(DecayFit {
            radii,
            tail_mass,
            fitted_p: f64::INFINITY,
            r_critical: f64::INFINITY,
            fit_window: window,
            residual: f64::NAN,
            accepted: false,
            super_algebraic: true,
        });
    }
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = tail_mass.iter().map(|m| m.ln()).collect();
    let (slope, _, residual) = linear_fit(&lx, &ly);
    let p = 0.5 * (1.0 - slope);
    // A decay faster than any power shows up as strong curvature.
    let super_algebraic = residual > 1.0;
    Ok(DecayFit {
        radii,
        tail_mass,
        fitted_p: if super_algebraic { f64::INFINITY } else { p },
        r_critical: if super_algebraic { f64::INFINITY } else { p - 0.5 },
        fit_window: window,
        residual,
        accepted: residual <= DECAY_FIT_MAX_RESIDUAL,
        super_algebraic,
    })
}

/// Φ(R) = Σ_{|x_j| > R} f_j² dx.
pub fn tail_mass(f: &Field, r: f64) -> f64 {
    f.grid()
        .nodes()
        .iter()
        .zip(f.samples())
        .filter(|(x, _)| x.abs() > r)
        .map(|(_, v)| v * v)
        .sum::<f64>()
        * f.grid().dx()
}

/// ‖J^{θ₁a}(⟨x⟩^{(1−θ₁)b} f)‖ / (‖⟨x⟩^b f‖^{1−θ₁} ‖J^a f‖^{θ₁}).
pub fn interpolation_probe(f: &Field, a: f64, b: f64, theta1: f64) -> Result<f64> {
    interpolation_probe_with(f, a, b, theta1, WeightSpec::Exact)
}

/// [`interpolation_probe`] with a choice of weight.
pub fn interpolation_probe_with(
    f: &Field,
    a: f64,
    b: f64,
    theta1: f64,
    weight: WeightSpec,
) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && theta1 > 0.0 && theta1 < 1.0) {
        return Err(Error::Config(format!(
            "interpolation probe needs a, b > 0 and θ₁ ∈ (0,1); got ({a}, {b}, {theta1})"
        )));
    }
    let g = f.grid();
    let wfun: Box<dyn Fn(f64) -> f64> = match weight {
        WeightSpec::Exact => Box::new(|x: f64| (1.0 + x * x).sqrt()),
        WeightSpec::Truncated(n_w) => {
            let w = TruncatedWeight::new(n_w, 1.0)?;
            Box::new(move |x: f64| w.eval(x))
        }
    };
    let weighted = |p: f64| -> Field {
        let s = g.nodes().iter().zip(f.samples()).map(|(x, v)| wfun(*x).powf(p) * v).collect();
        Field::new(g, s).expect("finite weighted samples")
    };
    let lhs = bessel(&weighted((1.0 - theta1) * b), theta1 * a).l2_norm();
    let wb = weighted(b).l2_norm();
    let ja = bessel(f, a).l2_norm();
    let den = wb.powf(1.0 - theta1) * ja.powf(theta1);
    if !(den > 0.0) {
        return Err(Error::Degenerate("interpolation probe denominator vanishes".into()));
    }
    Ok(lhs / den)
}

/// One-sided difference quotients of û at ξ = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralJump {
    pub m_plus: Complex64,
    pub m_minus: Complex64,
}

/// m₊ = û(k₁)/k₁, m₋ = û(−k₁)/(−k₁) for zero-mean f. For real f,
/// m₋ = −conj(m₊).
pub fn spectral_jump(f: &Field) -> Result<SpectralJump> {
    require_zero_mean(f, "spectral_jump")?;
    let s = f.spectrum();
    let k1 = f.grid().k1();
    Ok(SpectralJump {
        m_plus: s.continuous_ft(1) / k1,
        m_minus: s.continuous_ft(-1) / (-k1),
    })
}

/// Second-order one-sided estimate (4û(k₁) − û(k₂))/(2k₁) and its mirror.
pub fn spectral_jump_refined(f: &Field) -> Result<SpectralJump> {
    require_zero_mean(f, "spectral_jump")?;
    let s = f.spectrum();
    let k1 = f.grid().k1();
    Ok(SpectralJump {
        m_plus: (4.0 * s.continuous_ft(1) - s.continuous_ft(2)) / (2.0 * k1),
        m_minus: (4.0 * s.continuous_ft(-1) - s.continuous_ft(-2)) / (-2.0 * k1),
    })
}

/// D^α applied and integrated: ∫D^αu dx (zero by the zero-mode convention).
pub fn integral_of_frac_deriv(f: &Field, alpha: f64) -> Result<f64> {
    Ok(apply_multiplier(f, &MultiplierSymbol::frac_deriv(alpha))?.integral())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{linear_propagator, InitialCondition};
    use crate::spectral::Grid;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn invariants_examples() {
        let g = Grid::new(64, 2.0 * PI).unwrap();
        let c2 = Field::from_fn(&g, |x| (2.0 * x).cos());
        let inv = invariants(&c2, 1.0);
        assert!((inv.i3.unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((inv.i2 - PI).abs() < 1e-12);

        let g = Grid::new(4096, 200.0).unwrap();
        let odd = Field::from_fn(&g, |x| x * (-x * x).exp());
        assert!(invariants(&odd, 0.5).i1.abs() < 1e-12 * odd.l2_norm());
        let gauss = InitialCondition::gaussian(1.0, 1.0, 0.0).build(&g).unwrap();
        let inv = invariants(&gauss, -0.5);
        assert!((inv.i1 - PI.sqrt()).abs() < 1e-10);
        assert!(inv.i3.is_none() && inv.i3_absent_reason.is_some());
        assert!(invariants(&gauss, 0.5).i3.is_some());
    }

    #[test]
    fn i3_dispersive_part_matches_spatial_quadrature() {
        let g = Grid::new(2048, 100.0).unwrap();
        let f = Field::from_fn(&g, |x| x * (-x * x).exp());
        for alpha in [-1.0, -0.5, 0.5] {
            let d = crate::spectral::frac_deriv(&f, 0.5 * alpha).unwrap();
            let cube: f64 = f.samples().iter().map(|v| v.powi(3)).sum::<f64>() * g.dx();
            let want = d.l2_norm_sq() - cube / 3.0;
            let got = invariants(&f, alpha).i3.unwrap();
            assert!((got - want).abs() < 1e-12 * want.abs().max(1e-3));
        }
    }

    #[test]
    fn moment_examples() {
        let g = Grid::new(4096, 200.0).unwrap();
        let f = Field::from_fn(&g, |x| x * (-x * x).exp());
        assert!((moment_first(&f) - PI.sqrt() / 2.0).abs() < 1e-10);
        let even = Field::from_fn(&g, |x| (-x * x).exp());
        assert!(moment_first(&even).abs() < 1e-12 * even.l2_norm());
        let f = Field::from_fn(&g, |x| -4.0 * x * (-x * x).exp());
        assert!((moment_first(&f) + 2.0 * PI.sqrt()).abs() < 1e-10);
        let (_, ok) = moment_first_checked(&f, 1e-8);
        assert!(ok);
    }

    #[test]
    fn weighted_norm_examples() {
        let g = Grid::new(4096, 200.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        assert_eq!(weighted_norm(&f, 0.0, WeightSpec::Exact).unwrap(), f.l2_norm());
        let want = ((PI / 2.0).sqrt() * 1.25).sqrt();
        assert!((weighted_norm(&f, 1.0, WeightSpec::Exact).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.2518).abs() < 2e-4);
        let wide = Field::from_fn(&g, |x| (-(x / 8.0).powi(2)).exp());
        let mut prev = 0.0;
        for n_w in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let v = weighted_norm(&wide, 1.0, WeightSpec::Truncated(n_w)).unwrap();
            assert!(v >= prev - 1e-12, "N={n_w}");
            prev = v;
        }
        let exact = weighted_norm(&wide, 1.0, WeightSpec::Exact).unwrap();
        assert!((prev - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn sobolev_examples() {
        let g = Grid::new(64, 2.0 * PI).unwrap();
        let s = Field::from_fn(&g, f64::sin);
        assert!((sobolev_norm(&s, 0.0) - s.l2_norm()).abs() < 1e-14);
        assert!((sobolev_norm(&s, 1.0) - 2f64.sqrt() * PI.sqrt()).abs() < 1e-12);
        let f = Field::from_fn(&g, |x| (x.sin() * 3.0).exp());
        let mut prev = 0.0;
        for s in [0.0, 0.5, 1.0, 2.0] {
            let v = sobolev_norm(&f, s);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn decay_fit_synthetic_power_laws() {
        // The window stays far inside the box so the missing mass beyond L/2
        // (relative size ~ (2R/L)^{2p-1}) does not bias the slope.
        let g = Grid::new(1 << 17, 40000.0).unwrap();
        for p in [1.0, 1.5, 2.0, 2.5] {
            let f = Field::from_fn(&g, |x| (1.0 + x * x).powf(-0.5 * p));
            let fit = decay_fit(&f, (10.0, 100.0), 12).unwrap();
            assert!(fit.accepted, "p={p} residual {}", fit.residual);
            assert!((fit.fitted_p - p).abs() < 0.01 * p, "p={p}: {}", fit.fitted_p);
        }
        let f = Field::from_fn(&g, |x| (1.0 + x * x).powf(-1.0));
        let fit = decay_fit(&f, (10.0, 100.0), 12).unwrap();
        assert!((fit.fitted_p - 2.0).abs() < 0.02 && (fit.r_critical - 1.5).abs() < 0.02);
    }

    #[test]
    fn decay_fit_flags_gaussian() {
        let g = Grid::new(4096, 200.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let fit = decay_fit(&f, (5.0, 60.0), 8).unwrap();
        assert!(fit.super_algebraic && !fit.accepted && fit.fitted_p.is_infinite());
        assert!(decay_fit(&f, (5.0, 80.0), 8).is_err());
    }

    #[test]
    fn decay_fit_linear_bh_hilbert_tail() {
        // cos t·u₀ − sin t·𝓗u₀ with 𝓗u₀ ~ (∫u₀)/(πx).
        let g = Grid::new(1 << 16, 6400.0).unwrap();
        let u0 = Field::from_fn(&g, |x| (-x * x).exp());
        let u = linear_propagator(&u0, 1.0, -1.0);
        let fit = decay_fit(&u, (20.0, 400.0), 10).unwrap();
        assert!((fit.fitted_p - 1.0).abs() < 0.05, "{}", fit.fitted_p);
        assert!((fit.r_critical - 0.5).abs() < 0.05);
    }

    #[test]
    fn interpolation_probe_examples() {
        let g = Grid::new(2048, 100.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let r = interpolation_probe(&f, 1.0, 1.0, 0.5).unwrap();
        assert!(r > 0.0 && r <= 3.0, "{r}");
        let r2 = interpolation_probe(&(&f * 2.0), 1.0, 1.0, 0.5).unwrap();
        assert!((r - r2).abs() < 1e-12 * r);
        assert!(matches!(
            interpolation_probe(&Field::zeros(&g), 1.0, 1.0, 0.5),
            Err(Error::Degenerate(_))
        ));
        let g = Grid::new(1024, 128.0).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let f = InitialCondition::random_band(seed, 0.2, 6.0, 1.0).build(&g).unwrap();
            let r = interpolation_probe(&f, 1.0, 1.0, 0.5).unwrap();
            assert!(r.is_finite());
            worst = worst.max(r);
        }
        assert!(worst <= 3.0, "{worst}");
        for n_w in [8.0, 16.0] {
            let f = InitialCondition::random_band(5, 0.2, 6.0, 1.0).build(&g).unwrap();
            let r = interpolation_probe_with(&f, 1.0, 1.0, 0.5, WeightSpec::Truncated(n_w)).unwrap();
            assert!(r.is_finite() && r <= 3.0);
        }
    }

    #[test]
    fn spectral_jump_examples() {
        let mut prev_err = f64::INFINITY;
        for l in [100.0, 200.0, 400.0] {
            let g = Grid::new((l * 20.0) as usize, l).unwrap();
            let f = Field::from_fn(&g, |x| x * (-x * x).exp());
            let j = spectral_jump(&f).unwrap();
            let moment = (Complex64::i() * j.m_plus).re;
            let err = (moment - PI.sqrt() / 2.0).abs();
            assert!(err < prev_err);
            prev_err = err;
            // û(−k) = conj û(k) makes the left quotient −conj(m₊).
            assert!((j.m_minus + j.m_plus.conj()).norm() < 1e-14);
            let r = spectral_jump_refined(&f).unwrap();
            assert!((r.m_plus - j.m_plus).norm() < 2.0 * g.k1());
            // With an even part in f, û has a k² term: the plain quotient is
            // O(k₁) off and the refined one O(k₁²).
            let h = Field::from_fn(&g, |x| (x + 0.3 * (x * x - 0.5)) * (-x * x).exp());
            let exact = Complex64::new(0.0, -PI.sqrt() / 2.0);
            let plain = (spectral_jump(&h).unwrap().m_plus - exact).norm();
            let refined = (spectral_jump_refined(&h).unwrap().m_plus - exact).norm();
            assert!(refined < 0.3 * plain, "{plain} {refined}");
        }
        assert!(prev_err < 1e-3);
        let g = Grid::new(1024, 50.0).unwrap();
        let even = Field::from_fn(&g, |x| (x * x - 0.5) * (-x * x).exp());
        let j = spectral_jump(&even).unwrap();
        assert!((j.m_minus + j.m_plus.conj()).norm() < 1e-14);
        let gauss = Field::from_fn(&g, |x| (-x * x).exp());
        assert!(matches!(spectral_jump(&gauss), Err(Error::Domain(_))));
    }

    #[test]
    fn record_columns() {
        let g = Grid::new(1024, 100.0).unwrap();
        let f = InitialCondition::gaussian(0.2, 1.0, 0.0).projected().build(&g).unwrap();
        let r = record(&f, 0.0, -0.5, &[1.0, 2.0]);
        assert_eq!(r.wnorms.len(), 2);
        assert!(r.wnorms[0].1 <= r.wnorms[1].1);
        assert!(r.jump.is_some() && r.i3.is_some());
        assert!((r.i2 - sobolev_norm(&f, 0.0).powi(2)).abs() < 1e-12 * r.i2);
    }

    proptest! {
        #[test]
        fn wnorms_monotone_in_r(seed in 0u64..1000, r1 in 0.0f64..3.0, dr in 0.0f64..2.0) {
            let g = Grid::new(256, 64.0).unwrap();
            let f = InitialCondition::random_band(seed, 0.2, 4.0, 1.0).build(&g).unwrap();
            let a = weighted_norm(&f, r1, WeightSpec::Exact).unwrap();
            let b = weighted_norm(&f, r1 + dr, WeightSpec::Exact).unwrap();
            prop_assert!(b >= a * (1.0 - 1e-14));
        }

        #[test]
        fn i2_is_sobolev_zero_squared(seed in 0u64..1000) {
            let g = Grid::new(256, 64.0).unwrap();
            let f = InitialCondition::random_band(seed, 0.2, 4.0, 1.0).build(&g).unwrap();
            let i2 = invariants(&f, 0.5).i2;
            prop_assert!((i2 - sobolev_norm(&f, 0.0).powi(2)).abs() <= 1e-12 * i2);
        }

        #[test]
        fn tail_frac_in_unit_interval(seed in 0u64..1000) {
            let g = Grid::new(256, 64.0).unwrap();
            let f = InitialCondition::random_band(seed, 0.2, 4.0, 1.0).build(&g).unwrap();
            let t = record(&f, 0.0, 0.5, &[]).tail_frac;
            prop_assert!((0.0..=1.0).contains(&t));
        }
    }
}
