//! Closed-form compartment signal models.
//!
//! Units: radii in µm, diffusivities in µm²/ms, times in ms, b in ms/µm²,
//! permeability in µm/s.

use std::f64::consts::PI;
use std::sync::OnceLock;

use thiserror::Error;

use crate::substrate::Vec3;

/// Roots of j₁′ kept for the restricted-sphere series.
pub const MAX_SERIES_TERMS: usize = 50;
const SERIES_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("zero permeability: exchange time is infinite")]
    ZeroPermeability,
    #[error("invalid model parameter: {0}")]
    Invalid(String),
}

/// `j₁′(x)·x³`, whose positive zeros coincide with those of `j₁′`.
fn j1_prime_scaled(x: f64) -> f64 {
    2.0 * x * x.cos() + (x * x - 2.0) * x.sin()
}

/// First `m_max` positive roots of the derivative of the spherical Bessel
/// function j₁.
pub fn sphere_bessel_roots(m_max: usize) -> Vec<f64> {
    (1..=m_max)
        .map(|m| {
            // exactly one root in ((m-1)π, mπ); the scaled derivative is
            // positive just above 0 and alternates sign at multiples of π
            let mut lo = if m == 1 { 1.0 } else { (m - 1) as f64 * PI };
            let mut hi = m as f64 * PI;
            let f_lo = j1_prime_scaled(lo);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                if (j1_prime_scaled(mid) > 0.0) == (f_lo > 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

fn cached_roots() -> &'static [f64] {
    static ROOTS: OnceLock<Vec<f64>> = OnceLock::new();
    ROOTS.get_or_init(|| sphere_bessel_roots(MAX_SERIES_TERMS))
}

/// Apparent diffusivity inside an impermeable sphere under the Gaussian
/// phase approximation for a PGSE sequence.
pub fn sphere_gpd_adc(r_s: f64, d_is: f64, delta_small: f64, delta_big: f64) -> f64 {
    let (d, dl, bd) = (delta_small, delta_big, d_is);
    let mut sum = 0.0;
    for &x in cached_roots() {
        let a2 = (x / r_s).powi(2);
        let ad = a2 * bd;
        let bracket = 2.0 * d
            - (2.0 + (-ad * (dl - d)).exp() - 2.0 * (-ad * d).exp() - 2.0 * (-ad * dl).exp()
                + (-ad * (dl + d)).exp())
                / ad;
        let term = bracket / (a2 * a2 * (x * x - 2.0));
        sum += term;
        if term.abs() < SERIES_TOLERANCE * sum.abs() {
            break;
        }
    }
    let value = 2.0 * sum / (d * d * bd * (dl - d / 3.0));
    value.clamp(0.0, d_is)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CexiParams {
    pub f_i: f64,
    pub r_s: f64,
    pub d_is: f64,
    pub d_ex: f64,
    pub tau_ex: f64,
}

/// Two-compartment exchange signal with a restricted-sphere intracellular
/// pool.
///
/// Evaluated through the eigenvalues of the dimensionless exchange matrix
/// (`b·D′`), which stays finite at b = 0 and for vanishing exchange.
pub fn cexi_signal(p: &CexiParams, b: f64, delta_big: f64, delta_small: f64) -> f64 {
    if b == 0.0 {
        return 1.0;
    }
    let d_i = sphere_gpd_adc(p.r_s, p.d_is, delta_small, delta_big);
    let f = p.f_i;
    let a = b * d_i;
    let c = b * p.d_ex;
    let k = delta_big / p.tau_ex;
    let trace = a + c + k;
    let det = a * c + k * (f * a + (1.0 - f) * c);
    let root = ((c - a + (2.0 * f - 1.0) * k).powi(2) + 4.0 * f * (1.0 - f) * k * k).sqrt();
    if root <= 1e-14 * trace {
        return f * (-a).exp() + (1.0 - f) * (-c).exp();
    }
    let big = 0.5 * (trace + root);
    let small = det / big;
    let weight = (big - (f * a + (1.0 - f) * c)) / root;
    weight * (-small).exp() + (1.0 - weight) * (-big).exp()
}

/// Kärger apparent diffusivities `(D′_i, D′_e)` and the fraction `f′` at one b.
pub fn cexi_components(p: &CexiParams, b: f64, delta_big: f64, delta_small: f64) -> (f64, f64, f64) {
    let d_i = sphere_gpd_adc(p.r_s, p.d_is, delta_small, delta_big);
    let inv = delta_big / (b * p.tau_ex);
    let root = ((p.d_ex - d_i + (2.0 * p.f_i - 1.0) * inv).powi(2) + 4.0 * p.f_i * (1.0 - p.f_i) * inv * inv).sqrt();
    let di = 0.5 * (d_i + p.d_ex + inv - root);
    let de = 0.5 * (d_i + p.d_ex + inv + root);
    let f = (p.f_i * d_i + (1.0 - p.f_i) * p.d_ex - de) / (di - de);
    (di, de, f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandiParams {
    pub f_ex: f64,
    pub f_n: f64,
    pub f_s: f64,
    pub r_s: f64,
    pub d_is: f64,
    pub d_n: f64,
    pub d_ex: f64,
}

/// Powder-averaged signal of randomly oriented sticks.
pub fn stick_kernel(b: f64, d: f64) -> f64 {
    let x = b * d;
    if x < 1e-10 {
        return 1.0 - x / 3.0;
    }
    (PI / (4.0 * x)).sqrt() * libm::erf(x.sqrt())
}

pub fn soma_kernel(b: f64, r_s: f64, d_is: f64, delta_small: f64, delta_big: f64) -> f64 {
    (-b * sphere_gpd_adc(r_s, d_is, delta_small, delta_big)).exp()
}

pub fn sandi_signal(p: &SandiParams, b: f64, delta_small: f64, delta_big: f64) -> f64 {
    if b == 0.0 {
        return 1.0;
    }
    let neurite = stick_kernel(b, p.d_n);
    let soma = soma_kernel(b, p.r_s, p.d_is, delta_small, delta_big);
    (1.0 - p.f_ex) * (p.f_n * neurite + p.f_s * soma) + p.f_ex * (-b * p.d_ex).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerdictParams {
    pub f_i: f64,
    pub f_v: f64,
    pub f_ex: f64,
    pub r_s: f64,
    pub d_is: f64,
    pub d_ex: f64,
    pub pseudo_d: f64,
    /// Azimuth φ and polar angle ρ of the vascular axis (rad).
    pub orientation: (f64, f64),
}

impl VerdictParams {
    /// Sphere plus isotropic extracellular pool, vascular mass folded into
    /// the extracellular fraction.
    pub fn reduced(f_i: f64, r_s: f64, d_is: f64, d_ex: f64) -> Self {
        Self { f_i, f_v: 0.0, f_ex: 1.0 - f_i, r_s, d_is, d_ex, pseudo_d: 0.0, orientation: (0.0, 0.0) }
    }

    pub fn vascular_axis(&self) -> Vec3 {
        let (phi, rho) = self.orientation;
        Vec3::new(rho.sin() * phi.cos(), rho.sin() * phi.sin(), rho.cos())
    }
}

pub fn verdict_signal(p: &VerdictParams, b: f64, direction: &Vec3, delta_small: f64, delta_big: f64) -> f64 {
    if b == 0.0 {
        return 1.0;
    }
    let s_i = soma_kernel(b, p.r_s, p.d_is, delta_small, delta_big);
    let s_ex = (-b * p.d_ex).exp();
    let s_v = if p.f_v > 0.0 { (-b * p.pseudo_d * direction.dot(&p.vascular_axis()).powi(2)).exp() } else { 1.0 };
    p.f_i * s_i + p.f_v * s_v + p.f_ex * s_ex
}

/// Barrier-limited exchange time `R (1 − ICVF) / (3κ)` in ms.
pub fn exchange_time(r: f64, icvf: f64, kappa: f64) -> Result<f64, ModelError> {
    if !(r > 0.0) || !(0.0..1.0).contains(&icvf) || kappa < 0.0 {
        return Err(ModelError::Invalid(format!("r = {r}, icvf = {icvf}, κ = {kappa}")));
    }
    if kappa == 0.0 {
        return Err(ModelError::ZeroPermeability);
    }
    Ok(1e3 * r * (1.0 - icvf) / (3.0 * kappa))
}

/// Inverse of [`exchange_time`]: κ in µm/s for a given τ_ex in ms.
pub fn kappa_from_exchange_time(r: f64, icvf: f64, tau_ex: f64) -> f64 {
    1e3 * r * (1.0 - icvf) / (3.0 * tau_ex)
}

/// `R² / 6D` in ms.
pub fn characteristic_time(r: f64, d: f64) -> f64 {
    r * r / (6.0 * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn bessel_roots() {
        let expected = [
            2.0815759778180944,
            5.940369990572712,
            9.205840142937111,
            12.404445021901955,
            15.57923641038713,
            18.74264558477471,
            21.899696479492754,
        ];
        let roots = sphere_bessel_roots(50);
        for (r, e) in roots.iter().zip(expected) {
            assert!((r - e).abs() < 1e-12, "{r} vs {e}");
        }
        assert!(roots.windows(2).all(|w| w[1] > w[0]));
        assert!((roots[49] - roots[48] - PI).abs() < 1e-3);
    }

    #[test]
    fn gpd_reference_values() {
        let cases = [
            (5.0, 2.0, 4.5, 12.0, 0.28983063356646266),
            (5.0, 2.0, 4.5, 20.0, 0.16927292399618032),
            (5.0, 2.0, 4.5, 30.0, 0.11007896912667268),
            (5.0, 2.0, 4.5, 40.0, 0.08149165403695573),
            (3.0, 2.0, 4.5, 12.0, 0.06053006921199737),
            (3.0, 2.0, 4.5, 40.0, 0.016509953655166925),
            (20.0, 2.0, 3.0, 10.0, 1.5850128928113543),
            (0.5, 0.5, 4.5, 12.0, 0.00023567835913514763),
        ];
        for (r, d, dl, db, want) in cases {
            // truncation leaves a relative tail of a few 1e-9 for large radii
            assert_relative_eq!(sphere_gpd_adc(r, d, dl, db), want, max_relative = 1e-8);
        }
        assert!(sphere_gpd_adc(1e-6, 2.0, 4.5, 12.0) < 1e-9);
    }

    #[test]
    fn cexi_limits() {
        let p = CexiParams { f_i: 0.65, r_s: 5.0, d_is: 2.0, d_ex: 1.25, tau_ex: 1e9 };
        let d_i = sphere_gpd_adc(5.0, 2.0, 4.5, 12.0);
        for b in [0.5, 1.0, 2.5, 5.0] {
            let slow = 0.65 * (-b * d_i).exp() + 0.35 * (-b * 1.25).exp();
            assert!((cexi_signal(&p, b, 12.0, 4.5) - slow).abs() < 1e-9);
        }
        let fast = CexiParams { tau_ex: 1e-6, ..p };
        let b = 0.01;
        let mean = 0.65 * d_i + 0.35 * 1.25;
        assert!((-cexi_signal(&fast, b, 12.0, 4.5).ln() / b - mean).abs() < 1e-6);
        let none = CexiParams { f_i: 0.0, ..p };
        assert_relative_eq!(cexi_signal(&none, 2.0, 12.0, 4.5), (-2.5f64).exp(), max_relative = 1e-14);
        assert_eq!(cexi_signal(&p, 0.0, 12.0, 4.5), 1.0);
    }

    #[test]
    fn cexi_matches_printed_form() {
        let p = CexiParams { f_i: 0.4, r_s: 4.0, d_is: 1.7, d_ex: 1.1, tau_ex: 15.0 };
        for b in [0.3, 1.0, 4.0] {
            let (di, de, f) = cexi_components(&p, b, 20.0, 4.5);
            assert!(di <= de);
            let printed = f * (-b * di).exp() + (1.0 - f) * (-b * de).exp();
            assert_relative_eq!(cexi_signal(&p, b, 20.0, 4.5), printed, max_relative = 1e-12);
        }
    }

    #[test]
    fn sandi_kernels() {
        assert_relative_eq!(stick_kernel(1.0, 1.0), 0.746824132812427, max_relative = 1e-12);
        assert_eq!(stick_kernel(1.0, 0.0), 1.0);
        let p = SandiParams { f_ex: 1.0, f_n: 0.0, f_s: 1.0, r_s: 3.0, d_is: 2.0, d_n: 1.0, d_ex: 1.3 };
        assert_relative_eq!(sandi_signal(&p, 2.0, 3.0, 11.0), (-2.6f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn verdict_modes() {
        let reduced = VerdictParams::reduced(0.6, 4.0, 2.0, 1.0);
        let two_pool = 0.6 * soma_kernel(1.5, 4.0, 2.0, 3.0, 20.0) + 0.4 * (-1.5f64).exp();
        for dir in [Vec3::x(), Vec3::z(), Vec3::new(0.0, 0.6, 0.8)] {
            assert_relative_eq!(verdict_signal(&reduced, 1.5, &dir, 3.0, 20.0), two_pool, max_relative = 1e-14);
        }
        let full = VerdictParams { f_v: 0.1, f_ex: 0.3, pseudo_d: 5.0, orientation: (0.3, 0.0), ..reduced };
        let perpendicular = 0.6 * soma_kernel(1.5, 4.0, 2.0, 3.0, 20.0) + 0.1 + 0.3 * (-1.5f64).exp();
        assert_relative_eq!(verdict_signal(&full, 1.5, &Vec3::x(), 3.0, 20.0), perpendicular, max_relative = 1e-12);
        assert!(verdict_signal(&full, 1.5, &Vec3::z(), 3.0, 20.0) < perpendicular);
    }

    #[test]
    fn exchange_and_characteristic_times() {
        assert_relative_eq!(exchange_time(5.0, 0.65, 50.0).unwrap(), 11.666666666666668, max_relative = 1e-14);
        assert_eq!(exchange_time(5.0, 0.65, 0.0), Err(ModelError::ZeroPermeability));
        assert!(exchange_time(5.0, 0.65, 1e12).unwrap() < 1e-6);
        assert_relative_eq!(kappa_from_exchange_time(5.0, 0.65, 11.666666666666668), 50.0, max_relative = 1e-14);
        assert_relative_eq!(characteristic_time(5.0, 2.0), 25.0 / 12.0);
        assert_relative_eq!(characteristic_time(2.0, 2.0), 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn gpd_is_bounded_and_grows_with_radius(
            r in 0.5f64..10.0, d in 0.1f64..3.0, delta in 1.0f64..10.0, extra in 0.0f64..40.0
        ) {
            let big = delta + extra;
            let v = sphere_gpd_adc(r, d, delta, big);
            prop_assert!((0.0..=d).contains(&v));
            prop_assert!(sphere_gpd_adc(r * 1.1, d, delta, big) >= v);
        }

        #[test]
        fn cexi_is_a_decaying_mixture(
            f_i in 0.1f64..0.9, r in 0.1f64..20.0, d_is in 0.01f64..3.0, d_ex in 0.01f64..3.0,
            tau in 0.1f64..1e4, b in 0.01f64..8.0
        ) {
            let p = CexiParams { f_i, r_s: r, d_is, d_ex, tau_ex: tau };
            let s = cexi_signal(&p, b, 20.0, 4.5);
            prop_assert!(s > 0.0 && s <= 1.0);
            prop_assert!(cexi_signal(&p, b * 1.2, 20.0, 4.5) < s);
            let (di, de, f) = cexi_components(&p, b, 20.0, 4.5);
            prop_assert!(di <= de);
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&f), "f' = {}", f);
        }

        #[test]
        fn mixtures_stay_between_kernels(
            f_ex in 0.0f64..1.0, f_n in 0.0f64..1.0, r in 0.5f64..8.0, b in 0.0f64..6.0
        ) {
            let p = SandiParams { f_ex, f_n, f_s: 1.0 - f_n, r_s: r, d_is: 2.0, d_n: 1.5, d_ex: 1.0 };
            let kernels = [stick_kernel(b, 1.5), soma_kernel(b, r, 2.0, 3.0, 11.0), (-b).exp()];
            let s = sandi_signal(&p, b, 3.0, 11.0);
            let lo = kernels.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = kernels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }
}
