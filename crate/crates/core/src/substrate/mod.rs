//! Packed-sphere tissue substrates.
//!
//! A substrate is a cubic periodic voxel holding non-overlapping spheres
//! (cells). Sphere centers always lie in `[0, voxel_side)`; a sphere that
//! crosses a face continues through the opposite face.

mod index;
mod io;
mod packing;

pub use index::SpatialIndex;
pub use io::{load_substrate, read_substrate, save_substrate, write_substrate, FORMAT_VERSION};
pub use packing::{pack_spheres, pack_spheres_with, PackingOptions};

use std::f64::consts::PI;

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Distance below which two spheres are still considered touching, in µm.
pub const OVERLAP_TOLERANCE: f64 = 1e-9;

/// Points within this distance of a membrane belong to the sphere, in µm.
pub const SURFACE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("packing reached ICVF {achieved:.4} but the target was {target:.4}")]
    PackingFailed { achieved: f64, target: f64 },
    #[error("infeasible substrate specification: {0}")]
    InfeasibleSpec(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid substrate: {0}")]
    Invalid(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed substrate file (line {line}): {message}")]
    Format { line: usize, message: String },
}

/// One sphere population of a packing request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSpec {
    /// Mean radius in µm.
    pub mean_radius: f64,
    /// Standard deviation of the radius distribution in µm.
    pub radius_std: f64,
    /// Share of the total intracellular volume held by this population.
    pub volume_fraction_share: f64,
}

impl SphereSpec {
    pub fn new(mean_radius: f64, radius_std: f64, volume_fraction_share: f64) -> Self {
        Self { mean_radius, radius_std, volume_fraction_share }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radius.powi(3)
    }
}

/// Which side of the membranes a point is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Compartment {
    Intra(u32),
    Extra,
}

impl Compartment {
    pub fn is_intra(self) -> bool {
        matches!(self, Compartment::Intra(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Substrate {
    /// Side length of the cubic voxel in µm.
    pub voxel_side: f64,
    pub spheres: Vec<Sphere>,
    pub icvf_target: f64,
    /// Membrane permeability in µm/s.
    pub kappa: f64,
    /// Intracellular diffusivity in µm²/ms.
    pub d_intra: f64,
    /// Extracellular diffusivity in µm²/ms.
    pub d_extra: f64,
}

impl Substrate {
    /// Substrate without any sphere (free diffusion).
    pub fn empty(voxel_side: f64, diffusivity: f64) -> Self {
        Self {
            voxel_side,
            spheres: Vec::new(),
            icvf_target: 0.0,
            kappa: 0.0,
            d_intra: diffusivity,
            d_extra: diffusivity,
        }
    }

    /// Same geometry with different membrane and diffusion properties.
    pub fn with_biophysics(mut self, kappa: f64, d_intra: f64, d_extra: f64) -> Self {
        self.kappa = kappa;
        self.d_intra = d_intra;
        self.d_extra = d_extra;
        self
    }

    pub fn icvf(&self) -> f64 {
        compute_icvf(self)
    }

    pub fn radii(&self) -> Vec<f64> {
        self.spheres.iter().map(|s| s.radius).collect()
    }

    pub fn max_radius(&self) -> f64 {
        self.spheres.iter().map(|s| s.radius).fold(0.0, f64::max)
    }

    pub fn diffusivity(&self, compartment: Compartment) -> f64 {
        match compartment {
            Compartment::Intra(_) => self.d_intra,
            Compartment::Extra => self.d_extra,
        }
    }

    /// Wrap a point into `[0, voxel_side)` on every axis.
    pub fn wrap(&self, p: &Vec3) -> Vec3 {
        p.map(|x| wrap_coordinate(x, self.voxel_side))
    }

    /// Shortest periodic vector from `from` to `to`.
    pub fn min_image(&self, from: &Vec3, to: &Vec3) -> Vec3 {
        let l = self.voxel_side;
        (to - from).map(|d| d - l * (d / l).round())
    }

    /// Checks every structural invariant. `icvf_tolerance` bounds the
    /// distance between achieved and target ICVF (pass `None` to skip).
    pub fn validate(&self, icvf_tolerance: Option<f64>) -> Result<(), SubstrateError> {
        let l = self.voxel_side;
        if !(l > 0.0 && l.is_finite()) {
            return Err(SubstrateError::Invalid(format!("voxel side {l}")));
        }
        if !(self.kappa >= 0.0) {
            return Err(SubstrateError::Invalid(format!("kappa {}", self.kappa)));
        }
        if !(self.d_intra > 0.0 && self.d_extra > 0.0) {
            return Err(SubstrateError::Invalid("diffusivities must be positive".into()));
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(SubstrateError::Invalid(format!("sphere {i} radius {}", s.radius)));
            }
            if s.center.iter().any(|&x| !(0.0..l).contains(&x)) {
                return Err(SubstrateError::Invalid(format!("sphere {i} center outside voxel")));
            }
            if 2.0 * s.radius >= 0.5 * l {
                return Err(SubstrateError::Invalid(format!(
                    "sphere {i} radius {} too large for voxel {l}",
                    s.radius
                )));
            }
        }
        if let Some((i, j)) = self.find_overlap() {
            return Err(SubstrateError::Invalid(format!("spheres {i} and {j} overlap")));
        }
        if let Some(tol) = icvf_tolerance {
            let achieved = self.icvf();
            if (achieved - self.icvf_target).abs() > tol {
                return Err(SubstrateError::Invalid(format!(
                    "ICVF {achieved} differs from target {}",
                    self.icvf_target
                )));
            }
        }
        Ok(())
    }

    /// First overlapping pair, if any. Exhaustive for small substrates,
    /// grid-accelerated otherwise.
    pub fn find_overlap(&self) -> Option<(usize, usize)> {
        let n = self.spheres.len();
        let overlaps = |i: usize, j: usize| {
            let a = &self.spheres[i];
            let b = &self.spheres[j];
            self.min_image(&a.center, &b.center).norm() < a.radius + b.radius - OVERLAP_TOLERANCE
        };
        if n <= 400 {
            for i in 0..n {
                for j in i + 1..n {
                    if overlaps(i, j) {
                        return Some((i, j));
                    }
                }
            }
            return None;
        }
        let index = SpatialIndex::build(self, self.max_radius());
        for i in 0..n {
            for &j in index.candidates(&self.spheres[i].center) {
                let j = j as usize;
                if j > i && overlaps(i, j) {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

#[inline]
pub(crate) fn wrap_coordinate(x: f64, l: f64) -> f64 {
    let w = x - l * (x / l).floor();
    // floor rounding can land exactly on l for tiny negative inputs
    if w >= l {
        0.0
    } else {
        w
    }
}

/// Volume-weighted mean radius as the cube root of the mean cubed radius.
pub fn volume_weighted_radius(radii: &[f64]) -> Result<f64, SubstrateError> {
    if radii.is_empty() {
        return Err(SubstrateError::EmptyInput);
    }
    if radii.iter().any(|&r| !(r > 0.0)) {
        return Err(SubstrateError::Invalid("radii must be positive".into()));
    }
    let mean_cube = radii.iter().map(|r| r.powi(3)).sum::<f64>() / radii.len() as f64;
    Ok(mean_cube.cbrt())
}

/// Alternative volume-weighted radius `Σ R⁴ / Σ R³`.
///
/// This definition reproduces the tabulated radii of the two-population
/// substrates, which the cube-root mean does not; both are reported.
pub fn volume_weighted_radius_r4_r3(radii: &[f64]) -> Result<f64, SubstrateError> {
    if radii.is_empty() {
        return Err(SubstrateError::EmptyInput);
    }
    if radii.iter().any(|&r| !(r > 0.0)) {
        return Err(SubstrateError::Invalid("radii must be positive".into()));
    }
    let r4: f64 = radii.iter().map(|r| r.powi(4)).sum();
    let r3: f64 = radii.iter().map(|r| r.powi(3)).sum();
    Ok(r4 / r3)
}

/// Intracellular volume fraction.
pub fn compute_icvf(substrate: &Substrate) -> f64 {
    let volume: f64 = substrate.spheres.iter().map(Sphere::volume).sum();
    volume / substrate.voxel_side.powi(3)
}

/// Compartment containing `point` (wrapped into the voxel first).
pub fn locate(substrate: &Substrate, index: &SpatialIndex, point: &Vec3) -> Compartment {
    let p = substrate.wrap(point);
    for &id in index.candidates(&p) {
        let s = &substrate.spheres[id as usize];
        if substrate.min_image(&s.center, &p).norm() - s.radius <= SURFACE_TOLERANCE {
            return Compartment::Intra(id);
        }
    }
    Compartment::Extra
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn vw_radius_identical() {
        assert_relative_eq!(volume_weighted_radius(&[2.5, 2.5, 2.5]).unwrap(), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn vw_radius_two_values() {
        // cbrt((1 + 27) / 2)
        assert_relative_eq!(
            volume_weighted_radius(&[1.0, 3.0]).unwrap(),
            2.410_142_264_175_23,
            epsilon = 1e-12
        );
        assert_relative_eq!(volume_weighted_radius_r4_r3(&[1.0, 3.0]).unwrap(), 82.0 / 28.0);
    }

    #[test]
    fn vw_radius_empty() {
        assert!(matches!(volume_weighted_radius(&[]), Err(SubstrateError::EmptyInput)));
    }

    proptest! {
        #[test]
        fn vw_radius_scale_equivariant(radii in prop::collection::vec(0.1f64..10.0, 1..20), s in 0.1f64..10.0) {
            let scaled: Vec<f64> = radii.iter().map(|r| r * s).collect();
            let a = volume_weighted_radius(&scaled).unwrap();
            let b = s * volume_weighted_radius(&radii).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn icvf_empty_and_single() {
        let mut s = Substrate::empty(12.0, 2.0);
        assert_eq!(compute_icvf(&s), 0.0);
        s.spheres.push(Sphere { center: Vec3::new(6.0, 6.0, 6.0), radius: 3.0 });
        // (4/3)π(L/4)³/L³ = π/48
        assert_relative_eq!(compute_icvf(&s), 0.065_449_846_949_787_35, epsilon = 1e-15);
    }

    fn two_sphere_substrate() -> Substrate {
        let mut s = Substrate::empty(20.0, 2.0);
        s.spheres.push(Sphere { center: Vec3::new(5.0, 5.0, 5.0), radius: 3.0 });
        s.spheres.push(Sphere { center: Vec3::new(19.0, 10.0, 10.0), radius: 2.0 });
        s
    }

    #[test]
    fn locate_center_and_outside() {
        let s = two_sphere_substrate();
        let index = SpatialIndex::build(&s, 0.5);
        assert_eq!(locate(&s, &index, &Vec3::new(5.0, 5.0, 5.0)), Compartment::Intra(0));
        assert_eq!(locate(&s, &index, &Vec3::new(5.0 + 3.0003, 5.0, 5.0)), Compartment::Extra);
        assert_eq!(locate(&s, &index, &Vec3::new(5.0, 5.0, 5.0 + 3.0)), Compartment::Intra(0));
        // sphere 1 crosses the x = L face
        assert_eq!(locate(&s, &index, &Vec3::new(0.5, 10.0, 10.0)), Compartment::Intra(1));
        assert_eq!(locate(&s, &index, &Vec3::new(-19.5, 10.0, 30.0)), Compartment::Intra(1));
    }

    #[test]
    fn overlap_detection_is_periodic() {
        let mut s = two_sphere_substrate();
        assert!(s.find_overlap().is_none());
        s.spheres.push(Sphere { center: Vec3::new(1.0, 10.0, 11.0), radius: 1.5 });
        assert_eq!(s.find_overlap(), Some((1, 2)));
        assert!(s.validate(None).is_err());
    }

    #[test]
    fn random_points_hit_spheres_at_icvf_rate() {
        use rand::{Rng, SeedableRng};
        let s = pack_spheres(24.0, &[SphereSpec::new(3.0, 0.5, 1.0)], 0.5, 2).unwrap();
        let index = SpatialIndex::build(&s, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let inside = (0..n)
            .filter(|_| {
                let p = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 24.0;
                locate(&s, &index, &p).is_intra()
            })
            .count();
        let f = s.icvf();
        let sigma = (f * (1.0 - f) / n as f64).sqrt();
        assert!((inside as f64 / n as f64 - f).abs() < 3.0 * sigma, "{inside}");
    }

    #[test]
    fn wrap_handles_edges() {
        assert_eq!(wrap_coordinate(-1e-18, 10.0), 0.0);
        assert_eq!(wrap_coordinate(10.0, 10.0), 0.0);
        assert_relative_eq!(wrap_coordinate(-2.5, 10.0), 7.5);
        assert_relative_eq!(wrap_coordinate(23.0, 10.0), 3.0);
    }
}
