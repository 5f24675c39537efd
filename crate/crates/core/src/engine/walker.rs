use crate::rng::StepRng;
use crate::substrate::{Compartment, SpatialIndex, Substrate, Vec3};

use super::{step_length, transit_probability, SimParams, MEMBRANE_NUDGE, SUB_EVENT_BUDGET};

#[derive(Debug, Clone, PartialEq)]
pub struct Walker {
    /// Unwrapped position (µm).
    pub position: Vec3,
    pub initial_position: Vec3,
    pub initial_compartment: Compartment,
    pub current_compartment: Compartment,
    pub rng_stream: u64,
    /// Image of `position` inside the voxel.
    pub wrapped: Vec3,
}

impl Walker {
    pub fn new(start: Vec3, compartment: Compartment, rng_stream: u64) -> Self {
        Self {
            position: start,
            initial_position: start,
            initial_compartment: compartment,
            current_compartment: compartment,
            rng_stream,
            wrapped: start,
        }
    }

    pub fn displacement(&self) -> Vec3 {
        self.position - self.initial_position
    }

    fn shift(&mut self, delta: Vec3, voxel_side: f64) {
        self.position += delta;
        self.wrapped += delta;
        for x in self.wrapped.iter_mut() {
            // a single move never spans a whole voxel
            if *x < 0.0 {
                *x += voxel_side;
            } else if *x >= voxel_side {
                *x -= voxel_side;
            }
            if !(0.0..voxel_side).contains(x) {
                *x = crate::substrate::wrap_coordinate(*x, voxel_side);
            }
        }
    }
}

/// Per-run constants shared by every step.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub seed: u64,
    pub step_intra: f64,
    pub step_extra: f64,
    /// Transit probability leaving a sphere.
    pub p_out: f64,
    /// Transit probability entering a sphere.
    pub p_in: f64,
    /// sqrt(D_extra / D_intra), applied to the remaining path when leaving.
    pub scale_out: f64,
}

impl StepContext {
    pub fn new(substrate: &Substrate, params: &SimParams) -> Self {
        let step_intra = step_length(substrate.d_intra, params.dt);
        let step_extra = step_length(substrate.d_extra, params.dt);
        Self {
            seed: params.seed,
            step_intra,
            step_extra,
            p_out: transit_probability(substrate.kappa, step_intra, substrate.d_intra, params.transit_rule),
            p_in: transit_probability(substrate.kappa, step_extra, substrate.d_extra, params.transit_rule),
            scale_out: (substrate.d_extra / substrate.d_intra).sqrt(),
        }
    }

    /// Longest path a walker can cover in one step.
    pub fn reach(&self) -> f64 {
        self.step_intra.max(self.step_extra)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub hits: u32,
    pub transits: u32,
    pub exhausted: bool,
}

/// One time step: a fixed-length move in a random direction, resolving
/// membrane hits by transit or specular reflection.
pub fn advance_walker(
    walker: &mut Walker,
    substrate: &Substrate,
    index: &SpatialIndex,
    ctx: &StepContext,
    step: u32,
) -> StepOutcome {
    let mut rng = StepRng::new(ctx.seed, walker.rng_stream, step);
    let mut dir = rng.unit_vector();
    let mut remaining = match walker.current_compartment {
        Compartment::Intra(_) => ctx.step_intra,
        Compartment::Extra => ctx.step_extra,
    };
    let mut outcome = StepOutcome::default();
    let l = substrate.voxel_side;

    loop {
        let hit = match walker.current_compartment {
            Compartment::Intra(id) => exit_distance(substrate, id, &walker.wrapped, &dir, l).map(|t| (t, id)),
            Compartment::Extra => entry_distance(substrate, index, &walker.wrapped, &dir, l),
        };
        let (t, id) = match hit {
            Some((t, id)) if t <= remaining => (t, id),
            _ => {
                walker.shift(dir * remaining, l);
                return outcome;
            }
        };
        if outcome.hits as usize == SUB_EVENT_BUDGET {
            walker.shift(dir * t, l);
            settle_on_side(walker, substrate, id, l);
            outcome.exhausted = true;
            return outcome;
        }
        outcome.hits += 1;
        walker.shift(dir * t, l);
        remaining -= t;

        let sphere = &substrate.spheres[id as usize];
        let normal = substrate.min_image(&sphere.center, &walker.wrapped) / sphere.radius;
        let leaving = walker.current_compartment.is_intra();
        let p = if leaving { ctx.p_out } else { ctx.p_in };
        if p > 0.0 && rng.uniform() < p {
            outcome.transits += 1;
            if leaving {
                walker.current_compartment = Compartment::Extra;
                remaining *= ctx.scale_out;
            } else {
                walker.current_compartment = Compartment::Intra(id);
                remaining /= ctx.scale_out;
            }
        } else {
            dir -= normal * (2.0 * dir.dot(&normal));
            dir.normalize_mut();
        }
        settle_on_side(walker, substrate, id, l);
    }
}

/// Moves the walker radially to just inside or outside sphere `id`,
/// matching its compartment.
fn settle_on_side(walker: &mut Walker, substrate: &Substrate, id: u32, l: f64) {
    let sphere = &substrate.spheres[id as usize];
    let offset = substrate.min_image(&sphere.center, &walker.wrapped);
    let dist = offset.norm();
    if dist == 0.0 {
        return;
    }
    let target = if walker.current_compartment.is_intra() {
        sphere.radius - MEMBRANE_NUDGE
    } else {
        sphere.radius + MEMBRANE_NUDGE
    };
    walker.shift(offset * (target / dist - 1.0), l);
}

/// Distance along `dir` from a point inside sphere `id` to its surface.
fn exit_distance(substrate: &Substrate, id: u32, p: &Vec3, dir: &Vec3, l: f64) -> Option<f64> {
    let s = &substrate.spheres[id as usize];
    let oc = min_image(&s.center, p, l);
    let b = oc.dot(dir);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = (b * b - c).max(0.0);
    Some((-b + disc.sqrt()).max(0.0))
}

/// Nearest sphere entered along `dir` from an extracellular point.
fn entry_distance(substrate: &Substrate, index: &SpatialIndex, p: &Vec3, dir: &Vec3, l: f64) -> Option<(f64, u32)> {
    let mut best: Option<(f64, u32)> = None;
    for &id in index.candidates(p) {
        let s = &substrate.spheres[id as usize];
        let oc = min_image(&s.center, p, l);
        let b = oc.dot(dir);
        if b >= 0.0 {
            continue;
        }
        let c = oc.norm_squared() - s.radius * s.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            continue;
        }
        let t = (-b - disc.sqrt()).max(0.0);
        if best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, id));
        }
    }
    best
}

#[inline]
fn min_image(from: &Vec3, to: &Vec3, l: f64) -> Vec3 {
    (to - from).map(|d| d - l * (d / l).round())
}
