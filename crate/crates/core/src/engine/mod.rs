//! Monte-Carlo random walk through a periodic packed-sphere substrate.
//!
//! Units: positions in µm, diffusivities in µm²/ms, permeability in µm/s,
//! the time step in µs and every other time in ms.

mod dump;
mod walker;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::StepRng;
use crate::sequence::{Protocol, Timing};
use crate::signal::{CompensatedSum, PhaseLedger};
use crate::substrate::{locate, Compartment, SpatialIndex, Substrate, Vec3};

pub use dump::{read_trajectory_dump, write_trajectory_dump, TrajectoryRecord, TRAJECTORY_MAGIC};
pub use walker::{advance_walker, StepContext, StepOutcome, Walker};

/// Sub-events (membrane hits) allowed within a single step.
pub const SUB_EVENT_BUDGET: usize = 100;
/// Fraction of steps allowed to exhaust the sub-event budget before a
/// geometry warning is raised.
pub const GEOMETRY_TOLERANCE: f64 = 1e-6;
/// Distance (µm) by which walkers are moved off a membrane after an event.
pub const MEMBRANE_NUDGE: f64 = 1e-10;

const INIT_STEP: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("protocol or checkpoint time {0} ms is not a multiple of the time step")]
    ProtocolGridMismatch(f64),
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{exhausted} of {steps} steps exhausted the sub-event budget")]
pub struct GeometryError {
    pub exhausted: u64,
    pub steps: u64,
}

/// Einstein step length `sqrt(6 D dt)` in µm for `d` in µm²/ms and `dt` in µs.
pub fn step_length(d: f64, dt: f64) -> f64 {
    (6.0 * d * dt * 1e-3).sqrt()
}

/// Membrane transit rule `P = min(1, c κ δs / D)` evaluated on the source side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitRule {
    /// `c = 2/3`: the crossing flux of fixed-length isotropic steps matches
    /// `κ·c` at the membrane.
    #[default]
    FluxMatched,
    /// `c = 2`.
    FirstOrder,
}

impl TransitRule {
    pub fn coefficient(self) -> f64 {
        match self {
            TransitRule::FluxMatched => 2.0 / 3.0,
            TransitRule::FirstOrder => 2.0,
        }
    }
}

/// Transit probability for `kappa` in µm/s, `step` in µm and `d_src` in µm²/ms.
pub fn transit_probability(kappa: f64, step: f64, d_src: f64, rule: TransitRule) -> f64 {
    if kappa <= 0.0 || step <= 0.0 {
        return 0.0;
    }
    (rule.coefficient() * kappa * step / (d_src * 1e3)).min(1.0)
}

/// Compartment in which walkers are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartRegion {
    #[default]
    Anywhere,
    Intracellular,
    Extracellular,
}

impl StartRegion {
    fn accepts(self, c: Compartment) -> bool {
        match self {
            StartRegion::Anywhere => true,
            StartRegion::Intracellular => c.is_intra(),
            StartRegion::Extracellular => !c.is_intra(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WalkerCount {
    /// Walkers per µm³ of voxel.
    Density(f64),
    Count(usize),
}

impl WalkerCount {
    pub fn resolve(self, voxel_side: f64) -> usize {
        match self {
            WalkerCount::Density(rho) => (rho * voxel_side.powi(3)).round() as usize,
            WalkerCount::Count(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Time step (µs).
    pub dt: f64,
    pub n_steps: usize,
    pub walkers: WalkerCount,
    pub seed: u64,
    /// Keep a displacement frame every this many steps (0 disables).
    pub record_trajectory_stride: usize,
    pub transit_rule: TransitRule,
    /// Seeding restricted to one compartment, e.g. for impermeable
    /// single-compartment statistics.
    pub start_region: StartRegion,
}

impl SimParams {
    /// Parameters whose step count covers `duration` ms.
    pub fn covering(duration: f64, dt: f64, walkers: WalkerCount, seed: u64) -> Self {
        let n_steps = (duration / (dt * 1e-3)).round() as usize;
        Self { dt, n_steps, walkers, seed, record_trajectory_stride: 0,
            transit_rule: TransitRule::default(),
            start_region: StartRegion::default(),
        }
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt * 1e-3
    }

    pub fn duration(&self) -> f64 {
        self.n_steps as f64 * self.dt_ms()
    }

    fn steps_for(&self, t: f64) -> Result<usize, EngineError> {
        let k = t / self.dt_ms();
        if !(t >= 0.0) || (k - k.round()).abs() > 1e-6 {
            return Err(EngineError::ProtocolGridMismatch(t));
        }
        Ok(k.round() as usize)
    }
}

/// Walker displacements at checkpoint times.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementRecord {
    pub times: Vec<f64>,
    pub initial: Vec<Compartment>,
    /// Checkpoint-major: entry `c * n_walkers + w`.
    pub displacements: Vec<Vec3>,
    /// Whether the walker is inside a sphere at each checkpoint (same layout).
    pub current_intra: Vec<bool>,
}

impl DisplacementRecord {
    pub fn n_walkers(&self) -> usize {
        self.initial.len()
    }

    pub fn at(&self, checkpoint: usize) -> &[Vec3] {
        let n = self.n_walkers();
        &self.displacements[checkpoint * n..(checkpoint + 1) * n]
    }

    pub fn intra_at(&self, checkpoint: usize) -> &[bool] {
        let n = self.n_walkers();
        &self.current_intra[checkpoint * n..(checkpoint + 1) * n]
    }

    /// Fraction of walkers inside spheres at a checkpoint.
    pub fn intra_fraction(&self, checkpoint: usize) -> f64 {
        let v = self.intra_at(checkpoint);
        v.iter().filter(|&&x| x).count() as f64 / v.len().max(1) as f64
    }

    pub fn checkpoint_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| (x - t).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimStats {
    pub steps: u64,
    pub membrane_hits: u64,
    pub transits: u64,
    pub exhausted: u64,
    /// Walkers whose compartment changed at least once.
    pub crossed_walkers: u64,
}

impl SimStats {
    pub fn geometry_error(&self) -> Option<GeometryError> {
        if self.steps > 0 && self.exhausted as f64 > GEOMETRY_TOLERANCE * self.steps as f64 {
            Some(GeometryError { exhausted: self.exhausted, steps: self.steps })
        } else {
            None
        }
    }

    fn merge(&mut self, other: &SimStats) {
        self.steps += other.steps;
        self.membrane_hits += other.membrane_hits;
        self.transits += other.transits;
        self.exhausted += other.exhausted;
        self.crossed_walkers += other.crossed_walkers;
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub displacements: DisplacementRecord,
    pub phases: PhaseLedger,
    pub stats: SimStats,
    pub trajectory: Option<TrajectoryRecord>,
}

struct WalkerResult {
    initial: Compartment,
    checkpoints: Vec<(Vec3, bool)>,
    integrals: Vec<Vec3>,
    frames: Vec<Vec3>,
    stats: SimStats,
}

/// Gradient lobe boundaries of one timing, in steps.
#[derive(Debug, Clone, Copy)]
struct TimingSteps {
    pulse: usize,
    separation: usize,
}

pub fn run_simulation(
    substrate: &Substrate,
    params: &SimParams,
    protocol: &Protocol,
    checkpoints: &[f64],
) -> Result<SimOutput, EngineError> {
    run_timings(substrate, params, &protocol.timings(), checkpoints)
}

/// Runs the walk for explicit gradient timings.
pub fn run_timings(
    substrate: &Substrate,
    params: &SimParams,
    timings: &[Timing],
    checkpoints: &[f64],
) -> Result<SimOutput, EngineError> {
    if !(params.dt > 0.0 && params.dt.is_finite()) {
        return Err(EngineError::InvalidParams(format!("dt = {}", params.dt)));
    }
    if !(substrate.d_intra > 0.0 && substrate.d_extra > 0.0) || substrate.kappa < 0.0 {
        return Err(EngineError::InvalidParams("diffusivities must be positive and κ non-negative".into()));
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EngineError::InvalidParams("checkpoint times must be strictly increasing".into()));
    }
    let mut timing_steps = Vec::with_capacity(timings.len());
    for t in timings {
        let pulse = params.steps_for(t.delta_small)?;
        let separation = params.steps_for(t.delta_big)?;
        if separation + pulse > params.n_steps {
            return Err(EngineError::InvalidParams(format!(
                "simulated time {} ms shorter than Δ + δ = {} ms",
                params.duration(),
                t.delta_big + t.delta_small
            )));
        }
        timing_steps.push(TimingSteps { pulse, separation });
    }
    let checkpoint_steps = checkpoints.iter().map(|&t| params.steps_for(t)).collect::<Result<Vec<_>, _>>()?;
    if checkpoint_steps.iter().any(|&k| k > params.n_steps) {
        return Err(EngineError::InvalidParams("checkpoint beyond the simulated time".into()));
    }

    let ctx = StepContext::new(substrate, params);
    if substrate.max_radius() + ctx.reach() >= 0.5 * substrate.voxel_side {
        return Err(EngineError::InvalidParams(format!(
            "largest radius plus step length must stay below half the voxel side ({})",
            substrate.voxel_side
        )));
    }
    let index = SpatialIndex::build(substrate, ctx.reach());
    let region_empty = match params.start_region {
        StartRegion::Anywhere => false,
        StartRegion::Intracellular => substrate.spheres.is_empty(),
        StartRegion::Extracellular => substrate.icvf() >= 1.0 - 1e-9,
    };
    if region_empty {
        return Err(EngineError::InvalidParams(format!("no volume to seed walkers in ({:?})", params.start_region)));
    }

    // Running sums of the displacement are snapshotted at every lobe edge.
    let mut edges: Vec<usize> = timing_steps
        .iter()
        .flat_map(|t| [t.pulse, t.separation, t.separation + t.pulse])
        .collect();
    edges.push(0);
    edges.sort_unstable();
    edges.dedup();

    let n_walkers = params.walkers.resolve(substrate.voxel_side);
    let results: Vec<WalkerResult> = (0..n_walkers as u64)
        .into_par_iter()
        .map(|id| simulate_walker(substrate, &index, params, &ctx, id, &timing_steps, &edges, &checkpoint_steps))
        .collect();

    let n_checkpoints = checkpoints.len();
    let mut initial = Vec::with_capacity(n_walkers);
    let mut displacements = vec![Vec3::zeros(); n_checkpoints * n_walkers];
    let mut current_intra = vec![false; n_checkpoints * n_walkers];
    let mut integrals = vec![Vec3::zeros(); timings.len() * n_walkers];
    let mut stats = SimStats::default();
    let stride = params.record_trajectory_stride;
    let n_frames = if stride > 0 { params.n_steps / stride + 1 } else { 0 };
    let mut frames = Vec::with_capacity(n_frames * n_walkers);
    for (w, r) in results.into_iter().enumerate() {
        initial.push(r.initial);
        for (c, (d, intra)) in r.checkpoints.into_iter().enumerate() {
            displacements[c * n_walkers + w] = d;
            current_intra[c * n_walkers + w] = intra;
        }
        for (t, v) in r.integrals.into_iter().enumerate() {
            integrals[t * n_walkers + w] = v;
        }
        frames.extend(r.frames);
        stats.merge(&r.stats);
    }

    let trajectory = (stride > 0).then(|| TrajectoryRecord {
        n_walkers,
        steps: (0..n_frames).map(|f| (f * stride) as u64).collect(),
        displacements: frames,
    });
    Ok(SimOutput {
        displacements: DisplacementRecord { times: checkpoints.to_vec(), initial: initial.clone(), displacements, current_intra },
        phases: PhaseLedger::new(timings.to_vec(), initial, integrals),
        stats,
        trajectory,
    })
}

/// Uniform initial position for walker `id`.
pub fn initial_position(seed: u64, id: u64, voxel_side: f64) -> Vec3 {
    let mut rng = StepRng::new(seed, id, INIT_STEP);
    uniform_point(&mut rng, voxel_side)
}

fn uniform_point(rng: &mut StepRng, voxel_side: f64) -> Vec3 {
    Vec3::new(rng.uniform(), rng.uniform(), rng.uniform()) * voxel_side
}

/// Rejection-samples a start in `region`; the first draw equals
/// [`initial_position`].
fn initial_state(
    substrate: &Substrate,
    index: &SpatialIndex,
    seed: u64,
    id: u64,
    region: StartRegion,
) -> (Vec3, Compartment) {
    let mut rng = StepRng::new(seed, id, INIT_STEP);
    loop {
        let p = uniform_point(&mut rng, substrate.voxel_side);
        let c = locate(substrate, index, &p);
        if region.accepts(c) {
            return (p, c);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_walker(
    substrate: &Substrate,
    index: &SpatialIndex,
    params: &SimParams,
    ctx: &StepContext,
    id: u64,
    timings: &[TimingSteps],
    edges: &[usize],
    checkpoint_steps: &[usize],
) -> WalkerResult {
    let (start, compartment) = initial_state(substrate, index, params.seed, id, params.start_region);
    let mut walker = Walker::new(start, compartment, id);
    let mut stats = SimStats::default();
    let stride = params.record_trajectory_stride;
    let mut frames = Vec::new();

    let mut checkpoints = Vec::with_capacity(checkpoint_steps.len());
    let mut next_checkpoint = 0;
    let mut snapshots = Vec::with_capacity(edges.len());
    let mut next_edge = 0;
    let mut running = CompensatedSum::default();
    let mut crossed = false;

    for k in 0..=params.n_steps {
        let d = walker.displacement();
        while next_checkpoint < checkpoint_steps.len() && checkpoint_steps[next_checkpoint] == k {
            checkpoints.push((d, walker.current_compartment.is_intra()));
            next_checkpoint += 1;
        }
        if next_edge < edges.len() && edges[next_edge] == k {
            snapshots.push(running.value());
            next_edge += 1;
        }
        if stride > 0 && k % stride == 0 {
            frames.push(d);
        }
        if k == params.n_steps {
            break;
        }
        running.add(d);
        let outcome = advance_walker(&mut walker, substrate, index, ctx, k as u32);
        stats.steps += 1;
        stats.membrane_hits += outcome.hits as u64;
        stats.transits += outcome.transits as u64;
        stats.exhausted += u64::from(outcome.exhausted);
        crossed |= outcome.transits > 0;
    }
    stats.crossed_walkers = u64::from(crossed);

    let snapshot = |step: usize| snapshots[edges.binary_search(&step).expect("edge recorded")];
    let dt = params.dt_ms();
    let integrals = timings
        .iter()
        .map(|t| {
            let first = snapshot(t.pulse) - snapshot(0);
            let second = snapshot(t.separation + t.pulse) - snapshot(t.separation);
            (first - second) * dt
        })
        .collect();

    WalkerResult { initial: walker.initial_compartment, checkpoints, integrals, frames, stats }
}
