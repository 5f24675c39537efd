//! Two-stage sphere packing: random sequential placement (largest first)
//! followed by collective rearrangement at fixed relative radii.
//!
//! The radii drawn for the requested volume fraction are first shrunk by a
//! common scale so that every sphere can be placed without overlap. Random
//! hard-sphere moves then rearrange the packing while the scale is grown back
//! to slightly above one, which leaves a positive gap between all true
//! spheres.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{wrap_coordinate, Sphere, SphereSpec, Substrate, SubstrateError, Vec3};

#[derive(Debug, Clone)]
pub struct PackingOptions {
    /// Budget of relaxation steps.
    pub max_sweeps: usize,
    /// Random placement attempts per sphere in the initial stage.
    pub placement_attempts: usize,
    /// Lower truncation of the radius distribution, as a fraction of the mean.
    pub min_radius_fraction: f64,
    /// Default diffusivity assigned to both compartments (µm²/ms).
    pub diffusivity: f64,
}

impl Default for PackingOptions {
    fn default() -> Self {
        Self { max_sweeps: 400_000, placement_attempts: 200, min_radius_fraction: 0.2, diffusivity: 2.0 }
    }
}

const MAX_ICVF: f64 = 0.70;
const FINAL_SCALE: f64 = 1.0 + 1e-7;
const RELAX_SCALE: f64 = 1.0 + 1e-3;
const INITIAL_SCALE: f64 = 0.7;
const FIRE_DT_START: f64 = 0.05;
const FIRE_DT_MAX: f64 = 0.2;
const FIRE_ALPHA_START: f64 = 0.1;
const JAM_PATIENCE: usize = 200;
const SWAP_ATTEMPTS: usize = 20;
const MC_CYCLE_SWEEPS: usize = 1000;
const DECOMPRESSION: f64 = 0.99;
const ICVF_SLACK: f64 = 0.005;
const MC_TARGET_SCALE: f64 = 0.99;

pub fn pack_spheres(
    voxel_side: f64,
    populations: &[SphereSpec],
    icvf_target: f64,
    seed: u64,
) -> Result<Substrate, SubstrateError> {
    pack_spheres_with(voxel_side, populations, icvf_target, seed, &PackingOptions::default())
}

pub fn pack_spheres_with(
    voxel_side: f64,
    populations: &[SphereSpec],
    icvf_target: f64,
    seed: u64,
    options: &PackingOptions,
) -> Result<Substrate, SubstrateError> {
    if !(voxel_side > 0.0 && voxel_side.is_finite()) {
        return Err(SubstrateError::InfeasibleSpec(format!("voxel side {voxel_side}")));
    }
    let mut substrate = Substrate::empty(voxel_side, options.diffusivity);
    if populations.is_empty() {
        return Ok(substrate);
    }
    if !(icvf_target > 0.0 && icvf_target <= MAX_ICVF) {
        return Err(SubstrateError::InfeasibleSpec(format!(
            "target ICVF {icvf_target} outside (0, {MAX_ICVF}]"
        )));
    }
    substrate.icvf_target = icvf_target;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radii = draw_radii(voxel_side, populations, icvf_target, options, &mut rng)?;
    radii.sort_by(|a, b| b.total_cmp(a));

    let centers = place_and_compress(voxel_side, &mut radii, options, &mut rng)?;

    substrate.spheres = centers
        .iter()
        .zip(&radii)
        .map(|(c, &radius)| Sphere { center: c.map(|x| wrap_coordinate(x, voxel_side)), radius })
        .collect();
    Ok(substrate)
}

fn sphere_volume(r: f64) -> f64 {
    4.0 / 3.0 * PI * r.powi(3)
}

fn draw_radii(
    voxel_side: f64,
    populations: &[SphereSpec],
    icvf_target: f64,
    options: &PackingOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SubstrateError> {
    let share_sum: f64 = populations.iter().map(|p| p.volume_fraction_share).sum();
    if (share_sum - 1.0).abs() > 1e-9 {
        return Err(SubstrateError::InfeasibleSpec(format!("volume shares sum to {share_sum}")));
    }
    // Pairwise periodic images stay unambiguous below a quarter voxel.
    let r_cap = 0.25 * voxel_side * (1.0 - 1e-9);
    let voxel_volume = voxel_side.powi(3);
    let mut radii = Vec::new();
    for p in populations {
        if !(p.mean_radius > 0.0 && p.radius_std >= 0.0 && p.volume_fraction_share >= 0.0) {
            return Err(SubstrateError::InfeasibleSpec(format!("bad population {p:?}")));
        }
        if p.mean_radius >= r_cap {
            return Err(SubstrateError::InfeasibleSpec(format!(
                "mean radius {} too large for voxel side {voxel_side}",
                p.mean_radius
            )));
        }
        let r_min = options.min_radius_fraction * p.mean_radius;
        let normal = Normal::new(p.mean_radius, p.radius_std)
            .map_err(|e| SubstrateError::InfeasibleSpec(e.to_string()))?;
        let target = p.volume_fraction_share * icvf_target * voxel_volume;
        let mut volume = 0.0;
        loop {
            let r = loop {
                let r = normal.sample(rng);
                if r >= r_min && r < r_cap {
                    break r;
                }
            };
            let v = sphere_volume(r);
            if volume + v <= target {
                radii.push(r);
                volume += v;
                continue;
            }
            // Close the population with one sphere sized to the remainder.
            let remainder = (target - volume) * 3.0 / (4.0 * PI);
            let r_last = remainder.cbrt();
            if r_last >= r_min {
                radii.push(r_last);
            }
            break;
        }
    }
    Ok(radii)
}

/// Places spheres one by one (largest first) at random non-overlapping
/// positions with radii multiplied by `scale`. Returns `None` when some sphere
/// finds no free spot.
fn random_sequential_placement(
    voxel_side: f64,
    radii: &[f64],
    scale: f64,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec3>> {
    let mut centers: Vec<Vec3> = Vec::with_capacity(radii.len());
    let mut grid = CellGrid::new(voxel_side, 2.0 * radii[0] * scale);
    for (i, &r) in radii.iter().enumerate() {
        let mut chosen = None;
        for _ in 0..attempts {
            let c = random_point(voxel_side, rng);
            let free = grid
                .neighbors(&c)
                .all(|j| min_image(&centers[j], &c, voxel_side).norm() >= scale * (r + radii[j]));
            if free {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen?;
        grid.insert(i, &c);
        centers.push(c);
    }
    Some(centers)
}

fn random_point(l: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.gen::<f64>() * l, rng.gen::<f64>() * l, rng.gen::<f64>() * l)
}

#[inline]
fn min_image(from: &Vec3, to: &Vec3, l: f64) -> Vec3 {
    (to - from).map(|d| d - l * (d / l).round())
}

/// Initial placement followed by cycles of compression and relaxation.
///
/// Each cycle runs hard-sphere Monte-Carlo (displacements and radius
/// exchanges) while growing the radius scale, then removes the remaining
/// overlaps at the true radii by minimising the harmonic overlap energy of
/// spheres inflated by `RELAX_SCALE` with FIRE steps. A jammed cycle restarts
/// from its configuration slightly shrunk.
///
/// When the budget runs out, the best configuration is accepted with all
/// radii shrunk to its closest contact if that keeps the volume fraction within
/// `ICVF_SLACK` of the target. `radii` may be permuted and rescaled.
fn place_and_compress(
    voxel_side: f64,
    radii: &mut [f64],
    options: &PackingOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec3>, SubstrateError> {
    let n = radii.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let icvf = radii.iter().map(|&r| sphere_volume(r)).sum::<f64>() / voxel_side.powi(3);

    let mut scale = INITIAL_SCALE;
    let mut centers = loop {
        if let Some(c) = random_sequential_placement(voxel_side, radii, scale, options.placement_attempts, rng) {
            break c;
        }
        scale *= 0.9;
    };
    if n == 1 {
        return Ok(centers);
    }

    let mut sweeps = 0;
    let mut best: Option<(f64, Vec<Vec3>, Vec<f64>)> = None;
    while sweeps < options.max_sweeps {
        let budget = (options.max_sweeps - sweeps).min(MC_CYCLE_SWEEPS);
        sweeps += hard_sphere_compression(voxel_side, radii, &mut centers, scale, budget, rng);
        let budget = options.max_sweeps.saturating_sub(sweeps);
        let (used, closest) = relax_overlaps(voxel_side, radii, &mut centers, budget, rng);
        sweeps += used;
        if closest >= FINAL_SCALE {
            return Ok(centers);
        }
        if best.as_ref().map_or(true, |b| closest > b.0) {
            best = Some((closest, centers.clone(), radii.to_vec()));
        }
        scale = closest * DECOMPRESSION;
    }

    let (closest, best_centers, best_radii) = best.expect("at least one cycle ran");
    let shrink = closest / FINAL_SCALE;
    let achieved = icvf * shrink.powi(3);
    if achieved >= icvf - ICVF_SLACK {
        for (r, &b) in radii.iter_mut().zip(&best_radii) {
            *r = b * shrink;
        }
        return Ok(best_centers);
    }
    Err(SubstrateError::PackingFailed { achieved, target: icvf })
}

/// FIRE minimisation of the overlap energy. Returns the steps used and the
/// smallest `distance / (r_i + r_j)` of the final configuration.
fn relax_overlaps(
    voxel_side: f64,
    radii: &mut [f64],
    centers: &mut [Vec3],
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, f64) {
    let n = radii.len();
    let mean_radius = radii.iter().sum::<f64>() / n as f64;
    let cell = 2.0 * radii.iter().copied().fold(0.0, f64::max) * RELAX_SCALE;
    let mut velocity = vec![Vec3::zeros(); n];
    let mut force = vec![Vec3::zeros(); n];
    let mut dt = FIRE_DT_START;
    let mut alpha = FIRE_ALPHA_START;
    let mut since_uphill = 0usize;
    let mut best_energy = f64::INFINITY;
    let mut stalled = 0usize;
    let mut closest = 0.0;

    for step in 0..max_steps {
        let grid = CellGrid::build(voxel_side, cell, centers);
        force.iter_mut().for_each(|f| *f = Vec3::zeros());
        let mut energy = 0.0;
        closest = f64::INFINITY;
        grid.for_each_pair(|i, j| {
            let d = min_image(&centers[i], &centers[j], voxel_side);
            let dist = d.norm();
            let contact = radii[i] + radii[j];
            closest = closest.min(dist / contact);
            let overlap = RELAX_SCALE * contact - dist;
            if overlap > 0.0 {
                energy += 0.5 * overlap * overlap;
                let push = if dist > 0.0 { d * (overlap / dist) } else { Vec3::new(overlap, 0.0, 0.0) };
                force[j] += push;
                force[i] -= push;
            }
        });
        if closest >= FINAL_SCALE {
            return (step + 1, closest);
        }

        // Progress is judged on the energy normalised by the sphere size.
        let scaled_energy = energy / (mean_radius * mean_radius * n as f64);
        if scaled_energy < best_energy * (1.0 - 1e-3) {
            best_energy = scaled_energy;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if stalled > JAM_PATIENCE {
            if swap_radii(voxel_side, radii, centers, &grid, n * SWAP_ATTEMPTS, rng) == 0 {
                return (step + 1, closest);
            }
            velocity.iter_mut().for_each(|v| *v = Vec3::zeros());
            dt = FIRE_DT_START;
            alpha = FIRE_ALPHA_START;
            best_energy = f64::INFINITY;
            stalled = 0;
            continue;
        }

        let power: f64 = velocity.iter().zip(&force).map(|(v, f)| v.dot(f)).sum();
        if power > 0.0 {
            let v_norm = velocity.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            let f_norm = force.iter().map(|f| f.norm_squared()).sum::<f64>().sqrt();
            if f_norm > 0.0 {
                for (v, f) in velocity.iter_mut().zip(&force) {
                    *v = *v * (1.0 - alpha) + f * (alpha * v_norm / f_norm);
                }
            }
            since_uphill += 1;
            if since_uphill > 5 {
                dt = (dt * 1.1).min(FIRE_DT_MAX);
                alpha *= 0.99;
            }
        } else {
            velocity.iter_mut().for_each(|v| *v = Vec3::zeros());
            dt *= 0.5;
            alpha = FIRE_ALPHA_START;
            since_uphill = 0;
        }
        for ((c, v), f) in centers.iter_mut().zip(velocity.iter_mut()).zip(&force) {
            *v += f * dt;
            *c = (*c + *v * dt).map(|x| wrap_coordinate(x, voxel_side));
        }
    }
    (max_steps, closest)
}

/// Hard-sphere Monte-Carlo with displacement and radius-exchange moves while
/// the radius scale grows towards `MC_TARGET_SCALE`. Returns the sweeps used.
fn hard_sphere_compression(
    voxel_side: f64,
    radii: &mut [f64],
    centers: &mut [Vec3],
    mut scale: f64,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let n = radii.len();
    let mut grid = CellGrid::build(voxel_side, 2.0 * radii.iter().copied().fold(0.0, f64::max), centers);
    let fits = |radii: &[f64], centers: &[Vec3], grid: &CellGrid, i: usize, r: f64, at: &Vec3, skip: usize, scale: f64| {
        grid.neighbors(at).all(|j| {
            j == i || j == skip || min_image(&centers[j], at, voxel_side).norm() >= scale * (r + radii[j])
        })
    };
    let mut step = 0.2;
    let mut sweeps = 0;
    while scale < MC_TARGET_SCALE && sweeps < max_sweeps {
        sweeps += 1;
        let mut accepted = 0usize;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            let trial = centers[i]
                + Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                    * (2.0 * step * radii[i]);
            let trial = trial.map(|x| wrap_coordinate(x, voxel_side));
            if fits(radii, centers, &grid, i, radii[i], &trial, i, scale) {
                grid.relocate(i, &centers[i], &trial);
                centers[i] = trial;
                accepted += 1;
            }
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b
                && fits(radii, centers, &grid, a, radii[b], &centers[a], b, scale)
                && fits(radii, centers, &grid, b, radii[a], &centers[b], a, scale)
                && min_image(&centers[a], &centers[b], voxel_side).norm() >= scale * (radii[a] + radii[b])
            {
                radii.swap(a, b);
            }
        }
        let rate = accepted as f64 / n as f64;
        step = if rate > 0.4 { (step * 1.1).min(0.5) } else { (step * 0.9).max(1e-4) };
        let gap = grid.min_separation_ratio(centers, radii);
        scale = (scale + 0.5 * (gap - scale)).min(MC_TARGET_SCALE);
    }
    sweeps
}

fn overlap_energy(voxel_side: f64, radii: &[f64], centers: &[Vec3], grid: &CellGrid, i: usize, r: f64, at: &Vec3, skip: usize) -> f64 {
    grid.neighbors(at)
        .filter(|&j| j != i && j != skip)
        .map(|j| {
            let overlap = RELAX_SCALE * (r + radii[j]) - min_image(&centers[j], at, voxel_side).norm();
            if overlap > 0.0 { 0.5 * overlap * overlap } else { 0.0 }
        })
        .sum()
}

/// Exchanges the radii of random sphere pairs whenever that lowers the
/// overlap energy. Returns the number of accepted exchanges.
fn swap_radii(
    voxel_side: f64,
    radii: &mut [f64],
    centers: &[Vec3],
    grid: &CellGrid,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let n = radii.len();
    let mut accepted = 0;
    for _ in 0..attempts {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if radii[i] == radii[j] {
            continue;
        }
        let (ci, cj) = (centers[i], centers[j]);
        let before = overlap_energy(voxel_side, radii, centers, grid, i, radii[i], &ci, j)
            + overlap_energy(voxel_side, radii, centers, grid, j, radii[j], &cj, i);
        let after = overlap_energy(voxel_side, radii, centers, grid, i, radii[i], &cj, j)
            + overlap_energy(voxel_side, radii, centers, grid, j, radii[j], &ci, i);
        if after < before {
            radii.swap(i, j);
            accepted += 1;
        }
    }
    accepted
}

/// Periodic cell list used during packing.
struct CellGrid {
    n: usize,
    cell: f64,
    voxel_side: f64,
    cells: Vec<Vec<usize>>,
}

impl CellGrid {
    fn new(voxel_side: f64, min_cell: f64) -> Self {
        let n = ((voxel_side / min_cell.max(1e-9)).floor() as usize).clamp(1, 64);
        Self { n, cell: voxel_side / n as f64, voxel_side, cells: vec![Vec::new(); n * n * n] }
    }

    fn build(voxel_side: f64, min_cell: f64, centers: &[Vec3]) -> Self {
        let mut grid = Self::new(voxel_side, min_cell);
        for (i, c) in centers.iter().enumerate() {
            grid.insert(i, c);
        }
        grid
    }

    fn coords(&self, p: &Vec3) -> [i64; 3] {
        let c = |x: f64| {
            let w = wrap_coordinate(x, self.voxel_side);
            ((w / self.cell) as i64).min(self.n as i64 - 1)
        };
        [c(p.x), c(p.y), c(p.z)]
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let n = self.n as i64;
        let w = |x: i64| x.rem_euclid(n) as usize;
        (w(c[0]) * self.n + w(c[1])) * self.n + w(c[2])
    }

    fn insert(&mut self, id: usize, p: &Vec3) {
        let cell = self.flat(self.coords(p));
        self.cells[cell].push(id);
    }

    fn relocate(&mut self, id: usize, from: &Vec3, to: &Vec3) {
        let a = self.flat(self.coords(from));
        let b = self.flat(self.coords(to));
        if a != b {
            let cell = &mut self.cells[a];
            let pos = cell.iter().position(|&x| x == id).expect("sphere registered in its cell");
            cell.swap_remove(pos);
            self.cells[b].push(id);
        }
    }

    /// Smallest `distance / (r_i + r_j)` over neighbouring pairs.
    fn min_separation_ratio(&self, centers: &[Vec3], radii: &[f64]) -> f64 {
        let mut ratio = f64::INFINITY;
        self.for_each_pair(|i, j| {
            let d = min_image(&centers[i], &centers[j], self.voxel_side).norm();
            ratio = ratio.min(d / (radii[i] + radii[j]));
        });
        ratio
    }

    /// Ids in the 27 cells around `p` (every id once).
    fn neighbors<'a>(&'a self, p: &Vec3) -> Box<dyn Iterator<Item = usize> + 'a> {
        if self.n < 3 {
            return Box::new(self.cells.iter().flatten().copied());
        }
        let c = self.coords(p);
        Box::new(
            (-1..=1)
                .flat_map(move |a| (-1..=1).flat_map(move |b| (-1..=1).map(move |d| [a, b, d])))
                .flat_map(move |o| self.cells[self.flat([c[0] + o[0], c[1] + o[1], c[2] + o[2]])].iter().copied()),
        )
    }

    /// Calls `f(i, j)` with `i < j` once for every pair in adjacent cells.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        if self.n < 3 {
            let all: Vec<usize> = self.cells.iter().flatten().copied().collect();
            for (a, &i) in all.iter().enumerate() {
                for &j in &all[a + 1..] {
                    f(i.min(j), i.max(j));
                }
            }
            return;
        }
        let n = self.n as i64;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let home = &self.cells[self.flat([x, y, z])];
                    for (a, &i) in home.iter().enumerate() {
                        for &j in &home[a + 1..] {
                            f(i.min(j), i.max(j));
                        }
                    }
                    // Half of the 26 neighbours, so each cell pair is visited once.
                    for o in HALF_SHELL {
                        let other = &self.cells[self.flat([x + o[0], y + o[1], z + o[2]])];
                        for &i in home {
                            for &j in other {
                                f(i.min(j), i.max(j));
                            }
                        }
                    }
                }
            }
        }
    }
}

const HALF_SHELL: [[i64; 3]; 13] = [
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [-1, 1, 0],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
    [-1, 1, 1],
    [1, 0, -1],
    [1, 1, -1],
    [0, 1, -1],
    [-1, 1, -1],
    [0, 0, 1],
];
