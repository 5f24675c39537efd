//! Signal synthesis from walker phases, Rician noise and bootstrap errors.

use std::io::{Read, Write};

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::sequence::{PgseMeasurement, Protocol, Timing, GAMMA};
use crate::substrate::{Compartment, Vec3};

/// rad/s/T · mT/m · µm · ms expressed in rad.
const PHASE_UNIT: f64 = 1e-3 * 1e-6 * 1e-3;

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 100;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("no walkers to average over")]
    EmptyEnsemble,
    #[error("protocol timing δ = {0} ms, Δ = {1} ms was not simulated")]
    MissingTiming(f64, f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Neumaier-compensated running sum of vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: Vec3,
    carry: Vec3,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: Vec3) {
        for k in 0..3 {
            let s = self.sum[k];
            let t = s + x[k];
            self.carry[k] += if s.abs() >= x[k].abs() { (s - t) + x[k] } else { (x[k] - t) + s };
            self.sum[k] = t;
        }
    }

    #[inline]
    pub fn value(&self) -> Vec3 {
        self.sum + self.carry
    }
}

/// Gradient integral `∫ G(t) x(t) dt / g` of a rectangular PGSE waveform for
/// positions sampled at the start of every step (µm·ms).
pub fn gradient_integral(positions: &[Vec3], timing: &Timing, dt: f64) -> Vec3 {
    let pulse = (timing.delta_small / dt).round() as usize;
    let separation = (timing.delta_big / dt).round() as usize;
    let mut sum = CompensatedSum::default();
    for (k, x) in positions.iter().enumerate() {
        if k < pulse {
            sum.add(*x);
        } else if k >= separation && k < separation + pulse {
            sum.add(-x);
        }
    }
    sum.value() * dt
}

/// Phase (rad) of a measurement given the walker's gradient integral.
#[inline]
pub fn phase_from_integral(gamma: f64, m: &PgseMeasurement, integral: &Vec3) -> f64 {
    gamma * m.g * m.direction.dot(integral) * PHASE_UNIT
}

/// Phase accumulated along a stored trajectory (positions at the start of
/// every step, µm; `dt` in ms).
pub fn accumulate_phase(positions: &[Vec3], m: &PgseMeasurement, gamma: f64, dt: f64) -> f64 {
    phase_from_integral(gamma, m, &gradient_integral(positions, &m.timing(), dt))
}

/// Per-walker gradient integrals for every simulated timing. Phases of any
/// measurement sharing a timing follow by scaling with `g · direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLedger {
    timings: Vec<Timing>,
    initial: Vec<Compartment>,
    /// Timing-major: entry `t * n_walkers + w`.
    integrals: Vec<Vec3>,
}

impl PhaseLedger {
    pub fn new(timings: Vec<Timing>, initial: Vec<Compartment>, integrals: Vec<Vec3>) -> Self {
        assert_eq!(integrals.len(), timings.len() * initial.len());
        Self { timings, initial, integrals }
    }

    pub fn n_walkers(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[Compartment] {
        &self.initial
    }

    pub fn timings(&self) -> &[Timing] {
        &self.timings
    }

    fn timing_index(&self, t: &Timing) -> Result<usize, SignalError> {
        self.timings
            .iter()
            .position(|x| (x.delta_small - t.delta_small).abs() < 1e-9 && (x.delta_big - t.delta_big).abs() < 1e-9)
            .ok_or(SignalError::MissingTiming(t.delta_small, t.delta_big))
    }

    pub fn integrals(&self, t: &Timing) -> Result<&[Vec3], SignalError> {
        let i = self.timing_index(t)?;
        let n = self.n_walkers();
        Ok(&self.integrals[i * n..(i + 1) * n])
    }

    pub fn phases(&self, m: &PgseMeasurement) -> Result<Vec<f64>, SignalError> {
        Ok(self.integrals(&m.timing())?.iter().map(|v| phase_from_integral(GAMMA, m, v)).collect())
    }

    /// Ledger restricted to the given walkers (repeats allowed).
    pub fn select(&self, walkers: &[usize]) -> Self {
        let n = self.n_walkers();
        let integrals = (0..self.timings.len())
            .flat_map(|t| walkers.iter().map(move |&w| t * n + w))
            .map(|i| self.integrals[i])
            .collect();
        Self { timings: self.timings.clone(), initial: walkers.iter().map(|&w| self.initial[w]).collect(), integrals }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalRow {
    pub delta_small: f64,
    pub delta_big: f64,
    pub b: f64,
    pub direction: Vec3,
    pub s: f64,
    pub s_intra: f64,
    pub s_extra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowderRow {
    pub delta_small: f64,
    pub delta_big: f64,
    pub b: f64,
    pub s: f64,
    pub s_intra: f64,
    pub s_extra: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub substrate_id: String,
    pub seed: u64,
    pub n_walkers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    pub rows: Vec<SignalRow>,
    pub powder: Vec<PowderRow>,
    pub intra_fraction: f64,
    pub provenance: Provenance,
}

/// Mean of `exp(-iφ)` over all walkers and over each initial compartment.
fn magnetisation(phases: &[f64], initial: &[Compartment]) -> [Complex<f64>; 3] {
    let mut sums = [Complex::new(0.0, 0.0); 3];
    let mut counts = [0usize; 3];
    for (&phi, c) in phases.iter().zip(initial) {
        let z = Complex::new(phi.cos(), -phi.sin());
        let k = if c.is_intra() { 1 } else { 2 };
        sums[0] += z;
        sums[k] += z;
        counts[0] += 1;
        counts[k] += 1;
    }
    let mut out = sums;
    for (o, &c) in out.iter_mut().zip(&counts) {
        if c > 0 {
            *o /= c as f64;
        }
    }
    out
}

/// Magnitude signal and its compartment parts.
///
/// The compartment signals are the projections of each compartment's mean
/// magnetisation on the total one, so that the fraction-weighted parts add up
/// to the total exactly.
fn signals(m: &[Complex<f64>; 3]) -> (f64, f64, f64) {
    let total = m[0].norm();
    if total == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let project = |z: Complex<f64>| (z * m[0].conj()).re / total;
    (total, project(m[1]), project(m[2]))
}

/// Normalised signals for every measurement of `protocol`, plus powder
/// averages per (δ, Δ, b).
pub fn synthesize(ledger: &PhaseLedger, protocol: &Protocol) -> Result<SignalSet, SignalError> {
    if ledger.n_walkers() == 0 {
        return Err(SignalError::EmptyEnsemble);
    }
    let raw: Vec<(f64, f64, f64)> = protocol
        .measurements
        .par_iter()
        .map(|m| Ok(signals(&magnetisation(&ledger.phases(m)?, ledger.initial()))))
        .collect::<Result<_, SignalError>>()?;

    // b = 0 references per timing. Phases vanish there, so these are 1 up to
    // the empty-compartment case.
    let reference = |t: Timing| {
        protocol
            .measurements
            .iter()
            .zip(&raw)
            .find(|(m, _)| m.timing() == t && m.b == 0.0)
            .map_or((1.0, 1.0, 1.0), |(_, r)| *r)
    };
    let normalise = |x: f64, r: f64| if r > 0.0 { x / r } else { 0.0 };
    let rows: Vec<SignalRow> = protocol
        .measurements
        .iter()
        .zip(&raw)
        .map(|(m, &(s, si, se))| {
            let (r, ri, re) = reference(m.timing());
            SignalRow {
                delta_small: m.delta_small,
                delta_big: m.delta_big,
                b: m.b,
                direction: m.direction,
                s: normalise(s, r),
                s_intra: normalise(si, ri),
                s_extra: normalise(se, re),
            }
        })
        .collect();

    let n_intra = ledger.initial().iter().filter(|c| c.is_intra()).count();
    Ok(SignalSet {
        powder: powder_average(&rows),
        rows,
        intra_fraction: n_intra as f64 / ledger.n_walkers() as f64,
        provenance: Provenance { n_walkers: ledger.n_walkers(), ..Default::default() },
    })
}

/// Arithmetic mean over directions for each (δ, Δ, b), in order of first
/// appearance.
pub fn powder_average(rows: &[SignalRow]) -> Vec<PowderRow> {
    let mut out: Vec<(PowderRow, usize)> = Vec::new();
    for r in rows {
        let slot = out
            .iter_mut()
            .find(|(p, _)| p.delta_small == r.delta_small && p.delta_big == r.delta_big && p.b == r.b);
        match slot {
            Some((p, n)) => {
                p.s += r.s;
                p.s_intra += r.s_intra;
                p.s_extra += r.s_extra;
                *n += 1;
            }
            None => out.push((
                PowderRow {
                    delta_small: r.delta_small,
                    delta_big: r.delta_big,
                    b: r.b,
                    s: r.s,
                    s_intra: r.s_intra,
                    s_extra: r.s_extra,
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(mut p, n)| {
            let n = n as f64;
            p.s /= n;
            p.s_intra /= n;
            p.s_extra /= n;
            p
        })
        .collect()
}

pub fn add_rician_noise<R: Rng + ?Sized>(s: f64, snr: f64, rng: &mut R) -> f64 {
    if snr.is_infinite() {
        return s;
    }
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    ((s + n1 / snr).powi(2) + (n2 / snr).powi(2)).sqrt()
}

/// Noisy copy of `signals` drawn from a generator seeded with `seed`.
pub fn rician_replicate(signals: &[f64], snr: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    signals.iter().map(|&s| add_rician_noise(s, snr, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmseRow {
    pub delta_small: f64,
    pub delta_big: f64,
    pub b: f64,
    pub nmse: f64,
}

/// Bootstrap normalised mean squared error of the powder-averaged signal.
///
/// Walkers are resampled with replacement `n_replicates` times; for every
/// (δ, Δ, b) the NMSE is the replicate mean of `(S_rep − S)² / S²`.
pub fn bootstrap_nmse(
    ledger: &PhaseLedger,
    protocol: &Protocol,
    n_replicates: usize,
    seed: u64,
) -> Result<Vec<NmseRow>, SignalError> {
    let n = ledger.n_walkers();
    if n == 0 {
        return Err(SignalError::EmptyEnsemble);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<Vec<u32>> = (0..n_replicates)
        .map(|_| {
            let mut c = vec![0u32; n];
            for _ in 0..n {
                c[rng.gen_range(0..n)] += 1;
            }
            c
        })
        .collect();

    // Per measurement: full-sample signal and every replicate's signal.
    let per_measurement: Vec<(f64, Vec<f64>)> = protocol
        .measurements
        .par_iter()
        .map(|m| {
            let phases = ledger.phases(m)?;
            let (cos, sin): (Vec<f64>, Vec<f64>) = phases.iter().map(|p| (p.cos(), p.sin())).unzip();
            let full = Complex::new(cos.iter().sum::<f64>(), sin.iter().sum::<f64>()).norm() / n as f64;
            let reps = counts
                .iter()
                .map(|c| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for ((&k, &x), &y) in c.iter().zip(&cos).zip(&sin) {
                        re += k as f64 * x;
                        im += k as f64 * y;
                    }
                    Complex::new(re, im).norm() / n as f64
                })
                .collect();
            Ok((full, reps))
        })
        .collect::<Result<_, SignalError>>()?;

    let mut groups: Vec<(NmseRow, Vec<usize>)> = Vec::new();
    for (i, m) in protocol.measurements.iter().enumerate() {
        match groups
            .iter_mut()
            .find(|(r, _)| r.delta_small == m.delta_small && r.delta_big == m.delta_big && r.b == m.b)
        {
            Some((_, members)) => members.push(i),
            None => groups.push((
                NmseRow { delta_small: m.delta_small, delta_big: m.delta_big, b: m.b, nmse: 0.0 },
                vec![i],
            )),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(mut row, members)| {
            let k = members.len() as f64;
            let full = members.iter().map(|&i| per_measurement[i].0).sum::<f64>() / k;
            let mut acc = 0.0;
            for r in 0..n_replicates {
                let rep = members.iter().map(|&i| per_measurement[i].1[r]).sum::<f64>() / k;
                acc += ((rep - full) / full).powi(2);
            }
            row.nmse = if n_replicates > 0 && full > 0.0 { acc / n_replicates as f64 } else { 0.0 };
            row
        })
        .collect())
}

pub fn write_signals_csv<W: Write>(set: &SignalSet, w: W) -> Result<(), SignalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["delta_ms", "Delta_ms", "b", "dir_x", "dir_y", "dir_z", "S", "S_intra", "S_extra"])?;
    for r in &set.rows {
        out.serialize((
            r.delta_small,
            r.delta_big,
            r.b,
            r.direction.x,
            r.direction.y,
            r.direction.z,
            r.s,
            r.s_intra,
            r.s_extra,
        ))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_signals_csv`].
pub fn read_signals_csv<R: Read>(r: R) -> Result<Vec<SignalRow>, SignalError> {
    let mut reader = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let (delta_small, delta_big, b, x, y, z, s, s_intra, s_extra): (f64, f64, f64, f64, f64, f64, f64, f64, f64) =
            record?;
        rows.push(SignalRow { delta_small, delta_big, b, direction: Vec3::new(x, y, z), s, s_intra, s_extra });
    }
    Ok(rows)
}

pub fn write_powder_csv<W: Write>(set: &SignalSet, w: W) -> Result<(), SignalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["delta_ms", "Delta_ms", "b", "S", "S_intra", "S_extra"])?;
    for r in &set.powder {
        out.serialize((r.delta_small, r.delta_big, r.b, r.s, r.s_intra, r.s_extra))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_nmse_csv<W: Write>(rows: &[NmseRow], w: W) -> Result<(), SignalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["delta_ms", "Delta_ms", "b", "nmse"])?;
    for r in rows {
        out.serialize((r.delta_small, r.delta_big, r.b, r.nmse))?;
    }
    out.flush()?;
    Ok(())
}
