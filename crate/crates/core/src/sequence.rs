//! Pulsed-gradient spin-echo protocols.
//!
//! Times are in ms, b in ms/µm², gradient amplitudes in mT/m.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::substrate::Vec3;

/// Proton gyromagnetic ratio (rad s⁻¹ T⁻¹).
pub const GAMMA: f64 = 2.675_152_5e8;

/// (rad/s/T · ms · mT/m)² · ms expressed in ms/µm².
const B_UNIT: f64 = 1e-9 * 1e-6 * 1e-6 * 1e-3;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid measurement: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("protocol file line {line}: {message}")]
    Format { line: usize, message: String },
}

pub fn b_value(gamma: f64, delta_small: f64, delta_big: f64, g: f64) -> f64 {
    let q = gamma * delta_small * g;
    q * q * (delta_big - delta_small / 3.0) * B_UNIT
}

pub fn g_for_b(gamma: f64, delta_small: f64, delta_big: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    (b / (B_UNIT * (delta_big - delta_small / 3.0))).sqrt() / (gamma * delta_small)
}

/// Deterministic near-uniform unit vectors.
///
/// A spherical Fibonacci lattice relaxed by a fixed number of repulsion steps
/// that treat `u` and `-u` as the same direction. One direction is `+z`.
pub fn uniform_directions(n: usize) -> Vec<Vec3> {
    match n {
        0 => return Vec::new(),
        1 => return vec![Vec3::z()],
        _ => {}
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut dirs: Vec<Vec3> = (0..n)
        .map(|i| {
            let t = i as f64 + 0.5;
            let z = 1.0 - 2.0 * t / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = t * golden;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect();
    for _ in 0..300 {
        let forces: Vec<Vec3> = (0..n)
            .map(|i| {
                let mut f = Vec3::zeros();
                for j in 0..n {
                    if j != i {
                        let d = dirs[i] - dirs[j];
                        f += d / d.norm().powi(3);
                    }
                    let d = dirs[i] + dirs[j];
                    f += d / d.norm().powi(3);
                }
                f - dirs[i] * f.dot(&dirs[i])
            })
            .collect();
        let largest = forces.iter().flat_map(|f| f.iter().map(|x| x.abs())).fold(1.0, f64::max);
        for (d, f) in dirs.iter_mut().zip(&forces) {
            *d = (*d + f * (0.1 / largest)).normalize();
        }
    }
    dirs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgseMeasurement {
    pub delta_small: f64,
    pub delta_big: f64,
    pub b: f64,
    pub g: f64,
    pub direction: Vec3,
    pub te: f64,
}

/// The (δ, Δ) pair that fixes the gradient waveform up to amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub delta_small: f64,
    pub delta_big: f64,
}

impl PgseMeasurement {
    pub fn from_b(delta_small: f64, delta_big: f64, b: f64, direction: Vec3, te: f64) -> Result<Self, SequenceError> {
        let g = g_for_b(GAMMA, delta_small, delta_big, b);
        Self { delta_small, delta_big, b, g, direction, te }.checked()
    }

    pub fn from_g(delta_small: f64, delta_big: f64, g: f64, direction: Vec3, te: f64) -> Result<Self, SequenceError> {
        let b = b_value(GAMMA, delta_small, delta_big, g);
        Self { delta_small, delta_big, b, g, direction, te }.checked()
    }

    fn checked(self) -> Result<Self, SequenceError> {
        let bad = |m: String| Err(SequenceError::Invalid(m));
        if !(self.delta_small > 0.0 && self.delta_small.is_finite()) {
            return bad(format!("δ = {}", self.delta_small));
        }
        if !(self.delta_big >= self.delta_small && self.delta_big.is_finite()) {
            return bad(format!("Δ = {} < δ = {}", self.delta_big, self.delta_small));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return bad(format!("b = {}", self.b));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-12 {
            return bad(format!("direction {:?} is not unit length", self.direction));
        }
        Ok(self)
    }

    pub fn timing(&self) -> Timing {
        Timing { delta_small: self.delta_small, delta_big: self.delta_big }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub name: String,
    pub measurements: Vec<PgseMeasurement>,
    pub n_directions: usize,
}

impl Protocol {
    /// Builds a protocol, appending a `b = 0` reference for every timing that
    /// lacks one.
    pub fn new(name: impl Into<String>, mut measurements: Vec<PgseMeasurement>, n_directions: usize) -> Self {
        let timings = distinct_timings(&measurements);
        for t in timings {
            let has_reference = measurements.iter().any(|m| m.timing() == t && m.b == 0.0);
            if !has_reference {
                let te = measurements.iter().find(|m| m.timing() == t).map_or(0.0, |m| m.te);
                measurements.push(PgseMeasurement {
                    delta_small: t.delta_small,
                    delta_big: t.delta_big,
                    b: 0.0,
                    g: 0.0,
                    direction: Vec3::z(),
                    te,
                });
            }
        }
        Self { name: name.into(), measurements, n_directions }
    }

    /// Distinct (δ, Δ) pairs in order of first appearance.
    pub fn timings(&self) -> Vec<Timing> {
        distinct_timings(&self.measurements)
    }

    /// Distinct Δ values, ascending.
    pub fn delta_bigs(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.measurements.iter().map(|m| m.delta_big).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Longest gradient end time Δ + δ.
    pub fn duration(&self) -> f64 {
        self.measurements.iter().map(|m| m.delta_big + m.delta_small).fold(0.0, f64::max)
    }
}

fn distinct_timings(measurements: &[PgseMeasurement]) -> Vec<Timing> {
    let mut out: Vec<Timing> = Vec::new();
    for m in measurements {
        if !out.contains(&m.timing()) {
            out.push(m.timing());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    E1,
    Sandi,
    Verdict,
    Nexi,
    /// NEXI with the b-set {0, 1, 2.5, 4, 5} ms/µm².
    NexiText,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::E1, Preset::Sandi, Preset::Verdict, Preset::Nexi, Preset::NexiText];

    pub fn name(self) -> &'static str {
        match self {
            Preset::E1 => "E1",
            Preset::Sandi => "SANDI",
            Preset::Verdict => "VERDICT",
            Preset::Nexi => "NEXI",
            Preset::NexiText => "NEXI_TEXT",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = SequenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SequenceError::UnknownPreset(s.to_string()))
    }
}

pub fn preset_by_name(name: &str) -> Result<Protocol, SequenceError> {
    Ok(preset(name.parse()?))
}

fn shell_protocol(name: &str, delta_small: f64, deltas: &[f64], bs: &[f64], n_dirs: usize, te: f64) -> Protocol {
    let dirs = uniform_directions(n_dirs);
    let mut ms = Vec::new();
    for &delta_big in deltas {
        for &b in bs {
            if b == 0.0 {
                ms.push(PgseMeasurement::from_b(delta_small, delta_big, 0.0, Vec3::z(), te).expect("valid preset"));
                continue;
            }
            for d in &dirs {
                ms.push(PgseMeasurement::from_b(delta_small, delta_big, b, *d, te).expect("valid preset"));
            }
        }
    }
    Protocol::new(name, ms, n_dirs)
}

pub const VERDICT_G_MIN: f64 = 40.0;
pub const VERDICT_G_MAX: f64 = 400.0;
pub const VERDICT_G_STEPS: usize = 10;

pub fn preset(which: Preset) -> Protocol {
    let deltas = [12.0, 20.0, 30.0, 40.0];
    match which {
        Preset::E1 => shell_protocol("E1", 4.5, &deltas, &[1.0, 2.5, 4.0, 5.5, 7.0], 24, 50.0),
        Preset::Nexi => shell_protocol("NEXI", 4.5, &deltas, &[1.0, 2.5, 4.0, 5.5, 7.0], 24, 50.0),
        Preset::NexiText => shell_protocol("NEXI_TEXT", 4.5, &deltas, &[0.0, 1.0, 2.5, 4.0, 5.0], 24, 50.0),
        Preset::Sandi => shell_protocol(
            "SANDI",
            3.0,
            &[11.0, 20.0],
            &[0.0, 1.0, 2.5, 3.0, 4.0, 5.5, 7.0, 8.5, 10.0],
            24,
            30.0,
        ),
        Preset::Verdict => {
            let dirs = uniform_directions(3);
            let ratio = (VERDICT_G_MAX / VERDICT_G_MIN).powf(1.0 / (VERDICT_G_STEPS - 1) as f64);
            let gs: Vec<f64> = (0..VERDICT_G_STEPS).map(|k| VERDICT_G_MIN * ratio.powi(k as i32)).collect();
            let mut ms = Vec::new();
            for delta_big in [10.0, 20.0, 30.0, 40.0] {
                let smalls: &[f64] = if delta_big >= 30.0 { &[3.0, 10.0] } else { &[3.0] };
                for &delta_small in smalls {
                    for &g in &gs {
                        for d in &dirs {
                            ms.push(PgseMeasurement::from_g(delta_small, delta_big, g, *d, 50.0).expect("valid preset"));
                        }
                    }
                }
            }
            Protocol::new("VERDICT", ms, 3)
        }
    }
}

const MAGIC: &str = "permeadiff-protocol";
pub const PROTOCOL_FORMAT_VERSION: u32 = 1;

/// Text format: a header, `name`, `n_directions`, then one
/// `delta_ms Delta_ms b gx gy gz te_ms` line per measurement.
pub fn write_protocol<W: Write>(protocol: &Protocol, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC} {PROTOCOL_FORMAT_VERSION}")?;
    writeln!(w, "name {}", protocol.name)?;
    writeln!(w, "n_directions {}", protocol.n_directions)?;
    writeln!(w, "# delta_ms Delta_ms b_ms_per_um2 gx gy gz te_ms")?;
    for m in &protocol.measurements {
        let d = m.direction;
        writeln!(w, "{:?} {:?} {:?} {:?} {:?} {:?} {:?}", m.delta_small, m.delta_big, m.b, d.x, d.y, d.z, m.te)?;
    }
    w.flush()
}

pub fn read_protocol<R: Read>(reader: R) -> Result<Protocol, SequenceError> {
    let mut name = None;
    let mut n_directions = None;
    let mut measurements = Vec::new();
    let mut seen_header = false;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let number = i + 1;
        let err = |message: String| SequenceError::Format { line: number, message };
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !seen_header {
            let mut parts = text.split_whitespace();
            if parts.next() != Some(MAGIC) || parts.next() != Some("1") {
                return Err(err("not a version 1 protocol file".into()));
            }
            seen_header = true;
            continue;
        }
        if let Some(rest) = text.strip_prefix("name ") {
            name = Some(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = text.strip_prefix("n_directions ") {
            n_directions = Some(rest.trim().parse().map_err(|_| err(format!("bad count {rest:?}")))?);
            continue;
        }
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(format!("bad number {t:?}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 7 {
            return Err(err(format!("expected 7 values, found {}", values.len())));
        }
        let direction = Vec3::new(values[3], values[4], values[5]);
        let m = PgseMeasurement::from_b(values[0], values[1], values[2], direction, values[6])
            .map_err(|e| err(e.to_string()))?;
        measurements.push(m);
    }
    if !seen_header {
        return Err(SequenceError::Format { line: 1, message: "empty protocol file".into() });
    }
    let name = name.unwrap_or_else(|| "custom".into());
    Ok(Protocol::new(name, measurements, n_directions.unwrap_or(1)))
}

pub fn save_protocol(protocol: &Protocol, path: impl AsRef<Path>) -> Result<(), SequenceError> {
    write_protocol(protocol, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_protocol(path: impl AsRef<Path>) -> Result<Protocol, SequenceError> {
    read_protocol(File::open(path)?)
}
