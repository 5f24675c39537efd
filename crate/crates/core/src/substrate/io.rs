//! Plain-text substrate files.
//!
//! ```text
//! permeadiff-substrate 1
//! voxel_side_um 30
//! icvf_target 0.5
//! icvf_achieved 0.4999999999
//! kappa_um_per_s 0
//! d_intra_um2_per_ms 2
//! d_extra_um2_per_ms 2
//! n_spheres 2
//! 4.5 6.25 7 5.0312
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form so loading reproduces the
//! saved substrate bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{compute_icvf, Sphere, Substrate, SubstrateError, Vec3};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "permeadiff-substrate";

pub fn write_substrate<W: Write>(substrate: &Substrate, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "voxel_side_um {:?}", substrate.voxel_side)?;
    writeln!(w, "icvf_target {:?}", substrate.icvf_target)?;
    writeln!(w, "icvf_achieved {:?}", compute_icvf(substrate))?;
    writeln!(w, "kappa_um_per_s {:?}", substrate.kappa)?;
    writeln!(w, "d_intra_um2_per_ms {:?}", substrate.d_intra)?;
    writeln!(w, "d_extra_um2_per_ms {:?}", substrate.d_extra)?;
    writeln!(w, "n_spheres {}", substrate.spheres.len())?;
    for s in &substrate.spheres {
        writeln!(w, "{:?} {:?} {:?} {:?}", s.center.x, s.center.y, s.center.z, s.radius)?;
    }
    w.flush()
}

pub fn save_substrate(substrate: &Substrate, path: impl AsRef<Path>) -> Result<(), SubstrateError> {
    let file = File::create(path)?;
    write_substrate(substrate, BufWriter::new(file))?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    number: usize,
}

impl<R: Read> Lines<R> {
    fn next_line(&mut self) -> Result<String, SubstrateError> {
        self.number += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn error(&self, message: impl Into<String>) -> SubstrateError {
        SubstrateError::Format { line: self.number, message: message.into() }
    }

    fn keyed(&mut self, key: &str) -> Result<f64, SubstrateError> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(format!("expected key {key}")));
        }
        let value = parts.next().ok_or_else(|| self.error(format!("missing value for {key}")))?;
        if parts.next().is_some() {
            return Err(self.error("trailing tokens"));
        }
        value.parse().map_err(|_| self.error(format!("bad number {value:?}")))
    }
}

pub fn read_substrate<R: Read>(reader: R) -> Result<Substrate, SubstrateError> {
    let mut lines = Lines { inner: BufReader::new(reader).lines(), number: 0 };
    let header = lines.next_line()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(lines.error("not a substrate file"));
    }
    match parts.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(FORMAT_VERSION) => {}
        other => return Err(lines.error(format!("unsupported version {other:?}"))),
    }
    let voxel_side = lines.keyed("voxel_side_um")?;
    let icvf_target = lines.keyed("icvf_target")?;
    let icvf_achieved = lines.keyed("icvf_achieved")?;
    let kappa = lines.keyed("kappa_um_per_s")?;
    let d_intra = lines.keyed("d_intra_um2_per_ms")?;
    let d_extra = lines.keyed("d_extra_um2_per_ms")?;
    let count = lines.keyed("n_spheres")?;
    if count < 0.0 || count.fract() != 0.0 {
        return Err(lines.error("sphere count must be a non-negative integer"));
    }
    let count = count as usize;
    let mut spheres = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next_line()?;
        let values: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match values {
            Ok(v) if v.len() == 4 => spheres.push(Sphere { center: Vec3::new(v[0], v[1], v[2]), radius: v[3] }),
            _ => return Err(lines.error("expected `cx cy cz r`")),
        }
    }
    let substrate = Substrate { voxel_side, spheres, icvf_target, kappa, d_intra, d_extra };
    let recomputed = compute_icvf(&substrate);
    if (recomputed - icvf_achieved).abs() > 1e-9 * icvf_achieved.abs().max(1.0) {
        return Err(lines.error(format!("ICVF {recomputed} disagrees with header {icvf_achieved}")));
    }
    Ok(substrate)
}

pub fn load_substrate(path: impl AsRef<Path>) -> Result<Substrate, SubstrateError> {
    read_substrate(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{pack_spheres, SphereSpec};

    fn sample() -> Substrate {
        pack_spheres(16.0, &[SphereSpec::new(2.0, 0.4, 1.0)], 0.3, 17)
            .unwrap()
            .with_biophysics(25.0, 2.0, 1.0)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        save_substrate(&s, &path).unwrap();
        let back = load_substrate(&path).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.spheres.iter().zip(&s.spheres) {
            assert_eq!(a.radius.to_bits(), b.radius.to_bits());
            assert_eq!(a.center.x.to_bits(), b.center.x.to_bits());
        }
        assert_eq!(compute_icvf(&back).to_bits(), compute_icvf(&s).to_bits());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let mut buf = Vec::new();
        write_substrate(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        let err = read_substrate(cut.as_bytes()).unwrap_err();
        assert!(matches!(err, SubstrateError::Format { .. }), "{err}");
        let err = read_substrate("garbage\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SubstrateError::Format { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_substrate("/nonexistent/x"), Err(SubstrateError::Io(_))));
    }
}
