//! Binary trajectory dump for debugging.
//!
//! Little-endian layout: the 8-byte magic, `u64` walker count, `u64` frame
//! count, then one record per (walker, frame) in walker-major order:
//! `u64` walker id, `u64` step, three `f64` displacement components (µm).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::substrate::Vec3;

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"PDTRAJ01";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub n_walkers: usize,
    /// Step index of every frame.
    pub steps: Vec<u64>,
    /// Walker-major: entry `w * steps.len() + f`.
    pub displacements: Vec<Vec3>,
}

pub fn write_trajectory_dump(record: &TrajectoryRecord, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&(record.n_walkers as u64).to_le_bytes())?;
    w.write_all(&(record.steps.len() as u64).to_le_bytes())?;
    let frames = record.steps.len();
    for (i, d) in record.displacements.iter().enumerate() {
        w.write_all(&((i / frames) as u64).to_le_bytes())?;
        w.write_all(&record.steps[i % frames].to_le_bytes())?;
        for x in d.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_trajectory_dump(path: impl AsRef<Path>) -> std::io::Result<TrajectoryRecord> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not a trajectory dump"));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> std::io::Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let n_walkers = u64::from_le_bytes(next(&mut r)?) as usize;
    let frames = u64::from_le_bytes(next(&mut r)?) as usize;
    let mut steps = vec![0u64; frames];
    let mut displacements = Vec::with_capacity(n_walkers * frames);
    for i in 0..n_walkers * frames {
        let _walker = u64::from_le_bytes(next(&mut r)?);
        let step = u64::from_le_bytes(next(&mut r)?);
        if i < frames {
            steps[i] = step;
        }
        let x = f64::from_le_bytes(next(&mut r)?);
        let y = f64::from_le_bytes(next(&mut r)?);
        let z = f64::from_le_bytes(next(&mut r)?);
        displacements.push(Vec3::new(x, y, z));
    }
    Ok(TrajectoryRecord { n_walkers, steps, displacements })
}
