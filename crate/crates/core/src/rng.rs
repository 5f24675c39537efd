//! Counter-based random numbers (Philox4x32-10).
//!
//! Every draw is a pure function of `(key, counter)`, so a walker's random
//! sequence depends only on `(seed, walker id, step id, draw index)` and never
//! on how walkers are scheduled across threads.

use nalgebra::Vector3;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32 block with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline(always)]
fn to_unit(hi: u32, lo: u32) -> f64 {
    let bits = (u64::from(hi) << 32) | u64::from(lo);
    // 53 random mantissa bits, value in [0, 1).
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Random stream for one `(seed, stream, step)` triple.
///
/// Successive calls walk the trailing draw counter; two generators with the
/// same triple produce identical values.
#[derive(Debug, Clone)]
pub struct StepRng {
    key: [u32; 2],
    stream: u64,
    step: u32,
    draw: u32,
    buffer: [u32; 4],
    buffered: u8,
}

impl StepRng {
    #[inline]
    pub fn new(seed: u64, stream: u64, step: u32) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            stream,
            step,
            draw: 0,
            buffer: [0; 4],
            buffered: 0,
        }
    }

    #[inline]
    fn refill(&mut self) {
        let counter = [self.draw, self.step, self.stream as u32, (self.stream >> 32) as u32];
        self.buffer = philox4x32_10(counter, self.key);
        self.draw = self.draw.wrapping_add(1);
        self.buffered = 4;
    }

    #[inline]
    fn next_word(&mut self) -> u32 {
        if self.buffered == 0 {
            self.refill();
        }
        self.buffered -= 1;
        self.buffer[3 - self.buffered as usize]
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let hi = self.next_word();
        let lo = self.next_word();
        to_unit(hi, lo)
    }

    /// Uniformly distributed unit vector (Marsaglia 1972), drawn from 32-bit
    /// coordinates.
    #[inline]
    pub fn unit_vector(&mut self) -> Vector3<f64> {
        const SCALE: f64 = 2.0 / 4_294_967_296.0;
        loop {
            let a = self.next_word() as f64 * SCALE - 1.0;
            let b = self.next_word() as f64 * SCALE - 1.0;
            let s = a * a + b * b;
            if s < 1.0 && s > 0.0 {
                let f = 2.0 * (1.0 - s).sqrt();
                return Vector3::new(a * f, b * f, 1.0 - 2.0 * s);
            }
        }
    }
}

/// Derive an independent 64-bit seed from a parent seed and a label (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
