//! Counter-based Gaussian noise.
//!
//! Every variate is a pure function of `(seed, stream_id, counter_base + index)`:
//! a Philox4x32-10 block is evaluated at that counter and its output is fed
//! through Box–Muller. Filling a buffer in any order or from any number of
//! threads therefore yields the same values.
//!
//! Stream ids: normalization layer `l` of a model draws from stream `l`.
//! Robustness probes use [`NoiseStream::robustness_stream_id`], which sets
//! the top bit so the two families never collide.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Elements below this count are filled on the calling thread.
const PAR_FILL_MIN: usize = 1 << 14;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
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

/// Maps 64 random bits to the open interval (0, 1).
#[inline]
fn to_unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Addressable source of standard normal variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter_base: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id, counter_base: 0 }
    }

    /// Same stream, offset to a training step. Each step reserves 2^32 counters.
    pub fn at_step(self, step: u64) -> Self {
        Self { counter_base: step << 32, ..self }
    }

    pub fn with_counter_base(self, counter_base: u64) -> Self {
        Self { counter_base, ..self }
    }

    /// Stream used when probing noise robustness at `layer` for Monte Carlo draw `draw`.
    pub fn robustness_stream_id(layer: usize, draw: usize) -> u64 {
        (1u64 << 63) | ((layer as u64) << 32) | (draw as u64 & 0xFFFF_FFFF)
    }

    /// The standard normal variate at `index`.
    pub fn gaussian_at(&self, index: u64) -> f64 {
        let ctr = self.counter_base.wrapping_add(index);
        let out = philox4x32(
            [
                ctr as u32,
                (ctr >> 32) as u32,
                self.stream_id as u32,
                (self.stream_id >> 32) as u32,
            ],
            [self.seed as u32, (self.seed >> 32) as u32],
        );
        let u1 = to_unit_open(((out[0] as u64) << 32) | out[1] as u64);
        let u2 = to_unit_open(((out[2] as u64) << 32) | out[3] as u64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Writes the variates for indices `offset..offset + out.len()`.
    pub fn fill(&self, offset: u64, out: &mut [f64]) {
        if out.len() < PAR_FILL_MIN {
            for (i, z) in out.iter_mut().enumerate() {
                *z = self.gaussian_at(offset + i as u64);
            }
        } else {
            out.par_iter_mut()
                .enumerate()
                .for_each(|(i, z)| *z = self.gaussian_at(offset + i as u64));
        }
    }

    pub fn sample_vec(&self, offset: u64, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        self.fill(offset, &mut v);
        v
    }
}
