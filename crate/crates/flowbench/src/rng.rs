//! Deterministic random number streams.
//!
//! Every consumer of randomness gets its own stream derived from the
//! experiment seed, a purpose tag, and an index. Streams are ChaCha12
//! generators whose 256-bit keys come from a fixed splitmix-style expansion,
//! so the mapping (seed, tag, index) -> stream is stable across platforms and
//! toolchain versions. Gaussians use Box-Muller with both outputs consumed,
//! which keeps draw counts independent of the values drawn.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::numeric::Point;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn derive_key(seed: u64, tag: &str, index: u64) -> [u8; 32] {
    let s0 = mix64(seed ^ 0xA076_1D64_78BD_642F);
    let s1 = mix64(s0 ^ fnv1a(tag));
    let s2 = mix64(s1 ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut key = [0u8; 32];
    for i in 0..4 {
        let word = mix64(s2.wrapping_add((i as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93)));
        key[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
    }
    key
}

/// Serializable snapshot of a stream, sufficient to continue it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub key: [u8; 32],
    pub word_pos: u128,
    pub cached_normal: Option<f64>,
}

impl RngState {
    pub const ENCODED_LEN: usize = 32 + 16 + 1 + 8;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        match self.cached_normal {
            Some(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(Error::invalid(format!(
                "rng state needs {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes[..32]);
        let word_pos = u128::from_le_bytes(bytes[32..48].try_into().unwrap());
        let cached_normal = if bytes[48] == 1 {
            Some(f64::from_le_bytes(bytes[49..57].try_into().unwrap()))
        } else {
            None
        };
        Ok(RngState { key, word_pos, cached_normal })
    }
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    key: [u8; 32],
    rng: ChaCha12Rng,
    cached_normal: Option<f64>,
}

impl SeededRng {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self::derived(seed, "root", 0)
    }

    /// Stream for one logical consumer. Identical (seed, tag, index) always
    /// yields the identical stream; distinct tags or indices are unrelated.
    pub fn derived(seed: u64, tag: &str, index: u64) -> Self {
        let key = derive_key(seed, tag, index);
        SeededRng { key, rng: ChaCha12Rng::from_seed(key), cached_normal: None }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.key,
            word_pos: self.rng.get_word_pos(),
            cached_normal: self.cached_normal,
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = ChaCha12Rng::from_seed(state.key);
        rng.set_word_pos(state.word_pos);
        SeededRng { key: state.key, rng, cached_normal: state.cached_normal }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform draw in (0, 1]; used where a logarithm follows.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    /// Uniform index in [0, n). The modulo bias is below 1e-15 for every n
    /// used here and the draw consumes exactly one u64.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Each uniform pair yields two normals;
    /// the second is cached and returned by the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }
}

/// Draws a point from an isotropic Gaussian with the given mean and standard
/// deviation. Coordinates are drawn in ascending order.
pub fn gaussian_sample(rng: &mut SeededRng, d: usize, mean: &Point, std: f64) -> Result<Point> {
    if std < 0.0 {
        return Err(Error::invalid(format!("negative standard deviation {std}")));
    }
    if mean.dim() != d {
        return Err(Error::invalid(format!(
            "mean has dimension {}, expected {d}",
            mean.dim()
        )));
    }
    let coords = (0..d).map(|c| mean[c] + std * rng.standard_normal()).collect();
    Ok(Point::new(coords))
}
