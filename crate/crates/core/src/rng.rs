//! Named, seeded random streams.
//!
//! Every stochastic concern (party think times, dropouts, invocation crashes,
//! ...) draws from its own stream keyed by `(seed, stream_id)`. Adding a new
//! draw to one concern therefore never perturbs the sequences observed by the
//! others, which keeps replays stable as the simulator evolves.
//!
//! The generator is SplitMix64: tiny, platform-independent and entirely
//! self-contained, so identical `(seed, stream_id)` pairs produce identical
//! sequences on every platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RngError {
    #[error("uniform bounds must satisfy a <= b and be finite, got [{a}, {b}]")]
    BadUniform { a: f64, b: f64 },
    #[error("exponential rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("bernoulli probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("constant must be finite, got {0}")]
    BadConstant(f64),
}

/// Distribution specification for [`RngStream::draw`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { a: f64, b: f64 },
    Exponential { rate: f64 },
    Bernoulli { p: f64 },
    Constant { c: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<(), RngError> {
        match *self {
            Distribution::Uniform { a, b } => {
                if !a.is_finite() || !b.is_finite() || a > b {
                    return Err(RngError::BadUniform { a, b });
                }
            }
            Distribution::Exponential { rate } => {
                if !rate.is_finite() || rate <= 0.0 {
                    return Err(RngError::BadRate(rate));
                }
            }
            Distribution::Bernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(RngError::BadProbability(p));
                }
            }
            Distribution::Constant { c } => {
                if !c.is_finite() {
                    return Err(RngError::BadConstant(c));
                }
            }
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One independent random sequence identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        // Mix the label hash through one splitmix step so related seeds do
        // not produce correlated stream states.
        let mut state = seed ^ fnv1a64(stream_id.as_bytes());
        splitmix64(&mut state);
        RngStream { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Samples the given distribution. Bernoulli draws return 0.0 or 1.0.
    pub fn draw(&mut self, dist: &Distribution) -> Result<f64, RngError> {
        dist.validate()?;
        let value = match *dist {
            Distribution::Uniform { a, b } => a + (b - a) * self.next_f64(),
            Distribution::Exponential { rate } => {
                let u = self.next_f64();
                -(1.0 - u).ln() / rate
            }
            Distribution::Bernoulli { p } => {
                if self.next_f64() < p {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Constant { c } => c,
        };
        Ok(value)
    }

    /// Bernoulli event helper.
    pub fn chance(&mut self, p: f64) -> Result<bool, RngError> {
        Ok(self.draw(&Distribution::Bernoulli { p })? == 1.0)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn next_range_u32(&mut self, lo: u32, hi: u32) -> u32 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as u32
    }
}
