//! Standard-normal draws for the noise-trader process.
//!
//! The generator is ChaCha20 (`rand_chacha`) seeded with `seed_from_u64`.
//! Each draw consumes exactly one `u64`: the top 53 bits become a uniform on
//! the open interval (0, 1) via `(k + 0.5) / 2^53`, which is mapped through
//! the inverse standard-normal CDF. One draw is taken per period, whatever the
//! number of funds, so rosters can be compared on the same noise path.
//!
//! A recorded series (one float per line) can replace the generator to share
//! draws across implementations.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Name of the generator recorded in run manifests.
pub const RNG_ALGORITHM: &str =
    "chacha20/seed_from_u64; u=(next_u64>>11 + 0.5)/2^53; chi=inverse normal cdf";

pub enum NoiseSource {
    Generator { rng: ChaCha20Rng, normal: Normal },
    Replay { draws: Vec<f64>, next: usize },
}

impl NoiseSource {
    pub fn seeded(seed: u64) -> Self {
        NoiseSource::Generator {
            rng: ChaCha20Rng::seed_from_u64(seed),
            normal: Normal::standard(),
        }
    }

    pub fn replay(draws: Vec<f64>) -> Self {
        NoiseSource::Replay { draws, next: 0 }
    }

    pub fn next_chi(&mut self) -> Result<f64> {
        match self {
            NoiseSource::Generator { rng, normal } => {
                let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
                Ok(normal.inverse_cdf(u))
            }
            NoiseSource::Replay { draws, next } => {
                let chi = draws.get(*next).copied().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "recorded noise series exhausted after {next} draws"
                    ))
                })?;
                *next += 1;
                Ok(chi)
            }
        }
    }
}

/// First `count` draws of the seeded generator.
pub fn draw_series(seed: u64, count: usize) -> Vec<f64> {
    let mut src = NoiseSource::seeded(seed);
    (0..count)
        .map(|_| src.next_chi().expect("generator never runs out"))
        .collect()
}

pub fn write_series(path: &Path, draws: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(draws.len() * 24);
    for d in draws {
        out.push_str(&crate::io::fmt_f64(*d));
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

pub fn read_series(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: not a number: {l:?}", i + 1),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: non-finite draw", i + 1),
                })
            }
        })
        .collect()
}
