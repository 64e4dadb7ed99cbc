//! Sources of standard-normal noise for reparameterized sampling.
//!
//! The finite-difference checker needs to re-evaluate a stochastic loss with
//! the exact same noise draws, so sampling is routed through a small trait
//! instead of a bare RNG: record once, replay as often as needed.

use rand::Rng;
use rand_distr::StandardNormal;

/// Supplies ε ~ N(0, I) vectors to reparameterized encoders.
pub trait NoiseSource {
    fn standard_normal(&mut self, n: usize) -> Vec<f64>;
}

/// Draws fresh noise from an RNG.
pub struct RngNoise<'a, R: Rng> {
    rng: &'a mut R,
}

impl<'a, R: Rng> RngNoise<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng }
    }
}

impl<R: Rng> NoiseSource for RngNoise<'_, R> {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }
}

/// Always returns zero noise, so `z = μ`. Used for deterministic target
/// evaluation and for the non-variational variants.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

/// Draws from an RNG while keeping a copy of every vector handed out.
pub struct RecordingNoise<'a, R: Rng> {
    rng: &'a mut R,
    pub recorded: Vec<Vec<f64>>,
}

impl<'a, R: Rng> RecordingNoise<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            rng,
            recorded: Vec::new(),
        }
    }
}

impl<R: Rng> NoiseSource for RecordingNoise<'_, R> {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        self.recorded.push(v.clone());
        v
    }
}

/// Replays a previously recorded sequence of draws, in order.
pub struct ReplayNoise<'a> {
    recorded: &'a [Vec<f64>],
    cursor: usize,
}

impl<'a> ReplayNoise<'a> {
    pub fn new(recorded: &'a [Vec<f64>]) -> Self {
        Self {
            recorded,
            cursor: 0,
        }
    }
}

impl NoiseSource for ReplayNoise<'_> {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        let v = self.recorded[self.cursor].clone();
        assert_eq!(v.len(), n, "replayed noise has wrong dimension");
        self.cursor += 1;
        v
    }
}
