//! Counter-keyed SplitMix64 streams.
//!
//! Every random quantity in the crate is drawn from a [`SeededStream`] whose
//! initial state is a hash of a [`StreamKey`]. Two streams built from the same
//! key produce the same sequence on every platform, and streams for different
//! keys are statistically independent. No stream is ever shared between
//! threads; parallel work derives its own key instead.

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Part of the key so that, e.g., training noise
/// and feature noise for the same sample never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    TrainNoise = 2,
    Batching = 3,
    FeatureNoise = 4,
    OutputNoise = 5,
    Projection = 6,
    Subsets = 7,
    Sampling = 8,
    Bootstrap = 9,
    Data = 10,
    Embedder = 11,
    RandomRemoval = 12,
    SeedDerivation = 13,
}

/// Key tuple `(global_seed, purpose, model, sample, timestep, draw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub model: u64,
    pub sample: u64,
    pub timestep: u64,
    pub draw: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            purpose,
            model: 0,
            sample: 0,
            timestep: 0,
            draw: 0,
        }
    }

    pub fn model(mut self, model: u64) -> Self {
        self.model = model;
        self
    }

    pub fn sample(mut self, sample: u64) -> Self {
        self.sample = sample;
        self
    }

    pub fn timestep(mut self, timestep: u64) -> Self {
        self.timestep = timestep;
        self
    }

    pub fn draw(mut self, draw: u64) -> Self {
        self.draw = draw;
        self
    }

    fn initial_state(&self) -> u64 {
        let fields = [
            self.seed,
            self.purpose as u64,
            self.model,
            self.sample,
            self.timestep,
            self.draw,
        ];
        fields.iter().fold(GOLDEN_GAMMA, |h, &f| {
            mix64(h ^ mix64(f.wrapping_add(GOLDEN_GAMMA)))
        })
    }

    pub fn stream(&self) -> SeededStream {
        SeededStream::new(*self)
    }
}

/// Derive a child seed from a parent seed and an index, e.g. the per-seed
/// training seeds of a subset bank.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    StreamKey::new(parent, Purpose::SeedDerivation)
        .draw(index)
        .stream()
        .next_u64()
}

#[derive(Debug, Clone)]
pub struct SeededStream {
    state: u64,
    spare_gaussian: Option<f64>,
}

impl SeededStream {
    pub fn new(key: StreamKey) -> Self {
        Self {
            state: key.initial_state(),
            spare_gaussian: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    #[inline]
    fn next_f64_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two consecutive outputs. The second
    /// value of each pair is returned by the following call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_f64_open_zero();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next_gaussian()).collect()
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in ascending order.
    pub fn choose_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates
        for i in 0..count {
            let j = i + self.next_below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx.sort_unstable();
        idx
    }
}
