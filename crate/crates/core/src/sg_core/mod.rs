//! Style-based generator core: configuration, latent types, the split-index
//! bookkeeping that ties feature-map levels to latent indices, and the
//! generator/discriminator pair.
//!
//! Latent indices are 1-based throughout the public API: an extended latent
//! for an `R`-pixel generator holds `n = 2*log2(R) - 2` vectors `w_1 ..= w_n`.
//! The block producing the `r x r` feature map consumes `{w_(m-2), w_(m-1)}`
//! with `m = split_index(r)`, and its skip-image stage consumes `w_m`, so
//! resuming synthesis from an injected feature map at level `r` needs exactly
//! the tail `w_m ..= w_n`.

mod discriminator;
mod generator;
mod noise;

pub use discriminator::Discriminator;
pub use generator::{Generator, ResumeState};
pub use noise::NoiseBank;

use crate::error::{Error, Result};
use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One bank derived from the model seed, reused for every forward pass.
    FixedPerModel,
    /// A fresh bank per call (the trainer derives one from the step index).
    Resampled,
    /// All-zero noise: outputs depend on latents and weights only.
    Zero,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Output resolution in pixels; a power of two of at least 8.
    pub output_resolution: usize,
    pub latent_dim: usize,
    /// Channel budget: a level-`r` feature map has
    /// `min(channel_cap, base_channels * output_resolution / r)` channels.
    pub base_channels: usize,
    pub channel_cap: usize,
    pub noise_mode: NoiseMode,
}

impl GeneratorConfig {
    /// Desk-scale default: 128 px, 12 latents of dimension 128.
    pub fn desk_default() -> Self {
        GeneratorConfig {
            output_resolution: 128,
            latent_dim: 128,
            base_channels: 16,
            channel_cap: 128,
            noise_mode: NoiseMode::FixedPerModel,
        }
    }

    /// The megapixel configuration: 1024 px, 18 latents of dimension 512,
    /// with the familiar 512-capped channel schedule.
    pub fn megapixel() -> Self {
        GeneratorConfig {
            output_resolution: 1024,
            latent_dim: 512,
            base_channels: 32,
            channel_cap: 512,
            noise_mode: NoiseMode::FixedPerModel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.output_resolution.is_power_of_two() || self.output_resolution < 8 {
            return Err(Error::domain(format!(
                "output_resolution must be a power of two >= 8, got {}",
                self.output_resolution
            )));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::domain("latent_dim/base_channels/channel_cap must be positive"));
        }
        Ok(())
    }

    /// `n = 2*log2(R) - 2`: 18 at 1024 px, 12 at 128 px.
    pub fn n_latents(&self) -> usize {
        2 * log2(self.output_resolution) - 2
    }

    /// All block resolutions, `4, 8, ..., R`.
    pub fn levels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = 4;
        while r <= self.output_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels * self.output_resolution / level).min(self.channel_cap)
    }

    /// Levels at which a feature map can be injected (or extracted for
    /// injection): powers of two in `[8, R/2]`, so at least one block remains
    /// to resume through.
    pub fn split_levels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = 8;
        while r <= self.output_resolution / 2 {
            out.push(r);
            r *= 2;
        }
        out
    }
}

fn log2(v: usize) -> usize {
    debug_assert!(v.is_power_of_two());
    v.trailing_zeros() as usize
}

/// The latent index `m` such that the feature map at `level` pairs with the
/// tail `w_m ..= w_n`. Closed form `m = 2*log2(level) - 2`.
pub fn split_index(level: usize) -> Result<usize> {
    if !level.is_power_of_two() || level < 8 {
        return Err(Error::domain(format!(
            "split level must be a power of two >= 8, got {level}"
        )));
    }
    Ok(2 * log2(level) - 2)
}

/// An extended latent: one style vector per layer index, `w_1 ..= w_n`.
#[derive(Clone, Debug)]
pub struct ExtendedLatent {
    vectors: Vec<Array1<f64>>,
}

impl ExtendedLatent {
    pub fn new(vectors: Vec<Array1<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::domain("extended latent cannot be empty"));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::domain("latent vectors must share a dimension"));
        }
        Ok(ExtendedLatent { vectors })
    }

    pub fn sample(rng: &mut impl Rng, n: usize, dim: usize) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::StandardNormal;
        let vectors = (0..n)
            .map(|_| Array1::from_iter((0..dim).map(|_| dist.sample(rng))))
            .collect();
        ExtendedLatent { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// 1-based access.
    pub fn get(&self, index: usize) -> &Array1<f64> {
        &self.vectors[index - 1]
    }

    /// 1-based replacement.
    pub fn set(&mut self, index: usize, v: Array1<f64>) {
        assert_eq!(v.len(), self.dim());
        self.vectors[index - 1] = v;
    }

    /// The sub-sequence `w_m ..= w_n`.
    pub fn tail(&self, m: usize) -> Result<LatentTail> {
        if m == 0 || m > self.len() {
            return Err(Error::domain(format!("tail start {m} out of 1..={}", self.len())));
        }
        Ok(LatentTail {
            start: m,
            vectors: self.vectors[m - 1..].to_vec(),
        })
    }

    pub fn vectors(&self) -> &[Array1<f64>] {
        &self.vectors
    }
}

/// A latent sub-sequence `w_start ..= w_n` used to resume synthesis.
#[derive(Clone, Debug)]
pub struct LatentTail {
    pub start: usize,
    vectors: Vec<Array1<f64>>,
}

impl LatentTail {
    pub fn new(start: usize, vectors: Vec<Array1<f64>>) -> Result<Self> {
        if start == 0 || vectors.is_empty() {
            return Err(Error::domain("latent tail must start at index >= 1 and be nonempty"));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::domain("latent vectors must share a dimension"));
        }
        Ok(LatentTail { start, vectors })
    }

    pub fn sample(rng: &mut impl Rng, start: usize, count: usize, dim: usize) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::StandardNormal;
        LatentTail {
            start,
            vectors: (0..count)
                .map(|_| Array1::from_iter((0..dim).map(|_| dist.sample(rng))))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Array1<f64>] {
        &self.vectors
    }
}

/// A spatial activation grid tagged with its resolution level.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub level: usize,
    /// `[channels, level, level]`
    pub data: ndarray::Array3<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_index_matches_named_pairs() {
        assert_eq!(split_index(16).unwrap(), 6);
        assert_eq!(split_index(32).unwrap(), 8);
        assert_eq!(split_index(64).unwrap(), 10);
    }

    #[test]
    fn split_index_is_strictly_increasing() {
        let mut prev = 0;
        for level in [8, 16, 32, 64, 128, 256, 512] {
            let m = split_index(level).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn split_index_rejects_invalid_levels() {
        assert!(split_index(0).is_err());
        assert!(split_index(4).is_err());
        assert!(split_index(12).is_err());
        assert!(split_index(7).is_err());
    }

    #[test]
    fn latent_count_follows_resolution() {
        let mut cfg = GeneratorConfig::desk_default();
        assert_eq!(cfg.n_latents(), 12);
        cfg.output_resolution = 1024;
        assert_eq!(cfg.n_latents(), 18);
        cfg.output_resolution = 64;
        assert_eq!(cfg.n_latents(), 10);
    }

    #[test]
    fn megapixel_channel_schedule() {
        let cfg = GeneratorConfig::megapixel();
        assert_eq!(cfg.channels(32), 512);
        assert_eq!(cfg.channels(64), 512);
        assert_eq!(cfg.channels(128), 256);
        assert_eq!(cfg.channels(1024), 32);
    }

    #[test]
    fn tail_slicing_matches_indices() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = ExtendedLatent::sample(&mut rng, 12, 8);
        let tail = w.tail(8).unwrap();
        assert_eq!(tail.len(), 5);
        assert_eq!(tail.vectors()[0], *w.get(8));
        assert_eq!(tail.vectors()[4], *w.get(12));
    }
}
