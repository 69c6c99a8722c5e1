//! Additive-delay arbiter PUF model: one 256-stage chain per response bit.
//!
//! Each chain `j` computes `d = w_j · Φ(c) + noise` over the parity feature
//! vector of the challenge and outputs bit 1 iff `d > 0`.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Block256;

pub const STAGES: usize = 256;
pub const FEATURES: usize = STAGES + 1;
pub const RESPONSE_BITS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum PufError {
    #[error("PUF statistics need at least two devices, got {0}")]
    PopulationTooSmall(usize),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
}

#[derive(Clone, Debug)]
pub struct PufDevice {
    seed: u64,
    noise_sigma: f64,
    weights: Arc<Vec<[f64; FEATURES]>>,
}

impl PufDevice {
    pub fn new(device_seed: u64, noise_sigma: f64) -> Result<Self, PufError> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(PufError::InvalidNoise(noise_sigma));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(device_seed);
        let weights = (0..RESPONSE_BITS)
            .map(|_| {
                let mut row = [0.0; FEATURES];
                for w in row.iter_mut() {
                    *w = StandardNormal.sample(&mut rng);
                }
                row
            })
            .collect();
        Ok(PufDevice {
            seed: device_seed,
            noise_sigma,
            weights: Arc::new(weights),
        })
    }

    /// Protocol-path device: noiseless.
    pub fn noiseless(device_seed: u64) -> Self {
        Self::new(device_seed, 0.0).expect("zero noise is valid")
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn weights(&self) -> &[[f64; FEATURES]] {
        &self.weights
    }

    /// Noiseless response, independent of `noise_sigma`.
    pub fn response(&self, c: &Block256) -> Block256 {
        let phi = parity_features(c);
        self.respond(&phi, |_| 0.0)
    }

    /// Response with the device's configured measurement noise. With
    /// `noise_sigma == 0` this never touches `rng`.
    pub fn eval<R: RngCore + ?Sized>(&self, c: &Block256, rng: &mut R) -> Block256 {
        if self.noise_sigma == 0.0 {
            return self.response(c);
        }
        let phi = parity_features(c);
        let noise = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
        self.respond(&phi, |_| noise.sample(rng))
    }

    fn respond(&self, phi: &[f64; FEATURES], mut noise: impl FnMut(usize) -> f64) -> Block256 {
        let mut out = Block256::ZERO;
        for (j, row) in self.weights.iter().enumerate() {
            let d: f64 = row.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + noise(j);
            // d == 0 resolves to 0
            if d > 0.0 {
                out.0[j / 8] |= 1 << (7 - j % 8);
            }
        }
        out
    }
}

/// Parity transform of the challenge: `Φ_i = Π_{k≥i} (1 − 2c_k)` for the 256
/// stages, plus a constant 1 for the arbiter bias.
pub fn parity_features(c: &Block256) -> [f64; FEATURES] {
    let mut phi = [1.0; FEATURES];
    let mut acc = 1.0;
    for i in (0..STAGES).rev() {
        if c.bit(i) {
            acc = -acc;
        }
        phi[i] = acc;
    }
    phi
}

pub fn hamming_fraction(a: &Block256, b: &Block256) -> f64 {
    (*a ^ *b).count_ones() as f64 / RESPONSE_BITS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PufStats {
    pub uniqueness: f64,
    pub reliability: f64,
    pub uniformity: f64,
    pub n_devices: usize,
    pub n_challenges: usize,
    pub noise_sigma: f64,
}

/// Population statistics over `n_challenges` random challenges.
///
/// * uniqueness: mean pairwise inter-device Hamming fraction (noiseless)
/// * reliability: mean intra-device Hamming fraction between a noisy read
///   and the noiseless reference
/// * uniformity: mean fraction of 1-bits in noiseless responses
pub fn puf_stats<R: Rng + ?Sized>(
    population: &[PufDevice],
    n_challenges: usize,
    rng: &mut R,
) -> Result<PufStats, PufError> {
    if population.len() < 2 {
        return Err(PufError::PopulationTooSmall(population.len()));
    }
    let challenges: Vec<Block256> = (0..n_challenges).map(|_| Block256::random(rng)).collect();
    let responses: Vec<Vec<Block256>> = population
        .iter()
        .map(|dev| challenges.iter().map(|c| dev.response(c)).collect())
        .collect();

    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..population.len() {
        for j in i + 1..population.len() {
            for (a, b) in responses[i].iter().zip(&responses[j]) {
                inter += hamming_fraction(a, b);
            }
            pairs += 1;
        }
    }
    let per_pair = n_challenges.max(1) as f64;

    let mut intra = 0.0;
    let mut ones = 0.0;
    for (dev, refs) in population.iter().zip(&responses) {
        for (c, r) in challenges.iter().zip(refs) {
            intra += hamming_fraction(r, &dev.eval(c, rng));
            ones += r.count_ones() as f64 / RESPONSE_BITS as f64;
        }
    }
    let reads = (population.len() * n_challenges).max(1) as f64;

    Ok(PufStats {
        uniqueness: inter / (pairs as f64 * per_pair),
        reliability: intra / reads,
        uniformity: ones / reads,
        n_devices: population.len(),
        n_challenges,
        noise_sigma: population[0].noise_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PufDevice::noiseless(11);
        let b = PufDevice::noiseless(11);
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn noiseless_is_pure() {
        let dev = PufDevice::noiseless(3);
        let mut r = rng(1);
        for _ in 0..50 {
            let c = Block256::random(&mut r);
            assert_eq!(dev.eval(&c, &mut r), dev.eval(&c, &mut r));
            assert_eq!(dev.eval(&c, &mut r), dev.response(&c));
        }
    }

    #[test]
    fn parity_features_hand_example() {
        let mut c = Block256::ZERO;
        c.flip_bit(255);
        let phi = parity_features(&c);
        assert!(phi[..STAGES].iter().all(|&p| p == -1.0));
        assert_eq!(phi[STAGES], 1.0);
        let mut c = Block256::ZERO;
        c.flip_bit(0);
        let phi = parity_features(&c);
        assert_eq!(phi[0], -1.0);
        assert!(phi[1..].iter().all(|&p| p == 1.0));
    }

    #[test]
    fn inter_device_distance_near_half() {
        let a = PufDevice::noiseless(100);
        let b = PufDevice::noiseless(200);
        let mut r = rng(2);
        let mean: f64 = (0..1000)
            .map(|_| {
                let c = Block256::random(&mut r);
                hamming_fraction(&a.response(&c), &b.response(&c))
            })
            .sum::<f64>()
            / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn noisy_reads_stay_close() {
        // 5% of the delay-sum scale (row norm ~ sqrt(257))
        let sigma = 0.05 * (FEATURES as f64).sqrt();
        let dev = PufDevice::new(5, sigma).unwrap();
        let mut r = rng(3);
        let c = Block256::random(&mut r);
        let reference = dev.response(&c);
        let mean: f64 = (0..1000)
            .map(|_| hamming_fraction(&reference, &dev.eval(&c, &mut r)))
            .sum::<f64>()
            / 1000.0;
        assert!(mean < 0.10, "{mean}");
        assert!(mean > 0.0);
    }

    #[test]
    fn stats_edge_cases() {
        let mut r = rng(4);
        assert_eq!(
            puf_stats(&[PufDevice::noiseless(1)], 10, &mut r),
            Err(PufError::PopulationTooSmall(1))
        );
        let twins = [PufDevice::noiseless(9), PufDevice::noiseless(9)];
        let s = puf_stats(&twins, 64, &mut r).unwrap();
        assert_eq!(s.uniqueness, 0.0);
        assert_eq!(s.reliability, 0.0);
        assert!(PufDevice::new(1, -1.0).is_err());
    }

    #[test]
    fn population_uniqueness() {
        let pop: Vec<_> = (0..20).map(|s| PufDevice::noiseless(1000 + s)).collect();
        let s = puf_stats(&pop, 500, &mut rng(5)).unwrap();
        assert!((0.45..=0.55).contains(&s.uniqueness), "{s:?}");
        assert!((0.45..=0.55).contains(&s.uniformity), "{s:?}");
        assert_eq!(s.reliability, 0.0);
    }

    #[test]
    fn single_bit_flip_avalanche() {
        let dev = PufDevice::noiseless(77);
        let mut r = rng(6);
        let mut total = 0.0;
        let trials = 512;
        for _ in 0..trials {
            let c = Block256::random(&mut r);
            let mut c2 = c;
            c2.flip_bit(r.random_range(0..STAGES));
            total += hamming_fraction(&dev.response(&c), &dev.response(&c2));
        }
        let mean = total / trials as f64;
        assert!(mean >= 0.20, "{mean}");
    }
}
