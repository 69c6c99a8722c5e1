//! Feature-level radio-frequency fingerprint identification.
//!
//! A transmitter is a unit vector in feature space. Every emission adds
//! isotropic gaussian noise whose expected norm is `noise_sigma`, then
//! re-normalizes. The open-set classifier is Euclidean k-NN with a rogue
//! threshold on the mean distance to the k nearest enrolled vectors.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Id32;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_ENROLL_PACKETS: usize = 100;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_PERCENTILE: f64 = 99.0;
pub const MIN_DIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum RffiError {
    #[error("fingerprint dimension {0} is below the minimum of {MIN_DIM}")]
    DimensionTooSmall(usize),
    #[error("sample dimension {got} does not match database dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("identity {id} has {have} vectors, calibration needs more than k = {k}")]
    InsufficientSamples { id: Id32, have: usize, k: usize },
    #[error("RFF database is empty")]
    EmptyDatabase,
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("percentile {0} outside [0, 100]")]
    InvalidPercentile(f64),
    #[error("RFF database JSON: {0}")]
    Json(String),
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A transmitter's hardware fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub owner_seed: u64,
    pub vector: Vec<f64>,
}

impl Fingerprint {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// A transmitter whose fingerprint lies close to `target`: the target
    /// plus a random direction of norm `offset`, re-normalized.
    pub fn mimic(target: &Fingerprint, offset: f64, seed: u64) -> Fingerprint {
        let dir = transmitter_new(seed, target.dim()).expect("target dimension is valid");
        let mut vector: Vec<f64> = target
            .vector
            .iter()
            .zip(&dir.vector)
            .map(|(t, d)| t + offset * d)
            .collect();
        normalize(&mut vector);
        Fingerprint {
            owner_seed: seed,
            vector,
        }
    }
}

pub fn transmitter_new(owner_seed: u64, dim: usize) -> Result<Fingerprint, RffiError> {
    if dim < MIN_DIM {
        return Err(RffiError::DimensionTooSmall(dim));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(owner_seed);
    let mut vector: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut vector);
    Ok(Fingerprint { owner_seed, vector })
}

/// One received physical-layer envelope.
///
/// `emitted_by` is ground truth attached by the channel. Protocol code never
/// reads it; only the simulator's integrity checks do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffSample {
    pub vector: Vec<f64>,
    #[serde(skip)]
    emitted_by: Option<Id32>,
}

impl RffSample {
    pub fn from_vector(vector: Vec<f64>) -> Self {
        RffSample {
            vector,
            emitted_by: None,
        }
    }

    pub fn bind_emitter(mut self, id: Id32) -> Self {
        self.emitted_by = Some(id);
        self
    }

    pub fn ground_truth_emitter(&self) -> Option<Id32> {
        self.emitted_by
    }
}

pub fn emit_sample<R: RngCore + ?Sized>(
    fp: &Fingerprint,
    noise_sigma: f64,
    rng: &mut R,
) -> RffSample {
    if noise_sigma <= 0.0 {
        return RffSample::from_vector(fp.vector.clone());
    }
    let per_component = noise_sigma / (fp.dim() as f64).sqrt();
    let mut vector: Vec<f64> = fp
        .vector
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + per_component * z
        })
        .collect();
    normalize(&mut vector);
    RffSample::from_vector(vector)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RffDatabase {
    pub entries: BTreeMap<Id32, Vec<Vec<f64>>>,
}

impl RffDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the entry for `id`.
    pub fn enroll(&mut self, id: Id32, samples: &[RffSample]) -> Result<(), RffiError> {
        if let Some(dim) = self.dim() {
            if let Some(bad) = samples.iter().find(|s| s.vector.len() != dim) {
                return Err(RffiError::DimensionMismatch {
                    expected: dim,
                    got: bad.vector.len(),
                });
            }
        }
        self.entries
            .insert(id, samples.iter().map(|s| s.vector.clone()).collect());
        Ok(())
    }

    pub fn insert_vectors(&mut self, id: Id32, vectors: Vec<Vec<f64>>) {
        self.entries.insert(id, vectors);
    }

    pub fn remove(&mut self, id: Id32) -> Option<Vec<Vec<f64>>> {
        self.entries.remove(&id)
    }

    pub fn contains(&self, id: Id32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().flatten().next().map(Vec::len)
    }

    pub fn vector_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Size of the stored features in bits, as 64-bit floats.
    pub fn size_bits(&self) -> usize {
        self.entries.values().flatten().map(|v| v.len() * 64).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("database serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, RffiError> {
        serde_json::from_str(s).map_err(|e| RffiError::Json(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub k: usize,
    pub threshold: f64,
    pub metric: Metric,
}

impl ClassifierConfig {
    pub fn new(k: usize, threshold: f64) -> Result<Self, RffiError> {
        let cfg = ClassifierConfig {
            k,
            threshold,
            metric: Metric::Euclidean,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RffiError> {
        if self.k == 0 {
            return Err(RffiError::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(RffiError::InvalidConfig(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            k: DEFAULT_K,
            threshold: 0.5,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Known(Id32),
    Rogue,
}

/// Mean distance to the k nearest enrolled vectors, and the majority
/// identity among them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnScore {
    pub mean_distance: f64,
    pub majority: Id32,
}

fn knn(
    db: &RffDatabase,
    k: usize,
    query: &[f64],
    skip: Option<(Id32, usize)>,
) -> Result<KnnScore, RffiError> {
    let mut dists: Vec<(f64, Id32)> = Vec::with_capacity(db.vector_count());
    for (&id, vectors) in &db.entries {
        for (i, v) in vectors.iter().enumerate() {
            if skip == Some((id, i)) {
                continue;
            }
            if v.len() != query.len() {
                return Err(RffiError::DimensionMismatch {
                    expected: v.len(),
                    got: query.len(),
                });
            }
            dists.push((euclidean(v, query), id));
        }
    }
    if dists.is_empty() {
        return Err(RffiError::EmptyDatabase);
    }
    let k = k.min(dists.len());
    dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &dists[..k];
    let mean_distance = nearest.iter().map(|d| d.0).sum::<f64>() / k as f64;
    let mut votes: BTreeMap<Id32, usize> = BTreeMap::new();
    for (_, id) in nearest {
        *votes.entry(*id).or_default() += 1;
    }
    // max_by_key keeps the last maximum; descending ids make that the smallest id
    let majority = votes
        .iter()
        .rev()
        .max_by_key(|(_, &n)| n)
        .map(|(&id, _)| id)
        .expect("at least one neighbor");
    Ok(KnnScore {
        mean_distance,
        majority,
    })
}

pub fn score(
    db: &RffDatabase,
    cfg: &ClassifierConfig,
    sample: &RffSample,
) -> Result<KnnScore, RffiError> {
    knn(db, cfg.k, &sample.vector, None)
}

/// Open-set decision on an envelope. The payload plays no part.
pub fn classify(
    db: &RffDatabase,
    cfg: &ClassifierConfig,
    sample: &RffSample,
) -> Result<Classification, RffiError> {
    let s = score(db, cfg, sample)?;
    Ok(if s.mean_distance <= cfg.threshold {
        Classification::Known(s.majority)
    } else {
        Classification::Rogue
    })
}

/// Linear-interpolated percentile of `values` (sorted in place).
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Leave-one-out intra-class scores: each enrolled vector is held out and
/// scored against the rest of the database.
pub fn held_out_scores(db: &RffDatabase, k: usize) -> Result<Vec<f64>, RffiError> {
    if db.is_empty() {
        return Err(RffiError::EmptyDatabase);
    }
    let mut scores = Vec::with_capacity(db.vector_count());
    for (&id, vectors) in &db.entries {
        if vectors.len() <= k {
            return Err(RffiError::InsufficientSamples {
                id,
                have: vectors.len(),
                k,
            });
        }
        for (i, v) in vectors.iter().enumerate() {
            scores.push(knn(db, k, v, Some((id, i)))?.mean_distance);
        }
    }
    Ok(scores)
}

/// Sets the rogue threshold to the given percentile of held-out intra-class
/// k-NN mean distances.
pub fn calibrate_threshold(
    db: &RffDatabase,
    cfg: &ClassifierConfig,
    pct: f64,
) -> Result<ClassifierConfig, RffiError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(RffiError::InvalidPercentile(pct));
    }
    let mut scores = held_out_scores(db, cfg.k)?;
    let threshold = percentile(&mut scores, pct).max(f64::MIN_POSITIVE);
    Ok(ClassifierConfig {
        k: cfg.k,
        threshold,
        metric: cfg.metric,
    })
}

/// Area under the ROC curve for rogue detection: the probability that a
/// rogue score exceeds a known score (ties count half).
pub fn rogue_auc(known_scores: &[f64], rogue_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for r in rogue_scores {
        for k in known_scores {
            if r > k {
                wins += 1.0;
            } else if r == k {
                wins += 0.5;
            }
        }
    }
    wins / (known_scores.len() * rogue_scores.len()) as f64
}
