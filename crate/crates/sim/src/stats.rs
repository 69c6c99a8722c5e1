//! PUF population statistics and the open-set RFFI evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use iod_core::crypto::Id32;
use iod_core::puf::{puf_stats, PufDevice, PufStats};
use iod_core::rffi::{
    calibrate_threshold, classify, emit_sample, rogue_auc, score, transmitter_new, Classification,
    ClassifierConfig, RffDatabase,
};

use crate::config::ScenarioConfig;
use crate::world::{derive_seed, SimError};

pub const PUF_CHALLENGES: usize = 256;
pub const UNIQUENESS_RANGE: (f64, f64) = (0.45, 0.55);
pub const MIN_PAIRS: usize = 100;
/// Test packets per transmitter after enrollment.
pub const TEST_PACKETS: usize = 100;
pub const MIN_AUC: f64 = 0.95;
pub const MAX_FRR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PufReport {
    pub schema_version: u32,
    pub seed: u64,
    pub pairs: usize,
    pub noiseless: PufStats,
    /// Same population read with the configured noise, if any.
    pub noisy: Option<PufStats>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffiReport {
    pub schema_version: u32,
    pub seed: u64,
    pub known: usize,
    pub rogue: usize,
    pub noise_sigma: f64,
    pub threshold: f64,
    pub auc: f64,
    pub false_rejection: f64,
    pub rogue_acceptance: f64,
    pub misidentification: f64,
    pub passed: bool,
}

fn population(cfg: &ScenarioConfig, seed: u64, noise: f64) -> Result<Vec<PufDevice>, SimError> {
    cfg.drones
        .iter()
        .map(|d| Ok(PufDevice::new(derive_seed(seed, "puf", d.id), noise)?))
        .collect()
}

/// Uniqueness and reliability over every drone in `cfg`.
pub fn puf_suite(cfg: &ScenarioConfig, seed: u64) -> Result<PufReport, SimError> {
    let n = cfg.drones.len();
    let pairs = n * n.saturating_sub(1) / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "puf-stats", 0));
    let noiseless = puf_stats(&population(cfg, seed, 0.0)?, PUF_CHALLENGES, &mut rng)?;
    let noisy = if cfg.puf.noise > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "puf-stats", 1));
        Some(puf_stats(&population(cfg, seed, cfg.puf.noise)?, PUF_CHALLENGES, &mut rng)?)
    } else {
        None
    };
    let passed = pairs >= MIN_PAIRS
        && (UNIQUENESS_RANGE.0..=UNIQUENESS_RANGE.1).contains(&noiseless.uniqueness)
        && noiseless.reliability == 0.0;
    Ok(PufReport {
        schema_version: iod_core::metrics::REPORT_SCHEMA_VERSION,
        seed,
        pairs,
        noiseless,
        noisy,
        passed,
    })
}

/// Drones authorized for some domain are the known transmitters; the rest
/// play rogues that never enroll.
pub fn rffi_suite(cfg: &ScenarioConfig, seed: u64) -> Result<RffiReport, SimError> {
    let r = &cfg.rffi;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "rffi-stats", 0));
    let mut db = RffDatabase::new();
    let mut known = Vec::new();
    let mut rogue = Vec::new();
    for d in &cfg.drones {
        let fp = transmitter_new(derive_seed(seed, "rff", d.id), r.dim).map_err(map_rffi)?;
        if d.authorized.is_empty() {
            rogue.push(fp);
        } else {
            let burst: Vec<_> = (0..r.enroll_packets)
                .map(|_| emit_sample(&fp, r.noise, &mut rng))
                .collect();
            db.enroll(Id32(d.id), &burst).map_err(map_rffi)?;
            known.push((Id32(d.id), fp));
        }
    }
    let base = ClassifierConfig::new(r.k, 1.0).map_err(map_rffi)?;
    let clf = calibrate_threshold(&db, &base, r.threshold_percentile).map_err(map_rffi)?;

    let mut known_scores = Vec::new();
    let (mut rejected, mut misid) = (0usize, 0usize);
    for (id, fp) in &known {
        for _ in 0..TEST_PACKETS {
            let s = emit_sample(fp, r.noise, &mut rng);
            known_scores.push(score(&db, &clf, &s).map_err(map_rffi)?.mean_distance);
            match classify(&db, &clf, &s).map_err(map_rffi)? {
                Classification::Rogue => rejected += 1,
                Classification::Known(got) if got != *id => misid += 1,
                Classification::Known(_) => {}
            }
        }
    }
    let mut rogue_scores = Vec::new();
    let mut accepted = 0usize;
    for fp in &rogue {
        for _ in 0..TEST_PACKETS {
            let s = emit_sample(fp, r.noise, &mut rng);
            rogue_scores.push(score(&db, &clf, &s).map_err(map_rffi)?.mean_distance);
            if classify(&db, &clf, &s).map_err(map_rffi)? != Classification::Rogue {
                accepted += 1;
            }
        }
    }
    let n_known = (known.len() * TEST_PACKETS).max(1) as f64;
    let n_rogue = (rogue.len() * TEST_PACKETS).max(1) as f64;
    let auc = rogue_auc(&known_scores, &rogue_scores);
    let frr = rejected as f64 / n_known;
    Ok(RffiReport {
        schema_version: iod_core::metrics::REPORT_SCHEMA_VERSION,
        seed,
        known: known.len(),
        rogue: rogue.len(),
        noise_sigma: r.noise,
        threshold: clf.threshold,
        auc,
        false_rejection: frr,
        rogue_acceptance: accepted as f64 / n_rogue,
        misidentification: misid as f64 / n_known,
        passed: auc >= MIN_AUC && frr <= MAX_FRR && !known.is_empty() && !rogue.is_empty(),
    })
}

fn map_rffi(e: iod_core::rffi::RffiError) -> SimError {
    SimError::Entity(e.into())
}
