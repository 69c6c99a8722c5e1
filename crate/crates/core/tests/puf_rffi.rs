use iod_core::crypto::{Block256, Id32};
use iod_core::puf::{hamming_fraction, puf_stats, PufDevice};
use iod_core::rffi::{
    calibrate_threshold, classify, emit_sample, rogue_auc, transmitter_new, Classification,
    ClassifierConfig, RffDatabase,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn noiseless_puf_is_a_function_of_seed_and_challenge() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = PufDevice::noiseless(10);
    let again = PufDevice::noiseless(10);
    for _ in 0..64 {
        let c = Block256::random(&mut rng);
        assert_eq!(a.response(&c), again.response(&c));
        assert_eq!(a.eval(&c, &mut rng), a.response(&c));
    }
}

#[test]
fn population_uniqueness_near_half() {
    let devices: Vec<_> = (0..15).map(PufDevice::noiseless).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let s = puf_stats(&devices, 256, &mut rng).unwrap();
    assert!((0.45..=0.55).contains(&s.uniqueness), "{}", s.uniqueness);
    assert_eq!(s.reliability, 0.0);
    assert!((0.4..=0.6).contains(&s.uniformity), "{}", s.uniformity);
}

#[test]
fn noisy_reads_flip_few_bits() {
    let dev = PufDevice::new(3, 0.05).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..200 {
        let c = Block256::random(&mut rng);
        total += hamming_fraction(&dev.response(&c), &dev.eval(&c, &mut rng));
    }
    let mean = total / 200.0;
    assert!(mean > 0.0 && mean < 0.05, "{mean}");
    assert!(PufDevice::new(3, -1.0).is_err());
    assert!(PufDevice::new(3, f64::NAN).is_err());
}

#[test]
fn auc_counts_ties_as_half() {
    assert_eq!(rogue_auc(&[0.1, 0.2], &[0.3, 0.4]), 1.0);
    assert_eq!(rogue_auc(&[0.3, 0.4], &[0.1, 0.2]), 0.0);
    assert_eq!(rogue_auc(&[0.2], &[0.2]), 0.5);
    // rogue 0.25 beats 0.1 and 0.2, loses to 0.3: 2 of 3
    assert!((rogue_auc(&[0.1, 0.2, 0.3], &[0.25]) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn open_set_classifier_separates_known_from_rogue() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut db = RffDatabase::new();
    let known: Vec<_> = (0..5).map(|i| transmitter_new(i, 64).unwrap()).collect();
    for (i, fp) in known.iter().enumerate() {
        let burst: Vec<_> = (0..50).map(|_| emit_sample(fp, 0.1, &mut rng)).collect();
        db.enroll(Id32(i as u32), &burst).unwrap();
    }
    let clf = calibrate_threshold(&db, &ClassifierConfig::new(5, 1.0).unwrap(), 99.0).unwrap();
    for (i, fp) in known.iter().enumerate() {
        let s = emit_sample(fp, 0.1, &mut rng);
        assert_eq!(classify(&db, &clf, &s).unwrap(), Classification::Known(Id32(i as u32)));
    }
    for seed in 100..105 {
        let rogue = transmitter_new(seed, 64).unwrap();
        let s = emit_sample(&rogue, 0.1, &mut rng);
        assert_eq!(classify(&db, &clf, &s).unwrap(), Classification::Rogue);
    }
}

#[test]
fn database_json_roundtrip() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let fp = transmitter_new(7, 16).unwrap();
    let mut db = RffDatabase::new();
    let burst: Vec<_> = (0..4).map(|_| emit_sample(&fp, 0.1, &mut rng)).collect();
    db.enroll(Id32(7), &burst).unwrap();
    assert_eq!(RffDatabase::from_json(&db.to_json()).unwrap(), db);
}
