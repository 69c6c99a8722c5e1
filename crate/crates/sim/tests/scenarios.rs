use iod_sim::attacks::{run_suite, Suite};
use iod_sim::bundled;
use iod_sim::report::{run_simulation, variant_counts};
use iod_sim::vectors::reference_vectors;
use iod_sim::world::AttackResult;

fn run(name: &str, seed: u64) -> iod_sim::report::RunOutput {
    let cfg = bundled::load(name).expect("bundled").expect("parses");
    run_simulation(&cfg, seed).unwrap()
}

#[test]
fn run_configs_pass_their_checks() {
    for name in ["honest-baseline", "attack-battery", "desync-recovery", "cross-domain"] {
        for seed in [0, 7, 12345] {
            let out = run(name, seed);
            let failed: Vec<_> = out.report.failures().iter().map(|c| c.name.clone()).collect();
            assert!(out.report.passed, "{name} seed {seed}: {failed:?}");
        }
    }
}

#[test]
fn baseline_covers_every_variant() {
    let out = run("honest-baseline", 1);
    let counts = variant_counts(&out.report.sessions);
    assert_eq!(counts.len(), 4, "{counts:?}");
    assert_eq!(out.report.cost.make_rows.len(), 4);
    for row in &out.report.cost.make_rows {
        assert_eq!(row.total_bits, row.reference_total_bits, "{}", row.label);
    }
}

#[test]
fn attack_battery_records_rejections() {
    let out = run("attack-battery", 3);
    assert!(!out.report.attacks.is_empty());
    assert!(out.report.attacks.iter().all(|a| a.result == AttackResult::Rejected));
}

#[test]
fn desync_recovers_after_scripted_loss() {
    let out = run("desync-recovery", 5);
    let s = &out.report.sessions;
    assert!(s.iter().any(|r| r.retried || r.recovering));
    assert!(s.last().unwrap().success);
}

#[test]
fn seed_changes_transcript() {
    let a = run("honest-baseline", 1).report.transcript_sha256;
    let b = run("honest-baseline", 2).report.transcript_sha256;
    assert_ne!(a, b);
}

#[test]
fn suites_other_than_capture_pass() {
    for suite in [Suite::Replay, Suite::Mitm, Suite::Impersonation, Suite::Dos] {
        for r in run_suite(suite, 21).unwrap() {
            assert!(r.passed, "{}: {:?}", r.summary(), &r.failures[..r.failures.len().min(4)]);
        }
    }
}

#[test]
fn vectors_are_reproducible() {
    let a = reference_vectors().unwrap();
    let b = reference_vectors().unwrap();
    assert_eq!(a.sha256(), b.sha256());
    assert_eq!(a.session_keys.len(), 2);
    let hash2 = a.crypto.iter().find(|v| v.name == "hash2_bytes").unwrap();
    assert_eq!(hash2.output, "1059f67288906a4ed1c85cffd6020fc394efdd0c629e630503bca213071f086f");
}
