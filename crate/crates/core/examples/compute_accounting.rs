//! Account for a synthetic training run from signed meter snapshots and
//! compare the total against the reporting threshold.

use hemsim::attest::classify::frontier_trace;
use hemsim::attest::{account_trace, verify_chain, VerifyConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trace = frontier_trace(&mut rng, 128, 64, 4);
    let acc = account_trace(&trace, 250_000, 16, &mut rng).unwrap();
    let report = verify_chain(&acc.snapshots, &acc.registry, &VerifyConfig::default());
    println!("{} snapshots from {} devices", acc.snapshots.len(), report.devices.len());
    println!("reported {} float ops, executed {}", report.total_float_ops, acc.oracle_float_ops);
    println!("threshold {} units, exceeded {}", report.threshold_units, report.exceeds_threshold);
    for line in report.to_text().lines().take(14) {
        println!("{line}");
    }
}
