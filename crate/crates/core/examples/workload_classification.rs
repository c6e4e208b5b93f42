//! Classify synthetic traces of each workload type.

use hemsim::attest::classify::{classify, generate_trace, ClassifierConfig, WorkloadLabel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ClassifierConfig::default();
    for label in WorkloadLabel::ALL {
        let trace = generate_trace(&mut rng, label, 64);
        let c = classify(&trace, &cfg);
        println!("{label:?} -> {:?}", c.label);
        if let Some(f) = c.features {
            println!(
                "  devices {} util {:.2}±{:.3} autocorr {:.2} at lag {}",
                f.device_count, f.mean_utilization, f.utilization_stddev, f.autocorrelation_peak, f.peak_lag
            );
        }
    }
}
