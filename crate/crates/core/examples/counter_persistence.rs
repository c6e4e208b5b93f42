//! Cut power mid-run under each persistence policy and compare what the
//! chip recovers with what it actually did.

use hemsim::chipmodel::{Chip, ChipConfig, MeterResource, PersistencePolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let policies = [
        ("capacitor", PersistencePolicy::CapacitorFlush),
        ("periodic", PersistencePolicy::PeriodicFlush { interval_ms: 60_000, capacitor_backup: false }),
        ("boot_roundup", PersistencePolicy::BootRoundup { increment: 1_000_000, flush_interval_ms: 60_000 }),
    ];
    for (name, policy) in policies {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ChipConfig { require_license: false, persistence: policy, ..Default::default() };
        let mut chip = Chip::provision(&mut rng, vec![], cfg);
        let mut used = 0u64;
        for step in 1..=7u64 {
            chip.advance_to(step * 20_000).unwrap();
            chip.consume(MeterResource::FloatOps, 10_000).unwrap();
            used += 10_000;
        }
        chip.power_loss(150_000).unwrap();
        chip.power_on(160_000).unwrap();
        let recovered = chip.meter(MeterResource::FloatOps);
        println!("{name:<13} did {used:>7}  recovered {recovered:>8}  lost {:>6}", used.saturating_sub(recovered));
    }
}
