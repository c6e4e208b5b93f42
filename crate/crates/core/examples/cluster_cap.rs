//! Cap regime: a regulator lowers the peer cap and chips shed sessions at
//! their next periodic check.

use hemsim::chipmodel::{Chip, ChipConfig};
use hemsim::cluster::{Cluster, ClusterConfig, PodMember, Regime, Regulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let regulator = Regulator::new(&mut rng);
    let config = ClusterConfig { initial_cap: 4, check_period_ms: 10_000, ..Default::default() };
    let mut cluster = Cluster::new(Regime::Cap, regulator.public_key(), config, 4);
    let mut ids = Vec::new();
    let mut members = Vec::new();
    for _ in 0..5 {
        let chip = Chip::provision(&mut rng, vec![], ChipConfig { require_license: false, ..Default::default() });
        members.push(PodMember { device_id: chip.device_id(), firmware_hash: chip.firmware_hash() });
        ids.push(cluster.add_chip(chip));
    }
    cluster.install_manifest(regulator.sign_manifest(0, 1, members)).unwrap();

    let hub = ids[0];
    for &peer in &ids[1..] {
        cluster.handshake(hub, peer).unwrap();
    }
    println!("hub sessions at cap 4: {}", cluster.open_sessions(hub));

    let lower = regulator.sign_cap(1, 1, 5_000);
    for &d in &ids {
        cluster.apply_cap_update(d, &lower).unwrap();
    }
    println!("just after lowering to 1: {}", cluster.open_sessions(hub));
    cluster.advance_to(6_000).unwrap();
    println!("after the next check: {}", cluster.open_sessions(hub));
    println!("fifth handshake: {:?}", cluster.handshake(hub, ids[1]).err());
    println!("stale policy: {:?}", cluster.apply_cap_update(hub, &regulator.sign_cap(8, 1, 5_000)).err());
    println!("audit: {:?}", cluster.cap_audit());
}
