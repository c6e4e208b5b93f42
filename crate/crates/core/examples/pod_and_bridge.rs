//! Pod regime: direct links stop at the pod boundary, host bridging is slow,
//! and the coupling detector spots periodic cross-pod traffic.

use hemsim::chipmodel::{Chip, ChipConfig};
use hemsim::cluster::{Cluster, ClusterConfig, CouplingDetector, PodMember, Regime, Regulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let regulator = Regulator::new(&mut rng);
    let mut cluster = Cluster::new(Regime::Pod, regulator.public_key(), ClusterConfig::default(), 5);
    let mut pods = Vec::new();
    for pod in 0..2u64 {
        let mut ids = Vec::new();
        let mut members = Vec::new();
        for _ in 0..2 {
            let chip = Chip::provision(&mut rng, vec![], ChipConfig { require_license: false, ..Default::default() });
            members.push(PodMember { device_id: chip.device_id(), firmware_hash: chip.firmware_hash() });
            ids.push(cluster.add_chip(chip));
        }
        cluster.install_manifest(regulator.sign_manifest(pod, 1, members)).unwrap();
        pods.push(ids);
    }
    let inside = cluster.handshake(pods[0][0], pods[0][1]).unwrap();
    println!("cross-pod handshake: {:?}", cluster.handshake(pods[0][0], pods[1][0]).err());

    let bytes = 1 << 28;
    let direct = cluster.transfer(inside, bytes).unwrap();
    println!("bridge without capability: {:?}", cluster.bridge_transfer(pods[0][0], pods[1][0], bytes, false).err());
    for step in 0..6u64 {
        cluster.advance_to(step * 1_000).unwrap();
        let bridged = cluster.bridge_transfer(pods[0][0], pods[1][0], bytes, true).unwrap();
        if step == 0 {
            println!("256 MiB direct {direct:.3} ms, bridged {bridged:.3} ms ({:.1}x)", bridged / direct);
        }
    }
    for flag in CouplingDetector::default().detect(cluster.log()) {
        println!("coupled pods {:?}: {} windows, {} bytes", flag.pods, flag.windows_over, flag.total_bytes);
    }
}
