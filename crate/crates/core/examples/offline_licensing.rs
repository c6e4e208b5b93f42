//! Issue a license, run work against its quota, and watch replays and
//! forgeries bounce off the chip.

use std::collections::BTreeMap;

use hemsim::chipmodel::{Chip, ChipConfig, MeterResource};
use hemsim::licensing::{install, Issuer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut issuer = Issuer::new(&mut rng);
    let mut chip = Chip::provision(&mut rng, vec![issuer.public_key()], ChipConfig::default());
    println!("device {}", chip.device_id());

    let quota = BTreeMap::from([(MeterResource::FloatOps, 1_000_000)]);
    let first = issuer.issue(chip.device_id(), quota.clone(), None);
    let now = chip.rtc_read();
    println!("install #{}: {:?}", first.license_id, install(&mut chip, &first, now));

    chip.consume(MeterResource::FloatOps, 600_000).expect("within quota");
    println!("over quota: {:?}", chip.consume(MeterResource::FloatOps, 600_000).err());
    chip.consume(MeterResource::FloatOps, 400_000).expect("exactly the quota");
    println!("throttle at quota: {:?}", chip.throttle());

    let second = issuer.issue(chip.device_id(), quota, None);
    println!("install #{}: {:?}", second.license_id, install(&mut chip, &second, now));
    println!("throttle: {:?}", chip.throttle());

    println!("replay #{}: {:?}", first.license_id, install(&mut chip, &first, now));
    let rogue = Issuer::new(&mut rng);
    let forged = rogue.sign_license(5, chip.device_id(), BTreeMap::new(), None);
    println!("forged: {:?}", install(&mut chip, &forged, now));
}
