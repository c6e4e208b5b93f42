//! One landmark lies about its timings; the plain estimator loses the chip
//! while the fault-tolerant one keeps it.

use hemsim::geoloc::estimators::{bft_from_bounds, cbg_from_bounds};
use hemsim::geoloc::synth::{generate, TrialConfig};
use hemsim::geoloc::{bounds_from, covering_grid, covering_grid_bft, LandmarkBehavior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut trial = generate(&mut rng, &TrialConfig { landmarks: 7, ..Default::default() });
    trial.landmarks[0].compromise(LandmarkBehavior::Skewed { factor: 0.3, offset_ms: 0.0 }, true).unwrap();
    let (ms, _) = trial.run(8).unwrap();
    let bounds = bounds_from(&ms, &trial.landmarks).unwrap();

    let grid = covering_grid(&bounds, 0.25).unwrap();
    let plain = cbg_from_bounds(&bounds, &grid);
    println!("cbg: {} cells, empty {}, contains truth {}", plain.region.count(), plain.empty, plain.region.contains(trial.truth));

    let grid = covering_grid_bft(&bounds, 1, 0.25).unwrap();
    let tolerant = bft_from_bounds(&bounds, 1, &grid).unwrap();
    println!("bft f=1: {} cells, contains truth {}", tolerant.region.count(), tolerant.region.contains(trial.truth));
}
