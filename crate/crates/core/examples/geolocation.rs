//! Locate a chip from signed round trips with the constraint-based and
//! likelihood estimators, then with one landmark's link sped up.

use hemsim::geoloc::estimators::cbg_from_bounds;
use hemsim::geoloc::synth::{generate, TrialConfig};
use hemsim::geoloc::{bounds_from, covering_grid, estimate_likelihood, LikelihoodOptions};
use hemsim::netsim::geodesic_distance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut trial = generate(&mut rng, &TrialConfig { landmarks: 6, history: 40, ..Default::default() });
    let (ms, _) = trial.run(6).unwrap();
    let bounds = bounds_from(&ms, &trial.landmarks).unwrap();
    let grid = covering_grid(&bounds, 0.25).unwrap();

    let cbg = cbg_from_bounds(&bounds, &grid);
    println!("truth {:?}", trial.truth);
    println!("cbg: {} cells, contains truth {}", cbg.region.count(), cbg.region.contains(trial.truth));

    let lik = estimate_likelihood(&ms, &trial.landmarks, &grid, &LikelihoodOptions::default()).unwrap();
    let point = lik.point_estimate.unwrap();
    println!(
        "likelihood: {} cells, point {:.1} km from truth, contains truth {}",
        lik.region.count(),
        geodesic_distance(point, trial.truth),
        lik.region.contains(trial.truth)
    );

    trial.grant_speedup(0, 0.5).unwrap();
    let (ms, _) = trial.run(7).unwrap();
    let bounds = bounds_from(&ms, &trial.landmarks).unwrap();
    let sped = cbg_from_bounds(&bounds, &grid);
    println!("with speedup: floor violation {}, alarm {}", sped.floor_violation, sped.alarm());
}
