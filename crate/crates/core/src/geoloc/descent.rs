//! Least-squares point estimate by damped Gauss-Newton descent.
//!
//! Minimizes `sum_i (d(L_i, p) - D_i)^2` over `p = (lat, lon)` in degrees,
//! where `D_i` are the delay-derived distances.

use serde::{Deserialize, Serialize};

use super::{bounds_from, GeolocError, Landmark, Measurement};
use crate::netsim::{geodesic_distance, GeoPoint, EARTH_RADIUS_KM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentOptions {
    pub step_tolerance_deg: f64,
    pub max_iterations: usize,
    /// Damping retries per iteration before declaring divergence.
    pub max_backtracks: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions { step_tolerance_deg: 1e-6, max_iterations: 500, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentResult {
    pub point: GeoPoint,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    /// False when the iteration limit was hit first.
    pub converged: bool,
}

/// Geodesic distance from `from` to `p` and its gradient with respect to
/// `p`'s latitude and longitude, in km per degree.
pub fn distance_gradient(from: GeoPoint, p: GeoPoint) -> (f64, [f64; 2]) {
    let (p1, l1) = (from.lat().to_radians(), from.lon().to_radians());
    let (p2, l2) = (p.lat().to_radians(), p.lon().to_radians());
    let dphi = p2 - p1;
    let dlam = l2 - l1;
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlam / 2.0).sin().powi(2);
    let d = geodesic_distance(from, p);
    if h <= 1e-30 || h >= 1.0 - 1e-15 {
        return (d, [0.0, 0.0]);
    }
    let dh_dphi = 0.5 * dphi.sin() - p1.cos() * p2.sin() * (dlam / 2.0).sin().powi(2);
    let dh_dlam = 0.5 * p1.cos() * p2.cos() * dlam.sin();
    let dd_dh = EARTH_RADIUS_KM / (h.sqrt() * (1.0 - h).sqrt());
    let rad = std::f64::consts::PI / 180.0;
    (d, [dd_dh * dh_dphi * rad, dd_dh * dh_dlam * rad])
}

/// Objective value and gradient at `p`.
pub fn objective_and_gradient(targets: &[(GeoPoint, f64)], p: GeoPoint) -> (f64, [f64; 2]) {
    let mut f = 0.0;
    let mut g = [0.0; 2];
    for (c, target) in targets {
        let (d, grad) = distance_gradient(*c, p);
        let r = d - target;
        f += r * r;
        g[0] += 2.0 * r * grad[0];
        g[1] += 2.0 * r * grad[1];
    }
    (f, g)
}

pub fn objective(targets: &[(GeoPoint, f64)], p: GeoPoint) -> f64 {
    targets.iter().map(|(c, t)| (geodesic_distance(*c, p) - t).powi(2)).sum()
}

fn step(p: GeoPoint, delta: [f64; 2]) -> GeoPoint {
    GeoPoint::clamped(p.lat() + delta[0], p.lon() + delta[1])
}

/// Runs the descent from `init` over explicit (center, distance) targets.
pub fn descend(targets: &[(GeoPoint, f64)], init: GeoPoint, opts: &DescentOptions) -> Result<DescentResult, GeolocError> {
    let mut p = init;
    let mut f = objective(targets, p);
    let initial = f;
    let mut lambda = 1e-3;
    for it in 0..opts.max_iterations {
        let mut jtj = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for (c, t) in targets {
            let (d, j) = distance_gradient(*c, p);
            let r = d - t;
            for a in 0..2 {
                g[a] += j[a] * r;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        if f == 0.0 || (g[0] == 0.0 && g[1] == 0.0) {
            return Ok(DescentResult { point: p, objective: f, initial_objective: initial, iterations: it, converged: true });
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let a00 = jtj[0][0] * (1.0 + lambda) + 1e-12;
            let a11 = jtj[1][1] * (1.0 + lambda) + 1e-12;
            let a01 = jtj[0][1];
            let det = a00 * a11 - a01 * a01;
            let delta = [-(a11 * g[0] - a01 * g[1]) / det, -(a00 * g[1] - a01 * g[0]) / det];
            if !(delta[0].is_finite() && delta[1].is_finite()) {
                return Err(GeolocError::Diverged { iterations: it, objective: f });
            }
            let norm = delta[0].hypot(delta[1]);
            if norm < opts.step_tolerance_deg {
                return Ok(DescentResult { point: p, objective: f, initial_objective: initial, iterations: it, converged: true });
            }
            let q = step(p, delta);
            let fq = objective(targets, q);
            if fq < f {
                lambda = (lambda / 10.0).max(1e-12);
                accepted = Some((q, fq, norm));
                break;
            }
            lambda *= 10.0;
        }
        match accepted {
            Some((q, fq, norm)) => {
                p = q;
                f = fq;
                if norm < opts.step_tolerance_deg {
                    return Ok(DescentResult { point: p, objective: f, initial_objective: initial, iterations: it + 1, converged: true });
                }
            }
            None => return Err(GeolocError::Diverged { iterations: it, objective: f }),
        }
    }
    Ok(DescentResult {
        point: p,
        objective: f,
        initial_objective: initial,
        iterations: opts.max_iterations,
        converged: false,
    })
}

/// Descent over the upper-bound distances of usable measurements.
pub fn estimate_descent(
    measurements: &[Measurement],
    landmarks: &[Landmark],
    init: GeoPoint,
    opts: &DescentOptions,
) -> Result<DescentResult, GeolocError> {
    let bounds = bounds_from(measurements, landmarks)?;
    if bounds.len() < 3 {
        return Err(GeolocError::TooFewMeasurements { needed: 3, have: bounds.len() });
    }
    let targets: Vec<(GeoPoint, f64)> = bounds.iter().map(|b| (b.center, b.bound_km)).collect();
    descend(&targets, init, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_targets(truth: GeoPoint, centers: &[GeoPoint]) -> Vec<(GeoPoint, f64)> {
        centers.iter().map(|c| (*c, geodesic_distance(*c, truth))).collect()
    }

    #[test]
    fn init_at_truth_converges_immediately() {
        let truth = GeoPoint::new(12.0, 40.0).unwrap();
        let centers = [truth.destination(10.0, 700.0), truth.destination(140.0, 900.0), truth.destination(260.0, 400.0)];
        let r = descend(&exact_targets(truth, &centers), truth, &DescentOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.point, truth);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = GeoPoint::new(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0)).unwrap();
            let targets: Vec<_> = (0..4)
                .map(|_| (p.destination(rng.random_range(0.0..360.0), rng.random_range(200.0..3000.0)), rng.random_range(100.0..3000.0)))
                .collect();
            let (_, g) = objective_and_gradient(&targets, p);
            let h = 1e-5;
            let fd_lat = (objective(&targets, GeoPoint::clamped(p.lat() + h, p.lon()))
                - objective(&targets, GeoPoint::clamped(p.lat() - h, p.lon())))
                / (2.0 * h);
            let fd_lon = (objective(&targets, GeoPoint::clamped(p.lat(), p.lon() + h))
                - objective(&targets, GeoPoint::clamped(p.lat(), p.lon() - h)))
                / (2.0 * h);
            let err = (g[0] - fd_lat).hypot(g[1] - fd_lon) / g[0].hypot(g[1]);
            assert!(err < 1e-5, "relative error {err} at {p}");
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let truth = GeoPoint::new(rng.random_range(-50.0..50.0), rng.random_range(-170.0..170.0)).unwrap();
            let centers: Vec<_> = (0..4).map(|i| truth.destination(90.0 * i as f64 + 10.0, rng.random_range(300.0..2000.0))).collect();
            let targets: Vec<_> = exact_targets(truth, &centers).into_iter().map(|(c, d)| (c, d + rng.random_range(0.0..100.0))).collect();
            let init = truth.destination(rng.random_range(0.0..360.0), 200.0);
            let r = descend(&targets, init, &DescentOptions::default()).unwrap();
            assert!(r.objective <= r.initial_objective);
        }
    }
}
