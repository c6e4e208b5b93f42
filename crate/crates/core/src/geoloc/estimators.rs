//! Region estimators over distance bounds.

use serde::{Deserialize, Serialize};

use super::grid::{GridSpec, Region, RegionRow};
use super::{bounds_from, DistanceBound, GeolocError, Landmark, LandmarkId, Measurement};
use crate::netsim::{geodesic_distance, GeoPoint};

/// Slack added to every containment test so boundary cells are kept.
const CONTAINMENT_SLACK_KM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GeoEstimate {
    pub region: Region,
    pub point_estimate: Option<GeoPoint>,
    /// No cell satisfies the constraints.
    pub empty: bool,
    /// At least one round trip was faster than physics allows.
    pub floor_violation: bool,
    /// The likelihood estimator lacked history and used CBG instead.
    pub fallback: bool,
    pub landmarks_used: Vec<LandmarkId>,
}

impl GeoEstimate {
    /// Any inconsistency the verifier should treat as an attack.
    pub fn alarm(&self) -> bool {
        self.empty || self.floor_violation
    }

    pub fn rle_rows(&self) -> Vec<RegionRow> {
        self.region.rle_rows()
    }
}

/// Exported form of a [`GeoEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub grid: GridSpec,
    pub cells: usize,
    pub empty: bool,
    pub floor_violation: bool,
    pub fallback: bool,
    pub point_estimate: Option<GeoPoint>,
    pub rows: Vec<RegionRow>,
}

impl From<&GeoEstimate> for EstimateRecord {
    fn from(e: &GeoEstimate) -> Self {
        EstimateRecord {
            grid: e.region.grid,
            cells: e.region.count(),
            empty: e.empty,
            floor_violation: e.floor_violation,
            fallback: e.fallback,
            point_estimate: e.point_estimate,
            rows: e.rle_rows(),
        }
    }
}

/// A grid covering the tightest disk, which contains every intersection.
pub fn covering_grid(bounds: &[DistanceBound], resolution_deg: f64) -> Option<GridSpec> {
    let tight = bounds.iter().min_by(|a, b| a.bound_km.total_cmp(&b.bound_km))?;
    Some(GridSpec::covering_disk(tight.center, tight.bound_km, resolution_deg))
}

/// A grid covering the union of the `f + 1` tightest disks. Every cell that
/// satisfies `n - f` bounds lies in one of them.
pub fn covering_grid_bft(bounds: &[DistanceBound], f: usize, resolution_deg: f64) -> Option<GridSpec> {
    let mut sorted: Vec<&DistanceBound> = bounds.iter().collect();
    sorted.sort_by(|a, b| a.bound_km.total_cmp(&b.bound_km));
    let mut specs = sorted.iter().take(f + 1).map(|b| GridSpec::covering_disk(b.center, b.bound_km, resolution_deg));
    let mut out = specs.next()?;
    let full_lon = 360.0 - resolution_deg;
    for s in specs {
        out.lat_min = out.lat_min.min(s.lat_min);
        out.lat_max = out.lat_max.max(s.lat_max);
        if out.lon_max - out.lon_min >= full_lon - 1e-9 {
            continue;
        }
        if s.lon_max - s.lon_min >= full_lon - 1e-9 {
            out.lon_min = -180.0;
            out.lon_max = -180.0 + full_lon;
            continue;
        }
        let mid = (out.lon_min + out.lon_max) / 2.0;
        let shift = (((s.lon_min + s.lon_max) / 2.0 - mid) / 360.0).round() * 360.0;
        out.lon_min = out.lon_min.min(s.lon_min - shift);
        out.lon_max = out.lon_max.max(s.lon_max - shift);
        if out.lon_max - out.lon_min >= full_lon {
            out.lon_min = -180.0;
            out.lon_max = -180.0 + full_lon;
        }
    }
    Some(out)
}

/// Number of bounds each cell satisfies. A cell satisfies a bound when some
/// point of the cell could lie within it.
fn satisfied_counts(bounds: &[DistanceBound], grid: &GridSpec) -> Vec<usize> {
    let mut counts = vec![0usize; grid.len()];
    for r in 0..grid.rows() {
        let radius = grid.cell_radius_km(r) + CONTAINMENT_SLACK_KM;
        for c in 0..grid.cols() {
            let p = grid.point(r, c);
            let n = bounds.iter().filter(|b| geodesic_distance(b.center, p) <= b.bound_km + radius).count();
            counts[grid.index(r, c)] = n;
        }
    }
    counts
}

fn finish(region: Region, bounds: &[DistanceBound], point_estimate: Option<GeoPoint>, fallback: bool) -> GeoEstimate {
    GeoEstimate {
        empty: region.is_empty(),
        floor_violation: bounds.iter().any(|b| b.floor_violation),
        fallback,
        point_estimate,
        landmarks_used: bounds.iter().map(|b| b.landmark_id).collect(),
        region,
    }
}

/// Intersection of all distance disks.
pub fn estimate_cbg(measurements: &[Measurement], landmarks: &[Landmark], grid: &GridSpec) -> Result<GeoEstimate, GeolocError> {
    let bounds = bounds_from(measurements, landmarks)?;
    if bounds.is_empty() {
        return Err(GeolocError::NoMeasurements);
    }
    Ok(cbg_from_bounds(&bounds, grid))
}

pub fn cbg_from_bounds(bounds: &[DistanceBound], grid: &GridSpec) -> GeoEstimate {
    let counts = satisfied_counts(bounds, grid);
    let region = Region::from_fn(*grid, |r, c| counts[grid.index(r, c)] == bounds.len());
    finish(region, bounds, None, false)
}

/// Cells consistent with at least `n - f` of the `n` bounds.
pub fn estimate_bft(
    measurements: &[Measurement],
    landmarks: &[Landmark],
    f: usize,
    grid: &GridSpec,
) -> Result<GeoEstimate, GeolocError> {
    let bounds = bounds_from(measurements, landmarks)?;
    bft_from_bounds(&bounds, f, grid)
}

pub fn bft_from_bounds(bounds: &[DistanceBound], f: usize, grid: &GridSpec) -> Result<GeoEstimate, GeolocError> {
    let n = bounds.len();
    if n < 3 * f + 1 {
        return Err(GeolocError::InsufficientLandmarks { n, f });
    }
    let counts = satisfied_counts(bounds, grid);
    let region = Region::from_fn(*grid, |r, c| counts[grid.index(r, c)] >= n - f);
    Ok(finish(region, bounds, None, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodOptions {
    /// Cells within this many log-likelihood units of the best are kept.
    pub region_margin: f64,
    /// Lower limit on the fitted residual standard deviation, ms.
    pub min_sigma_ms: f64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        LikelihoodOptions { region_margin: 4.6, min_sigma_ms: 1e-3 }
    }
}

/// Least-squares fit of one-way delay against distance from history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayFit {
    pub intercept_ms: f64,
    pub slope_ms_per_km: f64,
    pub sigma_ms: f64,
}

impl DelayFit {
    pub fn from_history(history: &[super::HistorySample], min_sigma_ms: f64) -> Option<DelayFit> {
        let n = history.len() as f64;
        if history.len() < 2 {
            return None;
        }
        let mx = history.iter().map(|h| h.distance_km).sum::<f64>() / n;
        let my = history.iter().map(|h| h.rtt_ms / 2.0).sum::<f64>() / n;
        let sxx: f64 = history.iter().map(|h| (h.distance_km - mx).powi(2)).sum();
        if sxx <= 0.0 {
            return None;
        }
        let sxy: f64 = history.iter().map(|h| (h.distance_km - mx) * (h.rtt_ms / 2.0 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let dof = (n - 2.0).max(1.0);
        let ss: f64 = history.iter().map(|h| (h.rtt_ms / 2.0 - intercept - slope * h.distance_km).powi(2)).sum();
        Some(DelayFit { intercept_ms: intercept, slope_ms_per_km: slope, sigma_ms: (ss / dof).sqrt().max(min_sigma_ms) })
    }

    pub fn log_likelihood(&self, one_way_ms: f64, distance_km: f64) -> f64 {
        let z = (one_way_ms - self.intercept_ms - self.slope_ms_per_km * distance_km) / self.sigma_ms;
        -0.5 * z * z - self.sigma_ms.ln()
    }
}

/// Index of the best score. Ties go to the lowest latitude, then the lowest
/// longitude; grid order is row-major from the south-west corner, so the
/// first maximum wins.
pub fn argmax_cell(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Per-cell log-likelihood under calibrated delay models. Falls back to CBG
/// when any landmark lacks usable history.
pub fn estimate_likelihood(
    measurements: &[Measurement],
    landmarks: &[Landmark],
    grid: &GridSpec,
    options: &LikelihoodOptions,
) -> Result<GeoEstimate, GeolocError> {
    let usable: Vec<&Measurement> = measurements.iter().filter(|m| m.usable()).collect();
    if usable.is_empty() {
        return Err(GeolocError::NoMeasurements);
    }
    let mut terms = Vec::with_capacity(usable.len());
    for m in &usable {
        let lm = landmarks
            .iter()
            .find(|l| l.id == m.landmark_id)
            .ok_or(GeolocError::UnknownLandmark(m.landmark_id))?;
        match DelayFit::from_history(&lm.calibration.history, options.min_sigma_ms) {
            Some(fit) => terms.push((lm.position, m.rtt_ms.expect("usable") / 2.0, fit)),
            None => {
                let mut est = estimate_cbg(measurements, landmarks, grid)?;
                est.fallback = true;
                return Ok(est);
            }
        }
    }
    let mut scores = vec![0.0; grid.len()];
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let p = grid.point(r, c);
            scores[grid.index(r, c)] = terms
                .iter()
                .map(|(center, y, fit)| fit.log_likelihood(*y, geodesic_distance(*center, p)))
                .sum();
        }
    }
    let bounds = bounds_from(measurements, landmarks)?;
    let best = argmax_cell(&scores).ok_or(GeolocError::NoMeasurements)?;
    let top = scores[best];
    let region = Region::from_fn(*grid, |r, c| scores[grid.index(r, c)] >= top - options.region_margin);
    let (br, bc) = grid.row_col(best);
    Ok(finish(region, &bounds, Some(grid.point(br, bc)), false))
}

#[cfg(test)]
mod tests {
    use super::super::synth::{self, TrialConfig};
    use super::super::*;
    use super::*;
    use crate::netsim::{Jitter, LatencyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn honest_bounds(truth: GeoPoint, centers: &[GeoPoint], extra_km: f64) -> Vec<DistanceBound> {
        centers
            .iter()
            .enumerate()
            .map(|(i, c)| DistanceBound {
                landmark_id: LandmarkId(i as u32),
                center: *c,
                bound_km: geodesic_distance(*c, truth) + extra_km,
                floor_violation: false,
            })
            .collect()
    }

    #[test]
    fn single_landmark_region_is_a_disk() {
        let center = GeoPoint::new(10.0, 10.0).unwrap();
        let grid = GridSpec::around(center, 6.0, 0.25);
        let b = [DistanceBound { landmark_id: LandmarkId(0), center, bound_km: 400.0, floor_violation: false }];
        let est = cbg_from_bounds(&b, &grid);
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                let d = geodesic_distance(center, grid.point(r, c));
                if d <= 400.0 {
                    assert!(est.region.contains_cell(r, c));
                }
                if d > 400.0 + grid.cell_radius_km(r) + 1e-3 {
                    assert!(!est.region.contains_cell(r, c));
                }
            }
        }
        assert!(!est.empty);
    }

    #[test]
    fn bft_with_no_faults_equals_cbg() {
        let truth = GeoPoint::new(20.0, 30.0).unwrap();
        let centers = [truth.destination(0.0, 500.0), truth.destination(120.0, 800.0), truth.destination(240.0, 650.0)];
        let bounds = honest_bounds(truth, &centers, 50.0);
        let grid = GridSpec::around(truth, 10.0, 0.25);
        assert_eq!(bft_from_bounds(&bounds, 0, &grid).unwrap().region, cbg_from_bounds(&bounds, &grid).region);
    }

    #[test]
    fn bft_refuses_too_few_landmarks() {
        let truth = GeoPoint::new(0.0, 0.0).unwrap();
        let centers: Vec<_> = (0..4).map(|i| truth.destination(90.0 * i as f64, 300.0)).collect();
        let bounds = honest_bounds(truth, &centers, 0.0);
        let grid = GridSpec::around(truth, 4.0, 0.5);
        assert_eq!(
            bft_from_bounds(&bounds, 2, &grid).unwrap_err(),
            GeolocError::InsufficientLandmarks { n: 4, f: 2 }
        );
    }

    #[test]
    fn slowdown_never_removes_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let truth = GeoPoint::new(rng.random_range(-50.0..50.0), rng.random_range(-170.0..170.0)).unwrap();
            let centers: Vec<_> = (0..4)
                .map(|_| truth.destination(rng.random_range(0.0..360.0), rng.random_range(100.0..1500.0)))
                .collect();
            let mut bounds = honest_bounds(truth, &centers, 0.0);
            let grid = GridSpec::around(truth, 3.0, 0.25);
            let base = cbg_from_bounds(&bounds, &grid);
            assert!(base.region.contains(truth));
            for b in &mut bounds {
                b.bound_km += rng.random_range(0.0..300.0);
            }
            let slowed = cbg_from_bounds(&bounds, &grid);
            assert!(slowed.region.contains(truth));
            assert!(base.region.is_subset_of(&slowed.region));
        }
    }

    #[test]
    fn argmax_ties_go_south_then_west() {
        assert_eq!(argmax_cell(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_cell(&[]), None);
    }

    #[test]
    fn argmax_is_invariant_under_uniform_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..50).map(|_| rng.random_range(-100.0..0.0)).collect();
            let k = rng.random_range(-1e3..1e3);
            let shifted: Vec<f64> = s.iter().map(|x| x + k).collect();
            assert_eq!(argmax_cell(&s), argmax_cell(&shifted));
        }
    }

    #[test]
    fn zero_jitter_likelihood_finds_true_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let cfg = TrialConfig { landmarks: 4, jitter: Jitter::NONE, snap_truth_to: Some(0.25), history: 12, ..Default::default() };
            let trial = synth::generate(&mut rng, &cfg);
            let (ms, _) = trial.run(seed).unwrap();
            let grid = GridSpec::around(trial.truth, 4.0, 0.25);
            let est = estimate_likelihood(&ms, &trial.landmarks, &grid, &LikelihoodOptions::default()).unwrap();
            assert!(!est.fallback);
            let p = est.point_estimate.unwrap();
            assert_eq!(grid.cell_of(p), grid.cell_of(trial.truth), "seed {seed}");
            assert!(est.region.contains(p));
        }
    }

    #[test]
    fn symmetric_pair_lands_on_bisector() {
        let model = LatencyModel::default();
        let a = GeoPoint::new(0.0, -5.0).unwrap();
        let b = GeoPoint::new(0.0, 5.0).unwrap();
        let history: Vec<HistorySample> = (1..10)
            .map(|k| {
                let d = 200.0 * k as f64;
                HistorySample { rtt_ms: 2.0 * model.deterministic_delay_ms(d), distance_km: d }
            })
            .collect();
        let cal = Calibration { history, ..Default::default() };
        let lms = vec![
            Landmark::new(LandmarkId(0), NodeId(0), a, cal.clone()),
            Landmark::new(LandmarkId(1), NodeId(1), b, cal),
        ];
        let rtt = 2.0 * model.deterministic_delay_ms(900.0);
        let ms: Vec<Measurement> = (0..2)
            .map(|i| Measurement {
                landmark_id: LandmarkId(i),
                rtt_ms: Some(rtt),
                nonce: [0; 32],
                response_signature: None,
                verified: true,
            })
            .collect();
        let grid = GridSpec { lat_min: -10.0, lat_max: 10.0, lon_min: -10.0, lon_max: 10.0, resolution_deg: 0.25 };
        let est = estimate_likelihood(&ms, &lms, &grid, &LikelihoodOptions::default()).unwrap();
        let p = est.point_estimate.unwrap();
        assert_eq!(p.lon(), 0.0);
        assert!(p.lat() < 0.0);
    }

    #[test]
    fn empty_history_falls_back_to_cbg() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trial = synth::generate(&mut rng, &TrialConfig { history: 0, ..Default::default() });
        let (ms, _) = trial.run(1).unwrap();
        let grid = GridSpec::around(trial.truth, 4.0, 0.5);
        let est = estimate_likelihood(&ms, &trial.landmarks, &grid, &LikelihoodOptions::default()).unwrap();
        assert!(est.fallback);
        assert_eq!(est.region, estimate_cbg(&ms, &trial.landmarks, &grid).unwrap().region);
    }

    #[test]
    fn forged_responses_do_not_change_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trial = synth::generate(&mut rng, &TrialConfig::default());
        let (mut ms, _) = trial.run(2).unwrap();
        let grid = GridSpec::around(trial.truth, 4.0, 0.5);
        let before = estimate_cbg(&ms, &trial.landmarks, &grid).unwrap();
        ms.push(Measurement {
            landmark_id: trial.landmarks[0].id,
            rtt_ms: Some(0.01),
            nonce: [9; 32],
            response_signature: None,
            verified: false,
        });
        let after = estimate_cbg(&ms, &trial.landmarks, &grid).unwrap();
        assert_eq!(before, after);
    }
}
