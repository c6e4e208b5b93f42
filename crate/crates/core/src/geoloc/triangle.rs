//! Point-in-triangle location verification against three landmarks.

use serde::{Deserialize, Serialize};

use super::{bounds_from, GeolocError, Landmark, Measurement};
use crate::netsim::{geodesic_distance, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriangleVerdict {
    Inside,
    Outside,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriangleOptions {
    /// Allowed gap between a distance bound and the claimed distance, km.
    pub tolerance_km: f64,
    /// Triangles with less spherical excess than this are degenerate, sr.
    pub min_excess_sr: f64,
}

impl Default for TriangleOptions {
    fn default() -> Self {
        TriangleOptions { tolerance_km: 50.0, min_excess_sr: 1e-6 }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Area of the spherical triangle on the unit sphere, in steradians.
pub fn spherical_excess(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    let (a, b, c) = (a.to_unit_vector(), b.to_unit_vector(), c.to_unit_vector());
    let num = dot(a, cross(b, c)).abs();
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

/// Whether `p` lies in the spherical triangle `abc` (edges included).
pub fn point_in_spherical_triangle(a: GeoPoint, b: GeoPoint, c: GeoPoint, p: GeoPoint) -> bool {
    let (a, b, c, p) = (a.to_unit_vector(), b.to_unit_vector(), c.to_unit_vector(), p.to_unit_vector());
    let orient = dot(a, cross(b, c)).signum();
    let s1 = orient * dot(p, cross(a, b));
    let s2 = orient * dot(p, cross(b, c));
    let s3 = orient * dot(p, cross(c, a));
    let hemisphere = dot(p, [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]]) > 0.0;
    s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0 && hemisphere
}

/// Accepts `claimed` when it lies inside the landmark triangle and every
/// bound matches the claimed distance to within the tolerance.
pub fn verify_triangle(
    measurements: &[Measurement],
    landmarks: &[Landmark],
    claimed: GeoPoint,
    opts: &TriangleOptions,
) -> Result<TriangleVerdict, GeolocError> {
    let bounds = bounds_from(measurements, landmarks)?;
    if bounds.len() < 3 {
        return Err(GeolocError::TooFewMeasurements { needed: 3, have: bounds.len() });
    }
    let [a, b, c] = [bounds[0], bounds[1], bounds[2]];
    if spherical_excess(a.center, b.center, c.center) < opts.min_excess_sr {
        return Ok(TriangleVerdict::Indeterminate);
    }
    if !point_in_spherical_triangle(a.center, b.center, c.center, claimed) {
        return Ok(TriangleVerdict::Outside);
    }
    let consistent = [a, b, c]
        .iter()
        .all(|x| !x.floor_violation && (x.bound_km - geodesic_distance(x.center, claimed)).abs() <= opts.tolerance_km);
    Ok(if consistent { TriangleVerdict::Inside } else { TriangleVerdict::Outside })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::netsim::LatencyModel;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Winding number of the gnomonic image of `p` around the image of the
    /// triangle, projected about the triangle's centroid.
    fn winding_oracle(a: GeoPoint, b: GeoPoint, c: GeoPoint, p: GeoPoint) -> bool {
        let vs = [a.to_unit_vector(), b.to_unit_vector(), c.to_unit_vector()];
        let mut n = [0.0; 3];
        for v in vs {
            for k in 0..3 {
                n[k] += v[k];
            }
        }
        let norm = dot(n, n).sqrt();
        let n = [n[0] / norm, n[1] / norm, n[2] / norm];
        let helper = if n[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let e1 = cross(helper, n);
        let l1 = dot(e1, e1).sqrt();
        let e1 = [e1[0] / l1, e1[1] / l1, e1[2] / l1];
        let e2 = cross(n, e1);
        let proj = |v: [f64; 3]| {
            let t = dot(v, n);
            [dot(v, e1) / t, dot(v, e2) / t]
        };
        let pv = p.to_unit_vector();
        if dot(pv, n) <= 0.0 {
            return false;
        }
        let q = proj(pv);
        let poly: Vec<[f64; 2]> = vs.iter().map(|v| proj(*v)).collect();
        let mut angle = 0.0;
        for i in 0..3 {
            let u = [poly[i][0] - q[0], poly[i][1] - q[1]];
            let w = [poly[(i + 1) % 3][0] - q[0], poly[(i + 1) % 3][1] - q[1]];
            angle += (u[0] * w[1] - u[1] * w[0]).atan2(u[0] * w[0] + u[1] * w[1]);
        }
        angle.abs() > std::f64::consts::PI
    }

    #[test]
    fn agrees_with_winding_number_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut inside = 0;
        for _ in 0..10_000 {
            let center = GeoPoint::new(rng.random_range(-70.0..70.0), rng.random_range(-180.0..180.0)).unwrap();
            let spread = rng.random_range(100.0..3000.0);
            let v: Vec<GeoPoint> = (0..3).map(|_| center.destination(rng.random_range(0.0..360.0), rng.random_range(0.0..spread))).collect();
            let p = center.destination(rng.random_range(0.0..360.0), rng.random_range(0.0..spread));
            let got = point_in_spherical_triangle(v[0], v[1], v[2], p);
            assert_eq!(got, winding_oracle(v[0], v[1], v[2], p), "{v:?} {p}");
            inside += got as usize;
        }
        assert!(inside > 500, "oracle exercised both sides: {inside}");
    }

    fn three(truth: GeoPoint, km: f64) -> (Vec<Landmark>, Vec<Measurement>) {
        let model = LatencyModel::default();
        let mut lms = Vec::new();
        let mut ms = Vec::new();
        for i in 0..3 {
            let pos = truth.destination(120.0 * i as f64, km);
            lms.push(Landmark::new(LandmarkId(i), NodeId(i), pos, Calibration::default()));
            let rtt = 2.0 * model.deterministic_delay_ms(geodesic_distance(pos, truth));
            ms.push(Measurement { landmark_id: LandmarkId(i), rtt_ms: Some(rtt), nonce: [0; 32], response_signature: None, verified: true });
        }
        (lms, ms)
    }

    #[test]
    fn centroid_of_equilateral_triangle_is_inside() {
        let truth = GeoPoint::new(35.0, 20.0).unwrap();
        let (lms, ms) = three(truth, 800.0);
        assert_eq!(verify_triangle(&ms, &lms, truth, &TriangleOptions::default()).unwrap(), TriangleVerdict::Inside);
    }

    #[test]
    fn claim_outside_triangle_is_rejected() {
        let truth = GeoPoint::new(35.0, 20.0).unwrap();
        let (lms, ms) = three(truth, 800.0);
        let far = truth.destination(45.0, 2500.0);
        assert_eq!(verify_triangle(&ms, &lms, far, &TriangleOptions::default()).unwrap(), TriangleVerdict::Outside);
    }

    #[test]
    fn claim_inside_with_inconsistent_bounds_is_rejected() {
        let truth = GeoPoint::new(35.0, 20.0).unwrap();
        let (lms, ms) = three(truth, 800.0);
        let shifted = truth.destination(0.0, 300.0);
        assert_eq!(verify_triangle(&ms, &lms, shifted, &TriangleOptions::default()).unwrap(), TriangleVerdict::Outside);
    }

    #[test]
    fn collinear_landmarks_are_indeterminate() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let lms: Vec<Landmark> = [0.0, 5.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, lon)| Landmark::new(LandmarkId(i as u32), NodeId(i as u32), GeoPoint::new(0.0, *lon).unwrap(), Calibration::default()))
            .collect();
        let ms: Vec<Measurement> = (0..3)
            .map(|i| Measurement { landmark_id: LandmarkId(i), rtt_ms: Some(5.0), nonce: [0; 32], response_signature: None, verified: true })
            .collect();
        assert_eq!(verify_triangle(&ms, &lms, a, &TriangleOptions::default()).unwrap(), TriangleVerdict::Indeterminate);
    }
}
