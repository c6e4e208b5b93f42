//! Regular lat/lon grid and region sets over it.

use serde::{Deserialize, Serialize};

use crate::netsim::{geodesic_distance, GeoPoint, EARTH_RADIUS_KM};

/// Grid points at `min + i * resolution` over a bounding box, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub resolution_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { lat_min: -90.0, lat_max: 90.0, lon_min: -180.0, lon_max: 179.75, resolution_deg: 0.25 }
    }
}

impl GridSpec {
    /// A box of half-width `half_deg` around `center`, clipped to valid latitudes.
    pub fn around(center: GeoPoint, half_deg: f64, resolution_deg: f64) -> Self {
        let snap = |v: f64| (v / resolution_deg).round() * resolution_deg;
        GridSpec {
            lat_min: snap((center.lat() - half_deg).max(-90.0)),
            lat_max: snap((center.lat() + half_deg).min(90.0)),
            lon_min: snap(center.lon() - half_deg),
            lon_max: snap(center.lon() + half_deg),
            resolution_deg,
        }
    }

    /// Smallest box, snapped outward to the resolution, that covers a
    /// spherical cap of `radius_km` around `center`.
    pub fn covering_disk(center: GeoPoint, radius_km: f64, resolution_deg: f64) -> Self {
        let ang = radius_km / EARTH_RADIUS_KM;
        let dlat = ang.to_degrees();
        let down = |v: f64| (v / resolution_deg).floor() * resolution_deg;
        let up = |v: f64| (v / resolution_deg).ceil() * resolution_deg;
        let lat_min = down((center.lat() - dlat).max(-90.0));
        let lat_max = up((center.lat() + dlat).min(90.0));
        let cos_lat = center.lat().to_radians().cos();
        let touches_pole = center.lat() + dlat >= 90.0 || center.lat() - dlat <= -90.0;
        if touches_pole || ang >= std::f64::consts::FRAC_PI_2 || ang.sin() >= cos_lat {
            let lon_min = -180.0;
            return GridSpec { lat_min, lat_max, lon_min, lon_max: lon_min + 360.0 - resolution_deg, resolution_deg };
        }
        let dlon = (ang.sin() / cos_lat).asin().to_degrees();
        GridSpec {
            lat_min,
            lat_max,
            lon_min: down(center.lon() - dlon),
            lon_max: up(center.lon() + dlon),
            resolution_deg,
        }
    }

    pub fn rows(&self) -> usize {
        ((self.lat_max - self.lat_min) / self.resolution_deg + 1e-9).floor() as usize + 1
    }

    pub fn cols(&self) -> usize {
        ((self.lon_max - self.lon_min) / self.resolution_deg + 1e-9).floor() as usize + 1
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lat(&self, row: usize) -> f64 {
        self.lat_min + row as f64 * self.resolution_deg
    }

    pub fn lon(&self, col: usize) -> f64 {
        self.lon_min + col as f64 * self.resolution_deg
    }

    pub fn point(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint::clamped(self.lat(row), self.lon(col))
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols(), index % self.cols())
    }

    /// Nearest grid cell to `p`, if `p` lies within half a cell of the box.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let r = ((p.lat() - self.lat_min) / self.resolution_deg).round();
        let half = self.resolution_deg / 2.0;
        let dlon = (p.lon() - self.lon_min + half).rem_euclid(360.0) - half;
        let c = (dlon / self.resolution_deg).round();
        if r < 0.0 || c < 0.0 || r as usize >= self.rows() || c as usize >= self.cols() {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Largest distance from a row's grid point to the corners of its cell.
    pub fn cell_radius_km(&self, row: usize) -> f64 {
        let c = self.point(row, 0);
        let h = self.resolution_deg / 2.0;
        let mut best: f64 = 0.0;
        for (dl, dn) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
            let corner = GeoPoint::clamped(c.lat() + dl, c.lon() + dn);
            best = best.max(geodesic_distance(c, corner));
        }
        best
    }
}

/// A set of grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub grid: GridSpec,
    members: Vec<bool>,
}

/// One run-length-encoded row of a region: `[start_col, length]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub row: usize,
    pub lat: f64,
    pub runs: Vec<[usize; 2]>,
}

impl Region {
    pub fn empty(grid: GridSpec) -> Self {
        Region { grid, members: vec![false; grid.len()] }
    }

    pub fn full(grid: GridSpec) -> Self {
        Region { grid, members: vec![true; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut members = Vec::with_capacity(grid.len());
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                members.push(f(r, c));
            }
        }
        Region { grid, members }
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        self.members[self.grid.index(row, col)]
    }

    /// Whether the grid cell nearest `p` is in the region.
    pub fn contains(&self, p: GeoPoint) -> bool {
        self.grid.cell_of(p).is_some_and(|(r, c)| self.contains_cell(r, c))
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|m| *m)
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.members.iter().zip(&other.members).all(|(a, b)| !*a || *b)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.members.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| self.grid.row_col(i))
    }

    /// Mean of member cells on the unit sphere, or `None` when empty.
    pub fn centroid(&self) -> Option<GeoPoint> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (r, c) in self.cells() {
            let v = self.grid.point(r, c).to_unit_vector();
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            n += 1;
        }
        (n > 0).then(|| GeoPoint::from_unit_vector(acc))
    }

    /// Largest distance from `p` to any member cell.
    pub fn max_distance_from(&self, p: GeoPoint) -> Option<f64> {
        self.cells().map(|(r, c)| geodesic_distance(p, self.grid.point(r, c))).reduce(f64::max)
    }

    pub fn rle_rows(&self) -> Vec<RegionRow> {
        let cols = self.grid.cols();
        let mut out = Vec::new();
        for r in 0..self.grid.rows() {
            let row = &self.members[r * cols..(r + 1) * cols];
            let mut runs = Vec::new();
            let mut c = 0;
            while c < cols {
                if row[c] {
                    let start = c;
                    while c < cols && row[c] {
                        c += 1;
                    }
                    runs.push([start, c - start]);
                } else {
                    c += 1;
                }
            }
            if !runs.is_empty() {
                out.push(RegionRow { row: r, lat: self.grid.lat(r), runs });
            }
        }
        out
    }
}
