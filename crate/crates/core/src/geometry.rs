//! Distances between sites, regular grids clipped to a polygonal boundary, and
//! assignment of points to named regions.
//!
//! Coordinates are stored as `(x, y)`. Under the geodesic metric `x` is the
//! longitude in degrees east and `y` the latitude in degrees north.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Default Earth radius in kilometres used by the geodesic metric.
pub const DEFAULT_EARTH_RADIUS_KM: f64 = 6378.388;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn lon(&self) -> f64 {
        self.x
    }

    pub fn lat(&self) -> f64 {
        self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceMetric {
    /// Great-circle distance in kilometres on a sphere of the given radius.
    Geodesic { earth_radius_km: f64 },
    /// Planar distance in coordinate units.
    Euclidean,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        DistanceMetric::Geodesic {
            earth_radius_km: DEFAULT_EARTH_RADIUS_KM,
        }
    }
}

impl DistanceMetric {
    pub fn geodesic(earth_radius_km: f64) -> Result<Self> {
        let m = DistanceMetric::Geodesic { earth_radius_km };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistanceMetric::Geodesic { earth_radius_km } if !(earth_radius_km > 0.0) => Err(
                Error::domain(format!("earth radius must be positive, got {earth_radius_km}")),
            ),
            _ => Ok(()),
        }
    }

    /// Checks that a location is admissible under this metric.
    pub fn check(&self, loc: &Location) -> Result<()> {
        if !loc.x.is_finite() || !loc.y.is_finite() {
            return Err(Error::domain(format!("non-finite coordinate {loc:?}")));
        }
        if let DistanceMetric::Geodesic { .. } = self {
            if !(-90.0..=90.0).contains(&loc.y) {
                return Err(Error::domain(format!(
                    "latitude {} outside [-90, 90]",
                    loc.y
                )));
            }
        }
        Ok(())
    }

    pub fn distance(&self, a: &Location, b: &Location) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.distance_unchecked(a, b))
    }

    fn distance_unchecked(&self, a: &Location, b: &Location) -> f64 {
        match *self {
            DistanceMetric::Euclidean => (a.x - b.x).hypot(a.y - b.y),
            DistanceMetric::Geodesic { earth_radius_km } => {
                haversine(a, b) * earth_radius_km
            }
        }
    }
}

/// Central angle (radians) between two lon/lat points, haversine form.
fn haversine(a: &Location, b: &Location) -> f64 {
    let (lat1, lat2) = (a.y.to_radians(), b.y.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.x - a.x).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

pub fn distance(a: &Location, b: &Location, metric: DistanceMetric) -> Result<f64> {
    metric.distance(a, b)
}

/// Symmetric matrix of pairwise distances with an exact zero diagonal.
pub fn distance_matrix(locs: &[Location], metric: DistanceMetric) -> Result<DMatrix<f64>> {
    metric.validate()?;
    for l in locs {
        metric.check(l)?;
    }
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = metric.distance_unchecked(&locs[i], &locs[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Distances from each of `rows` to each of `cols` (`rows.len() × cols.len()`).
pub fn cross_distance_matrix(
    rows: &[Location],
    cols: &[Location],
    metric: DistanceMetric,
) -> Result<DMatrix<f64>> {
    metric.validate()?;
    for l in rows.iter().chain(cols) {
        metric.check(l)?;
    }
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        metric.distance_unchecked(&rows[i], &cols[j])
    }))
}

pub fn max_pairwise_distance(locs: &[Location], metric: DistanceMetric) -> Result<f64> {
    Ok(distance_matrix(locs, metric)?.max())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        if !(min_x < max_x && min_y < max_y) {
            return Err(Error::domain(format!(
                "degenerate bounding box [{min_x}, {max_x}] x [{min_y}, {max_y}]"
            )));
        }
        Ok(Self {
            min_x,
            min_y,
            max_x,
            max_y,
        })
    }
}

/// Closed vertex ring; the first vertex is repeated at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    ring: Vec<Location>,
}

impl Polygon {
    /// Builds a polygon from a vertex ring, closing it if the caller did not.
    pub fn new(mut vertices: Vec<Location>) -> Result<Self> {
        if let (Some(first), Some(last)) = (vertices.first().copied(), vertices.last().copied()) {
            if first != last {
                vertices.push(first);
            }
        }
        if vertices.len() < 4 {
            return Err(Error::domain(format!(
                "polygon needs at least 3 distinct vertices, got {}",
                vertices.len().saturating_sub(1)
            )));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::domain("polygon has a non-finite vertex"));
        }
        Ok(Self { ring: vertices })
    }

    pub fn ring(&self) -> &[Location] {
        &self.ring
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut b = BoundingBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for v in &self.ring {
            b.min_x = b.min_x.min(v.x);
            b.min_y = b.min_y.min(v.y);
            b.max_x = b.max_x.max(v.x);
            b.max_y = b.max_y.max(v.y);
        }
        b
    }

    /// Even-odd containment test. Points on an edge or vertex are inside.
    pub fn contains(&self, p: &Location) -> bool {
        let mut inside = false;
        for edge in self.ring.windows(2) {
            let (a, b) = (edge[0], edge[1]);
            if on_segment(p, &a, &b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn on_segment(p: &Location, a: &Location, b: &Location) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let scale = (b.x - a.x).abs().max((b.y - a.y).abs()).max(1.0);
    if cross.abs() > 1e-12 * scale * scale {
        return false;
    }
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Centers of grid cells of side `resolution` tiling `bbox` from its lower-left
/// corner, kept when `keep` accepts them. Row-major: latitude outer, longitude inner.
pub fn make_grid_filtered(
    bbox: BoundingBox,
    resolution: f64,
    keep: impl Fn(&Location) -> bool,
) -> Result<Vec<Location>> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::domain(format!(
            "grid resolution must be positive, got {resolution}"
        )));
    }
    let n_cols = cell_count(bbox.max_x - bbox.min_x, resolution);
    let n_rows = cell_count(bbox.max_y - bbox.min_y, resolution);
    let mut out = Vec::new();
    for row in 0..n_rows {
        let y = bbox.min_y + (row as f64 + 0.5) * resolution;
        for col in 0..n_cols {
            let loc = Location::new(bbox.min_x + (col as f64 + 0.5) * resolution, y);
            if keep(&loc) {
                out.push(loc);
            }
        }
    }
    if out.is_empty() {
        log::warn!("grid generation produced no cells inside the boundary");
    }
    Ok(out)
}

fn cell_count(extent: f64, resolution: f64) -> usize {
    let n = extent / resolution;
    (n - 1e-9).ceil().max(0.0) as usize
}

pub fn make_grid(bbox: BoundingBox, resolution: f64, boundary: &Polygon) -> Result<Vec<Location>> {
    make_grid_filtered(bbox, resolution, |l| boundary.contains(l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub polygon: Polygon,
}

/// Named polygons, searched in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionPartition {
    pub regions: Vec<Region>,
}

impl RegionPartition {
    pub fn new(regions: Vec<Region>) -> Self {
        Self { regions }
    }

    pub fn assign(&self, loc: &Location) -> Option<&str> {
        self.regions
            .iter()
            .find(|r| r.polygon.contains(loc))
            .map(|r| r.name.as_str())
    }

    pub fn contains(&self, loc: &Location) -> bool {
        self.assign(loc).is_some()
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        self.regions
            .iter()
            .map(|r| r.polygon.bbox())
            .reduce(|a, b| BoundingBox {
                min_x: a.min_x.min(b.min_x),
                min_y: a.min_y.min(b.min_y),
                max_x: a.max_x.max(b.max_x),
                max_y: a.max_y.max(b.max_y),
            })
    }
}

pub fn assign_region<'a>(loc: &Location, part: &'a RegionPartition) -> Option<&'a str> {
    part.assign(loc)
}
