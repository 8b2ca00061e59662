//! Reliable ground stations, nearest-neighbor distances and grid extraction.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::grid::{is_missing, GeoTransform, Grid};

/// Mean Earth radius used by the haversine metric.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Observed depth in mm.
    pub value: f64,
}

impl Station {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, value: f64) -> Result<Self> {
        let s = Station {
            id: id.into(),
            lat,
            lon,
            value,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.value.is_finite() && self.value >= 0.0) {
            return Err(Error::InvalidStation(format!(
                "{}: value {} must be finite and non-negative",
                self.id, self.value
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidStation(format!(
                "{}: coordinate ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// An ordered set of stations with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StationSet {
    stations: Vec<Station>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(stations.len());
        for s in &stations {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidStation(format!("duplicate id {:?}", s.id)));
            }
        }
        Ok(StationSet { stations })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.stations.iter().map(|s| s.value).collect()
    }

    /// The stations at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> StationSet {
        StationSet {
            stations: indices.iter().map(|&i| self.stations[i].clone()).collect(),
        }
    }

    /// Same positions, new observed values.
    pub fn with_values(&self, values: &[f64]) -> Result<StationSet> {
        assert_eq!(values.len(), self.len());
        let stations = self
            .stations
            .iter()
            .zip(values)
            .map(|(s, &v)| Station::new(s.id.clone(), s.lat, s.lon, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(StationSet { stations })
    }
}

impl FromIterator<Station> for Result<StationSet> {
    fn from_iter<I: IntoIterator<Item = Station>>(iter: I) -> Self {
        StationSet::new(iter.into_iter().collect())
    }
}

/// How distances between stations are measured. Kernel parameters are
/// expressed in this metric's units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DistanceMetric {
    /// Great-circle distance in kilometres.
    #[default]
    HaversineKm,
    /// Planar distance in degrees of latitude/longitude.
    EuclideanDegrees,
    /// Planar distance in pixels of the given transform.
    GridPixels(GeoTransform),
}

impl DistanceMetric {
    pub fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        match self {
            DistanceMetric::HaversineKm => haversine_km(a, b),
            DistanceMetric::EuclideanDegrees => (a.0 - b.0).hypot(a.1 - b.1),
            DistanceMetric::GridPixels(t) => {
                ((a.0 - b.0) / t.dlat).hypot((a.1 - b.1) / t.dlon)
            }
        }
    }

    /// Embedding into R³ where Euclidean distance is a monotone function of
    /// this metric. Haversine maps to the unit sphere (chord length).
    fn embed(&self, p: (f64, f64)) -> [f64; 3] {
        match self {
            DistanceMetric::HaversineKm => {
                let (lat, lon) = (p.0.to_radians(), p.1.to_radians());
                [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
            }
            DistanceMetric::EuclideanDegrees => [p.0, p.1, 0.0],
            DistanceMetric::GridPixels(t) => [p.0 / t.dlat, p.1 / t.dlon, 0.0],
        }
    }
}

/// Great-circle distance in km between `(lat, lon)` pairs in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lat2) = (a.0.to_radians(), b.0.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.1 - a.1).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Uniform bucket grid over embedded station positions.
///
/// Queries search cells in growing Chebyshev shells and stop once the next
/// shell cannot hold anything closer. The final comparison uses the metric
/// itself, so results equal a linear scan.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    metric: DistanceMetric,
    points: Vec<(f64, f64)>,
    embedded: Vec<[f64; 3]>,
    cell: f64,
    origin: [f64; 3],
    /// Largest occupied cell key per axis; keys start at 0.
    key_max: [i64; 3],
    max_shell: i64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialIndex {
    pub fn build(set: &StationSet, metric: DistanceMetric) -> Self {
        let points: Vec<(f64, f64)> = set.stations().iter().map(|s| (s.lat, s.lon)).collect();
        Self::from_points(points, metric)
    }

    pub fn from_points(points: Vec<(f64, f64)>, metric: DistanceMetric) -> Self {
        let embedded: Vec<[f64; 3]> = points.iter().map(|&p| metric.embed(p)).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for e in &embedded {
            for k in 0..3 {
                lo[k] = lo[k].min(e[k]);
                hi[k] = hi[k].max(e[k]);
            }
        }
        if embedded.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let extents: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        let dims = extents.iter().filter(|e| **e > 0.0).count().max(1);
        let volume: f64 = extents.iter().filter(|e| **e > 0.0).product();
        let largest = extents.iter().cloned().fold(0.0, f64::max);
        // Aim for roughly two points per occupied cell.
        let per_cell = 2.0;
        let mut cell = (volume * per_cell / points.len().max(1) as f64).powf(1.0 / dims as f64);
        if !(cell.is_finite() && cell > 0.0) {
            cell = if largest > 0.0 { largest } else { 1.0 };
        }
        cell = cell.max(largest / 1e6).max(f64::MIN_POSITIVE);
        let bucket = |cell: f64| {
            let mut b: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
            for (i, e) in embedded.iter().enumerate() {
                b.entry(Self::key(e, &lo, cell)).or_default().push(i);
            }
            b
        };
        let mut buckets = bucket(cell);
        // Points on a sphere patch fill a shell, not the box; shrink until occupancy is near target.
        while points.len() as f64 > 2.0 * per_cell * buckets.len() as f64 && cell / 2.0 >= largest / 1e6 {
            cell /= 2.0;
            buckets = bucket(cell);
        }
        let max_shell = (largest / cell).ceil() as i64 + 1;
        let key_max = Self::key(&hi, &lo, cell);
        SpatialIndex {
            metric,
            points,
            embedded,
            cell,
            origin: lo,
            key_max,
            max_shell,
            buckets,
        }
    }

    fn key(e: &[f64; 3], origin: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            ((e[0] - origin[0]) / cell).floor() as i64,
            ((e[1] - origin[1]) / cell).floor() as i64,
            ((e[2] - origin[2]) / cell).floor() as i64,
        ]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest indexed point to `query`, as `(index, metric distance)`.
    pub fn nearest(&self, query: (f64, f64)) -> Option<(usize, f64)> {
        self.nearest_excluding(query, None)
    }

    /// Like [`nearest`](Self::nearest) but never returns `exclude`.
    pub fn nearest_excluding(&self, query: (f64, f64), exclude: Option<usize>) -> Option<(usize, f64)> {
        let available = self.points.len() - usize::from(exclude.is_some_and(|e| e < self.points.len()));
        if available == 0 {
            return None;
        }
        let q = self.metric.embed(query);
        let center = Self::key(&q, &self.origin, self.cell);
        let mut best_chord = f64::INFINITY;
        let mut visited: Vec<usize> = Vec::new();
        // Shells beyond max_shell around the data bounding box are empty,
        // but the query may lie outside the box, so bound by distance too.
        // Shells closer than the occupied box are empty.
        let mut shell = self.shell_offset(center);
        loop {
            self.visit_shell(center, shell, |i| {
                if Some(i) == exclude {
                    return;
                }
                let e = &self.embedded[i];
                let d = ((e[0] - q[0]).powi(2) + (e[1] - q[1]).powi(2) + (e[2] - q[2]).powi(2)).sqrt();
                if d < best_chord {
                    best_chord = d;
                }
                visited.push(i);
            });
            // Anything not yet visited is at least shell·cell away.
            let bound = shell as f64 * self.cell;
            if best_chord.is_finite() && bound > best_chord * (1.0 + 1e-9) + 1e-12 {
                break;
            }
            if visited.len() == available {
                break;
            }
            shell += 1;
            if shell > self.max_shell + self.shell_offset(center) {
                break;
            }
        }
        visited
            .into_iter()
            .map(|i| (i, self.metric.distance(query, self.points[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    /// How far the query cell lies outside the occupied cell range.
    fn shell_offset(&self, center: [i64; 3]) -> i64 {
        (0..3)
            .map(|k| (-center[k]).max(0).max(center[k] - self.key_max[k]))
            .max()
            .unwrap_or(0)
    }

    /// Visits cells at Chebyshev distance `shell` from `center`, restricted
    /// to the occupied key box.
    fn visit_shell(&self, center: [i64; 3], shell: i64, mut f: impl FnMut(usize)) {
        let r = shell;
        let span = |k: usize| (center[k] - r).max(0)..=(center[k] + r).min(self.key_max[k]);
        for x in span(0) {
            for y in span(1) {
                for z in span(2) {
                    let k = [x, y, z];
                    if (0..3).map(|a| (k[a] - center[a]).abs()).max() != Some(r) {
                        continue;
                    }
                    if let Some(ids) = self.buckets.get(&k) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

/// Distance from every station to its nearest other station, in input order.
pub fn nn_distances(set: &StationSet, metric: DistanceMetric) -> Result<Vec<f64>> {
    if set.len() < 2 {
        return Err(Error::TooFewStations(set.len()));
    }
    let index = SpatialIndex::build(set, metric);
    Ok(set
        .stations()
        .iter()
        .enumerate()
        .map(|(j, s)| {
            index
                .nearest_excluding((s.lat, s.lon), Some(j))
                .map(|(_, d)| d)
                .expect("at least one other station")
        })
        .collect())
}

/// Grid values at station locations.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSamples {
    /// Nearest-pixel value per station; meaningless where `valid` is false.
    pub values: Vec<f64>,
    /// Flat pixel index per station, `None` when outside the extent.
    pub pixels: Vec<Option<usize>>,
    /// False for stations outside the extent or on missing pixels.
    pub valid: Vec<bool>,
}

impl StationSamples {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Reads `grid` at every station's nearest pixel.
pub fn sample_at_stations(grid: &Grid, set: &StationSet) -> Result<StationSamples> {
    let n = set.len();
    let mut out = StationSamples {
        values: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for s in set.stations() {
        match grid.locate(s.lat, s.lon) {
            Ok(idx) => {
                let v = grid.values()[idx];
                out.values.push(v);
                out.pixels.push(Some(idx));
                out.valid.push(!is_missing(v));
            }
            Err(_) => {
                out.values.push(f64::NAN);
                out.pixels.push(None);
                out.valid.push(false);
            }
        }
    }
    if out.valid_count() == 0 {
        return Err(Error::AllStationsOutOfBounds);
    }
    Ok(out)
}
