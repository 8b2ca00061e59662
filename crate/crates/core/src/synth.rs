//! Seeded synthetic scenes: a Gaussian-bump truth field, a biased noisy
//! satellite view of it and a network of stations reading the truth.
//!
//! The random stream is part of the output contract. [`SplitMixRng`] is
//! xorshift64* seeded through splitmix64, and every draw happens in a fixed
//! order:
//!
//! 1. structure stream (`seed`): per bump `center_row`, `center_col`,
//!    `amplitude`, `sigma`; then station placement (partial Fisher–Yates over
//!    candidate pixels) and per-station `(row, col)` jitter;
//! 2. noise stream (`noise_seed`, defaulting to `seed`): one normal draw per
//!    pixel in row-major order for the satellite, then one per station.
//!
//! Normals use Box–Muller, one output per two uniforms.

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, GridSeries};
use crate::stations::{Station, StationSet};

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xorshift64* generator seeded by splitmix64.
#[derive(Debug, Clone)]
pub struct SplitMixRng {
    state: u64,
}

impl SplitMixRng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut state = splitmix64(&mut s);
        if state == 0 {
            state = SPLITMIX_GAMMA;
        }
        SplitMixRng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Where stations are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StationLayout {
    /// Distinct pixels drawn uniformly over the whole grid.
    #[default]
    Uniform,
    /// All but `isolated` stations drawn from the central half of the grid;
    /// the remaining ones sit near the corners, far from everything else.
    Clustered { isolated: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub transform: GeoTransform,
    pub n_bumps: usize,
    /// Peak depth range of each bump.
    pub amplitude: (f64, f64),
    /// Bump width range in pixels.
    pub sigma_px: (f64, f64),
    /// Satellite gain `a` and offset `b`: `satellite = a·truth + b + noise`.
    pub gain: f64,
    pub offset: f64,
    pub noise_sigma: f64,
    pub n_stations: usize,
    pub station_noise_sigma: f64,
    pub zero_fraction: f64,
    /// Max station offset from its pixel center, in pixels.
    pub station_jitter: f64,
    pub layout: StationLayout,
    pub seed: u64,
    /// Seed for the noise stream; `None` reuses `seed`.
    pub noise_seed: Option<u64>,
    pub timestamp: i64,
    /// Frame spacing for [`generate_series`], seconds.
    pub frame_step: i64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rows: 64,
            cols: 64,
            transform: GeoTransform::north_up(40.0, 100.0, 0.1).expect("valid"),
            n_bumps: 6,
            amplitude: (0.5, 3.0),
            sigma_px: (2.0, 8.0),
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 0.0,
            n_stations: 60,
            station_noise_sigma: 0.0,
            zero_fraction: 0.5,
            station_jitter: 0.3,
            layout: StationLayout::Uniform,
            seed: 0,
            noise_seed: None,
            timestamp: 0,
            frame_step: 3600,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("scene must have at least one pixel");
        }
        self.transform.validate()?;
        let range_ok = |r: (f64, f64), min: f64| r.0.is_finite() && r.1.is_finite() && r.0 >= min && r.1 >= r.0;
        if !range_ok(self.amplitude, 0.0) {
            return bad("amplitude range must satisfy 0 <= lo <= hi");
        }
        if !range_ok(self.sigma_px, f64::MIN_POSITIVE) {
            return bad("bump width range must satisfy 0 < lo <= hi");
        }
        if !(self.gain.is_finite() && self.offset.is_finite()) {
            return bad("satellite bias must be finite");
        }
        if !(self.noise_sigma >= 0.0 && self.station_noise_sigma >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.zero_fraction) {
            return bad("zero fraction must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.station_jitter) {
            return bad("station jitter must lie in [0, 0.5)");
        }
        if self.frame_step <= 0 {
            return bad("frame step must be positive");
        }
        let available = match self.layout {
            StationLayout::Uniform => self.rows * self.cols,
            StationLayout::Clustered { isolated } => {
                if isolated > 4 || isolated > self.n_stations {
                    return bad("at most four isolated stations, and no more than n_stations");
                }
                if self.rows < 8 || self.cols < 8 {
                    return bad("clustered layout needs at least 8x8 pixels");
                }
                let (r0, r1, c0, c1) = self.central_box();
                (r1 - r0) * (c1 - c0) + isolated
            }
        };
        if self.n_stations > available {
            return Err(Error::TooManyStations {
                requested: self.n_stations,
                available,
            });
        }
        Ok(())
    }

    fn central_box(&self) -> (usize, usize, usize, usize) {
        (self.rows / 4, self.rows - self.rows / 4, self.cols / 4, self.cols - self.cols / 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    row: f64,
    col: f64,
    amplitude: f64,
    sigma: f64,
}

fn draw_bumps(spec: &SceneSpec, rng: &mut SplitMixRng) -> Vec<Bump> {
    (0..spec.n_bumps)
        .map(|_| Bump {
            row: rng.uniform(0.0, spec.rows as f64),
            col: rng.uniform(0.0, spec.cols as f64),
            amplitude: rng.uniform(spec.amplitude.0, spec.amplitude.1),
            sigma: rng.uniform(spec.sigma_px.0, spec.sigma_px.1),
        })
        .collect()
}

fn bump_field(spec: &SceneSpec, bumps: &[Bump], shift: (f64, f64)) -> Vec<f64> {
    let mut field = vec![0.0; spec.rows * spec.cols];
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            field[r * spec.cols + c] = bumps
                .iter()
                .map(|b| {
                    let dr = r as f64 - (b.row + shift.0);
                    let dc = c as f64 - (b.col + shift.1);
                    b.amplitude * (-(dr * dr + dc * dc) / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum();
        }
    }
    field
}

/// Floor `c` such that about `target` of the pixels satisfy `field ≤ c`.
fn zero_floor(field: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let n = field.len() as f64;
    let frac = |c: f64| field.iter().filter(|v| **v <= c).count() as f64 / n;
    let (mut lo, mut hi) = (0.0, field.iter().cloned().fold(0.0, f64::max));
    if frac(lo) >= target {
        return lo;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn place_stations(spec: &SceneSpec, rng: &mut SplitMixRng) -> Vec<(usize, usize, f64, f64)> {
    let (mut candidates, isolated): (Vec<usize>, Vec<(usize, usize)>) = match spec.layout {
        StationLayout::Uniform => ((0..spec.rows * spec.cols).collect(), Vec::new()),
        StationLayout::Clustered { isolated } => {
            let (r0, r1, c0, c1) = spec.central_box();
            let inner = (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * spec.cols + c)).collect();
            let (lr, lc) = (spec.rows - 2, spec.cols - 2);
            let corners = [(1, 1), (lr, lc), (1, lc), (lr, 1)];
            (inner, corners[..isolated].to_vec())
        }
    };
    let n_regular = spec.n_stations - isolated.len();
    // Partial Fisher–Yates: the first n_regular slots become the sample.
    for i in 0..n_regular {
        let j = i + rng.below(candidates.len() - i);
        candidates.swap(i, j);
    }
    let mut pixels: Vec<(usize, usize)> = candidates[..n_regular]
        .iter()
        .map(|&p| (p / spec.cols, p % spec.cols))
        .collect();
    pixels.extend(isolated);
    pixels
        .into_iter()
        .map(|(r, c)| {
            let jr = rng.uniform(-spec.station_jitter, spec.station_jitter);
            let jc = rng.uniform(-spec.station_jitter, spec.station_jitter);
            (r, c, jr, jc)
        })
        .collect()
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: Grid,
    pub satellite: Grid,
    pub stations: StationSet,
    /// Flat pixel index of each station.
    pub station_pixels: Vec<usize>,
    /// Indices (into `stations`) placed far from the rest; empty for the
    /// uniform layout.
    pub isolated: Vec<usize>,
}

struct Layout {
    bumps: Vec<Bump>,
    floor: f64,
    placements: Vec<(usize, usize, f64, f64)>,
}

fn layout(spec: &SceneSpec) -> Result<Layout> {
    spec.validate()?;
    let mut rng = SplitMixRng::new(spec.seed);
    let bumps = draw_bumps(spec, &mut rng);
    let floor = zero_floor(&bump_field(spec, &bumps, (0.0, 0.0)), spec.zero_fraction);
    let placements = place_stations(spec, &mut rng);
    Ok(Layout {
        bumps,
        floor,
        placements,
    })
}

fn render(spec: &SceneSpec, lay: &Layout, frame: usize, shift: (f64, f64), noise: &mut SplitMixRng) -> Result<Scene> {
    let field = bump_field(spec, &lay.bumps, shift);
    let truth_values: Vec<f64> = field.iter().map(|v| (v - lay.floor).max(0.0)).collect();
    let sat_values: Vec<f64> = truth_values
        .iter()
        .map(|t| (spec.gain * t + spec.offset + spec.noise_sigma * noise.normal()).max(0.0))
        .collect();
    let timestamp = spec.timestamp + frame as i64 * spec.frame_step;
    let truth = Grid::new(spec.rows, spec.cols, truth_values, spec.transform, timestamp)?;
    let satellite = Grid::new(spec.rows, spec.cols, sat_values, spec.transform, timestamp)?;

    let mut stations = Vec::with_capacity(lay.placements.len());
    let mut station_pixels = Vec::with_capacity(lay.placements.len());
    for (i, &(r, c, jr, jc)) in lay.placements.iter().enumerate() {
        let (lat, lon) = spec.transform.index_to_coords(r, c);
        let lat = lat + jr * spec.transform.dlat;
        let lon = lon + jc * spec.transform.dlon;
        let value = (truth.get(r, c) + spec.station_noise_sigma * noise.normal()).max(0.0);
        stations.push(Station::new(format!("ST{i:04}"), lat, lon, value)?);
        station_pixels.push(r * spec.cols + c);
    }
    let isolated = match spec.layout {
        StationLayout::Uniform => Vec::new(),
        StationLayout::Clustered { isolated } => (spec.n_stations - isolated..spec.n_stations).collect(),
    };
    Ok(Scene {
        truth,
        satellite,
        stations: StationSet::new(stations)?,
        station_pixels,
        isolated,
    })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let lay = layout(spec)?;
    let mut noise = SplitMixRng::new(spec.noise_seed.unwrap_or(spec.seed));
    render(spec, &lay, 0, (0.0, 0.0), &mut noise)
}

/// A moving scene: frames share bumps and stations; bump centers move by
/// `advection` (rows, cols) pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSeries {
    pub truth: GridSeries,
    pub satellite: GridSeries,
    /// Station observations per frame (same positions and ids).
    pub stations: Vec<StationSet>,
    pub isolated: Vec<usize>,
}

pub fn generate_series(spec: &SceneSpec, n_frames: usize, advection: (f64, f64)) -> Result<SceneSeries> {
    if n_frames == 0 {
        return Err(Error::InvalidConfig("need at least one frame".into()));
    }
    let lay = layout(spec)?;
    let mut noise = SplitMixRng::new(spec.noise_seed.unwrap_or(spec.seed));
    let mut truth = Vec::with_capacity(n_frames);
    let mut sat = Vec::with_capacity(n_frames);
    let mut stations = Vec::with_capacity(n_frames);
    let mut isolated = Vec::new();
    for f in 0..n_frames {
        let shift = (advection.0 * f as f64, advection.1 * f as f64);
        let scene = render(spec, &lay, f, shift, &mut noise)?;
        truth.push(scene.truth);
        sat.push(scene.satellite);
        stations.push(scene.stations);
        isolated = scene.isolated;
    }
    Ok(SceneSeries {
        truth: GridSeries::new(truth)?,
        satellite: GridSeries::new(sat)?,
        stations,
        isolated,
    })
}

/// Adds `offset` to the observed value of each station in `indices`.
pub fn corrupt_stations(set: &StationSet, indices: &[usize], offset: f64) -> Result<StationSet> {
    let mut values = set.values();
    for &i in indices {
        values[i] = (values[i] + offset).max(0.0);
    }
    set.with_values(&values)
}
