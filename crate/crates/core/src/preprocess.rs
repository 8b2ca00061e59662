//! Station-dense crop search, pooled statistics and truncation normalization.

use crate::error::{Error, Result};
use crate::grid::{is_missing, GeoTransform, Grid, MISSING};
use crate::stations::StationSet;

/// Default crop edge in pixels.
pub const DEFAULT_CROP_SIZE: usize = 256;

/// A square window `[row0, row0+size) × [col0, col0+size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
    pub station_count: usize,
}

impl CropWindow {
    pub fn apply(&self, grid: &Grid) -> Result<Grid> {
        grid.crop(self.row0, self.col0, self.size, self.size)
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= self.row0 as i64
            && col >= self.col0 as i64
            && row < (self.row0 + self.size) as i64
            && col < (self.col0 + self.size) as i64
    }
}

/// Stations per pixel; stations whose nearest pixel lies outside are ignored.
pub fn station_count_raster(rows: usize, cols: usize, set: &StationSet, transform: &GeoTransform) -> Vec<u32> {
    let mut counts = vec![0u32; rows * cols];
    for s in set.stations() {
        let (r, c) = transform.coords_to_index(s.lat, s.lon);
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            counts[r as usize * cols + c as usize] += 1;
        }
    }
    counts
}

/// Inclusive prefix sums with a zero border: `sat[(r+1)*(cols+1) + c+1]`
/// is the sum over `[0..=r] × [0..=c]`.
#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    rows: usize,
    cols: usize,
    sums: Vec<u64>,
}

impl SummedAreaTable {
    pub fn new(rows: usize, cols: usize, values: &[u32]) -> Self {
        assert_eq!(values.len(), rows * cols);
        let w = cols + 1;
        let mut sums = vec![0u64; (rows + 1) * w];
        for r in 0..rows {
            let mut row_sum = 0u64;
            for c in 0..cols {
                row_sum += values[r * cols + c] as u64;
                sums[(r + 1) * w + c + 1] = sums[r * w + c + 1] + row_sum;
            }
        }
        SummedAreaTable { rows, cols, sums }
    }

    /// Sum over `[r0, r0+h) × [c0, c0+w)`.
    pub fn rect_sum(&self, r0: usize, c0: usize, h: usize, wd: usize) -> u64 {
        debug_assert!(r0 + h <= self.rows && c0 + wd <= self.cols);
        let w = self.cols + 1;
        let (r1, c1) = (r0 + h, c0 + wd);
        self.sums[r1 * w + c1] + self.sums[r0 * w + c0] - self.sums[r0 * w + c1] - self.sums[r1 * w + c0]
    }
}

/// The `size×size` window holding the most stations. Ties go to the smallest
/// `row0`, then the smallest `col0`.
pub fn crop_search(shape: (usize, usize), set: &StationSet, transform: &GeoTransform, size: usize) -> Result<CropWindow> {
    let (rows, cols) = shape;
    if size == 0 || size > rows.min(cols) {
        return Err(Error::WindowTooLarge { size, rows, cols });
    }
    let counts = station_count_raster(rows, cols, set, transform);
    Ok(best_window(&SummedAreaTable::new(rows, cols, &counts), size))
}

fn best_window(sat: &SummedAreaTable, size: usize) -> CropWindow {
    let mut best = CropWindow {
        row0: 0,
        col0: 0,
        size,
        station_count: sat.rect_sum(0, 0, size, size) as usize,
    };
    for r in 0..=sat.rows - size {
        for c in 0..=sat.cols - size {
            let n = sat.rect_sum(r, c, size, size) as usize;
            if n > best.station_count {
                best = CropWindow {
                    row0: r,
                    col0: c,
                    size,
                    station_count: n,
                };
            }
        }
    }
    best
}

/// One window per frame, each maximizing that frame's station count.
pub fn crop_search_per_frame(
    shape: (usize, usize),
    sets: &[StationSet],
    transform: &GeoTransform,
    size: usize,
) -> Result<Vec<CropWindow>> {
    sets.iter().map(|s| crop_search(shape, s, transform, size)).collect()
}

/// A single window maximizing the station count pooled over every frame.
pub fn crop_search_global(
    shape: (usize, usize),
    sets: &[StationSet],
    transform: &GeoTransform,
    size: usize,
) -> Result<CropWindow> {
    let (rows, cols) = shape;
    if size == 0 || size > rows.min(cols) {
        return Err(Error::WindowTooLarge { size, rows, cols });
    }
    let mut counts = vec![0u32; rows * cols];
    for s in sets {
        for (acc, c) in counts.iter_mut().zip(station_count_raster(rows, cols, s, transform)) {
            *acc += c;
        }
    }
    Ok(best_window(&SummedAreaTable::new(rows, cols, &counts), size))
}

/// Min/max/mean and quantiles of a value pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q99: f64,
    pub zero_filtered: bool,
}

/// Quantile of sorted data by linear interpolation between closest ranks
/// (position `p·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Statistics over non-missing values, optionally ignoring exact zeros.
pub fn compute_stats<I: IntoIterator<Item = f64>>(values: I, drop_zeros: bool) -> Result<QuantileStats> {
    let mut v: Vec<f64> = values
        .into_iter()
        .filter(|x| !is_missing(*x) && !(drop_zeros && *x == 0.0))
        .collect();
    if v.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let avg = crate::metrics::neumaier_sum(v.iter().copied()) / n as f64;
    Ok(QuantileStats {
        count: n,
        min: v[0],
        max: v[n - 1],
        avg,
        q1: quantile_sorted(&v, 0.25),
        q2: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        q99: quantile_sorted(&v, 0.99),
        zero_filtered: drop_zeros,
    })
}

/// Min-max scaling with an upper truncation value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub clamp: bool,
}

impl NormSpec {
    /// Hourly maximum: Q99 of pooled non-zero hourly depths.
    pub const HOURLY: NormSpec = NormSpec {
        x_min: 0.0,
        x_max: 6.22,
        clamp: true,
    };
    /// Daily maximum: Q99 of pooled non-zero daily depths.
    pub const DAILY: NormSpec = NormSpec {
        x_min: 0.0,
        x_max: 38.48,
        clamp: true,
    };

    pub fn new(x_min: f64, x_max: f64, clamp: bool) -> Result<Self> {
        let spec = NormSpec { x_min, x_max, clamp };
        spec.validate()?;
        Ok(spec)
    }

    /// `[0, q99]` from zero-filtered statistics.
    pub fn from_stats(stats: &QuantileStats) -> Result<Self> {
        Self::new(0.0, stats.q99, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_max > self.x_min) {
            return Err(Error::InvalidConfig(format!(
                "normalization range [{}, {}] is empty",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        if is_missing(x) {
            return MISSING;
        }
        let y = (x - self.x_min) / (self.x_max - self.x_min);
        if self.clamp {
            y.clamp(0.0, 1.0)
        } else {
            y
        }
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        if is_missing(y) {
            return MISSING;
        }
        y * (self.x_max - self.x_min) + self.x_min
    }
}

pub fn normalize(grid: &Grid, spec: &NormSpec) -> Result<Grid> {
    spec.validate()?;
    grid.with_values(grid.values().iter().map(|&x| spec.forward(x)).collect())
}

pub fn denormalize(grid: &Grid, spec: &NormSpec) -> Result<Grid> {
    spec.validate()?;
    grid.with_values(grid.values().iter().map(|&y| spec.inverse(y)).collect())
}
