//! Georeferenced precipitation rasters.
//!
//! Values are attached to pixel centers. Row `r`, column `c` sits at
//! `(lat_origin + r·dlat, lon_origin + c·dlon)`. Missing pixels hold [`MISSING`]
//! (a NaN) and are skipped by every metric and loss.

use crate::error::{Error, Result};

/// No-data marker stored in [`Grid`] values.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

/// Affine mapping between pixel indices and plate-carrée coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    /// Latitude of the center of row 0.
    pub lat_origin: f64,
    /// Longitude of the center of column 0.
    pub lon_origin: f64,
    /// Degrees per row; negative for north-up rasters.
    pub dlat: f64,
    /// Degrees per column.
    pub dlon: f64,
}

impl GeoTransform {
    pub fn new(lat_origin: f64, lon_origin: f64, dlat: f64, dlon: f64) -> Result<Self> {
        let t = GeoTransform {
            lat_origin,
            lon_origin,
            dlat,
            dlon,
        };
        t.validate()?;
        Ok(t)
    }

    /// A north-up transform whose top-left pixel center is `(lat_top, lon_left)`.
    pub fn north_up(lat_top: f64, lon_left: f64, resolution: f64) -> Result<Self> {
        Self::new(lat_top, lon_left, -resolution, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_origin, self.lon_origin, self.dlat, self.dlon]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGrid("non-finite geotransform".into()));
        }
        if self.dlat == 0.0 || self.dlon == 0.0 {
            return Err(Error::InvalidGrid("zero pixel size".into()));
        }
        Ok(())
    }

    /// Pixel-center coordinates of `(row, col)`.
    #[inline]
    pub fn index_to_coords(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat_origin + row as f64 * self.dlat,
            self.lon_origin + col as f64 * self.dlon,
        )
    }

    /// Fractional `(row, col)` position of a coordinate.
    #[inline]
    pub fn fractional_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lat - self.lat_origin) / self.dlat,
            (lon - self.lon_origin) / self.dlon,
        )
    }

    /// Nearest pixel center, rounding half away from zero. The result may lie
    /// outside any particular grid; callers bound-check.
    #[inline]
    pub fn coords_to_index(&self, lat: f64, lon: f64) -> (i64, i64) {
        let (r, c) = self.fractional_index(lat, lon);
        (r.round() as i64, c.round() as i64)
    }
}

/// A rows×cols raster of precipitation depths in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    transform: GeoTransform,
    /// UTC instant in seconds since the Unix epoch.
    timestamp: i64,
}

impl Grid {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        transform: GeoTransform,
        timestamp: i64,
    ) -> Result<Self> {
        transform.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidGrid(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !is_missing(**v) && !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidGrid(format!(
                "value {bad} is negative or non-finite"
            )));
        }
        Ok(Grid {
            rows,
            cols,
            values,
            transform,
            timestamp,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64, transform: GeoTransform) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols], transform, 0)
    }

    /// Builds a grid from `f(row, col)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        transform: GeoTransform,
        timestamp: i64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values, transform, timestamp)
    }

    /// Same georeferencing and timestamp, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, values, self.transform, self.timestamp)
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    #[inline]
    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Flat index of `(row, col)` if it lies inside the grid.
    #[inline]
    pub fn flat_index(&self, row: i64, col: i64) -> Option<usize> {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            None
        } else {
            Some(row as usize * self.cols + col as usize)
        }
    }

    /// True when `(lat, lon)` is inside the half-pixel padded extent.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let (r, c) = self.transform.fractional_index(lat, lon);
        r >= -0.5 && c >= -0.5 && r <= self.rows as f64 - 0.5 && c <= self.cols as f64 - 0.5
    }

    /// Flat index of the pixel whose center is nearest to `(lat, lon)`.
    pub fn locate(&self, lat: f64, lon: f64) -> Result<usize> {
        if !self.contains(lat, lon) {
            return Err(Error::OutOfBounds { lat, lon });
        }
        let (r, c) = self.transform.coords_to_index(lat, lon);
        // A point on the padded edge rounds outward; pull it back in.
        let r = r.clamp(0, self.rows as i64 - 1);
        let c = c.clamp(0, self.cols as i64 - 1);
        Ok(r as usize * self.cols + c as usize)
    }

    /// Value of the pixel nearest to `(lat, lon)`; missing pixels yield [`MISSING`].
    pub fn sample(&self, lat: f64, lon: f64) -> Result<f64> {
        Ok(self.values[self.locate(lat, lon)?])
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.transform == other.transform
    }

    pub(crate) fn check_same_geometry(&self, other: &Grid) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{} (or differing transforms)",
                self.rows, self.cols, other.rows, other.cols
            )))
        }
    }

    /// Copies the `size_r×size_c` block starting at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, size_r: usize, size_c: usize) -> Result<Grid> {
        if row0 + size_r > self.rows || col0 + size_c > self.cols {
            return Err(Error::WindowTooLarge {
                size: size_r.max(size_c),
                rows: self.rows,
                cols: self.cols,
            });
        }
        let mut values = Vec::with_capacity(size_r * size_c);
        for r in row0..row0 + size_r {
            values.extend_from_slice(&self.values[r * self.cols + col0..r * self.cols + col0 + size_c]);
        }
        let (lat, lon) = self.transform.index_to_coords(row0, col0);
        let t = GeoTransform {
            lat_origin: lat,
            lon_origin: lon,
            ..self.transform
        };
        Grid::new(size_r, size_c, values, t, self.timestamp)
    }

    /// Non-missing values.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !is_missing(*v))
    }
}

/// Frames on one geometry with a uniform time step.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    frames: Vec<Grid>,
    step_seconds: i64,
}

impl GridSeries {
    pub fn new(frames: Vec<Grid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidGrid("empty series".into()))?;
        for f in &frames[1..] {
            first.check_same_geometry(f)?;
        }
        let step = if frames.len() > 1 {
            frames[1].timestamp - frames[0].timestamp
        } else {
            0
        };
        if frames.len() > 1 && step <= 0 {
            return Err(Error::StepMismatch("timestamps must increase".into()));
        }
        for w in frames.windows(2) {
            if w[1].timestamp - w[0].timestamp != step {
                return Err(Error::StepMismatch(format!(
                    "step {} != {step}",
                    w[1].timestamp - w[0].timestamp
                )));
            }
        }
        Ok(GridSeries {
            frames,
            step_seconds: step,
        })
    }

    pub fn frames(&self) -> &[Grid] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Grid> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Zero for single-frame series.
    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }
}
