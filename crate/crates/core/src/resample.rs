//! Temporal interpolation between frames and spatial resampling between grids.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{is_missing, GeoTransform, Grid, GridSeries, MISSING};

/// Spatial interpolation kernel. Bicubic is cubic convolution with `a = −0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResampleMethod {
    Nearest,
    #[default]
    Bilinear,
    Bicubic,
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResampleMethod::Nearest),
            "bilinear" | "linear" => Ok(ResampleMethod::Bilinear),
            "bicubic" | "cubic" => Ok(ResampleMethod::Bicubic),
            other => Err(Error::InvalidConfig(format!("unknown resample method {other:?}"))),
        }
    }
}

/// Source and target frame spacing in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeInterpSpec {
    pub source_step: i64,
    pub target_step: i64,
}

impl TimeInterpSpec {
    /// Hourly frames to half-hourly frames.
    pub const HOURLY_TO_HALF_HOURLY: TimeInterpSpec = TimeInterpSpec {
        source_step: 3600,
        target_step: 1800,
    };

    pub fn validate(&self) -> Result<()> {
        if self.source_step <= 0 || self.target_step <= 0 || self.source_step % self.target_step != 0 {
            return Err(Error::StepMismatch(format!(
                "target step {}s must divide source step {}s",
                self.target_step, self.source_step
            )));
        }
        Ok(())
    }

    pub fn subdivisions(&self) -> usize {
        (self.source_step / self.target_step) as usize
    }
}

/// Per-pixel blend `(1−θ)·a + θ·b`; missing in either input stays missing.
pub fn blend(a: &Grid, b: &Grid, theta: f64, timestamp: i64) -> Result<Grid> {
    a.check_same_geometry(b)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            if is_missing(x) || is_missing(y) {
                MISSING
            } else if theta == 0.0 {
                x
            } else if theta == 1.0 {
                y
            } else {
                // Both terms are non-negative, so the blend is too.
                (1.0 - theta) * x + theta * y
            }
        })
        .collect();
    Grid::new(a.rows(), a.cols(), values, *a.transform(), timestamp)
}

/// Linearly interpolates `series` onto the finer `spec.target_step`.
/// Source frames appear unchanged in the output.
pub fn interp_time(series: &GridSeries, spec: &TimeInterpSpec) -> Result<GridSeries> {
    spec.validate()?;
    if series.len() < 2 {
        return Err(Error::StepMismatch("need at least two frames".into()));
    }
    if series.step_seconds() != spec.source_step {
        return Err(Error::StepMismatch(format!(
            "series step {}s, expected {}s",
            series.step_seconds(),
            spec.source_step
        )));
    }
    let k = spec.subdivisions();
    let frames = series.frames();
    let mut out = Vec::with_capacity((frames.len() - 1) * k + 1);
    for w in frames.windows(2) {
        out.push(w[0].clone());
        for i in 1..k {
            let theta = i as f64 / k as f64;
            out.push(blend(&w[0], &w[1], theta, w[0].timestamp() + i as i64 * spec.target_step)?);
        }
    }
    out.push(frames[frames.len() - 1].clone());
    GridSeries::new(out)
}

/// Target grid geometry for [`resample_space`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetGeometry {
    pub transform: GeoTransform,
    pub rows: usize,
    pub cols: usize,
}

impl TargetGeometry {
    /// Geometry covering `src` at a new resolution (same north-west corner of
    /// the pixel-edge extent).
    pub fn covering(src: &Grid, resolution: f64) -> Result<Self> {
        let t = src.transform();
        if !(resolution > 0.0) {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        let height = src.rows() as f64 * t.dlat.abs();
        let width = src.cols() as f64 * t.dlon.abs();
        let rows = ((height / resolution) + 1e-9).floor().max(1.0) as usize;
        let cols = ((width / resolution) + 1e-9).floor().max(1.0) as usize;
        let sr = t.dlat.signum() * resolution;
        let sc = t.dlon.signum() * resolution;
        let edge_lat = t.lat_origin - t.dlat / 2.0;
        let edge_lon = t.lon_origin - t.dlon / 2.0;
        Ok(TargetGeometry {
            transform: GeoTransform::new(edge_lat + sr / 2.0, edge_lon + sc / 2.0, sr, sc)?,
            rows,
            cols,
        })
    }
}

/// Interpolates `src` at every target pixel center.
///
/// Target centers outside the source's half-pixel padded extent become
/// missing. Interpolation stencils use edge-clamped source samples; any
/// missing contributor makes the output missing. Negative bicubic overshoot
/// is clamped to zero.
pub fn resample_space(src: &Grid, target: &TargetGeometry, method: ResampleMethod) -> Result<Grid> {
    target.transform.validate()?;
    if target.rows == 0 || target.cols == 0 {
        return Err(Error::InvalidGrid("empty target".into()));
    }
    let overlaps = (0..target.rows).any(|r| {
        (0..target.cols).any(|c| {
            let (lat, lon) = target.transform.index_to_coords(r, c);
            src.contains(lat, lon)
        })
    });
    if !overlaps {
        return Err(Error::EmptyOverlap);
    }
    let rows: Vec<Vec<f64>> = (0..target.rows)
        .into_par_iter()
        .map(|r| {
            (0..target.cols)
                .map(|c| {
                    let (lat, lon) = target.transform.index_to_coords(r, c);
                    if !src.contains(lat, lon) {
                        return MISSING;
                    }
                    let (fr, fc) = src.transform().fractional_index(lat, lon);
                    match method {
                        ResampleMethod::Nearest => src.values()[src.locate(lat, lon).expect("inside")],
                        ResampleMethod::Bilinear => bilinear(src, fr, fc),
                        ResampleMethod::Bicubic => bicubic(src, fr, fc),
                    }
                })
                .collect()
        })
        .collect();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    Grid::new(target.rows, target.cols, values, target.transform, src.timestamp())
}

#[inline]
fn clamped(src: &Grid, r: i64, c: i64) -> f64 {
    let r = r.clamp(0, src.rows() as i64 - 1) as usize;
    let c = c.clamp(0, src.cols() as i64 - 1) as usize;
    src.get(r, c)
}

fn bilinear(src: &Grid, fr: f64, fc: f64) -> f64 {
    let r0 = fr.floor();
    let c0 = fc.floor();
    let tr = fr - r0;
    let tc = fc - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let v00 = clamped(src, r0, c0);
    let v01 = clamped(src, r0, c0 + 1);
    let v10 = clamped(src, r0 + 1, c0);
    let v11 = clamped(src, r0 + 1, c0 + 1);
    if [v00, v01, v10, v11].iter().any(|v| is_missing(*v)) {
        return MISSING;
    }
    let top = v00 + tc * (v01 - v00);
    let bottom = v10 + tc * (v11 - v10);
    let v = top + tr * (bottom - top);
    v.max(0.0)
}

/// Cubic convolution weight with `a = −0.5`.
#[inline]
pub(crate) fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn bicubic(src: &Grid, fr: f64, fc: f64) -> f64 {
    let r0 = fr.floor();
    let c0 = fc.floor();
    let tr = fr - r0;
    let tc = fc - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let wr: [f64; 4] = std::array::from_fn(|i| cubic_weight(tr - (i as f64 - 1.0)));
    let wc: [f64; 4] = std::array::from_fn(|j| cubic_weight(tc - (j as f64 - 1.0)));
    let mut acc = 0.0;
    for (i, wri) in wr.iter().enumerate() {
        let mut row = 0.0;
        for (j, wcj) in wc.iter().enumerate() {
            let v = clamped(src, r0 + i as i64 - 1, c0 + j as i64 - 1);
            if is_missing(v) {
                return MISSING;
            }
            row += wcj * v;
        }
        acc += wri * row;
    }
    acc.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fine() -> GeoTransform {
        GeoTransform::north_up(40.0, 100.0, 0.05).unwrap()
    }

    #[test]
    fn midpoint_of_two_frames() {
        let t = fine();
        let a = Grid::filled(3, 3, 0.0, t).unwrap();
        let b = Grid::filled(3, 3, 2.0, t).unwrap().with_timestamp(3600);
        let s = GridSeries::new(vec![a, b]).unwrap();
        let out = interp_time(&s, &TimeInterpSpec::HOURLY_TO_HALF_HOURLY).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.frames()[1].timestamp(), 1800);
        assert!(out.frames()[1].values().iter().all(|v| *v == 1.0));
        assert_eq!(out.step_seconds(), 1800);
    }

    #[test]
    fn quarter_steps_follow_closed_form() {
        let t = fine();
        let mut s = 9u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 10.0
        };
        let a = Grid::from_fn(4, 5, t, 0, |_, _| rnd()).unwrap();
        let b = Grid::from_fn(4, 5, t, 3600, |_, _| rnd()).unwrap();
        let spec = TimeInterpSpec {
            source_step: 3600,
            target_step: 900,
        };
        let out = interp_time(&GridSeries::new(vec![a.clone(), b.clone()]).unwrap(), &spec).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.frames()[0], a);
        assert_eq!(out.frames()[4], b);
        for k in 1..4 {
            let theta = k as f64 / 4.0;
            for i in 0..20 {
                let want = (1.0 - theta) * a.values()[i] + theta * b.values()[i];
                assert!((out.frames()[k].values()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interp_rejects_bad_steps() {
        let t = fine();
        let a = Grid::filled(2, 2, 0.0, t).unwrap();
        let b = a.clone().with_timestamp(3600);
        let s = GridSeries::new(vec![a.clone(), b]).unwrap();
        let bad = TimeInterpSpec {
            source_step: 3600,
            target_step: 1700,
        };
        assert!(matches!(interp_time(&s, &bad), Err(Error::StepMismatch(_))));
        let wrong_source = TimeInterpSpec {
            source_step: 7200,
            target_step: 1800,
        };
        assert!(interp_time(&s, &wrong_source).is_err());
        assert!(interp_time(&GridSeries::new(vec![a]).unwrap(), &TimeInterpSpec::HOURLY_TO_HALF_HOURLY).is_err());
    }

    #[test]
    fn missing_propagates_through_blend() {
        let t = fine();
        let a = Grid::new(1, 2, vec![MISSING, 1.0], t, 0).unwrap();
        let b = Grid::new(1, 2, vec![1.0, 3.0], t, 3600).unwrap();
        let m = blend(&a, &b, 0.5, 1800).unwrap();
        assert!(is_missing(m.values()[0]));
        assert_eq!(m.values()[1], 2.0);
    }

    #[test]
    fn constants_survive_every_method() {
        let src = Grid::filled(20, 24, 3.25, fine()).unwrap();
        let target = TargetGeometry::covering(&src, 0.1).unwrap();
        assert_eq!((target.rows, target.cols), (10, 12));
        for m in [ResampleMethod::Nearest, ResampleMethod::Bilinear, ResampleMethod::Bicubic] {
            let out = resample_space(&src, &target, m).unwrap();
            assert!(out.values().iter().all(|v| (*v - 3.25).abs() < 1e-12), "{m:?}");
        }
    }

    #[test]
    fn bilinear_is_exact_on_planes() {
        let t = fine();
        let (a, b, c) = (0.7, -0.3, 50.0);
        let src = Grid::from_fn(40, 40, t, 0, |r, col| {
            let (lat, lon) = t.index_to_coords(r, col);
            a * lat + b * lon + c
        })
        .unwrap();
        let target = TargetGeometry::covering(&src, 0.1).unwrap();
        let out = resample_space(&src, &target, ResampleMethod::Bilinear).unwrap();
        for r in 1..target.rows - 1 {
            for col in 1..target.cols - 1 {
                let (lat, lon) = target.transform.index_to_coords(r, col);
                assert!((out.get(r, col) - (a * lat + b * lon + c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_matches_grid_sample() {
        let t = fine();
        let src = Grid::from_fn(30, 30, t, 0, |r, c| (r * 30 + c) as f64).unwrap();
        let target = TargetGeometry {
            transform: GeoTransform::north_up(39.97, 100.01, 0.07).unwrap(),
            rows: 20,
            cols: 20,
        };
        let out = resample_space(&src, &target, ResampleMethod::Nearest).unwrap();
        for r in 0..20 {
            for c in 0..20 {
                let (lat, lon) = target.transform.index_to_coords(r, c);
                match src.sample(lat, lon) {
                    Ok(v) => assert_eq!(out.get(r, c), v),
                    Err(_) => assert!(is_missing(out.get(r, c))),
                }
            }
        }
    }

    #[test]
    fn nearest_identity_on_same_geometry() {
        let t = fine();
        let src = Grid::from_fn(7, 8, t, 0, |r, c| (r + 2 * c) as f64).unwrap();
        let target = TargetGeometry {
            transform: t,
            rows: 7,
            cols: 8,
        };
        let out = resample_space(&src, &target, ResampleMethod::Nearest).unwrap();
        assert_eq!(out.values(), src.values());
    }

    #[test]
    fn bicubic_overshoot_is_clamped() {
        let t = fine();
        // a spike next to zeros produces negative lobes
        let src = Grid::from_fn(8, 8, t, 0, |r, c| if r == 4 && c == 4 { 10.0 } else { 0.0 }).unwrap();
        let target = TargetGeometry {
            transform: GeoTransform::north_up(40.0 - 0.025, 100.0 + 0.025, 0.05).unwrap(),
            rows: 7,
            cols: 7,
        };
        let out = resample_space(&src, &target, ResampleMethod::Bicubic).unwrap();
        assert!(out.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let s: f64 = (0..4).map(|i| cubic_weight(t - (i as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_overlap() {
        let src = Grid::filled(4, 4, 1.0, fine()).unwrap();
        let target = TargetGeometry {
            transform: GeoTransform::north_up(0.0, 0.0, 0.1).unwrap(),
            rows: 2,
            cols: 2,
        };
        assert!(matches!(
            resample_space(&src, &target, ResampleMethod::Bilinear),
            Err(Error::EmptyOverlap)
        ));
    }
}
