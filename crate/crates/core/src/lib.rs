//! Satellite precipitation calibration against sparse station networks.
//!
//! The core pieces are the distance-tapered station loss in [`taper`], the
//! raster preprocessing in [`resample`] and [`preprocess`], the calibrators
//! in [`models`] and the verification suite in [`metrics`]. [`pipeline`]
//! chains them; [`synth`] provides seeded test scenes.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fmt;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod resample;
pub mod stations;
pub mod synth;
pub mod taper;

pub use error::{Error, Result};
pub use grid::{is_missing, GeoTransform, Grid, GridSeries, MISSING};
pub use metrics::{MetricsReport, PairedSamples};
pub use models::{Calibrator, TrainConfig};
pub use preprocess::{CropWindow, NormSpec, QuantileStats};
pub use resample::{ResampleMethod, TargetGeometry, TimeInterpSpec};
pub use stations::{DistanceMetric, Station, StationSet};
pub use taper::{KernelFamily, KernelSpec, LossForm, TaperWeights, TotalLossConfig};
