//! End-to-end calibration runs and parameter sweeps.
//!
//! A run is: temporal interpolation, spatial resampling onto the reference
//! geometry, station-count crop, normalization, training on the train split
//! of stations, inference, denormalization and scoring. Each stage is a
//! public function so runs can be split up with intermediates on disk.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::grid::{is_missing, Grid, GridSeries};
use crate::io;
use crate::metrics::{evaluate, MetricsReport, PairedSamples, DEFAULT_EVENT_THRESHOLD};
use crate::models::{train, write_checkpoint, Activation, Calibrator, MlpCalibrator, TrainConfig, TrainSample};
use crate::preprocess::{crop_search_global, CropWindow, NormSpec};
use crate::resample::{interp_time, resample_space, ResampleMethod, TargetGeometry, TimeInterpSpec};
use crate::stations::StationSet;
use crate::synth::{corrupt_stations, generate_scene, SceneSpec, SplitMixRng};

/// Which model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Affine,
    Mlp {
        hidden: usize,
        activation: Activation,
        neighborhood: bool,
    },
}

impl ModelKind {
    pub fn init(&self, seed: u64) -> Result<Calibrator> {
        Ok(match *self {
            ModelKind::Affine => Calibrator::default_affine(),
            ModelKind::Mlp {
                hidden,
                activation,
                neighborhood,
            } => Calibrator::Mlp(MlpCalibrator::new(hidden, activation, neighborhood, seed)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleStage {
    pub method: ResampleMethod,
    /// Output resolution when there is no reference grid to match.
    pub resolution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub interp: Option<TimeInterpSpec>,
    pub resample: Option<ResampleStage>,
    pub crop_size: Option<usize>,
    pub norm: NormSpec,
    pub train: TrainConfig,
    pub model: ModelKind,
    /// Fraction of stations used for training; the rest are held out.
    pub train_fraction: f64,
    pub threshold: f64,
    /// Seeds the station split.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(train: TrainConfig) -> Self {
        PipelineConfig {
            interp: None,
            resample: None,
            crop_size: None,
            norm: NormSpec::HOURLY,
            train,
            model: ModelKind::Affine,
            train_fraction: 0.8,
            threshold: DEFAULT_EVENT_THRESHOLD,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = &self.interp {
            i.validate()?;
        }
        if let Some(ResampleStage {
            resolution: Some(r), ..
        }) = self.resample
        {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig("resample resolution must be positive".into()));
            }
        }
        if self.crop_size == Some(0) {
            return Err(Error::InvalidConfig("crop size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train fraction must lie in (0, 1)".into()));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig("event threshold must be finite and non-negative".into()));
        }
        self.norm.validate()?;
        self.train.validate()
    }
}

/// Station indices for training and held-out evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StationSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Seeded shuffle split; both parts are non-empty and sorted.
pub fn split_stations(n: usize, train_fraction: f64, seed: u64) -> Result<StationSplit> {
    if n < 2 {
        return Err(Error::TooFewStations(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMixRng::new(seed).shuffle(&mut idx);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut eval = idx[n_train..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok(StationSplit { train, eval })
}

/// Run inputs. `stations` has one set per reference frame: per truth frame
/// when `truth` is given, otherwise per satellite frame after interpolation.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub satellite: GridSeries,
    pub truth: Option<GridSeries>,
    pub stations: Vec<StationSet>,
    /// Overrides the seeded split.
    pub split: Option<StationSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub model: Calibrator,
    pub history: Vec<f64>,
    pub window: Option<CropWindow>,
    pub split: StationSplit,
    /// Calibrated output at held-out stations.
    pub station_eval: MetricsReport,
    /// The satellite input at the same stations, for comparison.
    pub station_eval_uncalibrated: MetricsReport,
    /// Calibrated output against the reference grids.
    pub full_grid: Option<MetricsReport>,
    pub calibrated: GridSeries,
}

impl PipelineReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.model);
        for (i, p) in self.model.params().iter().enumerate() {
            let _ = writeln!(s, "param.{i}={}", sig(*p, 17));
        }
        let _ = writeln!(s, "epochs={}", self.history.len());
        if let Some(l) = self.history.last() {
            let _ = writeln!(s, "final_loss={}", sig(*l, 17));
        }
        if let Some(w) = &self.window {
            let _ = writeln!(s, "crop={},{},{},{}", w.row0, w.col0, w.size, w.station_count);
        }
        let _ = writeln!(s, "train_stations={}", self.split.train.len());
        let _ = writeln!(s, "eval_stations={}", self.split.eval.len());
        let mut section = |name: &str, r: &MetricsReport| {
            for line in r.to_key_values().lines() {
                let _ = writeln!(s, "{name}.{line}");
            }
        };
        section("station", &self.station_eval);
        section("station_uncalibrated", &self.station_eval_uncalibrated);
        if let Some(r) = &self.full_grid {
            section("grid", r);
        }
        s
    }
}

/// Stage 1: temporal interpolation (identity when not configured).
pub fn stage_interp(series: &GridSeries, cfg: &PipelineConfig) -> Result<GridSeries> {
    match &cfg.interp {
        Some(spec) => interp_time(series, spec).map_err(|e| e.in_stage("interp")),
        None => Ok(series.clone()),
    }
}

/// Stage 2: resampling onto the reference geometry, or onto a covering grid
/// at the configured resolution when there is no reference.
pub fn stage_resample(series: &GridSeries, reference: Option<&Grid>, cfg: &PipelineConfig) -> Result<GridSeries> {
    let Some(stage) = cfg.resample else {
        return Ok(series.clone());
    };
    let run = || -> Result<GridSeries> {
        let first = &series.frames()[0];
        let target = match (reference, stage.resolution) {
            (Some(r), _) => TargetGeometry {
                transform: *r.transform(),
                rows: r.rows(),
                cols: r.cols(),
            },
            (None, Some(res)) => TargetGeometry::covering(first, res)?,
            (None, None) => {
                return Err(Error::InvalidConfig("resampling needs a reference grid or a resolution".into()))
            }
        };
        let frames = series
            .frames()
            .iter()
            .map(|f| resample_space(f, &target, stage.method))
            .collect::<Result<Vec<_>>>()?;
        GridSeries::new(frames)
    };
    run().map_err(|e| e.in_stage("resample"))
}

/// Stage 3: the series-global station-count crop window.
pub fn stage_crop_window(shape: (usize, usize), grid: &Grid, stations: &[StationSet], cfg: &PipelineConfig) -> Result<Option<CropWindow>> {
    match cfg.crop_size {
        Some(size) => crop_search_global(shape, stations, grid.transform(), size)
            .map(Some)
            .map_err(|e| e.in_stage("crop")),
        None => Ok(None),
    }
}

pub fn crop_series(series: &GridSeries, window: Option<&CropWindow>) -> Result<GridSeries> {
    match window {
        Some(w) => GridSeries::new(series.frames().iter().map(|f| w.apply(f)).collect::<Result<Vec<_>>>()?)
            .map_err(|e| e.in_stage("crop")),
        None => Ok(series.clone()),
    }
}

/// Stage 4: normalization of grids and station values.
pub fn normalize_series(series: &GridSeries, spec: &NormSpec) -> Result<GridSeries> {
    let frames = series
        .frames()
        .iter()
        .map(|f| crate::preprocess::normalize(f, spec))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("normalize"))?;
    GridSeries::new(frames)
}

pub fn normalize_stations(set: &StationSet, spec: &NormSpec) -> Result<StationSet> {
    let v: Vec<f64> = set.values().iter().map(|&x| spec.forward(x)).collect();
    set.with_values(&v).map_err(|e| e.in_stage("normalize"))
}

/// Pairs grid values at the given stations with their observations,
/// pooled over frames; stations off the grid or on missing pixels are
/// skipped.
pub fn station_pairs(grids: &[Grid], stations: &[StationSet], indices: &[usize]) -> Result<PairedSamples> {
    let (mut s, mut g) = (Vec::new(), Vec::new());
    for (grid, set) in grids.iter().zip(stations) {
        for &i in indices {
            let st = &set.stations()[i];
            if let Ok(px) = grid.locate(st.lat, st.lon) {
                let v = grid.values()[px];
                if !is_missing(v) {
                    s.push(v);
                    g.push(st.value);
                }
            }
        }
    }
    PairedSamples::new(s, g)
}

/// Aligns the (interpolated) satellite frames with the reference timeline:
/// one satellite frame per reference timestamp, or per station set when
/// there is no reference.
pub fn stage_align(sat: GridSeries, truth: Option<&GridSeries>, n_station_frames: usize) -> Result<GridSeries> {
    match truth {
        Some(t) => {
            let frames = t
                .frames()
                .iter()
                .map(|tf| {
                    sat.frames()
                        .iter()
                        .find(|f| f.timestamp() == tf.timestamp())
                        .cloned()
                        .ok_or_else(|| Error::StepMismatch(format!("no satellite frame at t={}", tf.timestamp())))
                })
                .collect::<Result<Vec<_>>>()?;
            GridSeries::new(frames)
        }
        None if sat.len() == n_station_frames => Ok(sat),
        None => Err(Error::ShapeMismatch(format!(
            "{} satellite frames but {} station sets",
            sat.len(),
            n_station_frames
        ))),
    }
}

fn persist(dir: Option<&Path>, name: &str, series: &GridSeries) -> Result<()> {
    if let Some(d) = dir {
        let names: Vec<String> = (0..series.len()).map(|i| format!("frame{i:04}")).collect();
        let grids: Vec<(&str, &Grid)> = names.iter().map(String::as_str).zip(series.frames()).collect();
        io::write_npz(&grids, d.join(format!("{name}.npz")))?;
    }
    Ok(())
}

/// Runs every stage; when `artifacts` is set, intermediates are written
/// there as NPZ along with the model checkpoint and the report.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs, artifacts: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate()?;
    if inputs.stations.is_empty() {
        return Err(Error::InvalidConfig("no station sets".into()));
    }
    if let Some(t) = &inputs.truth {
        if t.len() != inputs.stations.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reference frames but {} station sets",
                t.len(),
                inputs.stations.len()
            )));
        }
    }
    if let Some(d) = artifacts {
        std::fs::create_dir_all(d)?;
    }

    let sat = stage_interp(&inputs.satellite, cfg)?;
    persist(artifacts, "interp", &sat)?;
    let sat = stage_align(sat, inputs.truth.as_ref(), inputs.stations.len()).map_err(|e| e.in_stage("align"))?;
    let reference = inputs.truth.as_ref().map(|t| &t.frames()[0]);
    let sat = stage_resample(&sat, reference, cfg)?;
    persist(artifacts, "resampled", &sat)?;
    if let Some(t) = &inputs.truth {
        sat.frames()[0].check_same_geometry(&t.frames()[0]).map_err(|e| e.in_stage("align"))?;
    }

    let first = &sat.frames()[0];
    let window = stage_crop_window(first.shape(), first, &inputs.stations, cfg)?;
    let sat = crop_series(&sat, window.as_ref())?;
    let truth = match &inputs.truth {
        Some(t) => Some(crop_series(t, window.as_ref())?),
        None => None,
    };
    persist(artifacts, "cropped", &sat)?;

    let sat_n = normalize_series(&sat, &cfg.norm)?;
    let truth_n = truth.as_ref().map(|t| normalize_series(t, &cfg.norm)).transpose()?;
    let stations_n = inputs
        .stations
        .iter()
        .map(|s| normalize_stations(s, &cfg.norm))
        .collect::<Result<Vec<_>>>()?;
    persist(artifacts, "normalized", &sat_n)?;

    let n_st = inputs.stations[0].len();
    if inputs.stations.iter().any(|s| s.len() != n_st) {
        return Err(Error::ShapeMismatch("station sets differ in size across frames".into()).in_stage("split"));
    }
    let split = match &inputs.split {
        Some(s) => {
            if s.train.iter().chain(&s.eval).any(|&i| i >= n_st) || s.train.is_empty() || s.eval.is_empty() {
                return Err(Error::InvalidConfig("station split out of range".into()).in_stage("split"));
            }
            s.clone()
        }
        None => split_stations(n_st, cfg.train_fraction, cfg.seed).map_err(|e| e.in_stage("split"))?,
    };
    let train_sets: Vec<StationSet> = stations_n.iter().map(|s| s.subset(&split.train)).collect();

    let samples: Vec<TrainSample<'_>> = sat_n
        .frames()
        .iter()
        .zip(&train_sets)
        .enumerate()
        .map(|(i, (g, s))| TrainSample {
            satellite: g,
            stations: s,
            truth: truth_n.as_ref().map(|t| &t.frames()[i]),
        })
        .collect();
    let model = cfg.model.init(cfg.train.seed).map_err(|e| e.in_stage("train"))?;
    let outcome = train(model, &samples, &cfg.train).map_err(|e| e.in_stage("train"))?;

    let calibrated = sat_n
        .frames()
        .iter()
        .map(|g| outcome.model.apply(g).and_then(|c| crate::preprocess::denormalize(&c, &cfg.norm)))
        .collect::<Result<Vec<_>>>()
        .and_then(GridSeries::new)
        .map_err(|e| e.in_stage("apply"))?;
    persist(artifacts, "calibrated", &calibrated)?;

    let score = || -> Result<(MetricsReport, MetricsReport, Option<MetricsReport>)> {
        let cal = evaluate(&station_pairs(calibrated.frames(), &inputs.stations, &split.eval)?, cfg.threshold);
        let raw = evaluate(&station_pairs(sat.frames(), &inputs.stations, &split.eval)?, cfg.threshold);
        let grid = match &truth {
            Some(t) => {
                let (mut s, mut g) = (Vec::new(), Vec::new());
                for (c, t) in calibrated.frames().iter().zip(t.frames()) {
                    let p = PairedSamples::from_grids(c, t)?;
                    s.extend_from_slice(p.satellite());
                    g.extend_from_slice(p.ground());
                }
                Some(evaluate(&PairedSamples::new(s, g)?, cfg.threshold))
            }
            None => None,
        };
        Ok((cal, raw, grid))
    };
    let (station_eval, station_eval_uncalibrated, full_grid) = score().map_err(|e| e.in_stage("metrics"))?;

    let report = PipelineReport {
        model: outcome.model,
        history: outcome.history,
        window,
        split,
        station_eval,
        station_eval_uncalibrated,
        full_grid,
        calibrated,
    };
    if let Some(d) = artifacts {
        write_checkpoint(&report.model, d.join("model.tcal"))?;
        std::fs::write(d.join("report.txt"), report.to_key_values())?;
    }
    Ok(report)
}

/// Pipeline inputs built from one synthetic scene.
///
/// With `corrupt_sigma > 0` the scene's isolated stations read
/// `corrupt_sigma` standard deviations (of the clean station values) too
/// high and are forced into the train split; the rest are split by
/// `train_fraction` and `seed`.
pub fn scene_inputs(spec: &SceneSpec, corrupt_sigma: f64, train_fraction: f64, seed: u64) -> Result<PipelineInputs> {
    let scene = generate_scene(spec)?;
    let mut stations = scene.stations;
    let mut split = None;
    if corrupt_sigma > 0.0 && !scene.isolated.is_empty() {
        let v = stations.values();
        let n = v.len() as f64;
        let mean = crate::metrics::neumaier_sum(v.iter().copied()) / n;
        let sd = (crate::metrics::neumaier_sum(v.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0)).sqrt();
        stations = corrupt_stations(&stations, &scene.isolated, corrupt_sigma * sd)?;
        let regular: Vec<usize> = (0..stations.len()).filter(|i| !scene.isolated.contains(i)).collect();
        let s = split_stations(regular.len(), train_fraction, seed)?;
        let mut train: Vec<usize> = s.train.iter().map(|&i| regular[i]).chain(scene.isolated.iter().copied()).collect();
        train.sort_unstable();
        split = Some(StationSplit {
            train,
            eval: s.eval.iter().map(|&i| regular[i]).collect(),
        });
    }
    Ok(PipelineInputs {
        satellite: GridSeries::new(vec![scene.satellite])?,
        truth: Some(GridSeries::new(vec![scene.truth])?),
        stations: vec![stations],
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    KernelParam,
    MixTaper,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel_param" => Ok(SweepParam::KernelParam),
            "mix_taper" => Ok(SweepParam::MixTaper),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub repeats: usize,
    pub base: PipelineConfig,
    /// Scene template; trial `i` uses noise seed `base.seed + i`.
    pub scene: SceneSpec,
    /// Offset for the scene's isolated stations, see [`scene_inputs`].
    pub corrupt_sigma: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("sweep needs at least one repeat".into()));
        }
        if !(self.corrupt_sigma >= 0.0 && self.corrupt_sigma.is_finite()) {
            return Err(Error::InvalidConfig("corruption offset must be finite and non-negative".into()));
        }
        self.base.validate()?;
        self.scene.validate()
    }

    fn config_for(&self, value: f64) -> Result<PipelineConfig> {
        let mut cfg = self.base.clone();
        match self.parameter {
            SweepParam::KernelParam => cfg.train.kernel.param = value,
            SweepParam::MixTaper => cfg.train.loss.mix_taper = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Metrics reported per sweep value.
pub const SWEEP_METRICS: [&str; 3] = ["rmse", "mae", "r2"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metric: &'static str,
    /// `None` when any trial left the metric undefined.
    pub mean: Option<f64>,
    /// Sample standard deviation; `None` with a single repeat.
    pub std: Option<f64>,
}

fn mean_std(xs: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let Some(xs) = xs.iter().copied().collect::<Option<Vec<f64>>>() else {
        return (None, None);
    };
    let n = xs.len() as f64;
    let mean = crate::metrics::neumaier_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = crate::metrics::neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Runs every `(value, trial)` pair; trials may run in parallel but rows
/// come back in value order, then metric order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.repeats).map(move |t| (v, t)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(v, t)| {
            let mut cfg = spec.config_for(spec.values[v])?;
            let trial_seed = spec.base.seed.wrapping_add(t as u64);
            cfg.train.seed = trial_seed;
            let scene = SceneSpec {
                noise_seed: Some(trial_seed),
                ..spec.scene.clone()
            };
            let inputs = scene_inputs(&scene, spec.corrupt_sigma, cfg.train_fraction, cfg.seed)?;
            let r = run_pipeline(&cfg, &inputs, None)?;
            Ok([r.station_eval.rmse, r.station_eval.mae, r.station_eval.r2])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(spec.values.len() * SWEEP_METRICS.len());
    for (v, value) in spec.values.iter().enumerate() {
        let trials = &reports[v * spec.repeats..(v + 1) * spec.repeats];
        for (m, metric) in SWEEP_METRICS.iter().enumerate() {
            let xs: Vec<Option<f64>> = trials.iter().map(|r| r[m]).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(SweepRow {
                value: *value,
                metric,
                mean,
                std,
            });
        }
    }
    Ok(rows)
}

fn opt17(v: Option<f64>) -> String {
    v.map(|x| sig(x, 17)).unwrap_or_else(|| "nan".into())
}

/// Machine-readable sweep table; undefined cells are `nan`.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value\tmetric\tmean\tstd\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", sig(r.value, 17), r.metric, opt17(r.mean), opt17(r.std));
    }
    s
}

/// Human table, `mean ± std` at 6 significant digits. With `elide_small_std`
/// the std column is dropped when every std is below 0.05.
pub fn sweep_table(rows: &[SweepRow], elide_small_std: bool) -> String {
    let elide = elide_small_std && rows.iter().all(|r| r.std.is_none_or(|s| s < 0.05));
    let cell = |r: &SweepRow| {
        let m = r.mean.map(|x| sig(x, 6)).unwrap_or_else(|| "undefined".into());
        match (elide, r.std) {
            (false, Some(sd)) => format!("{m} ± {}", sig(sd, 6)),
            _ => m,
        }
    };
    let mut s = format!("{:<12}{:<8}{}\n", "value", "metric", if elide { "mean" } else { "mean ± std" });
    for r in rows {
        let _ = writeln!(s, "{:<12}{:<8}{}", sig(r.value, 6), r.metric, cell(r));
    }
    s
}
