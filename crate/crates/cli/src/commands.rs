use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use taper_calib::fmt::sig;
use taper_calib::io;
use taper_calib::metrics::{self, evaluate, PairedSamples};
use taper_calib::models::{self, Activation, Optimizer, TrainConfig, TrainSample};
use taper_calib::pipeline::{self, ModelKind, PipelineConfig, PipelineInputs, ResampleStage, SweepParam, SweepSpec};
use taper_calib::preprocess::{self, crop_search_global, crop_search_per_frame, NormSpec};
use taper_calib::resample::{self, ResampleMethod, TargetGeometry, TimeInterpSpec};
use taper_calib::synth::{self, SceneSpec, StationLayout};
use taper_calib::taper::{KernelFamily, KernelSpec, OtherDomain, OtherLoss, TotalLossConfig};
use taper_calib::{DistanceMetric, Error, GeoTransform, Grid, GridSeries, StationSet};

use crate::args::*;

/// A failed invocation: bad flags (exit 1) or a failure while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
    File(PathBuf, Error),
}

/// Tags a codec or filesystem error with the file it came from.
fn at<T>(path: &Path, r: taper_calib::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::File(path.to_owned(), e))
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

pub type CmdResult = Result<String, Failure>;

/// Flag-derived configuration errors are usage errors.
fn flag<T>(r: taper_calib::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(a) => synth_cmd(a),
        Command::InterpTime(a) => interp_cmd(a),
        Command::Resample(a) => resample_cmd(a),
        Command::Crop(a) => crop_cmd(a),
        Command::Normalize(a) => normalize_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Level(a) => level_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}

fn is_npz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npz"))
}

/// `.npz` holds frames in archive order; anything else is a single NPY grid.
pub fn read_series(path: &Path) -> Result<GridSeries, Failure> {
    at(path, read_series_inner(path))
}

fn read_series_inner(path: &Path) -> taper_calib::Result<GridSeries> {
    if is_npz(path) {
        let frames: Vec<Grid> = io::read_npz(path)?.into_iter().map(|(_, g)| g).collect();
        if frames.is_empty() {
            return Err(Error::BadZip("archive holds no arrays".into()));
        }
        GridSeries::new(frames)
    } else {
        GridSeries::new(vec![io::read_npy(path)?])
    }
}

pub fn write_series(path: &Path, series: &GridSeries) -> Result<(), Failure> {
    at(path, write_series_inner(path, series))
}

fn write_series_inner(path: &Path, series: &GridSeries) -> taper_calib::Result<()> {
    if is_npz(path) {
        let names: Vec<String> = (0..series.len()).map(|i| format!("frame{i:04}")).collect();
        let grids: Vec<(&str, &Grid)> = names.iter().map(String::as_str).zip(series.frames()).collect();
        io::write_npz(&grids, path)
    } else if series.len() == 1 {
        io::write_npy(&series.frames()[0], path)
    } else {
        Err(Error::InvalidConfig(format!(
            "{} frames need an .npz output, not {}",
            series.len(),
            path.display()
        )))
    }
}

fn check_out_path(path: &Path, frames_possible: bool) -> Result<(), Failure> {
    if !frames_possible && is_npz(path) {
        return Ok(());
    }
    if path.as_os_str().is_empty() {
        return Err(Failure::Usage("empty output path".into()));
    }
    Ok(())
}

fn station_sets(paths: &[PathBuf], frames: usize) -> Result<Vec<StationSet>, Failure> {
    let sets = paths
        .iter()
        .map(|p| at(p, io::read_station_csv(p)))
        .collect::<Result<Vec<_>, _>>()?;
    match sets.len() {
        1 => Ok(vec![sets[0].clone(); frames]),
        n if n == frames => Ok(sets),
        n => Err(Error::ShapeMismatch(format!("{n} station files for {frames} frames")).into()),
    }
}

fn scene_spec(s: &SceneArgs, seed: u64) -> Result<SceneSpec, Failure> {
    let spec = SceneSpec {
        rows: s.rows,
        cols: s.cols,
        transform: flag(GeoTransform::north_up(s.lat_top, s.lon_left, s.pixel_size))?,
        n_bumps: s.bumps,
        amplitude: (s.amp_min, s.amp_max),
        sigma_px: (s.sigma_min, s.sigma_max),
        gain: s.gain,
        offset: s.offset,
        noise_sigma: s.noise,
        n_stations: s.stations,
        station_noise_sigma: s.station_noise,
        zero_fraction: s.zero_fraction,
        layout: if s.isolated > 0 {
            StationLayout::Clustered { isolated: s.isolated }
        } else {
            StationLayout::Uniform
        },
        seed,
        ..Default::default()
    };
    match spec.validate() {
        Err(e @ Error::TooManyStations { .. }) => Err(Failure::Run(e)),
        other => flag(other).map(|_| spec),
    }
}

fn norm_spec(n: &NormArgs) -> Result<NormSpec, Failure> {
    let base = match n.preset {
        Preset::Hourly => NormSpec::HOURLY,
        Preset::Daily => NormSpec::DAILY,
    };
    flag(NormSpec::new(base.x_min, n.x_max.unwrap_or(base.x_max), !n.no_clamp))
}

fn resample_method(m: MethodArg) -> ResampleMethod {
    match m {
        MethodArg::Nearest => ResampleMethod::Nearest,
        MethodArg::Bilinear => ResampleMethod::Bilinear,
        MethodArg::Bicubic => ResampleMethod::Bicubic,
    }
}

/// Training flags; the pixel metric is resolved against `transform` later.
struct TrainSetup {
    cfg: TrainConfig,
    model: ModelKind,
    pixel_metric: bool,
}

impl TrainSetup {
    fn resolve(mut self, transform: &GeoTransform) -> (TrainConfig, ModelKind) {
        if self.pixel_metric {
            self.cfg.metric = DistanceMetric::GridPixels(*transform);
        }
        (self.cfg, self.model)
    }
}

fn train_setup(t: &TrainArgs, seed: u64) -> Result<TrainSetup, Failure> {
    let family = match t.kernel {
        KernelArg::Exponential => KernelFamily::Exponential,
        KernelArg::Linear => KernelFamily::Linear,
        KernelArg::PowerLaw => KernelFamily::PowerLaw,
        KernelArg::Gaussian => KernelFamily::Gaussian,
    };
    let optimizer = match t.optimizer {
        OptimizerArg::Adam => Optimizer::adam(t.lr),
        OptimizerArg::Sgd => Optimizer::Sgd {
            lr: t.lr,
            momentum: t.momentum,
        },
    };
    let mut cfg = flag(TrainConfig::new(t.epochs, optimizer, flag(KernelSpec::new(family, t.kernel_param))?))?;
    cfg.seed = seed;
    cfg.metric = match t.metric {
        MetricArg::Haversine | MetricArg::Pixels => DistanceMetric::HaversineKm,
        MetricArg::Euclidean => DistanceMetric::EuclideanDegrees,
    };
    cfg.loss = TotalLossConfig {
        mix_taper: t.mix_taper,
        mix_other: t.mix_other,
        other: match t.other_loss {
            OtherLossArg::L1 => OtherLoss::L1,
            OtherLossArg::L2 => OtherLoss::L2,
        },
        other_domain: match t.other_domain {
            DomainArg::Stations => OtherDomain::Stations,
            DomainArg::FullGrid => OtherDomain::FullGrid,
        },
    };
    cfg.patience = (t.patience > 0).then_some(t.patience);
    flag(cfg.validate())?;
    let model = match t.model {
        ModelArg::Affine => ModelKind::Affine,
        ModelArg::Mlp => {
            if t.hidden == 0 {
                return Err(Failure::Usage("--hidden must be at least 1".into()));
            }
            ModelKind::Mlp {
                hidden: t.hidden,
                activation: match t.activation {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Tanh => Activation::Tanh,
                },
                neighborhood: t.neighborhood,
            }
        }
    };
    Ok(TrainSetup {
        cfg,
        model,
        pixel_metric: matches!(t.metric, MetricArg::Pixels),
    })
}

fn synth_cmd(a: SynthArgs) -> CmdResult {
    let mut spec = scene_spec(&a.scene, a.common.seed)?;
    if a.frames == 0 {
        return Err(Failure::Usage("--frames must be at least 1".into()));
    }
    if a.frame_step <= 0 {
        return Err(Failure::Usage("--frame-step must be positive".into()));
    }
    spec.frame_step = a.frame_step;
    let series = synth::generate_series(&spec, a.frames, (a.advect_row, a.advect_col))?;
    fs::create_dir_all(&a.out_dir)?;
    let mut out = String::new();
    if a.frames == 1 {
        let p = a.out_dir.join("truth.npy");
        at(&p, io::write_npy(&series.truth.frames()[0], &p))?;
        let p = a.out_dir.join("satellite.npy");
        at(&p, io::write_npy(&series.satellite.frames()[0], &p))?;
        let p = a.out_dir.join("stations.csv");
        at(&p, io::write_station_csv(&series.stations[0], &p))?;
    } else {
        write_series(&a.out_dir.join("truth.npz"), &series.truth)?;
        write_series(&a.out_dir.join("satellite.npz"), &series.satellite)?;
        for (i, s) in series.stations.iter().enumerate() {
            let p = a.out_dir.join(format!("stations_{i:04}.csv"));
            at(&p, io::write_station_csv(s, &p))?;
        }
    }
    let _ = writeln!(out, "frames={}", a.frames);
    let _ = writeln!(out, "shape={}x{}", spec.rows, spec.cols);
    let _ = writeln!(out, "stations={}", spec.n_stations);
    if !series.isolated.is_empty() {
        let ids: Vec<String> = series.isolated.iter().map(|&i| series.stations[0].stations()[i].id.clone()).collect();
        let _ = writeln!(out, "isolated={}", ids.join(","));
    }
    Ok(out)
}

fn interp_cmd(a: InterpArgs) -> CmdResult {
    let spec = TimeInterpSpec {
        source_step: a.source_step,
        target_step: a.target_step,
    };
    flag(spec.validate())?;
    check_out_path(&a.out, true)?;
    let series = read_series(&a.input)?;
    let out = resample::interp_time(&series, &spec)?;
    write_series(&a.out, &out)?;
    Ok(format!("frames={}\nstep={}\n", out.len(), out.step_seconds()))
}

fn resample_cmd(a: ResampleArgs) -> CmdResult {
    if let Some(r) = a.resolution {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Failure::Usage("--resolution must be positive".into()));
        }
    }
    let series = read_series(&a.input)?;
    let target = match (&a.like, a.resolution) {
        (Some(p), _) => {
            let like = at(p, io::read_npy(p))?;
            TargetGeometry {
                transform: *like.transform(),
                rows: like.rows(),
                cols: like.cols(),
            }
        }
        (None, Some(r)) => TargetGeometry::covering(&series.frames()[0], r)?,
        (None, None) => unreachable!("clap requires one of --like or --resolution"),
    };
    let method = resample_method(a.method);
    let frames = series
        .frames()
        .iter()
        .map(|f| resample::resample_space(f, &target, method))
        .collect::<taper_calib::Result<Vec<_>>>()?;
    write_series(&a.out, &GridSeries::new(frames)?)?;
    Ok(format!("shape={}x{}\n", target.rows, target.cols))
}

fn crop_cmd(a: CropArgs) -> CmdResult {
    if a.size == 0 {
        return Err(Failure::Usage("--size must be positive".into()));
    }
    let series = read_series(&a.input)?;
    let first = &series.frames()[0];
    let sets = station_sets(std::slice::from_ref(&a.stations), series.len())?;
    let windows = match a.mode {
        CropMode::Global => vec![crop_search_global(first.shape(), &sets, first.transform(), a.size)?; series.len()],
        CropMode::PerFrame => crop_search_per_frame(first.shape(), &sets, first.transform(), a.size)?,
    };
    let mut out = String::new();
    for (i, w) in windows.iter().enumerate() {
        if a.mode == CropMode::Global && i > 0 {
            break;
        }
        let _ = writeln!(out, "row0={} col0={} size={} stations={}", w.row0, w.col0, w.size, w.station_count);
    }
    if let Some(p) = &a.out {
        let frames = series
            .frames()
            .iter()
            .zip(&windows)
            .map(|(f, w)| w.apply(f))
            .collect::<taper_calib::Result<Vec<_>>>()?;
        // Per-frame windows move the origin, so frames only form a series
        // when they share one.
        let cropped = GridSeries::new(frames)?;
        write_series(p, &cropped)?;
    }
    Ok(out)
}

fn normalize_cmd(a: NormalizeArgs) -> CmdResult {
    let spec = norm_spec(&a.norm)?;
    let series = read_series(&a.input)?;
    let frames = series
        .frames()
        .iter()
        .map(|f| {
            if a.inverse {
                preprocess::denormalize(f, &spec)
            } else {
                preprocess::normalize(f, &spec)
            }
        })
        .collect::<taper_calib::Result<Vec<_>>>()?;
    let out = GridSeries::new(frames)?;
    write_series(&a.out, &out)?;
    if let Some(p) = &a.pgm {
        let g = &out.frames()[0];
        // The quick-look always maps the normalized field onto 0..255.
        let view = if a.inverse { preprocess::normalize(g, &spec)? } else { g.clone() };
        at(p, io::write_pgm(&view, &flag(NormSpec::new(0.0, 1.0, true))?, p))?;
    }
    Ok(format!("x_min={}\nx_max={}\n", sig(spec.x_min, 17), sig(spec.x_max, 17)))
}

fn stats_cmd(a: StatsArgs) -> CmdResult {
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for p in &a.inputs {
        let series = read_series(p)?;
        let values: Vec<f64> = series.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
        rows.push((p.display().to_string(), preprocess::compute_stats(values.iter().copied(), a.drop_zeros)?));
        pooled.extend(values);
    }
    rows.push(("All".to_string(), preprocess::compute_stats(pooled, a.drop_zeros)?));

    let cols = |s: &preprocess::QuantileStats| [s.min, s.max, s.avg, s.q1, s.q2, s.q3, s.q99];
    const NAMES: [&str; 7] = ["min", "max", "avg", "q1", "q2", "q3", "q99"];
    let mut out = String::new();
    match a.format {
        Format::Kv => {
            for (name, s) in &rows {
                let _ = writeln!(out, "{name}.count={}", s.count);
                for (k, v) in NAMES.iter().zip(cols(s)) {
                    let _ = writeln!(out, "{name}.{k}={}", sig(v, 17));
                }
            }
        }
        Format::Table => {
            let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(4);
            let _ = write!(out, "{:<w$}", "name");
            for k in ["Min", "Max", "Avg", "Q1", "Q2", "Q3", "Q99"] {
                let _ = write!(out, "  {k:>12}");
            }
            out.push('\n');
            for (name, s) in &rows {
                let _ = write!(out, "{name:<w$}");
                for v in cols(s) {
                    let _ = write!(out, "  {:>12}", sig(v, 6));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn train_cmd(a: TrainCmdArgs) -> CmdResult {
    let setup = train_setup(&a.train, a.common.seed)?;
    if setup.cfg.loss.needs_truth_grid() && a.truth.is_none() {
        return Err(Failure::Usage("the full-grid loss term needs --truth (or use --other-domain stations / --mix-other 0)".into()));
    }
    let sat = read_series(&a.satellite)?;
    let truth = a.truth.as_deref().map(read_series).transpose()?;
    if let Some(t) = &truth {
        if t.len() != sat.len() {
            return Err(Error::ShapeMismatch(format!("{} satellite frames vs {} truth frames", sat.len(), t.len())).into());
        }
    }
    let sets = station_sets(&a.stations, sat.len())?;
    let (cfg, kind) = setup.resolve(sat.frames()[0].transform());
    let samples: Vec<TrainSample<'_>> = sat
        .frames()
        .iter()
        .zip(&sets)
        .enumerate()
        .map(|(i, (g, s))| TrainSample {
            satellite: g,
            stations: s,
            truth: truth.as_ref().map(|t| &t.frames()[i]),
        })
        .collect();
    let outcome = models::train(kind.init(cfg.seed)?, &samples, &cfg)?;
    at(&a.out, models::write_checkpoint(&outcome.model, &a.out))?;
    if let Some(h) = &a.history {
        let mut s = String::from("epoch\tloss\n");
        for (i, l) in outcome.history.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}", sig(*l, 17));
        }
        fs::write(h, s)?;
    }
    let mut out = format!("model={}\n", outcome.model);
    for (i, p) in outcome.model.params().iter().enumerate().take(8) {
        let _ = writeln!(out, "param.{i}={}", sig(*p, 17));
    }
    let _ = writeln!(out, "epochs={}", outcome.history.len());
    let _ = writeln!(out, "stopped_early={}", outcome.stopped_early);
    let _ = writeln!(out, "final_loss={}", sig(*outcome.history.last().expect("non-empty history"), 17));
    Ok(out)
}

fn calibrate_cmd(a: CalibrateArgs) -> CmdResult {
    let model = at(&a.model, models::read_checkpoint(&a.model))?;
    let series = read_series(&a.input)?;
    let frames = series
        .frames()
        .iter()
        .map(|f| model.apply(f))
        .collect::<taper_calib::Result<Vec<_>>>()?;
    write_series(&a.out, &GridSeries::new(frames)?)?;
    Ok(format!("model={model}\nframes={}\n", series.len()))
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    if !(a.threshold >= 0.0 && a.threshold.is_finite()) {
        return Err(Failure::Usage("--threshold must be finite and non-negative".into()));
    }
    if let Some(r) = a.data_range {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Failure::Usage("--data-range must be positive".into()));
        }
        if a.stations.is_some() {
            return Err(Failure::Usage("--data-range needs a gridded --truth".into()));
        }
    }
    let pred = read_series(&a.pred)?;
    let mut report;
    if let Some(st) = &a.stations {
        let sets = station_sets(std::slice::from_ref(st), pred.len())?;
        let all: Vec<usize> = (0..sets[0].len()).collect();
        let pairs = pipeline::station_pairs(pred.frames(), &sets, &all)?;
        report = evaluate(&pairs, a.threshold);
        if a.levels {
            report.classification = Some(level_report(&pairs)?);
        }
    } else {
        let truth = read_series(a.truth.as_deref().expect("clap requires --truth or --stations"))?;
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch(format!("{} prediction frames vs {} truth frames", pred.len(), truth.len())).into());
        }
        let (mut s, mut g) = (Vec::new(), Vec::new());
        for (p, t) in pred.frames().iter().zip(truth.frames()) {
            let pairs = PairedSamples::from_grids(p, t)?;
            s.extend_from_slice(pairs.satellite());
            g.extend_from_slice(pairs.ground());
        }
        let pairs = PairedSamples::new(s, g)?;
        report = evaluate(&pairs, a.threshold);
        if a.levels {
            report.classification = Some(level_report(&pairs)?);
        }
        if let Some(range) = a.data_range {
            let n = pred.len() as f64;
            let (mut ps, mut ss) = (0.0, 0.0);
            for (p, t) in pred.frames().iter().zip(truth.frames()) {
                ps += metrics::psnr(p, t, range)?;
                ss += metrics::ssim(p, t, range)?;
            }
            report.psnr = Some(ps / n);
            report.ssim = Some(ss / n);
        }
    }
    Ok(match a.format {
        Format::Kv => report.to_key_values(),
        Format::Table => report.to_table(),
    })
}

fn level_report(pairs: &PairedSamples) -> taper_calib::Result<metrics::ClassificationReport> {
    let lv = |v: &[f64]| v.iter().map(|x| metrics::classify_level(*x) as usize).collect::<Vec<_>>();
    metrics::classification_metrics(&lv(pairs.satellite()), &lv(pairs.ground()), metrics::LEVEL_NAMES.len())
}

fn level_cmd(a: LevelArgs) -> CmdResult {
    let mut out = String::new();
    for v in &a.value {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(Failure::Usage(format!("--value must be finite and non-negative, got {v}")));
        }
        let l = metrics::classify_level(*v);
        if a.names {
            let _ = writeln!(out, "{l}\t{}", metrics::LEVEL_NAMES[l as usize]);
        } else {
            let _ = writeln!(out, "{l}");
        }
    }
    Ok(out)
}

fn pipeline_config(t: TrainSetup, norm: NormSpec, seed: u64, train_fraction: f64, threshold: f64, transform: &GeoTransform) -> PipelineConfig {
    let (train, model) = t.resolve(transform);
    PipelineConfig {
        norm,
        model,
        train_fraction,
        threshold,
        seed,
        ..PipelineConfig::new(train)
    }
}

fn sweep_cmd(a: SweepArgs) -> CmdResult {
    let scene = scene_spec(&a.scene, a.common.seed)?;
    let setup = train_setup(&a.train, a.common.seed)?;
    let norm = norm_spec(&a.norm)?;
    let base = pipeline_config(setup, norm, a.common.seed, a.train_fraction, metrics::DEFAULT_EVENT_THRESHOLD, &scene.transform);
    let spec = SweepSpec {
        parameter: match a.param {
            SweepParamArg::KernelParam => SweepParam::KernelParam,
            SweepParamArg::MixTaper => SweepParam::MixTaper,
        },
        values: a.values.clone(),
        repeats: a.repeats,
        base,
        scene,
        corrupt_sigma: a.corrupt_sigma,
    };
    flag(spec.validate())?;
    for v in &spec.values {
        let mut probe = spec.base.clone();
        match spec.parameter {
            SweepParam::KernelParam => probe.train.kernel.param = *v,
            SweepParam::MixTaper => probe.train.loss.mix_taper = *v,
        }
        flag(probe.validate())?;
    }
    let rows = pipeline::run_sweep(&spec)?;
    let text = match a.format {
        SweepFormat::Tsv => pipeline::sweep_tsv(&rows),
        SweepFormat::Table => pipeline::sweep_table(&rows, a.elide_std),
    };
    match &a.out {
        Some(p) => {
            fs::write(p, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn pipeline_cmd(a: PipelineArgs) -> CmdResult {
    let setup = train_setup(&a.train, a.common.seed)?;
    let norm = norm_spec(&a.norm)?;
    let interp = a.source_step.map(|s| TimeInterpSpec {
        source_step: s,
        target_step: a.target_step,
    });
    if let Some(i) = &interp {
        flag(i.validate())?;
    }
    if setup.cfg.loss.needs_truth_grid() && a.truth.is_none() {
        return Err(Failure::Usage("the full-grid loss term needs --truth (or use --other-domain stations / --mix-other 0)".into()));
    }
    if a.resample.is_some() && a.truth.is_none() && a.resolution.is_none() {
        return Err(Failure::Usage("--resample needs --truth or --resolution".into()));
    }
    let sat = read_series(&a.satellite)?;
    let truth = a.truth.as_deref().map(read_series).transpose()?;
    let frames = match &truth {
        Some(t) => t.len(),
        None => match &interp {
            Some(i) if sat.len() > 1 => (sat.len() - 1) * i.subdivisions() + 1,
            _ => sat.len(),
        },
    };
    let stations = station_sets(&a.stations, frames)?;
    let reference = truth.as_ref().map(|t| *t.frames()[0].transform()).unwrap_or(*sat.frames()[0].transform());
    let mut cfg = pipeline_config(setup, norm, a.common.seed, a.train_fraction, a.threshold, &reference);
    cfg.interp = interp;
    cfg.resample = a.resample.map(|m| ResampleStage {
        method: resample_method(m),
        resolution: a.resolution,
    });
    cfg.crop_size = a.crop_size;
    flag(cfg.validate())?;
    let inputs = PipelineInputs {
        satellite: sat,
        truth,
        stations,
        split: None,
    };
    let report = pipeline::run_pipeline(&cfg, &inputs, a.artifacts.as_deref())?;
    Ok(match a.format {
        Format::Kv => report.to_key_values(),
        Format::Table => {
            let mut s = format!("model: {}\n\nheld-out stations, calibrated\n", report.model);
            s.push_str(&report.station_eval.to_table());
            s.push_str("\nheld-out stations, uncalibrated\n");
            s.push_str(&report.station_eval_uncalibrated.to_table());
            if let Some(g) = &report.full_grid {
                s.push_str("\nfull grid\n");
                s.push_str(&g.to_table());
            }
            s
        }
    })
}
