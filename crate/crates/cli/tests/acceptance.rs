//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use taper_calib::io::{self, STATION_CSV_HEADER};
use taper_calib::metrics::{classify_level, evaluate, PairedSamples};
use taper_calib::models::{self, backprop_check, Activation, Calibrator, MlpCalibrator, Optimizer, TrainConfig, TrainSample};
use taper_calib::pipeline::{self, scene_inputs, split_stations, PipelineConfig};
use taper_calib::preprocess::{crop_search, NormSpec};
use taper_calib::resample::{interp_time, resample_space, ResampleMethod, TargetGeometry, TimeInterpSpec};
use taper_calib::stations::nn_distances;
use taper_calib::synth::{generate_scene, SceneSpec, SplitMixRng, StationLayout};
use taper_calib::taper::{taper_loss, taper_loss_grad, total_loss, LossForm, OtherDomain, OtherLoss, StationTarget};
use taper_calib::{
    DistanceMetric, Error, GeoTransform, Grid, GridSeries, KernelFamily, KernelSpec, Station, StationSet, TaperWeights,
    TotalLossConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

const FAMILIES: [KernelFamily; 4] = [
    KernelFamily::Exponential,
    KernelFamily::Linear,
    KernelFamily::PowerLaw,
    KernelFamily::Gaussian,
];

fn random_stations(rng: &mut SplitMixRng, n: usize, lat: (f64, f64), lon: (f64, f64)) -> StationSet {
    let v = (0..n)
        .map(|i| {
            Station::new(
                format!("S{i}"),
                rng.uniform(lat.0, lat.1),
                rng.uniform(lon.0, lon.1),
                rng.uniform(0.0, 5.0),
            )
            .unwrap()
        })
        .collect();
    StationSet::new(v).unwrap()
}

/// A kernel of `family` whose weights stay non-degenerate for distances up
/// to `d_max`.
fn kernel_for(family: KernelFamily, rng: &mut SplitMixRng, d_max: f64) -> KernelSpec {
    let d = d_max.max(1e-3);
    let param = match family {
        KernelFamily::Exponential => rng.uniform(0.1, 3.0) / d,
        KernelFamily::Linear => rng.uniform(0.1, 0.9) / d,
        KernelFamily::PowerLaw => rng.uniform(0.5, 3.0),
        KernelFamily::Gaussian => rng.uniform(0.3, 2.0) * d,
    };
    KernelSpec::new(family, param).unwrap()
}

// ---------------------------------------------------------------- 1

fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    const H: f64 = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + H;
            let up = f(&x);
            x[i] = x0 - H;
            let dn = f(&x);
            x[i] = x0;
            (up - dn) / (2.0 * H)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn taper_loss_gradient_err(seed: u64) -> f64 {
    let mut rng = SplitMixRng::new(seed);
    let n = 2 + rng.below(30);
    let preds: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 3.0)).collect();
    let truths: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 3.0)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 50.0)).collect();
    let family = FAMILIES[rng.below(4)];
    let kernel = kernel_for(family, &mut rng, 50.0);
    let weights = TaperWeights::from_distances(d, &kernel).unwrap();
    let mut valid: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.8).collect();
    valid[rng.below(n)] = true;
    let form = if rng.next_f64() < 0.5 { LossForm::Normalized } else { LossForm::Raw };
    let analytic = taper_loss_grad(&preds, &truths, &weights, form, Some(&valid)).unwrap();
    let numeric = fd_grad(&mut |p| taper_loss(p, &truths, &weights, form, Some(&valid)).unwrap(), &preds);
    max_rel(&analytic, &numeric)
}

fn total_loss_gradient_err(seed: u64) -> f64 {
    let mut rng = SplitMixRng::new(seed);
    let (rows, cols) = (5 + rng.below(4), 5 + rng.below(4));
    let t = GeoTransform::north_up(30.0, 110.0, 0.25).unwrap();
    let truth = Grid::from_fn(rows, cols, t, 0, |_, _| rng.uniform(0.0, 2.0)).unwrap();
    let n_st = 2 + rng.below(8);
    let lat = (30.0 - 0.25 * (rows as f64 - 0.5), 30.0 + 0.1);
    let lon = (110.0 - 0.1, 110.0 + 0.25 * (cols as f64 - 0.5));
    let set = random_stations(&mut rng, n_st, lat, lon);
    let kernel = kernel_for(FAMILIES[rng.below(4)], &mut rng, 300.0);
    let target = StationTarget::new(&truth, &set, &kernel, DistanceMetric::HaversineKm).unwrap();
    let cfg = TotalLossConfig {
        mix_taper: rng.uniform(0.1, 2.0),
        mix_other: rng.uniform(0.0, 2.0),
        other: if rng.next_f64() < 0.5 { OtherLoss::L1 } else { OtherLoss::L2 },
        other_domain: if rng.next_f64() < 0.5 {
            OtherDomain::Stations
        } else {
            OtherDomain::FullGrid
        },
    };
    // Keep every residual away from the L1 kink.
    let mut pred: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-0.5, 2.5)).collect();
    for (i, p) in pred.iter_mut().enumerate() {
        let mut refs = vec![truth.values()[i]];
        refs.extend(target.pixels().iter().zip(target.observed()).filter(|(px, _)| **px == i).map(|(_, z)| *z));
        while refs.iter().any(|r| (*p - r).abs() < 1e-3) {
            *p += 0.01;
        }
    }
    let (_, analytic) = total_loss(&pred, Some(&truth), &target, &cfg).unwrap();
    let numeric = fd_grad(&mut |p| total_loss(p, Some(&truth), &target, &cfg).unwrap().0, &pred);
    max_rel(&analytic, &numeric)
}

fn criterion_1() -> Check {
    let mut worst = [0.0f64; 4];
    for s in 0..100u64 {
        worst[0] = worst[0].max(taper_loss_gradient_err(s));
        worst[1] = worst[1].max(total_loss_gradient_err(1000 + s));
        let affine = Calibrator::affine(0.5 + 0.01 * s as f64, -0.1 + 0.002 * s as f64);
        worst[2] = worst[2].max(backprop_check(&affine, 2000 + s).map_err(|e| e.to_string())?);
        let act = if s % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let mlp = MlpCalibrator::new(4 + (s as usize % 13), act, s % 3 == 0, s).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(backprop_check(&Calibrator::Mlp(mlp), 3000 + s).map_err(|e| e.to_string())?);
    }
    let detail = format!(
        "max rel err taper={:.1e} total={:.1e} affine={:.1e} mlp={:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst.iter().all(|w| *w < 1e-4), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let mut worst_sum = 0.0f64;
    let mut worst_inv = 0.0f64;
    for (fi, family) in FAMILIES.iter().enumerate() {
        for s in 0..1000u64 {
            let mut rng = SplitMixRng::new(fi as u64 * 100_000 + s);
            let n = 2 + rng.below(199);
            let set = random_stations(&mut rng, n, (28.0, 34.0), (108.0, 116.0));
            let d = nn_distances(&set, DistanceMetric::HaversineKm).map_err(|e| e.to_string())?;
            let d_max = d.iter().copied().fold(0.0, f64::max);
            let kernel = kernel_for(*family, &mut rng, d_max);
            let w = TaperWeights::for_stations(&set, &kernel, DistanceMetric::HaversineKm).map_err(|e| e.to_string())?;
            let sum: f64 = w.normalized.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());

            let preds: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 4.0)).collect();
            let truths = set.values();
            let base = taper_loss(&preds, &truths, &w, LossForm::Normalized, None).unwrap();
            let c = [1e-3, 7.5, 1e3][rng.below(3)];
            let scaled = TaperWeights::from_raw(w.distances.clone(), w.raw.iter().map(|r| r * c).collect()).unwrap();
            let l = taper_loss(&preds, &truths, &scaled, LossForm::Normalized, None).unwrap();
            worst_inv = worst_inv.max((l - base).abs() / base.abs().max(f64::MIN_POSITIVE));
        }
    }
    let detail = format!("4x1000 sets, |sum-1| <= {worst_sum:.1e}, rescale rel <= {worst_inv:.1e}");
    ensure(worst_sum <= 1e-12 && worst_inv <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn brute_nn(set: &StationSet, metric: DistanceMetric) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = set.stations().iter().map(|s| (s.lat, s.lon)).collect();
    (0..pts.len())
        .map(|i| {
            (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| metric.distance(pts[i], pts[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Station pixel by nearest center, or `None` off the raster.
fn pixel_of(t: &GeoTransform, rows: usize, cols: usize, lat: f64, lon: f64) -> Option<(usize, usize)> {
    let r = ((lat - t.lat_origin) / t.dlat).round();
    let c = ((lon - t.lon_origin) / t.dlon).round();
    (r >= 0.0 && c >= 0.0 && r < rows as f64 && c < cols as f64).then_some((r as usize, c as usize))
}

fn brute_crop(rows: usize, cols: usize, set: &StationSet, t: &GeoTransform, size: usize) -> (usize, usize, usize) {
    let px: Vec<(usize, usize)> = set
        .stations()
        .iter()
        .filter_map(|s| pixel_of(t, rows, cols, s.lat, s.lon))
        .collect();
    let mut best = (0, 0, 0);
    let mut first = true;
    for r0 in 0..=rows - size {
        for c0 in 0..=cols - size {
            let n = px
                .iter()
                .filter(|(r, c)| *r >= r0 && *r < r0 + size && *c >= c0 && *c < c0 + size)
                .count();
            if first || n > best.2 {
                best = (r0, c0, n);
                first = false;
            }
        }
    }
    best
}

fn criterion_3() -> Check {
    let metrics = [DistanceMetric::HaversineKm, DistanceMetric::EuclideanDegrees];
    for s in 0..100u64 {
        let mut rng = SplitMixRng::new(50_000 + s);
        let n = 2 + rng.below(199);
        let mut set = random_stations(&mut rng, n, (-60.0, 70.0), (-170.0, 170.0));
        if s % 10 == 0 {
            // Coincident stations have a zero nearest distance.
            let mut v = set.stations().to_vec();
            v[1].lat = v[0].lat;
            v[1].lon = v[0].lon;
            set = StationSet::new(v).unwrap();
        }
        let metric = metrics[s as usize % 2];
        let got = nn_distances(&set, metric).map_err(|e| e.to_string())?;
        let want = brute_nn(&set, metric);
        let same = got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("nn_distances differs from brute force on seed {s}"))?;
    }
    for s in 0..50u64 {
        let mut rng = SplitMixRng::new(60_000 + s);
        let rows = 8 + rng.below(121);
        let cols = 8 + rng.below(121);
        let t = GeoTransform::north_up(40.0, 100.0, 0.1).unwrap();
        // Some stations fall off the raster and must be ignored.
        let lat = (40.0 - 0.1 * rows as f64 - 0.3, 40.0 + 0.3);
        let lon = (100.0 - 0.3, 100.0 + 0.1 * cols as f64 + 0.3);
        let set = random_stations(&mut rng, 100, lat, lon);
        let size = 1 + rng.below(rows.min(cols));
        let got = crop_search((rows, cols), &set, &t, size).map_err(|e| e.to_string())?;
        let want = brute_crop(rows, cols, &set, &t, size);
        ensure((got.row0, got.col0, got.station_count) == want, || {
            format!(
                "crop {rows}x{cols} size {size}: got ({},{},{}) want {want:?}",
                got.row0, got.col0, got.station_count
            )
        })?;
    }
    Ok("100 nn sets bit-exact, 50 crop windows exact".into())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let mut rng = SplitMixRng::new(4);
    let g: Vec<f64> = (0..500).map(|_| rng.uniform(0.2, 30.0)).collect();
    let r = evaluate(&PairedSamples::new(g.clone(), g).unwrap(), 0.2);
    let exact = [
        ("pod", r.pod, 1.0),
        ("far", r.far, 0.0),
        ("cc", r.cc, 1.0),
        ("rmse", r.rmse, 0.0),
        ("nmae", r.nmae, 0.0),
        ("nrmse", r.nrmse, 0.0),
    ];
    for (name, got, want) in exact {
        ensure(got == Some(want), || format!("{name} = {got:?}, perfect value {want}"))?;
    }
    for (name, got) in [("tb", r.tb), ("hb", r.hb), ("mb", r.mb), ("fb", r.fb)] {
        ensure(got.is_some_and(|v| v.abs() <= 1e-12), || format!("{name} = {got:?}"))?;
    }
    Ok("POD 1, FAR 0, CC 1, RMSE/NMAE/NRMSE 0, TB/HB/MB/FB 0".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let thr = 0.2;
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let mut rng = SplitMixRng::new(70_000 + s);
        let n = 10 + rng.below(500);
        let draw = |rng: &mut SplitMixRng| if rng.next_f64() < 0.4 { 0.0 } else { rng.uniform(thr, 40.0) };
        let sat: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut gr: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        gr[0] = 5.0;
        let r = evaluate(&PairedSamples::new(sat, gr).unwrap(), thr);
        let (tb, hb, mb, fb) = (r.tb.unwrap(), r.hb.unwrap(), r.mb.unwrap(), r.fb.unwrap());
        let gap = (tb - (hb + mb + fb)).abs();
        ensure(gap < 1e-10 * tb.abs() + 1e-12, || format!("seed {s}: |TB-(HB+MB+FB)| = {gap:e}, TB = {tb}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("100 instances, max gap {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

const LEVEL_PROBES: [(f64, u8); 13] = [
    (0.0, 0),
    (0.05, 0),
    (0.1, 1),
    (9.9, 1),
    (10.0, 2),
    (24.9, 2),
    (25.0, 3),
    (49.9, 3),
    (50.0, 4),
    (99.9, 4),
    (100.0, 5),
    (249.9, 5),
    (250.0, 6),
];

fn criterion_6() -> Check {
    for (v, want) in LEVEL_PROBES {
        let got = classify_level(v);
        ensure(got == want, || format!("level({v}) = {got}, want {want}"))?;
    }
    let mut args = vec!["level".to_string()];
    for (v, _) in LEVEL_PROBES {
        args.push("--value".into());
        args.push(v.to_string());
    }
    let out = cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    ensure(out.status.code() == Some(0), || format!("CLI level exited {:?}", out.status.code()))?;
    let printed: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(str::to_owned).collect();
    let want: Vec<String> = LEVEL_PROBES.iter().map(|(_, l)| l.to_string()).collect();
    ensure(printed == want, || format!("CLI printed {printed:?}"))?;
    Ok("13 probes, library and CLI".into())
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    ensure(NormSpec::HOURLY.forward(6.22) == 1.0, || "hourly 6.22 does not map to 1".into())?;
    ensure(NormSpec::DAILY.forward(38.48) == 1.0, || "daily 38.48 does not map to 1".into())?;
    let mut worst = 0.0f64;
    for spec in [NormSpec::HOURLY, NormSpec::DAILY] {
        for i in 0..=1000 {
            let x = spec.x_min + (spec.x_max - spec.x_min) * i as f64 / 1000.0;
            worst = worst.max((spec.inverse(spec.forward(x)) - x).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("round trip error {worst:e}"))?;
    Ok(format!("pins exact, round trip <= {worst:.1e}"))
}

// ---------------------------------------------------------------- 8

fn recovery_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        rows: 64,
        cols: 64,
        amplitude: (0.2, 1.0),
        gain: 2.0,
        offset: 0.05,
        noise_sigma: 0.01,
        n_stations: 60,
        seed,
        ..SceneSpec::default()
    }
}

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

/// Minimizes `Σ w_i (a·x_i + b − y_i)²` in closed form.
fn wls(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((x, y), w) in x.iter().zip(y).zip(w) {
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = sw * sxx - sx * sx;
    ((sw * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

fn station_rmse(grid: &Grid, set: &StationSet) -> f64 {
    let t = grid.transform();
    let (rows, cols) = grid.shape();
    let sq: Vec<f64> = set
        .stations()
        .iter()
        .map(|s| {
            let (r, c) = pixel_of(t, rows, cols, s.lat, s.lon).expect("station on raster");
            (grid.get(r, c) - s.value).powi(2)
        })
        .collect();
    (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
}

fn criterion_8() -> Check {
    let alpha = 0.05;
    let scene = generate_scene(&recovery_scene(8)).map_err(|e| e.to_string())?;
    let split = split_stations(scene.stations.len(), 0.8, 8).unwrap();
    let train_set = scene.stations.subset(&split.train);
    let eval_set = scene.stations.subset(&split.eval);

    let mut cfg = TrainConfig::new(500, Optimizer::adam(0.02), KernelSpec::exponential(alpha).unwrap()).unwrap();
    cfg.patience = None;
    let sample = TrainSample {
        satellite: &scene.satellite,
        stations: &train_set,
        truth: Some(&scene.truth),
    };
    let out = models::train(Calibrator::default_affine(), &[sample], &cfg).map_err(|e| e.to_string())?;
    let p = out.model.params();
    let (a, b) = (p[0], p[1]);

    // Oracle: normalized exponential weights on nearest-other-station distances.
    let pts: Vec<(f64, f64)> = train_set.stations().iter().map(|s| (s.lat, s.lon)).collect();
    let raw: Vec<f64> = (0..pts.len())
        .map(|i| {
            let d = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| haversine(pts[i], pts[j]))
                .fold(f64::INFINITY, f64::min);
            (-alpha * d).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let t = scene.satellite.transform();
    let x: Vec<f64> = train_set
        .stations()
        .iter()
        .map(|s| {
            let (r, c) = pixel_of(t, 64, 64, s.lat, s.lon).unwrap();
            scene.satellite.get(r, c)
        })
        .collect();
    let (oa, ob) = wls(&x, &train_set.values(), &w);

    // The same fit with the full-grid term included, for the record.
    let n = scene.satellite.len() as f64;
    let mut cx = x.clone();
    let mut cy = train_set.values();
    let mut cw = w.clone();
    cx.extend_from_slice(scene.satellite.values());
    cy.extend_from_slice(scene.truth.values());
    cw.extend(std::iter::repeat_n(1.0 / n, scene.satellite.len()));
    let (ca, cb) = wls(&cx, &cy, &cw);

    let raw_rmse = station_rmse(&scene.satellite, &eval_set);
    let cal = out.model.apply(&scene.satellite).map_err(|e| e.to_string())?;
    let cal_rmse = station_rmse(&cal, &eval_set);
    let detail = format!(
        "(a,b)=({a:.4},{b:.4}) oracle ({oa:.4},{ob:.4}) combined ({ca:.4},{cb:.4}); held-out RMSE {raw_rmse:.4} -> {cal_rmse:.4}"
    );
    ensure((a - oa).abs() <= 1e-2 && (b - ob).abs() <= 1e-2, || detail.clone())?;
    ensure(cal_rmse <= 0.5 * raw_rmse, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for t in 0..5u64 {
        let spec = SceneSpec {
            layout: StationLayout::Clustered { isolated: 3 },
            ..recovery_scene(100 + t)
        };
        let inputs = scene_inputs(&spec, 5.0, 0.8, t).map_err(|e| e.to_string())?;
        let run = |mix_taper: f64, mix_other: f64| -> Result<f64, String> {
            let mut train = TrainConfig::new(500, Optimizer::adam(0.02), KernelSpec::exponential(0.05).unwrap()).unwrap();
            train.patience = None;
            train.loss = TotalLossConfig {
                mix_taper,
                mix_other,
                other: OtherLoss::L2,
                other_domain: OtherDomain::Stations,
            };
            let cfg = PipelineConfig { seed: t, ..PipelineConfig::new(train) };
            let r = pipeline::run_pipeline(&cfg, &inputs, None).map_err(|e| e.to_string())?;
            Ok(r.station_eval.rmse.unwrap())
        };
        let taper = run(1.0, 0.0)?;
        let plain = run(0.0, 1.0)?;
        if taper <= plain {
            wins += 1;
        }
        pairs.push(format!("{taper:.3}/{plain:.3}"));
    }
    let detail = format!("taper <= plain in {wins}/5 (taper/plain RMSE {})", pairs.join(" "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taper-calib"))
        .args(args)
        .output()
        .expect("spawn taper-calib")
}

fn cli_threads(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taper-calib"))
        .args(args)
        .env("TAPER_CALIB_THREADS", threads)
        .output()
        .expect("spawn taper-calib")
}

fn sweep_args(noise: &str) -> Vec<String> {
    [
        "sweep",
        "--param",
        "mix_taper",
        "--values",
        "0,0.5,1,2",
        "--repeats",
        "5",
        "--rows",
        "32",
        "--cols",
        "32",
        "--stations",
        "30",
        "--amp-min",
        "0.2",
        "--amp-max",
        "1.0",
        "--gain",
        "2",
        "--offset",
        "0.05",
        "--noise",
        noise,
        "--station-noise",
        noise,
        "--epochs",
        "150",
        "--lr",
        "0.02",
        "--seed",
        "3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Parses a sweep TSV, checking its layout; returns the std column.
fn parse_sweep(tsv: &str) -> Result<Vec<f64>, String> {
    let mut lines = tsv.lines();
    ensure(lines.next() == Some("value\tmetric\tmean\tstd"), || "bad TSV header".into())?;
    let rows: Vec<&str> = lines.collect();
    ensure(rows.len() == 12, || format!("{} data rows, want 12", rows.len()))?;
    let mut stds = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split('\t').collect();
        ensure(f.len() == 4, || format!("row {i} has {} fields", f.len()))?;
        let value: f64 = f[0].parse().map_err(|_| format!("row {i}: bad value {:?}", f[0]))?;
        ensure(value == [0.0, 0.5, 1.0, 2.0][i / 3], || format!("row {i}: value {value}"))?;
        ensure(f[1] == ["rmse", "mae", "r2"][i % 3], || format!("row {i}: metric {}", f[1]))?;
        let mean: f64 = f[2].parse().map_err(|_| format!("row {i}: bad mean {:?}", f[2]))?;
        let std: f64 = f[3].parse().map_err(|_| format!("row {i}: bad std {:?}", f[3]))?;
        ensure(mean.is_finite() && std.is_finite() && std >= 0.0, || format!("row {i}: {row}"))?;
        stds.push(std);
    }
    Ok(stds)
}

fn criterion_10() -> Check {
    let run = |noise: &str, threads: &str| -> Result<String, String> {
        let args = sweep_args(noise);
        let out = cli_threads(&args.iter().map(String::as_str).collect::<Vec<_>>(), threads);
        ensure(out.status.success(), || {
            format!("sweep exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    let noisy = run("0.05", "0")?;
    let again = run("0.05", "1")?;
    parse_sweep(&noisy)?;
    ensure(noisy == again, || "noisy sweep differs between reruns".into())?;
    let clean = run("0", "0")?;
    let stds = parse_sweep(&clean)?;
    let worst = stds.iter().copied().fold(0.0, f64::max);
    ensure(worst < 1e-10, || format!("zero-noise std up to {worst:e}"))?;
    ensure(run("0", "2")? == clean, || "zero-noise sweep differs between reruns".into())?;
    Ok(format!("4x3 rows, reruns byte-identical, zero-noise max std {worst:.1e}"))
}

// ---------------------------------------------------------------- 11

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_grid(rng: &mut SplitMixRng) -> Grid {
    let rows = 1 + rng.below(40);
    let cols = 1 + rng.below(40);
    let t = GeoTransform::north_up(rng.uniform(-60.0, 60.0), rng.uniform(-180.0, 170.0), rng.uniform(0.01, 1.0)).unwrap();
    let ts = rng.below(1 << 30) as i64;
    Grid::from_fn(rows, cols, t, ts, |_, _| {
        if rng.next_f64() < 0.1 {
            f64::NAN
        } else {
            rng.uniform(0.0, 100.0) * rng.next_f64().powi(3)
        }
    })
    .unwrap()
}

fn same_grid(a: &Grid, b: &Grid) -> bool {
    a.shape() == b.shape() && a.transform() == b.transform() && a.timestamp() == b.timestamp() && bits(a.values()) == bits(b.values())
}

fn codec_round_trips(dir: &Path) -> Result<(), String> {
    for s in 0..50u64 {
        let mut rng = SplitMixRng::new(80_000 + s);
        let g = random_grid(&mut rng);
        let path = dir.join(format!("g{s}.npy"));
        io::write_npy(&g, &path).map_err(|e| e.to_string())?;
        let back = io::read_npy(&path).map_err(|e| e.to_string())?;
        ensure(same_grid(&g, &back), || format!("NPY fixture {s} not lossless"))?;

        let h = random_grid(&mut rng);
        let zpath = dir.join(format!("z{s}.npz"));
        io::write_npz(&[("first", &g), ("second", &h)], &zpath).map_err(|e| e.to_string())?;
        let z = io::read_npz(&zpath).map_err(|e| e.to_string())?;
        ensure(
            z.len() == 2 && z[0].0 == "first" && z[1].0 == "second" && same_grid(&z[0].1, &g) && same_grid(&z[1].1, &h),
            || format!("NPZ fixture {s} not lossless"),
        )?;

        let set = {
            let n = 1 + rng.below(80);
            let v = (0..n)
                .map(|i| {
                    Station::new(
                        format!("stn-{s}-{i}"),
                        rng.uniform(-89.0, 89.0),
                        rng.uniform(-179.0, 179.0),
                        rng.uniform(0.0, 300.0) * rng.next_f64(),
                    )
                    .unwrap()
                })
                .collect();
            StationSet::new(v).unwrap()
        };
        let cpath = dir.join(format!("s{s}.csv"));
        io::write_station_csv(&set, &cpath).map_err(|e| e.to_string())?;
        let back = io::read_station_csv(&cpath).map_err(|e| e.to_string())?;
        let same = back.stations().len() == set.stations().len()
            && back.stations().iter().zip(set.stations()).all(|(a, b)| {
                a.id == b.id && a.lat.to_bits() == b.lat.to_bits() && a.lon.to_bits() == b.lon.to_bits() && a.value.to_bits() == b.value.to_bits()
            });
        ensure(same, || format!("CSV fixture {s} not lossless"))?;

        let model = if s % 2 == 0 {
            Calibrator::affine(rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 1.0))
        } else {
            let act = if s % 4 == 1 { Activation::Relu } else { Activation::Tanh };
            Calibrator::Mlp(MlpCalibrator::new(1 + rng.below(20), act, s % 3 == 0, s).unwrap())
        };
        let mpath = dir.join(format!("m{s}.tcal"));
        models::write_checkpoint(&model, &mpath).map_err(|e| e.to_string())?;
        let back = models::read_checkpoint(&mpath).map_err(|e| e.to_string())?;
        ensure(back == model && bits(&back.params()) == bits(&model.params()), || {
            format!("checkpoint fixture {s} not lossless")
        })?;
    }
    Ok(())
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn malformed_corpus(dir: &Path) -> Result<usize, String> {
    let t = GeoTransform::north_up(30.0, 110.0, 0.1).unwrap();
    let g = Grid::from_fn(4, 5, t, 0, |r, c| (r * 5 + c) as f64).unwrap();
    let npy = io::npy_bytes(&[4, 5], g.values());
    let npz = io::npz_bytes(&[("a", &g)]).unwrap();
    let ckpt = models::checkpoint_bytes(&Calibrator::affine(2.0, 0.5));

    let mut cases: Vec<(String, Vec<u8>, &str)> = Vec::new();
    for cut in [0, 5, 9, 40, npy.len() - 1] {
        cases.push((format!("trunc{cut}.npy"), npy[..cut].to_vec(), "truncated"));
    }
    let mut bad = npy.clone();
    bad[0] = b'X';
    cases.push(("badmagic.npy".into(), bad, "magic"));
    for cut in [10, npz.len() / 2, npz.len() - 3] {
        cases.push((format!("trunc{cut}.npz"), npz[..cut].to_vec(), "zip"));
    }
    cases.push((
        "deflate.npz".into(),
        std::fs::read(fixtures().join("numpy_deflate.npz")).map_err(|e| e.to_string())?,
        "deflate",
    ));
    cases.push(("badheader.csv".into(), b"name,lat,lon,value\nA,30,110,1\n".to_vec(), "header"));
    for cut in [3, ckpt.len() - 2] {
        cases.push((format!("trunc{cut}.tcal"), ckpt[..cut].to_vec(), "checkpoint"));
    }

    for (name, bytes, kind) in &cases {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        let ext = path.extension().unwrap().to_str().unwrap();
        let lib = match ext {
            "npy" => io::read_npy(&path).err(),
            "npz" => io::read_npz(&path).err(),
            "csv" => io::read_station_csv(&path).err(),
            _ => models::read_checkpoint(&path).err(),
        };
        let typed = matches!(
            (kind, &lib),
            (&"truncated", Some(Error::TruncatedFile | Error::BadMagic))
                | (&"magic", Some(Error::BadMagic))
                | (&"zip", Some(Error::BadZip(_) | Error::TruncatedFile))
                | (&"deflate", Some(Error::UnsupportedCompression { method: 8, .. }))
                | (&"header", Some(Error::BadHeader))
                | (&"checkpoint", Some(Error::BadCheckpoint(_) | Error::TruncatedFile))
        );
        ensure(typed, || format!("{name}: got {lib:?}"))?;

        let p = path.to_str().unwrap();
        let out = match ext {
            "npy" | "npz" => cli(&["stats", p]),
            "csv" => cli(&["crop", "--input", dir.join("ok.npy").to_str().unwrap(), "--stations", p, "--size", "2"]),
            _ => cli(&["calibrate", "--model", p, "--input", dir.join("ok.npy").to_str().unwrap(), "--out", dir.join("x.npy").to_str().unwrap()]),
        };
        ensure(out.status.code() == Some(2), || {
            format!("{name}: CLI exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(cases.len())
}

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    codec_round_trips(dir.path())?;
    let t = GeoTransform::north_up(30.0, 110.0, 0.1).unwrap();
    let ok = Grid::from_fn(4, 5, t, 0, |r, c| (r + c) as f64).unwrap();
    io::write_npy(&ok, dir.path().join("ok.npy")).map_err(|e| e.to_string())?;
    let n = malformed_corpus(dir.path())?;
    let header_ok = STATION_CSV_HEADER == "id,lat,lon,value";
    ensure(header_ok, || "unexpected CSV header".into())?;
    Ok(format!("50 fixtures x 4 codecs lossless, {n} malformed inputs typed and exit 2"))
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Check {
    let ramp = |lat: f64, lon: f64| 0.3 + 0.02 * (lat - 30.0) + 0.015 * (lon - 110.0);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (res_src, res_dst) in [(0.1, 0.25), (0.25, 0.1), (0.1, 0.3)] {
        let t = GeoTransform::north_up(35.0, 110.0, res_src).unwrap();
        let rows = (4.0 / res_src) as usize;
        let cols = (5.0 / res_src) as usize;
        let src = Grid::from_fn(rows, cols, t, 0, |r, c| {
            let (lat, lon) = t.index_to_coords(r, c);
            ramp(lat, lon)
        })
        .unwrap();
        let geom = TargetGeometry::covering(&src, res_dst).map_err(|e| e.to_string())?;
        let out = resample_space(&src, &geom, ResampleMethod::Bilinear).map_err(|e| e.to_string())?;
        for r in 0..geom.rows {
            for c in 0..geom.cols {
                let (lat, lon) = geom.transform.index_to_coords(r, c);
                let (fr, fc) = t.fractional_index(lat, lon);
                let interior = fr >= 0.0 && fc >= 0.0 && fr <= (rows - 1) as f64 && fc <= (cols - 1) as f64;
                if interior {
                    worst = worst.max((out.get(r, c) - ramp(lat, lon)).abs());
                    checked += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("ramp error {worst:e}"))?;

    let mut rng = SplitMixRng::new(12);
    let t = GeoTransform::north_up(30.0, 110.0, 0.1).unwrap();
    let frames: Vec<Grid> = (0..3)
        .map(|i| Grid::from_fn(9, 11, t, i * 3600, |_, _| rng.uniform(0.0, 20.0)).unwrap())
        .collect();
    let series = GridSeries::new(frames.clone()).unwrap();
    let fine = interp_time(&series, &TimeInterpSpec { source_step: 3600, target_step: 1800 }).map_err(|e| e.to_string())?;
    ensure(fine.len() == 5, || format!("{} interpolated frames", fine.len()))?;
    let mut worst_t = 0.0f64;
    for k in 0..2 {
        let mid = &fine.frames()[2 * k + 1];
        ensure(mid.timestamp() == k as i64 * 3600 + 1800, || "midpoint timestamp".into())?;
        for ((m, a), b) in mid.values().iter().zip(frames[k].values()).zip(frames[k + 1].values()) {
            worst_t = worst_t.max((m - (a + b) / 2.0).abs());
        }
    }
    ensure(worst_t <= 1e-12, || format!("midpoint error {worst_t:e}"))?;
    Ok(format!("ramp max err {worst:.1e} over {checked} centers, midpoint max err {worst_t:.1e}"))
}

// ----------------------------------------------------------------

/// Criterion number, check, time budget in seconds.
type Entry = (u32, fn() -> Check, Option<u64>);

fn main() {
    let criteria: [Entry; 12] = [
        (1, criterion_1, Some(10)),
        (2, criterion_2, None),
        (3, criterion_3, Some(30)),
        (4, criterion_4, None),
        (5, criterion_5, None),
        (6, criterion_6, None),
        (7, criterion_7, None),
        (8, criterion_8, Some(60)),
        (9, criterion_9, None),
        (10, criterion_10, None),
        (11, criterion_11, None),
        (12, criterion_12, None),
    ];
    let mut failed = 0;
    for (n, f, limit) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(d), Some(l)) if elapsed > Duration::from_secs(l) => Err(format!("{d}; over the {l} s budget")),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            failed += 1;
        }
        println!("criterion {n:>2}: {tag}  {detail}  [{:.2} s]", elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
