//! Verification metrics: event-based scores and biases, regression and
//! classification scores, PSNR/SSIM and daily precipitation levels.
//!
//! Any metric whose denominator vanishes is reported as `None` rather than a
//! NaN so that tables stay readable.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{is_missing, Grid};

/// Default rain/no-rain threshold in mm/h.
pub const DEFAULT_EVENT_THRESHOLD: f64 = 0.2;

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Paired satellite (`s`) and ground (`g`) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    s: Vec<f64>,
    g: Vec<f64>,
}

impl PairedSamples {
    pub fn new(s: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if s.len() != g.len() {
            return Err(Error::ShapeMismatch(format!("{} vs {} samples", s.len(), g.len())));
        }
        if s.is_empty() {
            return Err(Error::EmptyAfterFilter);
        }
        if s.iter().chain(&g).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("paired samples must be finite and non-negative".into()));
        }
        Ok(PairedSamples { s, g })
    }

    /// Pixel pairs where neither grid is missing.
    pub fn from_grids(pred: &Grid, truth: &Grid) -> Result<Self> {
        pred.check_same_geometry(truth)?;
        let (s, g) = pred
            .values()
            .iter()
            .zip(truth.values())
            .filter(|(a, b)| !is_missing(**a) && !is_missing(**b))
            .map(|(a, b)| (*a, *b))
            .unzip();
        Self::new(s, g)
    }

    pub fn satellite(&self) -> &[f64] {
        &self.s
    }

    pub fn ground(&self) -> &[f64] {
        &self.g
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Contingency counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCounts {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Hit,
    Miss,
    False,
    Negative,
}

#[inline]
fn classify_event(s: f64, g: f64, thr: f64) -> Event {
    match (s >= thr, g >= thr) {
        (true, true) => Event::Hit,
        (false, true) => Event::Miss,
        (true, false) => Event::False,
        (false, false) => Event::Negative,
    }
}

pub fn event_counts(p: &PairedSamples, threshold: f64) -> EventCounts {
    let mut c = EventCounts::default();
    for (&s, &g) in p.s.iter().zip(&p.g) {
        match classify_event(s, g, threshold) {
            Event::Hit => c.hits += 1,
            Event::Miss => c.misses += 1,
            Event::False => c.false_alarms += 1,
            Event::Negative => c.correct_negatives += 1,
        }
    }
    c
}

/// Everything one evaluation run can report. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub counts: EventCounts,
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub cc: Option<f64>,
    pub rmse: Option<f64>,
    pub nmae: Option<f64>,
    pub nrmse: Option<f64>,
    /// Biases are percentages.
    pub tb: Option<f64>,
    pub hb: Option<f64>,
    pub mb: Option<f64>,
    pub fb: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub classification: Option<ClassificationReport>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Hydrological scores. Biases share the denominator `ΣG` over all samples.
pub fn table_a1_metrics(p: &PairedSamples, threshold: f64) -> MetricsReport {
    let n = p.len();
    let counts = event_counts(p, threshold);
    let ratio = |num: f64, den: f64| if den != 0.0 { Some(num / den) } else { None };

    let sum_g = neumaier_sum(p.g.iter().copied());
    let sq = neumaier_sum(p.s.iter().zip(&p.g).map(|(s, g)| (s - g) * (s - g)));
    let abs = neumaier_sum(p.s.iter().zip(&p.g).map(|(s, g)| (s - g).abs()));
    let rmse = (sq / n as f64).sqrt();
    let mean_g = sum_g / n as f64;

    let mut hit = Vec::new();
    let mut miss = Vec::new();
    let mut fals = Vec::new();
    let mut total = Vec::with_capacity(n);
    for (&s, &g) in p.s.iter().zip(&p.g) {
        total.push(s - g);
        match classify_event(s, g, threshold) {
            Event::Hit => hit.push(s - g),
            Event::Miss => miss.push(-g),
            Event::False => fals.push(s),
            Event::Negative => {}
        }
    }
    let pct = |v: Vec<f64>| ratio(neumaier_sum(v), sum_g).map(|x| x * 100.0);

    MetricsReport {
        n,
        threshold,
        counts,
        pod: ratio(counts.hits as f64, (counts.hits + counts.misses) as f64),
        far: ratio(counts.false_alarms as f64, (counts.hits + counts.false_alarms) as f64),
        cc: pearson(&p.s, &p.g),
        rmse: Some(rmse),
        nmae: ratio(abs, sum_g),
        nrmse: ratio(rmse, mean_g),
        tb: pct(total),
        hb: pct(hit),
        mb: pct(miss),
        fb: pct(fals),
        ..Default::default()
    }
}

/// Two-pass Pearson correlation; `None` for fewer than two samples or a
/// constant series.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = neumaier_sum(a.iter().copied()) / n as f64;
    let mb = neumaier_sum(b.iter().copied()) / n as f64;
    let cov = neumaier_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = neumaier_sum(a.iter().map(|x| (x - ma) * (x - ma)));
    let vb = neumaier_sum(b.iter().map(|y| (y - mb) * (y - mb)));
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `(mse, mae, r2)`; `r2` is `None` for a constant ground series.
pub fn regression_metrics(p: &PairedSamples) -> (f64, f64, Option<f64>) {
    let n = p.len() as f64;
    let sse = neumaier_sum(p.s.iter().zip(&p.g).map(|(s, g)| (s - g) * (s - g)));
    let sae = neumaier_sum(p.s.iter().zip(&p.g).map(|(s, g)| (s - g).abs()));
    let mean_g = neumaier_sum(p.g.iter().copied()) / n;
    let sst = neumaier_sum(p.g.iter().map(|g| (g - mean_g) * (g - mean_g)));
    let r2 = if p.len() >= 2 && sst > 0.0 { Some(1.0 - sse / sst) } else { None };
    (sse / n, sae / n, r2)
}

/// Event, bias and regression metrics in one report.
pub fn evaluate(p: &PairedSamples, threshold: f64) -> MetricsReport {
    let mut r = table_a1_metrics(p, threshold);
    let (mse, mae, r2) = regression_metrics(p);
    r.mse = Some(mse);
    r.mae = Some(mae);
    r.r2 = r2;
    r
}

/// Per-class and aggregate classification scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
}

pub fn classification_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    if let Some(&label) = pred.iter().chain(truth).find(|l| **l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / pred.len() as f64;
    let precision: Vec<Option<f64>> = (0..num_classes)
        .map(|k| (pred_count[k] > 0).then(|| tp[k] as f64 / pred_count[k] as f64))
        .collect();
    let recall: Vec<Option<f64>> = (0..num_classes)
        .map(|k| (true_count[k] > 0).then(|| tp[k] as f64 / true_count[k] as f64))
        .collect();
    let f1: Vec<Option<f64>> = precision
        .iter()
        .zip(&recall)
        .map(|(p, r)| match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            // Only a class that is neither predicted nor present is excluded.
            (None, Some(_)) | (Some(_), None) => Some(0.0),
            (None, None) => None,
        })
        .collect();
    let mean = |v: &[Option<f64>]| {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    };
    Ok(ClassificationReport {
        accuracy,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
    })
}

/// 24-hour level boundaries (mm): no rain, light, moderate, heavy, storm,
/// severe storm, extraordinary storm.
pub const DAILY_LEVEL_BOUNDS: [f64; 6] = [0.1, 10.0, 25.0, 50.0, 100.0, 250.0];

pub const LEVEL_NAMES: [&str; 7] = [
    "no rain",
    "light rain",
    "moderate rain",
    "heavy rain",
    "storm rain",
    "severe storm",
    "extraordinary storm",
];

/// Level 0..=6 for a 24-hour accumulation in mm.
pub fn classify_level(daily_total: f64) -> u8 {
    DAILY_LEVEL_BOUNDS.iter().take_while(|b| daily_total >= **b).count() as u8
}

/// PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &Grid, truth: &Grid, data_range: f64) -> Result<f64> {
    pred.check_same_geometry(truth)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidConfig("data range must be positive".into()));
    }
    let p = PairedSamples::from_grids(pred, truth)?;
    let (mse, _, _) = regression_metrics(&p);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let x = i as f64 - half;
        (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a rows×cols field with the SSIM window.
fn filter_valid(values: &[f64], rows: usize, cols: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oc = cols - SSIM_WINDOW + 1;
    let or = rows - SSIM_WINDOW + 1;
    let horiz: Vec<f64> = (0..rows)
        .flat_map(|r| {
            (0..oc).map(move |c| (0..SSIM_WINDOW).map(|k| w[k] * values[r * cols + c + k]).sum::<f64>())
        })
        .collect();
    (0..or)
        .flat_map(|r| {
            let horiz = &horiz;
            (0..oc).map(move |c| (0..SSIM_WINDOW).map(|k| w[k] * horiz[(r + k) * oc + c]).sum::<f64>())
        })
        .collect()
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over positions
/// where the window fits entirely. Missing pixels count as zero.
pub fn ssim(pred: &Grid, truth: &Grid, data_range: f64) -> Result<f64> {
    pred.check_same_geometry(truth)?;
    let (rows, cols) = pred.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::TooSmall {
            rows,
            cols,
            window: SSIM_WINDOW,
        });
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidConfig("data range must be positive".into()));
    }
    let fill = |g: &Grid| -> Vec<f64> { g.values().iter().map(|v| if is_missing(*v) { 0.0 } else { *v }).collect() };
    let x = fill(pred);
    let y = fill(truth);
    let w = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let fields = [&x, &y, &xx, &yy, &xy];
    let filtered: Vec<Vec<f64>> = fields.par_iter().map(|f| filter_valid(f, rows, cols, &w)).collect();
    let (mx, my, sxx, syy, sxy) = (&filtered[0], &filtered[1], &filtered[2], &filtered[3], &filtered[4]);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let map = (0..mx.len()).map(|i| {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    });
    Ok(neumaier_sum(map) / mx.len() as f64)
}

fn fmt_opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "undefined".to_string())
}

impl MetricsReport {
    /// `(name, value)` for every populated scalar metric, in a fixed order.
    pub fn entries(&self) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> = vec![
            ("n".into(), Some(self.n as f64)),
            ("threshold".into(), Some(self.threshold)),
            ("hits".into(), Some(self.counts.hits as f64)),
            ("misses".into(), Some(self.counts.misses as f64)),
            ("false_alarms".into(), Some(self.counts.false_alarms as f64)),
            ("correct_negatives".into(), Some(self.counts.correct_negatives as f64)),
            ("pod".into(), self.pod),
            ("far".into(), self.far),
            ("cc".into(), self.cc),
            ("rmse".into(), self.rmse),
            ("nmae".into(), self.nmae),
            ("nrmse".into(), self.nrmse),
            ("tb".into(), self.tb),
            ("hb".into(), self.hb),
            ("mb".into(), self.mb),
            ("fb".into(), self.fb),
            ("mse".into(), self.mse),
            ("mae".into(), self.mae),
            ("r2".into(), self.r2),
        ];
        if let Some(c) = &self.classification {
            out.push(("accuracy".into(), Some(c.accuracy)));
            out.push(("macro_precision".into(), c.macro_precision));
            out.push(("macro_recall".into(), c.macro_recall));
            out.push(("macro_f1".into(), c.macro_f1));
        }
        if self.psnr.is_some() {
            out.push(("psnr".into(), self.psnr));
        }
        if self.ssim.is_some() {
            out.push(("ssim".into(), self.ssim));
        }
        out
    }

    /// `metric=value` lines with 17 significant digits.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={}", fmt_opt(v, |x| crate::fmt::sig(x, 17)));
        }
        s
    }

    /// Aligned two-column table with 6 significant digits.
    pub fn to_table(&self) -> String {
        let entries = self.entries();
        let width = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k:<width$}  {}", fmt_opt(v, |x| crate::fmt::sig(x, 6)));
        }
        s
    }
}
