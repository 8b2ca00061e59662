//! Distance-tapered station loss.
//!
//! Each reliable station `j` carries a distance `d_j` to its nearest other
//! station and a kernel weight `K(d_j)`. The raw loss is
//! `Σ K(d_j)·(pred_j − z_j)²`; the normalized loss divides each weight by
//! `Σ_k K(d_k)`. [`total_loss`] mixes the normalized form with a plain L1 or L2
//! term and returns the gradient with respect to every grid pixel.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{is_missing, Grid};
use crate::stations::{nn_distances, sample_at_stations, DistanceMetric, StationSet};

/// Distance-decay family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `exp(−α·d)`
    Exponential,
    /// `max(0, 1 − β·d)`
    Linear,
    /// `1 / max(d, d_floor)^γ`
    PowerLaw,
    /// `exp(−d² / 2σ²)`
    Gaussian,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Exponential,
        KernelFamily::Linear,
        KernelFamily::PowerLaw,
        KernelFamily::Gaussian,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Exponential => "exponential",
            KernelFamily::Linear => "linear",
            KernelFamily::PowerLaw => "power_law",
            KernelFamily::Gaussian => "gaussian",
        }
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(KernelFamily::Exponential),
            "linear" => Ok(KernelFamily::Linear),
            "power_law" | "power-law" | "power" => Ok(KernelFamily::PowerLaw),
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => Err(Error::InvalidConfig(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Kernel family plus its decay parameter (α, β, γ or σ), in the units of the
/// distance metric used to compute `d_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub param: f64,
    /// Lower clamp on `d` for the power-law kernel.
    pub d_floor: f64,
}

pub const DEFAULT_D_FLOOR: f64 = 1e-6;

impl KernelSpec {
    pub fn new(family: KernelFamily, param: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            param,
            d_floor: DEFAULT_D_FLOOR,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exponential(alpha: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.param > 0.0 && self.param.is_finite()) {
            return Err(Error::NonPositiveParam(self.param));
        }
        if !(self.d_floor > 0.0 && self.d_floor.is_finite()) {
            return Err(Error::NonPositiveParam(self.d_floor));
        }
        Ok(())
    }

    /// `K(d)` for `d ≥ 0`.
    pub fn weight(&self, d: f64) -> f64 {
        let p = self.param;
        match self.family {
            KernelFamily::Exponential => (-p * d).exp(),
            KernelFamily::Linear => (1.0 - p * d).max(0.0),
            KernelFamily::PowerLaw => 1.0 / d.max(self.d_floor).powf(p),
            KernelFamily::Gaussian => (-(d * d) / (2.0 * p * p)).exp(),
        }
    }
}

/// `K(d)` with parameter validation.
pub fn kernel_weight(spec: &KernelSpec, d: f64) -> Result<f64> {
    spec.validate()?;
    Ok(spec.weight(d))
}

/// Per-station distances, raw kernel weights and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TaperWeights {
    pub distances: Vec<f64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl TaperWeights {
    /// Weights from externally supplied distances.
    pub fn from_distances(distances: Vec<f64>, kernel: &KernelSpec) -> Result<Self> {
        kernel.validate()?;
        let raw: Vec<f64> = distances.iter().map(|&d| kernel.weight(d)).collect();
        Self::from_raw(distances, raw)
    }

    /// Weights from nearest-other-station distances under `metric`.
    pub fn for_stations(set: &StationSet, kernel: &KernelSpec, metric: DistanceMetric) -> Result<Self> {
        let d = if set.len() == 1 {
            // A lone station normalizes to weight 1 regardless of its distance.
            vec![0.0]
        } else {
            nn_distances(set, metric)?
        };
        Self::from_distances(d, kernel)
    }

    /// Equal weights; the normalized loss becomes the station MSE.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_raw(vec![0.0; n], vec![1.0; n])
    }

    pub fn from_raw(distances: Vec<f64>, raw: Vec<f64>) -> Result<Self> {
        let normalized = normalize_weights(&raw, None)?;
        Ok(TaperWeights {
            distances,
            raw,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Effective per-station weights for the chosen form, with masked
    /// stations set to zero and the rest renormalized over the valid subset.
    pub fn effective(&self, form: LossForm, valid: Option<&[bool]>) -> Result<Vec<f64>> {
        if let Some(v) = valid {
            if v.len() != self.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} validity flags for {} weights",
                    v.len(),
                    self.len()
                )));
            }
            if !v.iter().any(|x| *x) {
                return Err(Error::EmptyAfterMasking);
            }
        }
        match form {
            LossForm::Raw => Ok(self
                .raw
                .iter()
                .enumerate()
                .map(|(j, &w)| if valid.is_none_or(|v| v[j]) { w } else { 0.0 })
                .collect()),
            LossForm::Normalized => match valid {
                None => Ok(self.normalized.clone()),
                Some(_) => normalize_weights(&self.raw, valid),
            },
        }
    }
}

fn normalize_weights(raw: &[f64], valid: Option<&[bool]>) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyAfterMasking);
    }
    let keep = |j: usize| valid.is_none_or(|v| v[j]);
    let total: f64 = raw
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, w)| *w)
        .sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateKernel);
    }
    Ok(raw
        .iter()
        .enumerate()
        .map(|(j, &w)| if keep(j) { w / total } else { 0.0 })
        .collect())
}

/// Which form of the taper loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// `Σ K(d_j)·r_j²`
    Raw,
    /// `Σ w_j·r_j²` with `w_j = K(d_j)/Σ K(d_k)`
    #[default]
    Normalized,
}

fn check_lengths(preds: &[f64], truths: &[f64], weights: &TaperWeights) -> Result<()> {
    if preds.len() != truths.len() || preds.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} truths, {} weights",
            preds.len(),
            truths.len(),
            weights.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyAfterMasking);
    }
    Ok(())
}

/// Taper loss over station predictions. Stations with `valid[j] == false`
/// are excluded and, for the normalized form, the weights are renormalized.
pub fn taper_loss(
    preds: &[f64],
    truths: &[f64],
    weights: &TaperWeights,
    form: LossForm,
    valid: Option<&[bool]>,
) -> Result<f64> {
    check_lengths(preds, truths, weights)?;
    let w = weights.effective(form, valid)?;
    Ok(preds
        .iter()
        .zip(truths)
        .zip(&w)
        .filter(|(_, w)| **w != 0.0)
        .map(|((p, z), w)| w * (p - z) * (p - z))
        .sum())
}

/// `∂L/∂pred_j` for [`taper_loss`]; zero for masked stations.
pub fn taper_loss_grad(
    preds: &[f64],
    truths: &[f64],
    weights: &TaperWeights,
    form: LossForm,
    valid: Option<&[bool]>,
) -> Result<Vec<f64>> {
    check_lengths(preds, truths, weights)?;
    let w = weights.effective(form, valid)?;
    Ok(preds
        .iter()
        .zip(truths)
        .zip(&w)
        .map(|((p, z), w)| if *w == 0.0 { 0.0 } else { 2.0 * w * (p - z) })
        .collect())
}

/// The plain term mixed with the taper loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OtherLoss {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    #[default]
    L2,
}

impl FromStr for OtherLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "mae" => Ok(OtherLoss::L1),
            "l2" | "mse" => Ok(OtherLoss::L2),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

/// Where the plain term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OtherDomain {
    /// Station pixels against station observations.
    Stations,
    /// Every pixel against the gridded reference.
    #[default]
    FullGrid,
}

impl FromStr for OtherDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stations" => Ok(OtherDomain::Stations),
            "full_grid" | "full-grid" | "grid" => Ok(OtherDomain::FullGrid),
            other => Err(Error::InvalidConfig(format!("unknown loss domain {other:?}"))),
        }
    }
}

/// `mix_taper·L_taper + mix_other·L_other`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLossConfig {
    pub mix_taper: f64,
    pub mix_other: f64,
    pub other: OtherLoss,
    pub other_domain: OtherDomain,
}

impl Default for TotalLossConfig {
    fn default() -> Self {
        TotalLossConfig {
            mix_taper: 1.0,
            mix_other: 1.0,
            other: OtherLoss::L2,
            other_domain: OtherDomain::FullGrid,
        }
    }
}

impl TotalLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.mix_taper) || !ok(self.mix_other) || self.mix_taper + self.mix_other <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "loss mix ({}, {}) must be non-negative with a positive sum",
                self.mix_taper, self.mix_other
            )));
        }
        Ok(())
    }

    /// Whether evaluating this objective reads the gridded reference.
    pub fn needs_truth_grid(&self) -> bool {
        self.mix_other > 0.0 && self.other_domain == OtherDomain::FullGrid
    }
}

/// Stations resolved against one grid geometry: pixel indices, observed
/// values and taper weights, ready for repeated loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StationTarget {
    rows: usize,
    cols: usize,
    /// Flat pixel index per valid station.
    pixels: Vec<usize>,
    /// Observations `z_j` per valid station.
    observed: Vec<f64>,
    weights: TaperWeights,
}

impl StationTarget {
    /// Resolves `set` on `grid`'s geometry. Stations outside the extent are
    /// dropped before weighting; `d_j` is measured among all stations in `set`.
    pub fn new(grid: &Grid, set: &StationSet, kernel: &KernelSpec, metric: DistanceMetric) -> Result<Self> {
        let weights = TaperWeights::for_stations(set, kernel, metric)?;
        Self::with_weights(grid, set, weights)
    }

    /// Like [`new`](Self::new) with caller-supplied weights (one per station).
    pub fn with_weights(grid: &Grid, set: &StationSet, weights: TaperWeights) -> Result<Self> {
        if weights.len() != set.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} stations",
                weights.len(),
                set.len()
            )));
        }
        let mut pixels = Vec::new();
        let mut observed = Vec::new();
        let mut keep = Vec::new();
        for (j, s) in set.stations().iter().enumerate() {
            if let Ok(idx) = grid.locate(s.lat, s.lon) {
                pixels.push(idx);
                observed.push(s.value);
                keep.push(j);
            }
        }
        if keep.is_empty() {
            return Err(Error::AllStationsOutOfBounds);
        }
        let pick = |v: &[f64]| keep.iter().map(|&j| v[j]).collect::<Vec<_>>();
        let weights = TaperWeights::from_raw(pick(&weights.distances), pick(&weights.raw))?;
        Ok(StationTarget {
            rows: grid.rows(),
            cols: grid.cols(),
            pixels,
            observed,
            weights,
        })
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn weights(&self) -> &TaperWeights {
        &self.weights
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Predictions at station pixels and the validity mask (missing pixels
    /// are invalid).
    pub fn gather(&self, pred: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let p: Vec<f64> = self.pixels.iter().map(|&i| pred[i]).collect();
        let valid = p.iter().map(|v| !is_missing(*v)).collect();
        (p, valid)
    }
}

/// Total loss and its gradient with respect to every pixel of `pred`.
///
/// `pred` is a flat row-major field on the target's geometry and may hold
/// negative values (training runs before the non-negativity clamp). `truth`
/// is only read when `cfg` mixes in a full-grid term.
pub fn total_loss(
    pred: &[f64],
    truth: Option<&Grid>,
    target: &StationTarget,
    cfg: &TotalLossConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let n = target.rows * target.cols;
    if pred.len() != n {
        return Err(Error::ShapeMismatch(format!("{} predictions for {n} pixels", pred.len())));
    }
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;

    let (station_pred, valid) = target.gather(pred);
    let needs_stations = cfg.mix_taper > 0.0 || cfg.other_domain == OtherDomain::Stations && cfg.mix_other > 0.0;
    if needs_stations && !valid.iter().any(|v| *v) {
        return Err(Error::EmptyAfterMasking);
    }

    if cfg.mix_taper > 0.0 {
        let l = taper_loss(&station_pred, &target.observed, &target.weights, LossForm::Normalized, Some(&valid))?;
        let g = taper_loss_grad(&station_pred, &target.observed, &target.weights, LossForm::Normalized, Some(&valid))?;
        loss += cfg.mix_taper * l;
        for (&px, gj) in target.pixels.iter().zip(g) {
            grad[px] += cfg.mix_taper * gj;
        }
    }

    if cfg.mix_other > 0.0 {
        match cfg.other_domain {
            OtherDomain::Stations => {
                let count = valid.iter().filter(|v| **v).count() as f64;
                let mut acc = 0.0;
                for (j, &px) in target.pixels.iter().enumerate() {
                    if !valid[j] {
                        continue;
                    }
                    let r = station_pred[j] - target.observed[j];
                    let (l, g) = other_term(cfg.other, r);
                    acc += l;
                    grad[px] += cfg.mix_other * g / count;
                }
                loss += cfg.mix_other * acc / count;
            }
            OtherDomain::FullGrid => {
                let truth = truth.ok_or_else(|| {
                    Error::InvalidConfig("a full-grid loss term needs a reference grid".into())
                })?;
                if truth.shape() != (target.rows, target.cols) {
                    return Err(Error::ShapeMismatch(format!(
                        "reference {}x{} vs target {}x{}",
                        truth.rows(),
                        truth.cols(),
                        target.rows,
                        target.cols
                    )));
                }
                let t = truth.values();
                let count = pred
                    .iter()
                    .zip(t)
                    .filter(|(p, t)| !is_missing(**p) && !is_missing(**t))
                    .count();
                if count == 0 {
                    return Err(Error::EmptyAfterMasking);
                }
                let count = count as f64;
                let mut acc = 0.0;
                for i in 0..n {
                    if is_missing(pred[i]) || is_missing(t[i]) {
                        continue;
                    }
                    let (l, g) = other_term(cfg.other, pred[i] - t[i]);
                    acc += l;
                    grad[i] += cfg.mix_other * g / count;
                }
                loss += cfg.mix_other * acc / count;
            }
        }
    }
    Ok((loss, grad))
}

/// Per-sample value and derivative of the plain term; the L1 subgradient at
/// zero residual is zero.
#[inline]
fn other_term(kind: OtherLoss, r: f64) -> (f64, f64) {
    match kind {
        OtherLoss::L1 => {
            let g = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            (r.abs(), g)
        }
        OtherLoss::L2 => (r * r, 2.0 * r),
    }
}

/// Convenience wrapper resolving `set` against `pred_grid` on every call.
pub fn total_loss_grids(
    pred_grid: &Grid,
    truth_grid: &Grid,
    set: &StationSet,
    kernel: &KernelSpec,
    metric: DistanceMetric,
    cfg: &TotalLossConfig,
) -> Result<(f64, Vec<f64>)> {
    pred_grid.check_same_geometry(truth_grid)?;
    let target = StationTarget::new(pred_grid, set, kernel, metric)?;
    total_loss(pred_grid.values(), Some(truth_grid), &target, cfg)
}

/// Taper loss of `pred_grid` against `set`, reading predictions at station pixels.
pub fn station_taper_loss(
    pred_grid: &Grid,
    set: &StationSet,
    kernel: &KernelSpec,
    metric: DistanceMetric,
    form: LossForm,
) -> Result<f64> {
    let weights = TaperWeights::for_stations(set, kernel, metric)?;
    let samples = sample_at_stations(pred_grid, set)?;
    taper_loss(&samples.values, &set.values(), &weights, form, Some(&samples.valid))
}
