//! Trainable per-pixel calibrators and the full-batch training loop.
//!
//! The training forward pass is unclamped so gradients stay exact; the
//! non-negativity clamp only happens in [`Calibrator::apply`].

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{is_missing, GeoTransform, Grid, MISSING};
use crate::stations::{DistanceMetric, Station, StationSet};
use crate::synth::SplitMixRng;
use crate::taper::{total_loss, KernelSpec, StationTarget, TotalLossConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCalibrator {
    pub a: f64,
    pub b: f64,
}

impl Default for AffineCalibrator {
    fn default() -> Self {
        AffineCalibrator { a: 1.0, b: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given pre-activation `z` and output `h`.
    fn deriv(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

/// One-hidden-layer perceptron over per-pixel features.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCalibrator {
    pub activation: Activation,
    /// Adds the 3×3 neighborhood mean as a second input.
    pub neighborhood: bool,
    pub hidden: usize,
    /// `hidden × n_inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpCalibrator {
    /// Glorot-uniform weights, zero biases.
    pub fn new(hidden: usize, activation: Activation, neighborhood: bool, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden layer needs at least one unit".into()));
        }
        let n_in = if neighborhood { 2 } else { 1 };
        let mut rng = SplitMixRng::new(seed);
        let s1 = (6.0 / (n_in + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = (0..hidden * n_in).map(|_| rng.uniform(-s1, s1)).collect();
        let w2 = (0..hidden).map(|_| rng.uniform(-s2, s2)).collect();
        Ok(MlpCalibrator {
            activation,
            neighborhood,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        })
    }

    pub fn n_inputs(&self) -> usize {
        if self.neighborhood {
            2
        } else {
            1
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let n_in = self.n_inputs();
        if self.hidden == 0 || self.w1.len() != self.hidden * n_in || self.b1.len() != self.hidden || self.w2.len() != self.hidden {
            return Err(Error::InvalidConfig("inconsistent layer shapes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Affine(AffineCalibrator),
    Mlp(MlpCalibrator),
}

impl fmt::Display for Calibrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Calibrator::Affine(m) => write!(f, "affine a={} b={}", m.a, m.b),
            Calibrator::Mlp(m) => write!(
                f,
                "mlp hidden={} activation={:?} neighborhood={}",
                m.hidden, m.activation, m.neighborhood
            ),
        }
    }
}

/// Per-pixel model inputs for one grid. Missing pixels have `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    n_in: usize,
    data: Vec<f64>,
    present: Vec<bool>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_in..(i + 1) * self.n_in]
    }
}

/// Mean of the non-missing values in the 3×3 window around each pixel,
/// clipped at the borders.
pub fn neighborhood_mean(grid: &Grid) -> Vec<f64> {
    let (rows, cols) = grid.shape();
    let v = grid.values();
    let mut out = vec![MISSING; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (mut sum, mut n) = (0.0, 0usize);
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    let x = v[rr * cols + cc];
                    if !is_missing(x) {
                        sum += x;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out[r * cols + c] = sum / n as f64;
            }
        }
    }
    out
}

impl Calibrator {
    pub fn affine(a: f64, b: f64) -> Self {
        Calibrator::Affine(AffineCalibrator { a, b })
    }

    /// Identity affine model (`a = 1`, `b = 0`).
    pub fn default_affine() -> Self {
        Calibrator::Affine(AffineCalibrator::default())
    }

    pub fn n_params(&self) -> usize {
        match self {
            Calibrator::Affine(_) => 2,
            Calibrator::Mlp(m) => m.w1.len() + m.b1.len() + m.w2.len() + 1,
        }
    }

    /// Flat parameter vector; order matches [`set_params`](Self::set_params).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Calibrator::Affine(m) => vec![m.a, m.b],
            Calibrator::Mlp(m) => {
                let mut p = Vec::with_capacity(self.n_params());
                p.extend_from_slice(&m.w1);
                p.extend_from_slice(&m.b1);
                p.extend_from_slice(&m.w2);
                p.push(m.b2);
                p
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!("{} parameters for a model with {}", p.len(), self.n_params())));
        }
        match self {
            Calibrator::Affine(m) => {
                m.a = p[0];
                m.b = p[1];
            }
            Calibrator::Mlp(m) => {
                let (n1, h) = (m.w1.len(), m.hidden);
                m.w1.copy_from_slice(&p[..n1]);
                m.b1.copy_from_slice(&p[n1..n1 + h]);
                m.w2.copy_from_slice(&p[n1 + h..n1 + 2 * h]);
                m.b2 = p[n1 + 2 * h];
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn features(&self, grid: &Grid) -> Features {
        let v = grid.values();
        let present: Vec<bool> = v.iter().map(|x| !is_missing(*x)).collect();
        match self {
            Calibrator::Mlp(m) if m.neighborhood => {
                let mean = neighborhood_mean(grid);
                let data = v.iter().zip(&mean).flat_map(|(x, m)| [*x, *m]).collect();
                Features { n_in: 2, data, present }
            }
            _ => Features {
                n_in: 1,
                data: v.to_vec(),
                present,
            },
        }
    }

    /// Unclamped forward pass; missing inputs give missing outputs.
    pub fn forward(&self, f: &Features) -> Vec<f64> {
        (0..f.len())
            .map(|i| if f.present[i] { self.forward_one(f.row(i)) } else { MISSING })
            .collect()
    }

    fn forward_one(&self, x: &[f64]) -> f64 {
        match self {
            Calibrator::Affine(m) => m.a * x[0] + m.b,
            Calibrator::Mlp(m) => {
                let n_in = m.n_inputs();
                let mut y = m.b2;
                for k in 0..m.hidden {
                    let w = &m.w1[k * n_in..(k + 1) * n_in];
                    let z = m.b1[k] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                    y += m.w2[k] * m.activation.eval(z);
                }
                y
            }
        }
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂y` per pixel. Pixels with a
    /// zero output gradient are skipped, in index order.
    pub fn backward(&self, f: &Features, grad_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params());
        for (i, &g) in grad_out.iter().enumerate().take(f.len()) {
            if g == 0.0 || !f.present[i] {
                continue;
            }
            let x = f.row(i);
            match self {
                Calibrator::Affine(_) => {
                    grad[0] += g * x[0];
                    grad[1] += g;
                }
                Calibrator::Mlp(m) => {
                    let n_in = m.n_inputs();
                    let (n1, h) = (m.w1.len(), m.hidden);
                    for k in 0..h {
                        let w = &m.w1[k * n_in..(k + 1) * n_in];
                        let z = m.b1[k] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                        let a = m.activation.eval(z);
                        grad[n1 + h + k] += g * a;
                        let dz = g * m.w2[k] * m.activation.deriv(z, a);
                        if dz != 0.0 {
                            for (q, xq) in x.iter().enumerate() {
                                grad[k * n_in + q] += dz * xq;
                            }
                            grad[n1 + k] += dz;
                        }
                    }
                    grad[n1 + 2 * h] += g;
                }
            }
        }
    }

    /// Inference: forward pass clamped at 0, missing pixels preserved.
    pub fn apply(&self, grid: &Grid) -> Result<Grid> {
        let out = self
            .forward(&self.features(grid))
            .into_iter()
            .map(|y| if is_missing(y) { y } else { y.max(0.0) })
            .collect();
        grid.with_values(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&momentum),
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, opt: &Optimizer, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match *opt {
            Optimizer::Sgd { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Seeds model initialization where the caller builds the model from
    /// this config; full-batch training itself draws no random numbers.
    pub seed: u64,
    pub kernel: KernelSpec,
    pub metric: DistanceMetric,
    pub loss: TotalLossConfig,
    /// Stop after this many epochs without a `min_delta` improvement.
    pub patience: Option<usize>,
    pub min_delta: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, optimizer: Optimizer, kernel: KernelSpec) -> Result<Self> {
        let cfg = TrainConfig {
            optimizer,
            epochs,
            seed: 0,
            kernel,
            metric: DistanceMetric::HaversineKm,
            loss: TotalLossConfig::default(),
            patience: Some(20),
            min_delta: 1e-7,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig("min_delta must be non-negative".into()));
        }
        self.optimizer.validate()?;
        self.kernel.validate()?;
        self.loss.validate()
    }
}

/// One training frame: the model input, station observations on its
/// geometry and, for full-grid terms, a reference field.
#[derive(Debug, Clone)]
pub struct TrainSample<'a> {
    pub satellite: &'a Grid,
    pub stations: &'a StationSet,
    pub truth: Option<&'a Grid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Calibrator,
    /// Mean loss per epoch, evaluated before that epoch's update.
    pub history: Vec<f64>,
    pub stopped_early: bool,
}

struct Prepared<'a> {
    features: Features,
    target: StationTarget,
    truth: Option<&'a Grid>,
}

/// Mean total loss over `samples` and its parameter gradient.
fn loss_and_grad(model: &Calibrator, prepared: &[Prepared<'_>], cfg: &TotalLossConfig) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    for p in prepared {
        let pred = model.forward(&p.features);
        let truth = if cfg.needs_truth_grid() { p.truth } else { None };
        let (l, g) = total_loss(&pred, truth, &p.target, cfg)?;
        loss += l;
        model.backward(&p.features, &g, &mut grad);
    }
    let n = prepared.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn prepare<'a>(model: &Calibrator, samples: &[TrainSample<'a>], cfg: &TrainConfig) -> Result<Vec<Prepared<'a>>> {
    samples
        .iter()
        .map(|s| {
            if cfg.loss.needs_truth_grid() {
                let t = s
                    .truth
                    .ok_or_else(|| Error::InvalidConfig("full-grid loss needs a truth grid per sample".into()))?;
                s.satellite.check_same_geometry(t)?;
            }
            Ok(Prepared {
                features: model.features(s.satellite),
                target: StationTarget::new(s.satellite, s.stations, &cfg.kernel, cfg.metric)?,
                truth: s.truth,
            })
        })
        .collect()
}

/// Full-batch gradient descent on the mean total loss over `samples`.
pub fn train(model: Calibrator, samples: &[TrainSample<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    if let Calibrator::Mlp(m) = &model {
        m.check_shapes()?;
    }
    if !model.is_finite() {
        return Err(Error::InvalidConfig("model parameters must be finite".into()));
    }
    let prepared = prepare(&model, samples, cfg)?;
    let mut model = model;
    let mut params = model.params();
    let mut state = OptState::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best, mut since_best) = (f64::INFINITY, 0usize);
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(&model, &prepared, &cfg.loss)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        history.push(loss);
        if loss < best - cfg.min_delta {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break;
            }
        }
        state.step(&cfg.optimizer, &mut params, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        model.set_params(&params)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        stopped_early,
    })
}

/// Mean total loss of `model` over `samples`, no update.
pub fn evaluate_loss(model: &Calibrator, samples: &[TrainSample<'_>], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let prepared = prepare(model, samples, cfg)?;
    loss_and_grad(model, &prepared, &cfg.loss)
}

/// Largest relative gap between analytic parameter gradients and central
/// differences (step 1e-5) of the total loss on a random instance drawn
/// from `seed`. ReLU networks are probed at a point where no
/// pre-activation lies near the kink.
pub fn backprop_check(model: &Calibrator, seed: u64) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut rng = SplitMixRng::new(seed);
    let (rows, cols) = (6, 7);
    let t = GeoTransform::north_up(30.0, 110.0, 0.25)?;
    let sat = Grid::from_fn(rows, cols, t, 0, |_, _| rng.uniform(0.0, 2.0))?;
    let truth = Grid::from_fn(rows, cols, t, 0, |_, _| rng.uniform(0.0, 2.0))?;
    let n_st = 5;
    let picks: Vec<usize> = {
        let mut idx: Vec<usize> = (0..rows * cols).collect();
        rng.shuffle(&mut idx);
        idx.truncate(n_st);
        idx
    };
    let stations = picks
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let (lat, lon) = t.index_to_coords(p / cols, p % cols);
            Station::new(format!("C{j}"), lat, lon, rng.uniform(0.0, 2.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let stations = StationSet::new(stations)?;

    let cfg = TrainConfig {
        metric: DistanceMetric::GridPixels(t),
        ..TrainConfig::new(1, Optimizer::default(), KernelSpec::exponential(0.5)?)?
    };
    let samples = [TrainSample {
        satellite: &sat,
        stations: &stations,
        truth: Some(&truth),
    }];

    if let Calibrator::Mlp(m) = model {
        m.check_shapes()?;
        if m.activation == Activation::Relu && near_kink(m, &model.features(&sat), 1e-3) {
            return backprop_check(model, seed.wrapping_add(0x9E37_79B9));
        }
    }

    let (_, analytic) = evaluate_loss(model, &samples, &cfg)?;
    let base = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + H;
        probe.set_params(&p)?;
        let (up, _) = evaluate_loss(&probe, &samples, &cfg)?;
        p[i] = base[i] - H;
        probe.set_params(&p)?;
        let (down, _) = evaluate_loss(&probe, &samples, &cfg)?;
        let numeric = (up - down) / (2.0 * H);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

fn near_kink(m: &MlpCalibrator, f: &Features, margin: f64) -> bool {
    let n_in = m.n_inputs();
    (0..f.len()).filter(|i| f.present[*i]).any(|i| {
        let x = f.row(i);
        (0..m.hidden).any(|k| {
            let z = m.b1[k] + m.w1[k * n_in..(k + 1) * n_in].iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            z.abs() < margin
        })
    })
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"TCAL1";

fn put_record(out: &mut Vec<u8>, key: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model as named little-endian f64 records after the
/// `TCAL1` magic.
pub fn checkpoint_bytes(model: &Calibrator) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    match model {
        Calibrator::Affine(m) => {
            out.extend_from_slice(&2u32.to_le_bytes());
            put_record(&mut out, "affine.a", &[1], &[m.a]);
            put_record(&mut out, "affine.b", &[1], &[m.b]);
        }
        Calibrator::Mlp(m) => {
            let act = match m.activation {
                Activation::Relu => 0.0,
                Activation::Tanh => 1.0,
            };
            out.extend_from_slice(&6u32.to_le_bytes());
            put_record(&mut out, "mlp.activation", &[1], &[act]);
            put_record(&mut out, "mlp.neighborhood", &[1], &[m.neighborhood as u8 as f64]);
            put_record(&mut out, "mlp.w1", &[m.hidden, m.n_inputs()], &m.w1);
            put_record(&mut out, "mlp.b1", &[m.hidden], &m.b1);
            put_record(&mut out, "mlp.w2", &[m.hidden], &m.w2);
            put_record(&mut out, "mlp.b2", &[1], &[m.b2]);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(Error::TruncatedFile)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Calibrator> {
    if buf.len() < CHECKPOINT_MAGIC.len() {
        return Err(Error::TruncatedFile);
    }
    if &buf[..5] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut cur = Cursor { buf, pos: 5 };
    let count = cur.u32()?;
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let klen = cur.u16()? as usize;
        let key = String::from_utf8(cur.take(klen)?.to_vec()).map_err(|_| Error::BadCheckpoint("key is not UTF-8".into()))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::BadCheckpoint("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::BadCheckpoint("shape overflow".into()))?;
        let bytes = cur.take(n.checked_mul(8).ok_or(Error::TruncatedFile)?)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if records.iter().any(|r| r.0 == key) {
            return Err(Error::BadCheckpoint(format!("duplicate record `{key}`")));
        }
        records.push((key, shape, values));
    }
    if cur.pos != buf.len() {
        return Err(Error::BadCheckpoint("trailing bytes".into()));
    }
    let get = |k: &str| {
        records
            .iter()
            .find(|r| r.0 == k)
            .map(|r| (&r.1, &r.2))
            .ok_or_else(|| Error::BadCheckpoint(format!("missing record `{k}`")))
    };
    let scalar = |k: &str| -> Result<f64> {
        let (_, v) = get(k)?;
        if v.len() != 1 {
            return Err(Error::BadCheckpoint(format!("`{k}` is not a scalar")));
        }
        Ok(v[0])
    };
    let model = if records.iter().any(|r| r.0.starts_with("affine.")) {
        Calibrator::affine(scalar("affine.a")?, scalar("affine.b")?)
    } else {
        let activation = match scalar("mlp.activation")? {
            0.0 => Activation::Relu,
            1.0 => Activation::Tanh,
            a => return Err(Error::BadCheckpoint(format!("unknown activation code {a}"))),
        };
        let neighborhood = scalar("mlp.neighborhood")? != 0.0;
        let (shape, w1) = get("mlp.w1")?;
        if shape.len() != 2 {
            return Err(Error::BadCheckpoint("`mlp.w1` must be two-dimensional".into()));
        }
        let m = MlpCalibrator {
            activation,
            neighborhood,
            hidden: shape[0],
            w1: w1.clone(),
            b1: get("mlp.b1")?.1.clone(),
            w2: get("mlp.w2")?.1.clone(),
            b2: scalar("mlp.b2")?,
        };
        m.check_shapes().map_err(|_| Error::BadCheckpoint("inconsistent layer shapes".into()))?;
        if shape[1] != m.n_inputs() {
            return Err(Error::BadCheckpoint("input width does not match the neighborhood flag".into()));
        }
        Calibrator::Mlp(m)
    };
    if !model.is_finite() {
        return Err(Error::BadCheckpoint("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn write_checkpoint(model: &Calibrator, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(model))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Calibrator> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
