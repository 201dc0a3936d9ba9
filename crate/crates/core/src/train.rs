//! Toy-scale training: synthetic tone-in-noise pairs, an L1 magnitude plus
//! negative SI-SNR objective, AdamW, finite-difference gradient checks and a
//! small training loop.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::spectral::{ComplexSpectrogram, Stft, StftConfig};

/// Stabilizer inside magnitudes, SI-SNR ratios and the scale projection.
pub const LOSS_EPS: f64 = 1e-8;

const DB: f64 = 10.0 / core::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NoiseKind {
    White,
    /// White noise through a one-pole low-pass at roughly 2 kHz.
    BandLimited,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyDatasetConfig {
    pub n_items: usize,
    /// Seconds per item.
    pub duration: f64,
    pub sample_rate: u32,
    /// Mixing SNR in dB; `f64::INFINITY` yields noise-free pairs.
    pub snr_db: f64,
    /// Adds a linear chirp to every clean signal.
    pub chirp: bool,
    pub noise: NoiseKind,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            duration: 0.15,
            sample_rate: 16_000,
            snr_db: 0.0,
            chirp: true,
            noise: NoiseKind::White,
        }
    }
}

impl ToyDatasetConfig {
    pub fn samples(&self) -> usize {
        libm::round(self.duration * self.sample_rate as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || self.sample_rate == 0 || self.snr_db.is_nan() {
            return Err(Error::Config(alloc::format!("invalid toy dataset config: {self:?}")));
        }
        Ok(())
    }
}

/// `10 log10(|clean|^2 / |noisy - clean|^2)`.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let s: f64 = clean.iter().map(|x| x * x).sum();
    let n: f64 = clean.iter().zip(noisy).map(|(c, y)| (y - c) * (y - c)).sum();
    DB * libm::log(s / n)
}

/// Sum of 2-4 random sinusoids between 100 Hz and 4 kHz (plus an optional
/// chirp), peak-normalized to 0.5, and the same signal with seeded noise
/// added at `cfg.snr_db`. Returns `(clean, noisy)`.
pub fn synth_pair(cfg: &ToyDatasetConfig, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.samples();
    let fs = cfg.sample_rate as f64;
    let mut clean = vec![0.0; n];
    let tones = 2 + rng.below(3);
    for _ in 0..tones {
        let f = rng.uniform(100.0, 4000.0);
        let a = rng.uniform(0.2, 1.0);
        let ph = rng.uniform(0.0, 2.0 * PI);
        for (i, c) in clean.iter_mut().enumerate() {
            *c += a * libm::sin(2.0 * PI * f * i as f64 / fs + ph);
        }
    }
    if cfg.chirp {
        let (f0, f1) = (rng.uniform(200.0, 1000.0), rng.uniform(1000.0, 3000.0));
        let dur = n as f64 / fs;
        let k = (f1 - f0) / dur;
        for (i, c) in clean.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *c += 0.5 * libm::sin(2.0 * PI * (f0 * t + 0.5 * k * t * t));
        }
    }
    let peak = clean.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        clean.iter_mut().for_each(|c| *c *= 0.5 / peak);
    }

    let mut noise: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    if cfg.noise == NoiseKind::BandLimited {
        let a = libm::exp(-2.0 * PI * 2000.0 / fs);
        let mut y = 0.0;
        for v in noise.iter_mut() {
            y = a * y + (1.0 - a) * *v;
            *v = y;
        }
    }
    if cfg.snr_db == f64::INFINITY {
        return (clean.clone(), clean);
    }
    let ps: f64 = clean.iter().map(|x| x * x).sum();
    let pn: f64 = noise.iter().map(|x| x * x).sum();
    let g = libm::sqrt(ps / (pn * libm::pow(10.0, cfg.snr_db / 10.0)));
    let noisy = clean.iter().zip(&noise).map(|(c, v)| c + g * v).collect();
    (clean, noisy)
}

/// Scale-invariant SNR in dB of `est` against `reference`, both mean-removed.
pub fn si_snr_db(est: &[f64], reference: &[f64]) -> f64 {
    si_snr_parts(est, reference).value
}

struct SiSnr {
    value: f64,
    e: Vec<f64>,
    c: Vec<f64>,
    alpha: f64,
    cc: f64,
    num: f64,
    den: f64,
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn si_snr_parts(est: &[f64], reference: &[f64]) -> SiSnr {
    let e = centered(est);
    let c = centered(reference);
    let cc = dot(&c, &c) + LOSS_EPS;
    let alpha = dot(&e, &c) / cc;
    let num = alpha * alpha * cc + LOSS_EPS;
    let den = e
        .iter()
        .zip(&c)
        .map(|(x, y)| (x - alpha * y) * (x - alpha * y))
        .sum::<f64>()
        + LOSS_EPS;
    SiSnr {
        value: DB * libm::log(num / den),
        e,
        c,
        alpha,
        cc,
        num,
        den,
    }
}

/// Gradient of `si_snr_db(est, reference)` with respect to `est`.
fn si_snr_grad(p: &SiSnr) -> Vec<f64> {
    // d num = 2 alpha c; d den = 2 n - 2 <n, c> / cc * c with n = e - alpha c
    let n: Vec<f64> = p.e.iter().zip(&p.c).map(|(x, y)| x - p.alpha * y).collect();
    let nc = dot(&n, &p.c) / p.cc;
    let mut g: Vec<f64> = n
        .iter()
        .zip(&p.c)
        .map(|(nv, cv)| DB * (2.0 * p.alpha * cv / p.num - (2.0 * nv - 2.0 * nc * cv) / p.den))
        .collect();
    let m = g.iter().sum::<f64>() / g.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v -= m);
    g
}

fn mag(re: f64, im: f64) -> f64 {
    libm::sqrt(re * re + im * im + LOSS_EPS * LOSS_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    /// Mean absolute magnitude difference over all bins and frames.
    pub magnitude: f64,
    /// Negative SI-SNR in dB.
    pub neg_si_snr: f64,
    pub total: f64,
}

fn check_pair(e: &ComplexSpectrogram, c: &ComplexSpectrogram, ew: &[f64], cw: &[f64]) -> Result<()> {
    if e.real.shape() != c.real.shape() {
        return Err(Error::Shape {
            op: "loss",
            left: e.real.shape().to_vec(),
            right: c.real.shape().to_vec(),
        });
    }
    if ew.len() != cw.len() || ew.is_empty() {
        return Err(Error::Shape {
            op: "loss",
            left: vec![ew.len()],
            right: vec![cw.len()],
        });
    }
    Ok(())
}

fn magnitude_term(e: &ComplexSpectrogram, c: &ComplexSpectrogram) -> f64 {
    let n = e.real.len().max(1) as f64;
    let (er, ei, cr, ci) = (e.real.data(), e.imag.data(), c.real.data(), c.imag.data());
    (0..er.len())
        .map(|i| (mag(er[i], ei[i]) - mag(cr[i], ci[i])).abs())
        .sum::<f64>()
        / n
}

/// L1 magnitude distance plus negative SI-SNR, weighted 1:1.
pub fn loss(
    enhanced_spec: &ComplexSpectrogram,
    clean_spec: &ComplexSpectrogram,
    enhanced_wav: &[f64],
    clean_wav: &[f64],
) -> Result<LossTerms> {
    check_pair(enhanced_spec, clean_spec, enhanced_wav, clean_wav)?;
    let magnitude = magnitude_term(enhanced_spec, clean_spec);
    let neg_si_snr = -si_snr_db(enhanced_wav, clean_wav);
    Ok(LossTerms {
        magnitude,
        neg_si_snr,
        total: magnitude + neg_si_snr,
    })
}

/// [`loss`] together with its gradients with respect to `enhanced_spec`
/// (magnitude term only) and `enhanced_wav`.
pub fn loss_grad(
    enhanced_spec: &ComplexSpectrogram,
    clean_spec: &ComplexSpectrogram,
    enhanced_wav: &[f64],
    clean_wav: &[f64],
) -> Result<(LossTerms, ComplexSpectrogram, Vec<f64>)> {
    check_pair(enhanced_spec, clean_spec, enhanced_wav, clean_wav)?;
    let magnitude = magnitude_term(enhanced_spec, clean_spec);
    let n = enhanced_spec.real.len().max(1) as f64;
    let mut dspec = ComplexSpectrogram::zeros(enhanced_spec.cfg, enhanced_spec.frames());
    let (er, ei) = (enhanced_spec.real.data(), enhanced_spec.imag.data());
    let (cr, ci) = (clean_spec.real.data(), clean_spec.imag.data());
    for i in 0..er.len() {
        let me = mag(er[i], ei[i]);
        let diff = me - mag(cr[i], ci[i]);
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        dspec.real.data_mut()[i] = sign * er[i] / (me * n);
        dspec.imag.data_mut()[i] = sign * ei[i] / (me * n);
    }
    let parts = si_snr_parts(enhanced_wav, clean_wav);
    let dwav: Vec<f64> = si_snr_grad(&parts).into_iter().map(|g| -g).collect();
    let neg_si_snr = -parts.value;
    Ok((
        LossTerms {
            magnitude,
            neg_si_snr,
            total: magnitude + neg_si_snr,
        },
        dspec,
        dwav,
    ))
}

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update:
///
/// ```text
/// w <- w - lr * wd * w
/// m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
/// w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn optimizer_step(weights: &mut [f64], grads: &[f64], state: &mut OptimizerState, opt: &AdamW) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() || state.v.len() != weights.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            left: vec![weights.len(), state.m.len()],
            right: vec![grads.len(), state.v.len()],
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(opt.beta1, t);
    let bc2 = 1.0 - libm::pow(opt.beta2, t);
    for i in 0..weights.len() {
        let g = grads[i];
        weights[i] -= opt.lr * opt.weight_decay * weights[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        weights[i] -= opt.lr * mhat / (libm::sqrt(vhat) + opt.eps);
    }
    Ok(())
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// One training or evaluation item with its spectrograms precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub clean_spec: ComplexSpectrogram,
    pub noisy_spec: ComplexSpectrogram,
}

impl Example {
    pub fn new(clean: Vec<f64>, noisy: Vec<f64>, stft: &Stft) -> Result<Self> {
        Ok(Self {
            clean_spec: stft.analyze(&clean)?,
            noisy_spec: stft.analyze(&noisy)?,
            clean,
            noisy,
        })
    }

    /// Samples compared by the waveform term: the part of the reconstruction
    /// covered by at least two frames' worth of overlap-add.
    pub fn interior(&self) -> Range<usize> {
        self.noisy_spec.cfg.interior(self.noisy_spec.frames())
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl ToyDataset {
    /// `cfg.n_items` training pairs and `val_items` held-out pairs, drawn from
    /// independent streams of one seed.
    pub fn generate(cfg: &ToyDatasetConfig, val_items: usize, stft: &StftConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let engine = Stft::new(*stft)?;
        let mut root = Rng::new(seed);
        let mut train_rng = root.fork();
        let mut val_rng = root.fork();
        let make = |n: usize, rng: &mut Rng| -> Result<Vec<Example>> {
            (0..n)
                .map(|_| {
                    let (c, y) = synth_pair(cfg, rng);
                    Example::new(c, y, &engine)
                })
                .collect()
        };
        Ok(Self {
            train: make(cfg.n_items, &mut train_rng)?,
            val: make(val_items, &mut val_rng)?,
        })
    }
}

/// Loss of `model` on one example and, optionally, its parameter gradient.
pub fn example_loss(model: &Model, stft: &Stft, ex: &Example, grad: bool) -> Result<(LossTerms, Option<Vec<f64>>)> {
    let (enh, trace) = model.forward_trace(&ex.noisy_spec)?;
    let wav = stft.synthesize(&enh);
    let r = ex.interior();
    if !grad {
        return Ok((loss(&enh, &ex.clean_spec, &wav[r.clone()], &ex.clean[r])?, None));
    }
    let (terms, mut dspec, dwav) = loss_grad(&enh, &ex.clean_spec, &wav[r.clone()], &ex.clean[r.clone()])?;
    let mut full = vec![0.0; wav.len()];
    full[r].copy_from_slice(&dwav);
    let dsyn = stft.synthesize_adjoint(&full, enh.frames())?;
    for (d, s) in dspec.real.data_mut().iter_mut().zip(dsyn.real.data()) {
        *d += s;
    }
    for (d, s) in dspec.imag.data_mut().iter_mut().zip(dsyn.imag.data()) {
        *d += s;
    }
    Ok((terms, Some(model.backward(&trace, &dspec)?)))
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn value(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<f64>>;
}

/// Mean [`example_loss`] of a model over a batch.
pub struct BatchObjective<'a> {
    pub model: Model,
    pub stft: &'a Stft,
    pub batch: &'a [Example],
}

impl Objective for BatchObjective<'_> {
    fn params(&self) -> &[f64] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.model.params_mut()
    }

    fn value(&self) -> Result<f64> {
        let mut total = 0.0;
        for ex in self.batch {
            total += example_loss(&self.model, self.stft, ex, false)?.0.total;
        }
        Ok(total / self.batch.len() as f64)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.model.num_params()];
        for ex in self.batch {
            let (_, gi) = example_loss(&self.model, self.stft, ex, true)?;
            for (a, b) in g.iter_mut().zip(gi.expect("gradient requested")) {
                *a += b;
            }
        }
        let k = 1.0 / self.batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= k);
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
/// vanishing coordinates from amplifying finite-difference round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient with central differences (step `h`) at
/// `n_samples` distinct coordinates drawn from `rng`.
pub fn grad_check<O: Objective>(obj: &mut O, n_samples: usize, h: f64, rng: &mut Rng) -> Result<GradCheckReport> {
    let analytic = obj.gradient()?;
    let mut idx: Vec<usize> = (0..analytic.len()).collect();
    let n = n_samples.min(idx.len());
    // partial Fisher-Yates
    for i in 0..n {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
    }
    let mut samples = Vec::with_capacity(n);
    for &index in &idx[..n] {
        let w0 = obj.params()[index];
        obj.params_mut()[index] = w0 + h;
        let fp = obj.value()?;
        obj.params_mut()[index] = w0 - h;
        let fm = obj.value()?;
        obj.params_mut()[index] = w0;
        let numeric = (fp - fm) / (2.0 * h);
        samples.push(GradSample {
            index,
            analytic: analytic[index],
            numeric,
            rel_error: relative_error(analytic[index], numeric),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { samples, max_rel_error })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            optimizer: AdamW {
                lr: 3e-3,
                ..AdamW::default()
            },
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-item loss seen during the epoch, before each item's update.
    pub train_loss: f64,
    /// Mean held-out SI-SNR of the enhanced signals.
    pub val_sisnr_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Mean held-out SI-SNR of the unprocessed noisy signals.
    pub noisy_val_sisnr_db: f64,
    pub best_epoch: usize,
    pub best_params: Vec<f64>,
}

impl TrainReport {
    /// Final held-out SI-SNR minus that of the noisy inputs.
    pub fn final_improvement_db(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.val_sisnr_db) - self.noisy_val_sisnr_db
    }
}

/// Mean SI-SNR over `items` of the model output (or of the noisy input when
/// `model` is `None`), measured on each item's interior.
pub fn mean_si_snr(model: Option<&Model>, stft: &Stft, items: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in items {
        let r = ex.interior();
        let v = match model {
            Some(m) => si_snr_db(&stft.synthesize(&m.enhance(&ex.noisy_spec)?)[r.clone()], &ex.clean[r]),
            None => si_snr_db(&ex.noisy[r.clone()], &ex.clean[r]),
        };
        total += v;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Minibatch AdamW training. Batches are reshuffled every epoch with `rng`;
/// per-item losses are reduced in item order so the history does not depend
/// on the visiting order's floating-point summation. Aborts with
/// [`Error::Diverged`] on a non-finite loss.
pub fn train_toy(model: &mut Model, data: &ToyDataset, opts: &TrainOptions, rng: &mut Rng) -> Result<TrainReport> {
    if data.train.is_empty() || opts.batch_size == 0 {
        return Err(Error::Config(alloc::string::String::from(
            "training needs at least one item and a positive batch size",
        )));
    }
    let stft = Stft::new(model.config().stft)?;
    let mut state = OptimizerState::new(model.num_params());
    let noisy_val_sisnr_db = mean_si_snr(None, &stft, &data.val)?;
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best = (f64::NEG_INFINITY, 0, model.params().to_vec());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut item_loss = vec![0.0; data.train.len()];
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(opts.batch_size) {
            step += 1;
            let mut grad = vec![0.0; model.num_params()];
            for &i in batch {
                let (terms, g) = example_loss(model, &stft, &data.train[i], true)?;
                if !terms.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: terms.total,
                    });
                }
                item_loss[i] = terms.total;
                for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *a += b;
                }
            }
            let k = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= k);
            if let Some(c) = opts.clip_norm {
                clip_global_norm(&mut grad, c);
            }
            optimizer_step(model.params_mut(), &grad, &mut state, &opts.optimizer)?;
        }
        let train_loss = item_loss.iter().sum::<f64>() / item_loss.len() as f64;
        let val_sisnr_db = if data.val.is_empty() {
            f64::NAN
        } else {
            mean_si_snr(Some(model), &stft, &data.val)?
        };
        if !(val_sisnr_db <= best.0) {
            best = (val_sisnr_db, epoch, model.params().to_vec());
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_sisnr_db,
        });
    }
    Ok(TrainReport {
        history,
        noisy_val_sisnr_db,
        best_epoch: best.1,
        best_params: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[test]
    fn infinite_snr_is_clean() {
        let cfg = ToyDatasetConfig {
            snr_db: f64::INFINITY,
            ..ToyDatasetConfig::default()
        };
        let (c, y) = synth_pair(&cfg, &mut Rng::new(1));
        assert_eq!(c, y);
    }

    #[test]
    fn requested_snr_is_met() {
        for (seed, snr) in [(1, -5.0), (2, 0.0), (3, 7.5)] {
            for noise in [NoiseKind::White, NoiseKind::BandLimited] {
                let cfg = ToyDatasetConfig {
                    snr_db: snr,
                    noise,
                    ..ToyDatasetConfig::default()
                };
                let (c, y) = synth_pair(&cfg, &mut Rng::new(seed));
                assert!((snr_db(&c, &y) - snr).abs() < 0.1);
            }
        }
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = ToyDatasetConfig::default();
        assert_eq!(synth_pair(&cfg, &mut Rng::new(4)), synth_pair(&cfg, &mut Rng::new(4)));
        assert_ne!(synth_pair(&cfg, &mut Rng::new(4)), synth_pair(&cfg, &mut Rng::new(5)));
    }

    fn spec_of(x: &[f64]) -> ComplexSpectrogram {
        crate::spectral::stft(x, &StftConfig::default()).unwrap()
    }

    #[test]
    fn loss_at_clean_and_scale_invariance() {
        let (c, y) = synth_pair(&ToyDatasetConfig::default(), &mut Rng::new(6));
        let cs = spec_of(&c);
        let at_clean = loss(&cs, &cs, &c, &c).unwrap();
        assert_eq!(at_clean.magnitude, 0.0);
        let ideal = DB * libm::log((dot(&centered(&c), &centered(&c)) + 2.0 * LOSS_EPS) / LOSS_EPS);
        assert!((at_clean.neg_si_snr + ideal).abs() < 1e-9 * ideal);

        let ys = spec_of(&y);
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let a = loss(&ys, &cs, &y, &c).unwrap().neg_si_snr;
        let b = loss(&ys, &cs, &y2, &c).unwrap().neg_si_snr;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn loss_decreases_toward_clean() {
        let (c, y) = synth_pair(&ToyDatasetConfig::default(), &mut Rng::new(7));
        let cs = spec_of(&c);
        let mut prev = f64::INFINITY;
        for lam in [0.0, 0.5, 0.9] {
            let x: Vec<f64> = y.iter().zip(&c).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
            let l = loss(&spec_of(&x), &cs, &x, &c).unwrap().total;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let cfg = StftConfig {
            frame_len: 8,
            hop: 4,
            ..StftConfig::default()
        };
        let mut rng = Rng::new(8);
        let mk = |rng: &mut Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect() };
        let e = ComplexSpectrogram::new(
            Tensor::new(&[5, 3], mk(&mut rng, 15)).unwrap(),
            Tensor::new(&[5, 3], mk(&mut rng, 15)).unwrap(),
            cfg,
        )
        .unwrap();
        let c = ComplexSpectrogram::new(
            Tensor::new(&[5, 3], mk(&mut rng, 15)).unwrap(),
            Tensor::new(&[5, 3], mk(&mut rng, 15)).unwrap(),
            cfg,
        )
        .unwrap();
        let (ew, cw) = (mk(&mut rng, 12), mk(&mut rng, 12));
        let (_, ds, dw) = loss_grad(&e, &c, &ew, &cw).unwrap();
        let h = 1e-6;
        for i in 0..15 {
            let (mut p, mut m) = (e.clone(), e.clone());
            p.real.data_mut()[i] += h;
            m.real.data_mut()[i] -= h;
            let fd = (loss(&p, &c, &ew, &cw).unwrap().total - loss(&m, &c, &ew, &cw).unwrap().total) / (2.0 * h);
            assert!((fd - ds.real.data()[i]).abs() < 1e-7);
        }
        for i in 0..12 {
            let (mut p, mut m) = (ew.clone(), ew.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&e, &c, &p, &cw).unwrap().total - loss(&e, &c, &m, &cw).unwrap().total) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", dw[i]);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut w = vec![0.3, -1.0, 2.0];
        let mut st = OptimizerState::new(3);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        optimizer_step(&mut w, &[0.0; 3], &mut st, &opt).unwrap();
        assert_eq!(w, [0.3, -1.0, 2.0]);
    }

    #[test]
    fn first_step_opposes_gradient_sign() {
        let mut w = vec![0.0; 4];
        let g = [1.0, -2.0, 1e-3, -5.0];
        optimizer_step(&mut w, &g, &mut OptimizerState::new(4), &AdamW::default()).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            assert_eq!(wi.signum(), -gi.signum());
        }
    }

    #[test]
    fn adamw_matches_scalar_hand_simulation() {
        let opt = AdamW {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.1,
        };
        let grads = [0.5, -0.2, 0.1, 0.9, -1.3, 0.0, 0.4, 0.4, -0.7, 2.0];
        let mut w = [1.5];
        let mut st = OptimizerState::new(1);
        let (mut hw, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            optimizer_step(&mut w, &[g], &mut st, &opt).unwrap();
            let t = (t + 1) as i32;
            hw *= 1.0 - 0.01 * 0.1;
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            hw -= 0.01 * mh / (vh.sqrt() + 1e-6);
            assert!((w[0] - hw).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    /// `0.5 |W x - y|^2` over a fixed set of inputs.
    struct LinearLayer {
        w: Vec<f64>,
        xs: Vec<[f64; 3]>,
        ys: Vec<[f64; 2]>,
    }

    impl LinearLayer {
        fn residual(&self, x: &[f64; 3], y: &[f64; 2]) -> [f64; 2] {
            let mut r = [0.0; 2];
            for o in 0..2 {
                r[o] = (0..3).map(|i| self.w[o * 3 + i] * x[i]).sum::<f64>() - y[o];
            }
            r
        }
    }

    impl Objective for LinearLayer {
        fn params(&self) -> &[f64] {
            &self.w
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.w
        }
        fn value(&self) -> Result<f64> {
            Ok(self
                .xs
                .iter()
                .zip(&self.ys)
                .map(|(x, y)| self.residual(x, y).iter().map(|r| 0.5 * r * r).sum::<f64>())
                .sum())
        }
        fn gradient(&self) -> Result<Vec<f64>> {
            let mut g = vec![0.0; 6];
            for (x, y) in self.xs.iter().zip(&self.ys) {
                let r = self.residual(x, y);
                for o in 0..2 {
                    for i in 0..3 {
                        g[o * 3 + i] += r[o] * x[i];
                    }
                }
            }
            Ok(g)
        }
    }

    #[test]
    fn grad_check_on_linear_layer() {
        let mut rng = Rng::new(9);
        let mut layer = LinearLayer {
            w: (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            xs: (0..5).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 1.0]).collect(),
            ys: (0..5).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect(),
        };
        let r = grad_check(&mut layer, 6, 1e-4, &mut Rng::new(1)).unwrap();
        assert_eq!(r.samples.len(), 6);
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        let again = grad_check(&mut layer, 6, 1e-4, &mut Rng::new(1)).unwrap();
        assert_eq!(r, again);
    }

    fn small_data(items: usize) -> ToyDataset {
        let cfg = ToyDatasetConfig {
            n_items: items,
            duration: 0.1,
            ..ToyDatasetConfig::default()
        };
        ToyDataset::generate(&cfg, 2, &StftConfig::default(), 11).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let data = small_data(3);
        let mut model = Model::build(ModelConfig::smoke(), &mut Rng::new(2)).unwrap();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            optimizer: AdamW {
                lr: 0.0,
                ..AdamW::default()
            },
            clip_norm: Some(5.0),
        };
        let rep = train_toy(&mut model, &data, &opts, &mut Rng::new(3)).unwrap();
        assert_eq!(rep.history.len(), 3);
        assert!(rep.history.iter().all(|r| r.train_loss == rep.history[0].train_loss));
    }

    #[test]
    fn smoke_model_gradient_check() {
        let data = small_data(1);
        let stft = Stft::new(StftConfig::default()).unwrap();
        let mut obj = BatchObjective {
            model: Model::build(ModelConfig::smoke(), &mut Rng::new(4)).unwrap(),
            stft: &stft,
            batch: &data.train,
        };
        let r = grad_check(&mut obj, 15, 1e-5, &mut Rng::new(5)).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
