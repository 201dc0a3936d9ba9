//! STFT analysis and overlap-add synthesis.
//!
//! Frames are `frame_len` samples long and start every `hop` samples; frame
//! `t` covers `[t * hop, t * hop + frame_len)`. The signal is not padded, so
//! a signal of `L >= frame_len` samples yields `(L - frame_len) / hop + 1`
//! frames. Synthesis windows each inverse frame again and divides by the
//! summed squared window, which makes the round trip exact wherever that
//! envelope is non-negligible, COLA or not. The first and last `hop` samples
//! are only covered by the tapering ends of a single window; round-trip
//! guarantees apply to [`StftConfig::interior`].
//!
//! The default 510-point frame is not a power of two, so transforms use a
//! direct DFT over a precomputed twiddle table. Power-of-two frame lengths
//! can opt into a radix-2 FFT via [`Transform::Fft`].

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for the squared-window envelope in [`istft`].
pub const ENVELOPE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Transform {
    Direct,
    /// Radix-2 FFT; requires a power-of-two frame length.
    Fft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
    pub transform: Transform,
}

impl Default for StftConfig {
    /// 510-sample frames, 256-sample hop, 16 kHz, Hann.
    fn default() -> Self {
        Self {
            frame_len: 510,
            hop: 256,
            sample_rate: 16_000,
            window: WindowKind::Hann,
            transform: Transform::Direct,
        }
    }
}

impl StftConfig {
    /// 512-point frames through the radix-2 FFT.
    pub fn fast512() -> Self {
        Self {
            frame_len: 512,
            transform: Transform::Fft,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Config(alloc::format!(
                "need 0 < hop <= frame_len and frame_len >= 2, got hop {} frame_len {}",
                self.hop,
                self.frame_len
            )));
        }
        if self.transform == Transform::Fft && !self.frame_len.is_power_of_two() {
            return Err(Error::Config(alloc::format!(
                "FFT transform needs a power-of-two frame length, got {}",
                self.frame_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    /// Samples of a `frames`-frame reconstruction that the round trip
    /// recovers: everything but the first and last `hop` samples.
    pub fn interior(&self, frames: usize) -> Range<usize> {
        let span = self.span(frames);
        self.hop..span.saturating_sub(self.hop).max(self.hop)
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len;
        match self.window {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }
}

/// `F x T` complex spectrogram (frequency rows, time columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub cfg: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(real: Tensor, imag: Tensor, cfg: StftConfig) -> Result<Self> {
        if real.shape() != imag.shape() || real.rank() != 2 || real.dim(0) != cfg.bins() {
            return Err(Error::Shape {
                op: "spectrogram",
                left: real.shape().to_vec(),
                right: imag.shape().to_vec(),
            });
        }
        Ok(Self { real, imag, cfg })
    }

    pub fn zeros(cfg: StftConfig, frames: usize) -> Self {
        let shape = [cfg.bins(), frames];
        Self {
            real: Tensor::zeros(&shape),
            imag: Tensor::zeros(&shape),
            cfg,
        }
    }

    pub fn bins(&self) -> usize {
        self.real.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.real.dim(1)
    }

    pub fn magnitude(&self) -> Tensor {
        self.real
            .zip_map(&self.imag, libm::hypot)
            .expect("real and imag share a shape")
    }
}

/// Reusable transform state: window, envelope-independent tables.
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// `[bins, n]` rows `cos(2 pi k m / n)` and `sin(..)` for the direct path.
    basis_cos: Vec<f64>,
    basis_sin: Vec<f64>,
    /// The same tables transposed to `[n, bins]`.
    basis_cos_t: Vec<f64>,
    basis_sin_t: Vec<f64>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let angle = |m: usize| 2.0 * PI * m as f64 / n as f64;
        let cos: Vec<f64> = (0..n).map(|m| libm::cos(angle(m))).collect();
        let sin: Vec<f64> = (0..n).map(|m| libm::sin(angle(m))).collect();
        let (mut basis_cos, mut basis_sin) = (Vec::new(), Vec::new());
        if cfg.transform == Transform::Direct {
            for k in 0..cfg.bins() {
                for m in 0..n {
                    basis_cos.push(cos[k * m % n]);
                    basis_sin.push(sin[k * m % n]);
                }
            }
        }
        let bins = cfg.bins();
        let transpose = |b: &[f64]| -> Vec<f64> {
            let mut t = vec![0.0; b.len()];
            if !b.is_empty() {
                for k in 0..bins {
                    for m in 0..n {
                        t[m * bins + k] = b[k * n + m];
                    }
                }
            }
            t
        };
        Ok(Self {
            cfg,
            window: cfg.window(),
            basis_cos_t: transpose(&basis_cos),
            basis_sin_t: transpose(&basis_sin),
            cos,
            sin,
            basis_cos,
            basis_sin,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// One-sided DFT of a single frame: `X_k = sum_n x[n] e^{-2 pi i k n / N}`.
    pub fn dft_real(&self, frame: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.cfg.frame_len;
        if frame.len() != n {
            return Err(Error::Shape {
                op: "dft_real",
                left: vec![n],
                right: vec![frame.len()],
            });
        }
        let bins = self.cfg.bins();
        let (mut re, mut im) = (vec![0.0; bins], vec![0.0; bins]);
        match self.cfg.transform {
            Transform::Direct => {
                for (m, &x) in frame.iter().enumerate() {
                    let c = &self.basis_cos_t[m * bins..(m + 1) * bins];
                    let s = &self.basis_sin_t[m * bins..(m + 1) * bins];
                    for ((r, i), (c, s)) in re.iter_mut().zip(im.iter_mut()).zip(c.iter().zip(s)) {
                        *r += x * c;
                        *i -= x * s;
                    }
                }
            }
            Transform::Fft => {
                let mut buf_re = frame.to_vec();
                let mut buf_im = vec![0.0; n];
                self.fft(&mut buf_re, &mut buf_im, false);
                re.copy_from_slice(&buf_re[..bins]);
                im.copy_from_slice(&buf_im[..bins]);
            }
        }
        Ok((re, im))
    }

    /// Real inverse of a one-sided spectrum. The imaginary parts of the DC
    /// bin (and the Nyquist bin for even lengths) do not contribute.
    pub fn idft_real(&self, re: &[f64], im: &[f64], out: &mut [f64]) {
        let n = self.cfg.frame_len;
        let bins = self.cfg.bins();
        match self.cfg.transform {
            Transform::Direct => {
                let inv = 1.0 / n as f64;
                let out = &mut out[..n];
                out.iter_mut().for_each(|o| *o = re[0] * inv);
                for k in 1..bins {
                    let w = self.weight(k) * inv;
                    let (a, b) = (w * re[k], w * im[k]);
                    let c = &self.basis_cos[k * n..(k + 1) * n];
                    let s = &self.basis_sin[k * n..(k + 1) * n];
                    for ((o, c), s) in out.iter_mut().zip(c).zip(s) {
                        *o += a * c - b * s;
                    }
                }
            }
            Transform::Fft => {
                let mut br = vec![0.0; n];
                let mut bi = vec![0.0; n];
                br[0] = re[0];
                for k in 1..bins {
                    if 2 * k == n {
                        br[k] = re[k];
                    } else {
                        br[k] = re[k];
                        bi[k] = im[k];
                        br[n - k] = re[k];
                        bi[n - k] = -im[k];
                    }
                }
                self.fft(&mut br, &mut bi, true);
                let inv = 1.0 / n as f64;
                for (o, &v) in out.iter_mut().zip(&br) {
                    *o = v * inv;
                }
            }
        }
    }

    /// One-sided bin weight: 1 for DC and an even-length Nyquist bin, else 2.
    #[inline]
    fn weight(&self, k: usize) -> f64 {
        if k == 0 || 2 * k == self.cfg.frame_len {
            1.0
        } else {
            2.0
        }
    }

    /// Adjoint of [`Stft::idft_real`]: accumulates into `(dre, dim)` the
    /// gradient for a gradient `g` on the time-domain output.
    fn idft_real_adjoint(&self, g: &[f64], dre: &mut [f64], dim: &mut [f64]) {
        let n = self.cfg.frame_len as f64;
        let (gr, gi) = self.dft_real(g).expect("frame length checked by caller");
        for k in 0..self.cfg.bins() {
            let w = self.weight(k);
            dre[k] += w / n * gr[k];
            // DC and Nyquist imaginary parts are ignored by the inverse.
            if w == 2.0 {
                dim[k] += w / n * gi[k];
            }
        }
    }

    /// In-place iterative radix-2 FFT (`inverse` flips the twiddle sign, no
    /// scaling).
    fn fft(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = re.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let wr = self.cos[k * step];
                    let wi = sign * self.sin[k * step];
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<ComplexSpectrogram> {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        if signal.len() < n {
            return Err(Error::SignalTooShort {
                len: signal.len(),
                frame_len: n,
            });
        }
        let frames = self.cfg.frames_for(signal.len());
        let bins = self.cfg.bins();
        let mut spec = ComplexSpectrogram::zeros(self.cfg, frames);
        let mut buf = vec![0.0; n];
        for t in 0..frames {
            for ((b, &x), &w) in buf.iter_mut().zip(&signal[t * hop..t * hop + n]).zip(&self.window) {
                *b = x * w;
            }
            let (re, im) = self.dft_real(&buf)?;
            for k in 0..bins {
                spec.real.data_mut()[k * frames + t] = re[k];
                spec.imag.data_mut()[k * frames + t] = im[k];
            }
        }
        Ok(spec)
    }

    fn envelope(&self, frames: usize) -> Vec<f64> {
        let mut env = vec![0.0; self.cfg.span(frames)];
        for t in 0..frames {
            let base = t * self.cfg.hop;
            for (e, &w) in env[base..base + self.cfg.frame_len].iter_mut().zip(&self.window) {
                *e += w * w;
            }
        }
        env.iter_mut().for_each(|e| *e = e.max(ENVELOPE_FLOOR));
        env
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Vec<f64> {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        let (bins, frames) = (spec.bins(), spec.frames());
        let mut out = vec![0.0; self.cfg.span(frames)];
        let (mut re, mut im) = (vec![0.0; bins], vec![0.0; bins]);
        let mut buf = vec![0.0; n];
        for t in 0..frames {
            for k in 0..bins {
                re[k] = spec.real.data()[k * frames + t];
                im[k] = spec.imag.data()[k * frames + t];
            }
            self.idft_real(&re, &im, &mut buf);
            for ((o, &x), &w) in out[t * hop..t * hop + n].iter_mut().zip(&buf).zip(&self.window) {
                *o += x * w;
            }
        }
        for (o, e) in out.iter_mut().zip(self.envelope(frames)) {
            *o /= e;
        }
        out
    }

    /// Gradient of a scalar loss with respect to the spectrogram fed to
    /// [`Stft::synthesize`], given its gradient `grad` on the output samples.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Result<ComplexSpectrogram> {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        if grad.len() != self.cfg.span(frames) {
            return Err(Error::Shape {
                op: "synthesize_adjoint",
                left: vec![self.cfg.span(frames)],
                right: vec![grad.len()],
            });
        }
        let bins = self.cfg.bins();
        let env = self.envelope(frames);
        let mut spec = ComplexSpectrogram::zeros(self.cfg, frames);
        let mut g = vec![0.0; n];
        let (mut dre, mut dim) = (vec![0.0; bins], vec![0.0; bins]);
        for t in 0..frames {
            let base = t * hop;
            for m in 0..n {
                g[m] = grad[base + m] * self.window[m] / env[base + m];
            }
            dre.iter_mut().for_each(|x| *x = 0.0);
            dim.iter_mut().for_each(|x| *x = 0.0);
            self.idft_real_adjoint(&g, &mut dre, &mut dim);
            for k in 0..bins {
                spec.real.data_mut()[k * frames + t] = dre[k];
                spec.imag.data_mut()[k * frames + t] = dim[k];
            }
        }
        Ok(spec)
    }
}

/// One-sided DFT of a frame of length `cfg.frame_len`.
pub fn dft_real(frame: &[f64], cfg: &StftConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    Stft::new(*cfg)?.dft_real(frame)
}

pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(*cfg)?.analyze(signal)
}

/// Inverse STFT; output length is `(T - 1) * hop + frame_len`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    Ok(Stft::new(spec.cfg)?.synthesize(spec))
}
