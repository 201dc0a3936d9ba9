//! Band-limited sample-rate conversion by spectral zero-padding or
//! truncation of the whole signal.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Resamples `x` from `from` Hz to `to` Hz. The output has
/// `round(len * to / from)` samples; content above the lower Nyquist rate is
/// discarded.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n = x.len();
    let m = ((n as u128 * to as u128 + from as u128 / 2) / from as u128).max(1) as usize;
    if m == n {
        return x.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);

    let mut out = vec![Complex::new(0.0, 0.0); m];
    let keep = n.min(m);
    let half = keep.div_ceil(2);
    out[..half].copy_from_slice(&buf[..half]);
    for k in 1..half {
        out[m - k] = buf[n - k];
    }
    if keep.is_multiple_of(2) {
        let h = keep / 2;
        if m < n {
            // both signed frequencies fold onto the output Nyquist bin
            out[h] = buf[h] + buf[n - h];
        } else {
            out[h] = buf[h] * 0.5;
            out[m - h] = buf[h] * 0.5;
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    out.iter().map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = tone(440.0, 16000.0, 100);
        assert_eq!(resample(&x, 16000, 16000), x);
    }

    #[test]
    fn periodic_tone_survives_down_and_up() {
        // 1 kHz over exactly 30 periods at 48 kHz
        let x = tone(1000.0, 48000.0, 1440);
        let y = resample(&x, 48000, 16000);
        assert_eq!(y.len(), 480);
        let expect = tone(1000.0, 16000.0, 480);
        let err = y.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        let back = resample(&y, 16000, 48000);
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
