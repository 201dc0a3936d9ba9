//! Inception depthwise convolution.
//!
//! The channels of a `[C, H, W]` feature map are split into four contiguous
//! groups: an identity group, a `3x3` depthwise group, a `1x11` band along
//! `W` and an `11x1` band along `H`. The groups are processed independently
//! and concatenated back in the same order.
//!
//! Axis convention: `H` is frequency bins and `W` is time frames, so the
//! `1x11` band integrates over time and the `11x1` band over frequency.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dwconv2d, dwconv2d_backward, rand_init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdConvConfig {
    pub channels: usize,
    /// Group sizes: identity, square, horizontal band, vertical band.
    pub split: [usize; 4],
    pub square_kernel: usize,
    pub band_kernel: usize,
}

impl IdConvConfig {
    /// Four equal groups; the remainder of `C / 4` goes to the identity group.
    pub fn equal(channels: usize) -> Self {
        let g = channels / 4;
        Self {
            channels,
            split: [channels - 3 * g, g, g, g],
            square_kernel: 3,
            band_kernel: 11,
        }
    }

    /// InceptionNeXt-style split: each convolution branch takes `C / 8`
    /// channels (at least one when `C >= 8`), the rest stay identity.
    pub fn inception_next(channels: usize) -> Self {
        let g = channels / 8;
        Self {
            channels,
            split: [channels - 3 * g, g, g, g],
            square_kernel: 3,
            band_kernel: 11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.iter().sum::<usize>() != self.channels {
            return Err(Error::Config(alloc::format!(
                "channel groups {:?} do not sum to {}",
                self.split,
                self.channels
            )));
        }
        for k in [self.square_kernel, self.band_kernel] {
            if k % 2 == 0 {
                return Err(Error::Geometry { kh: k, kw: k });
            }
        }
        Ok(())
    }

    fn offsets(&self) -> [usize; 5] {
        let s = self.split;
        [0, s[0], s[0] + s[1], s[0] + s[1] + s[2], self.channels]
    }

    fn kernel_shapes(&self) -> [[usize; 3]; 3] {
        let (k, b) = (self.square_kernel, self.band_kernel);
        [
            [self.split[1], k, k],
            [self.split[2], 1, b],
            [self.split[3], b, 1],
        ]
    }
}

/// Depthwise kernels of the three convolution branches.
#[derive(Debug, Clone, PartialEq)]
pub struct IdConvWeights {
    /// `[g2, k, k]`
    pub square: Tensor,
    /// `[g3, 1, b]`
    pub horizontal: Tensor,
    /// `[g4, b, 1]`
    pub vertical: Tensor,
}

impl IdConvWeights {
    pub fn zeros(cfg: &IdConvConfig) -> Self {
        let [a, b, c] = cfg.kernel_shapes();
        Self {
            square: Tensor::zeros(&a),
            horizontal: Tensor::zeros(&b),
            vertical: Tensor::zeros(&c),
        }
    }

    /// Kernels with a single 1 at the center: every branch becomes identity.
    pub fn center_delta(cfg: &IdConvConfig) -> Self {
        let mut w = Self::zeros(cfg);
        for t in [&mut w.square, &mut w.horizontal, &mut w.vertical] {
            let (kh, kw) = (t.dim(1), t.dim(2));
            let center = (kh / 2) * kw + kw / 2;
            for c in 0..t.dim(0) {
                t.data_mut()[c * kh * kw + center] = 1.0;
            }
        }
        w
    }

    pub fn random(cfg: &IdConvConfig, rng: &mut Rng, scale: f64) -> Self {
        let [a, b, c] = cfg.kernel_shapes();
        Self {
            square: rand_init(&a, rng, scale),
            horizontal: rand_init(&b, rng, scale),
            vertical: rand_init(&c, rng, scale),
        }
    }

    fn check(&self, cfg: &IdConvConfig) -> Result<()> {
        for (t, want) in [&self.square, &self.horizontal, &self.vertical]
            .into_iter()
            .zip(cfg.kernel_shapes())
        {
            if t.shape() != want {
                return Err(Error::Shape {
                    op: "idconv weights",
                    left: want.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn check_input(x: &Tensor, cfg: &IdConvConfig) -> Result<()> {
    cfg.validate()?;
    if x.rank() != 3 || x.dim(0) != cfg.channels {
        return Err(Error::Config(alloc::format!(
            "expected {} input channels, got shape {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    Ok(())
}

/// Contiguous channel groups `(X1, X2, X3, X4)`; empty groups have zero
/// channels.
pub fn split_channels(x: &Tensor, cfg: &IdConvConfig) -> Result<[Tensor; 4]> {
    check_input(x, cfg)?;
    let (h, w) = (x.dim(1), x.dim(2));
    let plane = h * w;
    let off = cfg.offsets();
    let part = |g: usize| {
        Tensor::new(
            &[cfg.split[g], h, w],
            x.data()[off[g] * plane..off[g + 1] * plane].to_vec(),
        )
    };
    Ok([part(0)?, part(1)?, part(2)?, part(3)?])
}

/// Inverse of [`split_channels`]: stacks groups along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
    let (h, w) = (first.dim(1), first.dim(2));
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 3 || p.dim(1) != h || p.dim(2) != w {
            return Err(Error::Shape {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        channels += p.dim(0);
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[channels, h, w], data)
}

fn same_pad(w: &Tensor) -> (usize, usize) {
    ((w.dim(1) - 1) / 2, (w.dim(2) - 1) / 2)
}

/// `Concat(X1, DW3x3(X2), DW1x11(X3), DW11x1(X4))` with "same" zero padding.
pub fn idconv_forward(x: &Tensor, weights: &IdConvWeights, cfg: &IdConvConfig) -> Result<Tensor> {
    weights.check(cfg)?;
    let [x1, x2, x3, x4] = split_channels(x, cfg)?;
    let y2 = dwconv2d(&x2, &weights.square, same_pad(&weights.square))?;
    let y3 = dwconv2d(&x3, &weights.horizontal, same_pad(&weights.horizontal))?;
    let y4 = dwconv2d(&x4, &weights.vertical, same_pad(&weights.vertical))?;
    concat_channels(&[x1, y2, y3, y4])
}

/// Returns `(dX, dWeights)`. The identity group passes its slice of `dY`
/// through untouched.
pub fn idconv_backward(
    x: &Tensor,
    weights: &IdConvWeights,
    cfg: &IdConvConfig,
    dy: &Tensor,
) -> Result<(Tensor, IdConvWeights)> {
    weights.check(cfg)?;
    if dy.shape() != x.shape() {
        return Err(Error::Shape {
            op: "idconv_backward",
            left: x.shape().to_vec(),
            right: dy.shape().to_vec(),
        });
    }
    let [_, x2, x3, x4] = split_channels(x, cfg)?;
    let [g1, g2, g3, g4] = split_channels(dy, cfg)?;
    let (d2, w2) = dwconv2d_backward(&x2, &weights.square, same_pad(&weights.square), &g2)?;
    let (d3, w3) = dwconv2d_backward(&x3, &weights.horizontal, same_pad(&weights.horizontal), &g3)?;
    let (d4, w4) = dwconv2d_backward(&x4, &weights.vertical, same_pad(&weights.vertical), &g4)?;
    Ok((
        concat_channels(&[g1, d2, d3, d4])?,
        IdConvWeights {
            square: w2,
            horizontal: w3,
            vertical: w4,
        },
    ))
}

/// Kernel weights only; the branches carry no bias.
pub fn idconv_param_count(cfg: &IdConvConfig) -> usize {
    let (k, b) = (cfg.square_kernel, cfg.band_kernel);
    k * k * cfg.split[1] + b * cfg.split[2] + b * cfg.split[3]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_split_of_sixteen() {
        let cfg = IdConvConfig::equal(16);
        assert_eq!(cfg.split, [4, 4, 4, 4]);
        let x = rand_init(&[16, 3, 5], &mut Rng::new(1), 1.0);
        let parts = split_channels(&x, &cfg).unwrap();
        for p in &parts {
            assert_eq!(p.shape(), &[4, 3, 5]);
        }
        assert_eq!(concat_channels(&parts).unwrap(), x);
    }

    #[test]
    fn remainder_goes_to_identity() {
        assert_eq!(IdConvConfig::equal(10).split, [4, 2, 2, 2]);
        assert_eq!(IdConvConfig::equal(3).split, [3, 0, 0, 0]);
        assert_eq!(IdConvConfig::inception_next(16).split, [10, 2, 2, 2]);
    }

    #[test]
    fn degenerate_split_is_identity() {
        let cfg = IdConvConfig {
            channels: 5,
            split: [5, 0, 0, 0],
            square_kernel: 3,
            band_kernel: 11,
        };
        let x = rand_init(&[5, 4, 4], &mut Rng::new(2), 1.0);
        let [x1, ..] = split_channels(&x, &cfg).unwrap();
        assert_eq!(x1, x);
        let y = idconv_forward(&x, &IdConvWeights::zeros(&cfg), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let cfg = IdConvConfig::equal(8);
        let r = split_channels(&Tensor::zeros(&[6, 2, 2]), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
        let bad = IdConvConfig { split: [1, 1, 1, 1], ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn delta_kernels_are_identity() {
        let cfg = IdConvConfig::equal(8);
        let x = rand_init(&[8, 13, 9], &mut Rng::new(3), 1.0);
        let y = idconv_forward(&x, &IdConvWeights::center_delta(&cfg), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn vertical_band_smears_impulse_over_frequency() {
        let cfg = IdConvConfig {
            channels: 1,
            split: [0, 0, 0, 1],
            square_kernel: 3,
            band_kernel: 11,
        };
        let mut w = IdConvWeights::zeros(&cfg);
        w.vertical = Tensor::full(&[1, 11, 1], 1.0);
        let (h, wd) = (21, 3);
        let mut x = Tensor::zeros(&[1, h, wd]);
        x.data_mut()[10 * wd + 1] = 1.0;
        let y = idconv_forward(&x, &w, &cfg).unwrap();
        for i in 0..h {
            for j in 0..wd {
                let want = if j == 1 && (5..=15).contains(&i) { 1.0 } else { 0.0 };
                assert_eq!(y.at3(0, i, j), want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn backward_zero_and_identity_slice() {
        let cfg = IdConvConfig::equal(4);
        let mut rng = Rng::new(4);
        let x = rand_init(&[4, 6, 6], &mut rng, 1.0);
        let w = IdConvWeights::random(&cfg, &mut rng, 0.5);
        let (dx, dw) = idconv_backward(&x, &w, &cfg, &Tensor::zeros(&[4, 6, 6])).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert_eq!(dw.square.max_abs() + dw.horizontal.max_abs() + dw.vertical.max_abs(), 0.0);

        let dy = rand_init(&[4, 6, 6], &mut rng, 1.0);
        let (dx, _) = idconv_backward(&x, &w, &cfg, &dy).unwrap();
        assert_eq!(&dx.data()[..36], &dy.data()[..36]);
    }

    #[test]
    fn param_counts() {
        assert_eq!(idconv_param_count(&IdConvConfig::equal(16)), 124);
        assert_eq!(idconv_param_count(&IdConvConfig::equal(3)), 0);
        let a = IdConvConfig::equal(16);
        let doubled = IdConvConfig {
            channels: 32,
            split: a.split.map(|g| 2 * g),
            ..a
        };
        assert_eq!(idconv_param_count(&doubled), 2 * idconv_param_count(&a));
    }
}
