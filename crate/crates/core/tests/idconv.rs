use imse_core::idconv::{idconv_backward, idconv_forward, idconv_param_count, IdConvConfig, IdConvWeights};
use imse_core::tensor::rand_init;
use imse_core::{Rng, Tensor};

/// Per-pixel loops over the four channel groups with explicit zero padding.
fn oracle(x: &Tensor, w: &IdConvWeights, cfg: &IdConvConfig) -> Tensor {
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let s = cfg.split;
    let mut y = Tensor::zeros(&[c, h, wd]);
    for ch in 0..c {
        let (ker, base) = if ch < s[0] {
            (None, 0)
        } else if ch < s[0] + s[1] {
            (Some(&w.square), s[0])
        } else if ch < s[0] + s[1] + s[2] {
            (Some(&w.horizontal), s[0] + s[1])
        } else {
            (Some(&w.vertical), s[0] + s[1] + s[2])
        };
        for i in 0..h {
            for j in 0..wd {
                let v = match ker {
                    None => x.at3(ch, i, j),
                    Some(k) => {
                        let (kh, kw) = (k.dim(1), k.dim(2));
                        let mut acc = 0.0;
                        for a in 0..kh {
                            for b in 0..kw {
                                let ii = i as isize + a as isize - (kh / 2) as isize;
                                let jj = j as isize + b as isize - (kw / 2) as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += k.at3(ch - base, a, b) * x.at3(ch, ii as usize, jj as usize);
                                }
                            }
                        }
                        acc
                    }
                };
                y.data_mut()[(ch * h + i) * wd + j] = v;
            }
        }
    }
    y
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = Rng::new(1);
    for (c, h, w) in [(16, 9, 14), (4, 1, 1), (7, 12, 3), (8, 20, 20), (5, 2, 30)] {
        let cfg = IdConvConfig::equal(c);
        let x = rand_init(&[c, h, w], &mut rng, 1.0);
        let weights = IdConvWeights::random(&cfg, &mut rng, 1.0);
        let y = idconv_forward(&x, &weights, &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&oracle(&x, &weights, &cfg)).unwrap() <= 1e-12);
    }
}

#[test]
fn sixteen_channels_have_124_kernel_weights() {
    let cfg = IdConvConfig::equal(16);
    assert_eq!(cfg.split, [4, 4, 4, 4]);
    assert_eq!(idconv_param_count(&cfg), 4 * 9 + 4 * 11 + 4 * 11);
}

/// A pattern alternating along one axis only, fed to every channel.
fn stripes(c: usize, n: usize, along_time: bool) -> Tensor {
    Tensor::from_fn(&[c, n, n], |idx| {
        let (i, j) = ((idx / n) % n, idx % n);
        let k = if along_time { j } else { i };
        if k % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// Averaging kernels: a band kernel cancels stripes that alternate along its
/// own axis and passes stripes that are constant along it.
#[test]
fn band_branches_are_anisotropic() {
    let cfg = IdConvConfig {
        channels: 2,
        split: [0, 0, 1, 1],
        square_kernel: 3,
        band_kernel: 11,
    };
    let mut w = IdConvWeights::zeros(&cfg);
    w.horizontal = Tensor::full(&[1, 1, 11], 1.0 / 11.0);
    w.vertical = Tensor::full(&[1, 11, 1], 1.0 / 11.0);
    let n = 31;
    // interior, away from zero padding
    let energy = |y: &Tensor, ch: usize| -> f64 {
        (5..n - 5)
            .flat_map(|i| (5..n - 5).map(move |j| (i, j)))
            .map(|(i, j)| y.at3(ch, i, j).powi(2))
            .sum::<f64>()
    };
    let time_stripes = idconv_forward(&stripes(2, n, true), &w, &cfg).unwrap();
    let freq_stripes = idconv_forward(&stripes(2, n, false), &w, &cfg).unwrap();
    let full = ((n - 10) * (n - 10)) as f64;
    // horizontal (time) band
    assert!((energy(&freq_stripes, 0) - full).abs() < 1e-9);
    assert!(energy(&time_stripes, 0) < full / 100.0);
    // vertical (frequency) band
    assert!((energy(&time_stripes, 1) - full).abs() < 1e-9);
    assert!(energy(&freq_stripes, 1) < full / 100.0);
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = Rng::new(2);
    let cfg = IdConvConfig::equal(8);
    let x = rand_init(&[8, 7, 13], &mut rng, 1.0);
    let w = IdConvWeights::random(&cfg, &mut rng, 1.0);
    let dy = rand_init(&[8, 7, 13], &mut rng, 1.0);
    let f = |x: &Tensor, w: &IdConvWeights| -> f64 {
        let y = idconv_forward(x, w, &cfg).unwrap();
        y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
    };
    let (dx, dw) = idconv_backward(&x, &w, &cfg, &dy).unwrap();
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    for idx in (0..x.len()).step_by(7) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[idx] += h;
        xm.data_mut()[idx] -= h;
        let numeric = (f(&xp, &w) - f(&xm, &w)) / (2.0 * h);
        assert!(rel(dx.data()[idx], numeric) <= 1e-4);
    }
    for which in 0..3 {
        let len = [&dw.square, &dw.horizontal, &dw.vertical][which].len();
        for idx in 0..len {
            let bump = |delta: f64| {
                let mut p = w.clone();
                let t = match which {
                    0 => &mut p.square,
                    1 => &mut p.horizontal,
                    _ => &mut p.vertical,
                };
                t.data_mut()[idx] += delta;
                f(&x, &p)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = [&dw.square, &dw.horizontal, &dw.vertical][which].data()[idx];
            assert!(rel(a, numeric) <= 1e-4, "{which} {idx}");
        }
    }
}
