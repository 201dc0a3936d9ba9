//! Spectrogram U-Net enhancer.
//!
//! Layout, for `L` levels and widths `C_l = C0 * 2^l`:
//!
//! ```text
//! features [3, F, T] -> 1x1 -> C0
//! encoder l = 0..L:   stage(C_l) -> skip_l -> 2x2 stride-2 conv -> C_{min(l+1, L-1)}
//! bottleneck:         stage(C_{L-1})
//! decoder l = L-1..0: 2x2 transposed conv -> C_l, concat skip_l, 1x1 -> C_l, stage(C_l)
//! head:               1x1 -> 2 channels (a, b)
//! ```
//!
//! A stage is an inception depthwise embedding (`x + mix(idconv(x))`) followed
//! by a transformer block (`x + attn(norm(x))`, `x + ffn(norm(x))`) whose
//! attention is amplitude-aware linear attention along time, one sequence per
//! frequency bin. The head parameterizes a bounded complex ratio mask
//! `(1 + tanh a) e^{i b}` applied to the noisy spectrogram; `a = b = 0` is the
//! identity mask.
//!
//! Input features are the power-compressed spectrogram after normalizing to
//! unit RMS magnitude: `[m cos(theta), m sin(theta), m]` with
//! `m = (|X| / rms)^compress`. Both spectrogram axes are padded up to a
//! multiple of `2^L` (zeros along frequency, reflection along time) and the
//! mask is cropped back before it is applied.
//!
//! All weights live in one flat `Vec<f64>` in build order, which is also the
//! checkpoint layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::idconv::{idconv_backward, idconv_forward, idconv_param_count, IdConvConfig, IdConvWeights};
use crate::nn::{self, AttentionAxis, AttentionCache, NormCache};
use crate::rng::Rng;
use crate::spectral::{ComplexSpectrogram, StftConfig};
use crate::tensor::Tensor;

/// Channels of the network input.
pub const INPUT_FEATURES: usize = 3;

/// How each stage's channels are divided among the inception branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SplitRule {
    /// Four equal groups, remainder to the identity group.
    Equal,
    /// `C / 8` per convolution branch.
    InceptionNext,
}

impl SplitRule {
    pub fn config(self, channels: usize) -> IdConvConfig {
        match self {
            SplitRule::Equal => IdConvConfig::equal(channels),
            SplitRule::InceptionNext => IdConvConfig::inception_next(channels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// Attention heads at every level; must divide every level width.
    pub heads: usize,
    /// Hidden width of the feed-forward layer as a multiple of the level width.
    pub ffn_ratio: usize,
    pub attention_axis: AttentionAxis,
    pub split: SplitRule,
    /// Exponent applied to normalized magnitudes when building input features.
    pub compress: f64,
    pub stft: StftConfig,
}

impl ModelConfig {
    /// Four levels, 16 base channels, two heads, 510/256 STFT.
    pub fn base() -> Self {
        Self {
            base_channels: 16,
            levels: 4,
            heads: 2,
            ffn_ratio: 2,
            attention_axis: AttentionAxis::Time,
            split: SplitRule::Equal,
            compress: 0.3,
            stft: StftConfig::default(),
        }
    }

    /// Two levels, four base channels: small enough to train on a laptop core.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            levels: 2,
            heads: 2,
            ..Self::base()
        }
    }

    /// One level, two channels, one head.
    pub fn smoke() -> Self {
        Self {
            base_channels: 2,
            levels: 1,
            heads: 1,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::base()),
            "tiny" => Some(Self::tiny()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level.min(self.levels - 1)
    }

    pub fn idconv(&self, level: usize) -> IdConvConfig {
        self.split.config(self.width(level))
    }

    /// Spectrogram sizes are padded to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.base_channels == 0 || self.levels == 0 || self.ffn_ratio == 0 {
            return fail(alloc::format!(
                "base_channels, levels and ffn_ratio must be positive: {self:?}"
            ));
        }
        if self.levels > 8 {
            return fail(alloc::format!("at most 8 levels supported, got {}", self.levels));
        }
        for l in 0..self.levels {
            let c = self.width(l);
            if self.heads == 0 || !c.is_multiple_of(self.heads) {
                return fail(alloc::format!("{} heads do not divide level width {c}", self.heads));
            }
        }
        if !(self.compress > 0.0 && self.compress <= 1.0) {
            return fail(alloc::format!("compress must be in (0, 1], got {}", self.compress));
        }
        self.stft.validate()
    }
}

/// A range of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

struct Builder<'a> {
    params: Vec<f64>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, len: usize, scale: f64) -> Slot {
        let offset = self.params.len();
        for _ in 0..len {
            let v = self.rng.uniform(-scale, scale);
            self.params.push(v);
        }
        Slot { offset, len }
    }

    fn constant(&mut self, len: usize, value: f64) -> Slot {
        let offset = self.params.len();
        self.params.resize(offset + len, value);
        Slot { offset, len }
    }

    fn pointwise(&mut self, cin: usize, cout: usize, scale: Option<f64>) -> Pointwise {
        let scale = scale.unwrap_or(1.0 / libm::sqrt(cin as f64));
        Pointwise {
            w: self.uniform(cin * cout, scale),
            b: self.constant(cout, 0.0),
        }
    }

    fn norm(&mut self, c: usize) -> Norm {
        Norm {
            gain: self.constant(c, 1.0),
            bias: self.constant(c, 0.0),
        }
    }

    fn stage(&mut self, cfg: &IdConvConfig, ffn_ratio: usize) -> Stage {
        let c = cfg.channels;
        let (k, b) = (cfg.square_kernel, cfg.band_kernel);
        let embed = Embed {
            cfg: *cfg,
            square: self.uniform(cfg.split[1] * k * k, 1.0 / k as f64),
            horizontal: self.uniform(cfg.split[2] * b, 1.0 / libm::sqrt(b as f64)),
            vertical: self.uniform(cfg.split[3] * b, 1.0 / libm::sqrt(b as f64)),
            mix: self.pointwise(c, c, None),
        };
        let proj = 1.0 / libm::sqrt(c as f64);
        let block = Block {
            norm1: self.norm(c),
            attn: self.uniform(3 * c * c, proj),
            attn_out: self.uniform(c * c, 0.1 * proj),
            norm2: self.norm(c),
            ff1: self.pointwise(c, ffn_ratio * c, None),
            ff2: self.pointwise(ffn_ratio * c, c, None),
        };
        Stage { embed, block }
    }

    fn resample(&mut self, cin: usize, cout: usize) -> Resample {
        Resample {
            w: self.uniform(4 * cin * cout, 1.0 / libm::sqrt(4.0 * cin as f64)),
            b: self.constant(cout, 0.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Pointwise {
    w: Slot,
    b: Slot,
}

impl Pointwise {
    fn forward(&self, p: &[f64], x: &Tensor) -> Tensor {
        nn::pointwise(x, self.w.of(p), self.b.of(p))
    }

    fn backward(&self, p: &[f64], g: &mut [f64], x: &Tensor, dy: &Tensor) -> Tensor {
        let (mut dw, mut db) = (vec![0.0; self.w.len], vec![0.0; self.b.len]);
        let dx = nn::pointwise_backward(x, self.w.of(p), dy, &mut dw, &mut db);
        add_into(self.w.of_mut(g), &dw);
        add_into(self.b.of_mut(g), &db);
        dx
    }

    fn count(&self) -> usize {
        self.w.len + self.b.len
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: Slot,
    bias: Slot,
}

impl Norm {
    fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, NormCache) {
        nn::layer_norm(x, self.gain.of(p), self.bias.of(p))
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: &Tensor) -> Tensor {
        let (mut dg, mut db) = (vec![0.0; self.gain.len], vec![0.0; self.bias.len]);
        let dx = nn::layer_norm_backward(cache, self.gain.of(p), dy, &mut dg, &mut db);
        add_into(self.gain.of_mut(g), &dg);
        add_into(self.bias.of_mut(g), &db);
        dx
    }

    fn count(&self) -> usize {
        self.gain.len + self.bias.len
    }
}

#[derive(Debug, Clone)]
struct Embed {
    cfg: IdConvConfig,
    square: Slot,
    horizontal: Slot,
    vertical: Slot,
    mix: Pointwise,
}

impl Embed {
    fn weights(&self, p: &[f64]) -> Result<IdConvWeights> {
        let (k, b) = (self.cfg.square_kernel, self.cfg.band_kernel);
        let s = self.cfg.split;
        Ok(IdConvWeights {
            square: Tensor::new(&[s[1], k, k], self.square.of(p).to_vec())?,
            horizontal: Tensor::new(&[s[2], 1, b], self.horizontal.of(p).to_vec())?,
            vertical: Tensor::new(&[s[3], b, 1], self.vertical.of(p).to_vec())?,
        })
    }

    fn count(&self) -> usize {
        self.square.len + self.horizontal.len + self.vertical.len + self.mix.count()
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    /// `wq, wk, wv`, each `[C, C]`; `attn_out` directly follows it.
    attn: Slot,
    attn_out: Slot,
    norm2: Norm,
    ff1: Pointwise,
    ff2: Pointwise,
}

impl Block {
    fn attn_weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.attn.offset..self.attn_out.offset + self.attn_out.len]
    }

    fn count(&self) -> usize {
        self.norm1.count() + self.attn.len + self.attn_out.len + self.norm2.count() + self.ff1.count() + self.ff2.count()
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Embed,
    block: Block,
}

struct StageTrace {
    x: Tensor,
    idc: Tensor,
    n1: Tensor,
    c1: NormCache,
    attn: AttentionCache,
    c2: NormCache,
    n2: Tensor,
    f1: Tensor,
    a1: Tensor,
}

impl Stage {
    fn forward(&self, p: &[f64], x: Tensor, heads: usize, axis: AttentionAxis) -> Result<(Tensor, StageTrace)> {
        let idc = idconv_forward(&x, &self.embed.weights(p)?, &self.embed.cfg)?;
        let e = x.add(&self.embed.mix.forward(p, &idc))?;
        let b = &self.block;
        let (n1, c1) = b.norm1.forward(p, &e);
        let (att, attn) = nn::axial_attention_cached(&n1, b.attn_weights(p), heads, axis)?;
        let h = e.add(&att)?;
        let (n2, c2) = b.norm2.forward(p, &h);
        let f1 = b.ff1.forward(p, &n2);
        let a1 = nn::silu(&f1);
        let out = h.add(&b.ff2.forward(p, &a1))?;
        Ok((
            out,
            StageTrace {
                x,
                idc,
                n1,
                c1,
                attn,
                c2,
                n2,
                f1,
                a1,
            },
        ))
    }

    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        t: &StageTrace,
        dout: Tensor,
        heads: usize,
        axis: AttentionAxis,
    ) -> Result<Tensor> {
        let b = &self.block;
        let da1 = b.ff2.backward(p, g, &t.a1, &dout);
        let df1 = nn::silu_backward(&t.f1, &da1);
        let dn2 = b.ff1.backward(p, g, &t.n2, &df1);
        let dh = dout.add(&b.norm2.backward(p, g, &t.c2, &dn2))?;

        let mut dattn = vec![0.0; b.attn.len + b.attn_out.len];
        let dn1 = nn::axial_attention_backward_cached(&t.attn, &t.n1, b.attn_weights(p), heads, axis, &dh, &mut dattn)?;
        add_into(&mut g[b.attn.offset..b.attn_out.offset + b.attn_out.len], &dattn);
        let de = dh.add(&b.norm1.backward(p, g, &t.c1, &dn1))?;

        let didc = self.embed.mix.backward(p, g, &t.idc, &de);
        let (dx, dw) = idconv_backward(&t.x, &self.embed.weights(p)?, &self.embed.cfg, &didc)?;
        add_into(self.embed.square.of_mut(g), dw.square.data());
        add_into(self.embed.horizontal.of_mut(g), dw.horizontal.data());
        add_into(self.embed.vertical.of_mut(g), dw.vertical.data());
        de.add(&dx)
    }

    fn count(&self) -> (usize, usize) {
        (self.embed.count(), self.block.count())
    }
}

#[derive(Debug, Clone)]
struct Resample {
    w: Slot,
    b: Slot,
}

impl Resample {
    fn count(&self) -> usize {
        self.w.len + self.b.len
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamReport {
    /// Input projection plus every inception embedding (depthwise kernels and
    /// pointwise mix).
    pub embedding: usize,
    /// Norms, attention projections and feed-forward layers.
    pub attention: usize,
    /// Down/up sampling convolutions and skip fusions.
    pub resampling: usize,
    pub head: usize,
    pub total: usize,
}

/// Reference totals published for the original model and its ablations, for
/// side-by-side display only.
pub const PUBLISHED_TOTALS: [(&str, f64); 4] = [
    ("baseline", 0.513e6),
    ("baseline + amplitude-aware attention", 0.438e6),
    ("baseline + inception embedding", 0.501e6),
    ("both components", 0.427e6),
];

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<f64>,
    input: Pointwise,
    encoder: Vec<Stage>,
    downs: Vec<Resample>,
    bottleneck: Stage,
    ups: Vec<Resample>,
    fuses: Vec<Pointwise>,
    decoder: Vec<Stage>,
    head: Pointwise,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    feats: Tensor,
    noisy: ComplexSpectrogram,
    head_in: Tensor,
    head_out: Tensor,
    encoder: Vec<StageTrace>,
    skips: Vec<Tensor>,
    bottleneck: StageTrace,
    up_in: Vec<Tensor>,
    fuse_in: Vec<Tensor>,
    decoder: Vec<StageTrace>,
}

pub fn build_model(cfg: ModelConfig, rng: &mut Rng) -> Result<Model> {
    Model::build(cfg, rng)
}

pub fn count_params(model: &Model) -> ParamReport {
    model.param_report()
}

pub fn forward_enhance(model: &Model, spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    model.enhance(spec)
}

impl Model {
    pub fn build(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let levels = cfg.levels;
        let input = b.pointwise(INPUT_FEATURES, cfg.width(0), None);
        let mut encoder = Vec::with_capacity(levels);
        let mut downs = Vec::with_capacity(levels);
        for l in 0..levels {
            encoder.push(b.stage(&cfg.idconv(l), cfg.ffn_ratio));
            downs.push(b.resample(cfg.width(l), cfg.width(l + 1)));
        }
        let bottleneck = b.stage(&cfg.idconv(levels - 1), cfg.ffn_ratio);
        let mut ups = Vec::with_capacity(levels);
        let mut fuses = Vec::with_capacity(levels);
        let mut decoder = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = cfg.width(l);
            ups.push(b.resample(cfg.width(l + 1), c));
            fuses.push(b.pointwise(2 * c, c, None));
            decoder.push(b.stage(&cfg.idconv(l), cfg.ffn_ratio));
        }
        // decoder vectors are indexed by level
        ups.reverse();
        fuses.reverse();
        decoder.reverse();
        let head = b.pointwise(cfg.width(0), 2, Some(0.01));
        Ok(Self {
            cfg,
            params: b.params,
            input,
            encoder,
            downs,
            bottleneck,
            ups,
            fuses,
            decoder,
            head,
        })
    }

    /// Rebuilds the layout for `cfg` and installs `params` (e.g. from a
    /// checkpoint).
    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::build(cfg, &mut Rng::new(0))?;
        if params.len() != model.params.len() {
            return Err(Error::Config(alloc::format!(
                "expected {} parameters for this configuration, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output head so the mask is exactly the identity.
    pub fn zero_head(&mut self) {
        for s in [self.head.w, self.head.b] {
            s.of_mut(&mut self.params).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport {
            embedding: self.input.count(),
            attention: 0,
            resampling: 0,
            head: self.head.count(),
            total: 0,
        };
        for s in self.encoder.iter().chain(&self.decoder).chain(core::iter::once(&self.bottleneck)) {
            let (e, a) = s.count();
            r.embedding += e;
            r.attention += a;
        }
        r.resampling = self.downs.iter().chain(&self.ups).map(Resample::count).sum::<usize>()
            + self.fuses.iter().map(Pointwise::count).sum::<usize>();
        r.total = r.embedding + r.attention + r.resampling + r.head;
        debug_assert_eq!(r.total, self.params.len());
        r
    }

    /// Inception depthwise kernel count of one level, for cross-checking
    /// against [`idconv_param_count`].
    pub fn idconv_params_at(&self, level: usize) -> usize {
        idconv_param_count(&self.cfg.idconv(level))
    }

    fn padded_dims(&self, bins: usize, frames: usize) -> (usize, usize) {
        let m = self.cfg.multiple();
        (bins.div_ceil(m) * m, frames.div_ceil(m) * m)
    }

    fn features(&self, spec: &ComplexSpectrogram) -> Tensor {
        let (f, t) = (spec.bins(), spec.frames());
        let (hp, wp) = self.padded_dims(f, t);
        let mag = spec.magnitude();
        let ms = mag.data().iter().map(|m| m * m).sum::<f64>() / mag.len() as f64;
        let scale = 1.0 / libm::sqrt(ms + 1e-12);
        let plane = hp * wp;
        let mut out = vec![0.0; INPUT_FEATURES * plane];
        for i in 0..f {
            for j in 0..wp {
                let src = i * t + reflect(j, t);
                let m = mag.data()[src];
                if m == 0.0 {
                    continue;
                }
                let mc = libm::pow(m * scale, self.cfg.compress);
                let dst = i * wp + j;
                out[dst] = mc * spec.real.data()[src] / m;
                out[plane + dst] = mc * spec.imag.data()[src] / m;
                out[2 * plane + dst] = mc;
            }
        }
        Tensor::new(&[INPUT_FEATURES, hp, wp], out).expect("feature shape")
    }

    fn check_spec(&self, spec: &ComplexSpectrogram) -> Result<()> {
        if spec.bins() != self.cfg.stft.bins() {
            return Err(Error::Config(alloc::format!(
                "spectrogram has {} bins, model expects {}",
                spec.bins(),
                self.cfg.stft.bins()
            )));
        }
        if spec.frames() == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(())
    }

    pub fn enhance(&self, spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        Ok(self.forward_trace(spec)?.0)
    }

    /// Forward pass that also returns the activations needed by
    /// [`Model::backward`].
    pub fn forward_trace(&self, spec: &ComplexSpectrogram) -> Result<(ComplexSpectrogram, Trace)> {
        self.check_spec(spec)?;
        let p = &self.params[..];
        let (heads, axis) = (self.cfg.heads, self.cfg.attention_axis);
        let feats = self.features(spec);
        let mut z = self.input.forward(p, &feats);

        let levels = self.cfg.levels;
        let mut enc_traces = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            let (s, tr) = self.encoder[l].forward(p, z, heads, axis)?;
            enc_traces.push(tr);
            z = nn::down2(&s, self.downs[l].w.of(p), self.downs[l].b.of(p));
            skips.push(s);
        }
        let (mut z, bottleneck) = self.bottleneck.forward(p, z, heads, axis)?;

        let mut up_in: Vec<Tensor> = (0..levels).map(|_| Tensor::zeros(&[0])).collect();
        let mut fuse_in: Vec<Tensor> = up_in.clone();
        let mut dec_traces: Vec<Option<StageTrace>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            let u = nn::up2(&z, self.ups[l].w.of(p), self.ups[l].b.of(p));
            let cat = crate::idconv::concat_channels(&[u, skips[l].clone()])?;
            let fused = self.fuses[l].forward(p, &cat);
            let (out, tr) = self.decoder[l].forward(p, fused, heads, axis)?;
            up_in[l] = z;
            fuse_in[l] = cat;
            dec_traces[l] = Some(tr);
            z = out;
        }
        let head_out = self.head.forward(p, &z);
        let enhanced = apply_mask(spec, &head_out);
        let trace = Trace {
            feats,
            noisy: spec.clone(),
            head_in: z,
            head_out,
            encoder: enc_traces,
            skips,
            bottleneck,
            up_in,
            fuse_in,
            decoder: dec_traces.into_iter().map(|t| t.expect("every level traced")).collect(),
        };
        Ok((enhanced, trace))
    }

    /// Parameter gradient given the gradient of a scalar loss with respect to
    /// the enhanced spectrogram returned by [`Model::forward_trace`].
    pub fn backward(&self, trace: &Trace, d_enhanced: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let p = &self.params[..];
        let mut g = vec![0.0; p.len()];
        let (heads, axis) = (self.cfg.heads, self.cfg.attention_axis);
        let levels = self.cfg.levels;

        let dhead = mask_backward(&trace.noisy, &trace.head_out, d_enhanced)?;
        let mut dz = self.head.backward(p, &mut g, &trace.head_in, &dhead);

        let mut dskips: Vec<Tensor> = Vec::with_capacity(levels);
        for l in 0..levels {
            let dfused = self.decoder[l].backward(p, &mut g, &trace.decoder[l], dz, heads, axis)?;
            let dcat = self.fuses[l].backward(p, &mut g, &trace.fuse_in[l], &dfused);
            let c = self.cfg.width(l);
            let plane = dcat.dim(1) * dcat.dim(2);
            let du = Tensor::new(&[c, dcat.dim(1), dcat.dim(2)], dcat.data()[..c * plane].to_vec())?;
            dskips.push(Tensor::new(&[c, dcat.dim(1), dcat.dim(2)], dcat.data()[c * plane..].to_vec())?);
            let up = &self.ups[l];
            let (mut dw, mut db) = (vec![0.0; up.w.len], vec![0.0; up.b.len]);
            dz = nn::up2_backward(&trace.up_in[l], up.w.of(p), &du, &mut dw, &mut db);
            add_into(up.w.of_mut(&mut g), &dw);
            add_into(up.b.of_mut(&mut g), &db);
        }
        dz = self.bottleneck.backward(p, &mut g, &trace.bottleneck, dz, heads, axis)?;
        for l in (0..levels).rev() {
            let down = &self.downs[l];
            let (mut dw, mut db) = (vec![0.0; down.w.len], vec![0.0; down.b.len]);
            let ds = nn::down2_backward(&trace.skips[l], down.w.of(p), &dz, &mut dw, &mut db);
            add_into(down.w.of_mut(&mut g), &dw);
            add_into(down.b.of_mut(&mut g), &db);
            let ds = ds.add(&dskips[l])?;
            dz = self.encoder[l].backward(p, &mut g, &trace.encoder[l], ds, heads, axis)?;
        }
        self.input.backward(p, &mut g, &trace.feats, &dz);
        Ok(g)
    }
}

/// Reflect index `j` into `[0, n)` without repeating the edge sample.
fn reflect(j: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = j % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mask `(1 + tanh a) e^{i b}` from the head output, cropped to the
/// spectrogram, applied multiplicatively.
fn apply_mask(noisy: &ComplexSpectrogram, head: &Tensor) -> ComplexSpectrogram {
    let (f, t) = (noisy.bins(), noisy.frames());
    let (hp, wp) = (head.dim(1), head.dim(2));
    let mut out = ComplexSpectrogram::zeros(noisy.cfg, t);
    for i in 0..f {
        for j in 0..t {
            let a = head.data()[i * wp + j];
            let b = head.data()[hp * wp + i * wp + j];
            let g = 1.0 + libm::tanh(a);
            let (mr, mi) = (g * libm::cos(b), g * libm::sin(b));
            let idx = i * t + j;
            let (xr, xi) = (noisy.real.data()[idx], noisy.imag.data()[idx]);
            out.real.data_mut()[idx] = mr * xr - mi * xi;
            out.imag.data_mut()[idx] = mr * xi + mi * xr;
        }
    }
    out
}

fn mask_backward(noisy: &ComplexSpectrogram, head: &Tensor, dy: &ComplexSpectrogram) -> Result<Tensor> {
    let (f, t) = (noisy.bins(), noisy.frames());
    if dy.real.shape() != noisy.real.shape() {
        return Err(Error::Shape {
            op: "mask_backward",
            left: noisy.real.shape().to_vec(),
            right: dy.real.shape().to_vec(),
        });
    }
    let (hp, wp) = (head.dim(1), head.dim(2));
    let mut out = Tensor::zeros(head.shape());
    for i in 0..f {
        for j in 0..t {
            let ia = i * wp + j;
            let ib = hp * wp + ia;
            let (a, b) = (head.data()[ia], head.data()[ib]);
            let th = libm::tanh(a);
            let g = 1.0 + th;
            let (cb, sb) = (libm::cos(b), libm::sin(b));
            let idx = i * t + j;
            let (xr, xi) = (noisy.real.data()[idx], noisy.imag.data()[idx]);
            let (gr, gi) = (dy.real.data()[idx], dy.imag.data()[idx]);
            let dmr = gr * xr + gi * xi;
            let dmi = -gr * xi + gi * xr;
            let dg = dmr * cb + dmi * sb;
            out.data_mut()[ia] = dg * (1.0 - th * th);
            out.data_mut()[ib] = g * (-dmr * sb + dmi * cb);
        }
    }
    Ok(out)
}
