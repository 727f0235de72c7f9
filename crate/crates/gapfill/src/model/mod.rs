//! The imputation network: per-frame multi-scale convolutional encoding,
//! temporal self-attention with data-driven queries at the bottleneck,
//! attention-weighted skip connections, per-frame convolutional decoding, and
//! a sinusoidal day-based positional encoding.
//!
//! Everything is computed in `f64` with hand-written backward passes;
//! [`TemporalUnet::forward`] is pure and safe to call concurrently with
//! frozen weights.

pub mod checkpoint;
pub mod layers;
pub mod temporal;

use ndarray::{s, Array2, Array3, Array4, Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::SampleRecord;
use crate::error::{Error, Result};
use layers::{
    bilinear_resize, bilinear_resize_backward, relu_backward, relu_inplace, sigmoid_backward,
    sigmoid_inplace, Conv2d, ConvTranspose2d, GradStore, ParamId, ParamRegistry,
};
use temporal::{TemporalCache, TemporalEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncodingMode {
    /// Encode the acquisition date as days since January 1st.
    DayOfYear,
    /// Encode the day offset from the first observation of the sequence.
    DayInSequence,
    /// Encode the ordinal frame position `0..T`.
    Enumeration,
    /// No positional information.
    None,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels, including auxiliary ones.
    pub in_channels: usize,
    /// Regressed (reconstruct) channels.
    pub out_channels: usize,
    /// Filter channels of the spatial encoder/decoder (`d`).
    pub base_channels: usize,
    /// Latent feature dimension at the lowest resolution (`D`).
    pub bottleneck_channels: usize,
    /// Number of 2× downsampling steps; the bottleneck sits at `H/2^L`.
    pub levels: usize,
    /// Attention heads (`G`), each owning `D/G` embedding channels.
    pub heads: usize,
    /// Dimension of the data-driven keys and queries per head.
    pub key_dim: usize,
    /// Groups of the pre-attention / pre-MLP group normalization.
    pub norm_groups: usize,
    pub pe_mode: PositionalEncodingMode,
    /// Wavelength base of the sinusoidal positional encoding.
    pub tau: f64,
    /// Ablation switch: without the temporal encoder the network is a plain
    /// per-frame U-Net with ordinary skip connections.
    pub temporal_encoder: bool,
    /// Ablation switch: temporally weighted skips vs. ordinary concatenation.
    pub weighted_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 4,
            base_channels: 64,
            bottleneck_channels: 128,
            levels: 3,
            heads: 4,
            key_dim: 4,
            norm_groups: 4,
            pe_mode: PositionalEncodingMode::DayOfYear,
            tau: 1000.0,
            temporal_encoder: true,
            weighted_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels > self.in_channels {
            return Err(Error::param("out_channels", "must be <= in_channels"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::param("channels", "must be >= 1"));
        }
        if self.levels == 0 {
            return Err(Error::param("levels", "must be >= 1"));
        }
        if self.bottleneck_channels % self.heads != 0 {
            return Err(Error::param(
                "bottleneck_channels",
                "must be divisible by heads",
            ));
        }
        if self.bottleneck_channels % self.norm_groups != 0 {
            return Err(Error::param(
                "bottleneck_channels",
                "must be divisible by norm_groups",
            ));
        }
        if self.key_dim == 0 || self.heads == 0 {
            return Err(Error::param("heads/key_dim", "must be >= 1"));
        }
        if self.tau <= 0.0 {
            return Err(Error::param("tau", "must be > 0"));
        }
        if self.weighted_skip && !self.temporal_encoder {
            return Err(Error::param(
                "weighted_skip",
                "requires the temporal encoder",
            ));
        }
        Ok(())
    }

    /// Reject spatial sizes that do not survive `levels` halvings.
    pub fn validate_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::shape(
                "input spatial size",
                format!("multiple of {div}"),
                format!("{h}×{w}"),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding `PE(t, k) = sin(v_t / τ^(2k/D) + π/2·(k mod 2))`,
/// where `v_t` depends on the mode: the acquisition day-of-year, the day
/// offset from the first observation, the frame index, or nothing (zeros).
pub fn positional_encoding(
    days: &[u32],
    d_model: usize,
    tau: f64,
    mode: PositionalEncodingMode,
) -> Array2<f64> {
    let t_len = days.len();
    if mode == PositionalEncodingMode::None {
        return Array2::zeros((t_len, d_model));
    }
    let mut pe = Array2::zeros((t_len, d_model));
    for (t, &day) in days.iter().enumerate() {
        let v = match mode {
            PositionalEncodingMode::DayOfYear => day as f64,
            PositionalEncodingMode::DayInSequence => (day - days[0]) as f64,
            PositionalEncodingMode::Enumeration => t as f64,
            PositionalEncodingMode::None => unreachable!(),
        };
        for k in 0..d_model {
            let wavelength = tau.powf(2.0 * k as f64 / d_model as f64);
            let phase = if k % 2 == 1 {
                std::f64::consts::FRAC_PI_2
            } else {
                0.0
            };
            pe[[t, k]] = (v / wavelength + phase).sin();
        }
    }
    pe
}

/// Per-head temporal attention scores at some spatial resolution:
/// `(G, T_query, T_key, h, w)`. Rows are softmax-normalized over keys.
#[derive(Debug, Clone)]
pub struct AttentionVolume {
    pub scores: Array5<f64>,
}

impl AttentionVolume {
    pub(crate) fn from_heads(heads: &[Array3<f64>], h: usize, w: usize) -> Self {
        let g = heads.len();
        let (tq, tk, p) = heads[0].dim();
        assert_eq!(p, h * w);
        let mut scores = Array5::zeros((g, tq, tk, h, w));
        for (gi, head) in heads.iter().enumerate() {
            for q in 0..tq {
                for k in 0..tk {
                    for y in 0..h {
                        for x in 0..w {
                            scores[[gi, q, k, y, x]] = head[[q, k, y * w + x]];
                        }
                    }
                }
            }
        }
        AttentionVolume { scores }
    }

    pub fn heads(&self) -> usize {
        self.scores.dim().0
    }

    pub fn t_len(&self) -> usize {
        self.scores.dim().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.scores.dim();
        (d.3, d.4)
    }

    /// Average over heads: `(T_query, T_key, h, w)`.
    pub fn head_mean(&self) -> Array4<f64> {
        let (g, tq, tk, h, w) = self.scores.dim();
        let mut out = Array4::zeros((tq, tk, h, w));
        for gi in 0..g {
            out += &self.scores.index_axis(Axis(0), gi);
        }
        out.mapv_inplace(|v| v / g as f64);
        out
    }

    /// Largest deviation of any per-(head, query, pixel) key-sum from 1.
    pub fn max_key_sum_deviation(&self) -> f64 {
        let (g, tq, tk, h, w) = self.scores.dim();
        let mut worst: f64 = 0.0;
        for gi in 0..g {
            for q in 0..tq {
                for y in 0..h {
                    for x in 0..w {
                        let sum: f64 = (0..tk).map(|k| self.scores[[gi, q, k, y, x]]).sum();
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Spatially upsample attention scores with bilinear interpolation. Key-sums
/// are preserved by linearity of the interpolation.
pub fn upsample_attention(attn: &AttentionVolume, out_h: usize, out_w: usize) -> AttentionVolume {
    let (g, tq, tk, h, w) = attn.scores.dim();
    let flat = attn
        .scores
        .clone()
        .into_shape_with_order((g * tq * tk, h, w))
        .expect("contiguous scores");
    let resized = bilinear_resize(&flat, out_h, out_w);
    let scores = resized
        .into_shape_with_order((g, tq, tk, out_h, out_w))
        .expect("reshape back");
    AttentionVolume { scores }
}

/// Per-level encoder feature volumes, `levels[l]` of shape
/// `(T, d_l, H/2^l, W/2^l)` for `l = 0..=L`; the last level is the bottleneck.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Array4<f64>>,
}

// ---------------------------------------------------------------------------
// Convolutional blocks
// ---------------------------------------------------------------------------

/// `h1 = relu(conv_a(x)); y = relu(h1 + conv_b(h1))`.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

impl ConvBlock {
    fn new(
        registry: &mut ParamRegistry,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        ConvBlock {
            conv_a: Conv2d::new(registry, &format!("{name}.conv_a"), c_in, c_out, 3, 1, 1, rng),
            conv_b: Conv2d::new(registry, &format!("{name}.conv_b"), c_out, c_out, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
        let mut h1 = self.conv_a.forward(x);
        relu_inplace(&mut h1);
        let mut y = self.conv_b.forward(&h1);
        y += &h1;
        relu_inplace(&mut y);
        (y, h1)
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        h1: &Array4<f64>,
        y: &Array4<f64>,
        dy: &Array4<f64>,
        grads: &mut GradStore,
    ) -> Array4<f64> {
        let dsum = relu_backward(y, dy);
        let mut dh1 = self.conv_b.backward(h1, &dsum, grads);
        dh1 += &dsum;
        let da = relu_backward(h1, &dh1);
        self.conv_a.backward(x, &da, grads)
    }

    fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        self.conv_a.visit(f);
        self.conv_b.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        self.conv_a.visit_mut(f);
        self.conv_b.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<ConvBlock>,
    downs: Vec<Conv2d>,
}

struct EncoderPass {
    /// Block outputs per level; `feats[L]` is the bottleneck embedding.
    feats: Vec<Array4<f64>>,
    h1: Vec<Array4<f64>>,
    /// Post-ReLU outputs of the strided downsampling convolutions.
    down_out: Vec<Array4<f64>>,
}

impl Encoder {
    fn new(registry: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let (d, dd, l) = (cfg.base_channels, cfg.bottleneck_channels, cfg.levels);
        let mut blocks = Vec::with_capacity(l + 1);
        blocks.push(ConvBlock::new(registry, "enc.block0", cfg.in_channels, d, rng));
        for li in 1..l {
            blocks.push(ConvBlock::new(registry, &format!("enc.block{li}"), d, d, rng));
        }
        blocks.push(ConvBlock::new(registry, &format!("enc.block{l}"), dd, dd, rng));

        let mut downs = Vec::with_capacity(l);
        for li in 0..l {
            let c_out = if li == l - 1 { dd } else { d };
            downs.push(Conv2d::new(
                registry,
                &format!("enc.down{li}"),
                d,
                c_out,
                3,
                2,
                1,
                rng,
            ));
        }
        Encoder { blocks, downs }
    }

    fn forward(&self, x: &Array4<f64>) -> EncoderPass {
        let l = self.downs.len();
        let mut feats = Vec::with_capacity(l + 1);
        let mut h1s = Vec::with_capacity(l + 1);
        let mut down_out = Vec::with_capacity(l);

        let (f0, h1) = self.blocks[0].forward(x);
        feats.push(f0);
        h1s.push(h1);
        for li in 0..l {
            let mut down = self.downs[li].forward(&feats[li]);
            relu_inplace(&mut down);
            let (f, h1) = self.blocks[li + 1].forward(&down);
            down_out.push(down);
            feats.push(f);
            h1s.push(h1);
        }
        EncoderPass {
            feats,
            h1: h1s,
            down_out,
        }
    }

    /// `dfeats[l]` is the total gradient flowing into each level's features.
    fn backward(
        &self,
        x: &Array4<f64>,
        pass: &EncoderPass,
        mut dfeats: Vec<Array4<f64>>,
        grads: &mut GradStore,
    ) {
        let l = self.downs.len();
        for li in (1..=l).rev() {
            let block_in = &pass.down_out[li - 1];
            let dblock_in = self.blocks[li].backward(
                block_in,
                &pass.h1[li],
                &pass.feats[li],
                &dfeats[li],
                grads,
            );
            let dpre = relu_backward(block_in, &dblock_in);
            let dprev = self.downs[li - 1].backward(&pass.feats[li - 1], &dpre, grads);
            dfeats[li - 1] += &dprev;
        }
        self.blocks[0].backward(x, &pass.h1[0], &pass.feats[0], &dfeats[0], grads);
    }

    fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        for b in &self.blocks {
            b.visit(f);
        }
        for d in &self.downs {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        for d in &mut self.downs {
            d.visit_mut(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Weighted skip mixing
// ---------------------------------------------------------------------------

/// `out[tq, c] = Σ_tk attn[tq, tk] ∘ feats[tk, c]`, per pixel.
fn attention_mix(attn: &Array4<f64>, feats: &Array4<f64>) -> Array4<f64> {
    let (tq_n, tk_n, h, w) = attn.dim();
    let (tf, c, hf, wf) = feats.dim();
    assert_eq!((tk_n, h, w), (tf, hf, wf), "attention/feature alignment");
    let p = h * w;
    let a = attn.as_slice().expect("contiguous attention");
    let f = feats.as_slice().expect("contiguous features");
    let mut out = Array4::zeros((tq_n, c, h, w));
    {
        let o = out.as_slice_mut().expect("contiguous output");
        for tq in 0..tq_n {
            for tk in 0..tk_n {
                let a_plane = &a[(tq * tk_n + tk) * p..(tq * tk_n + tk + 1) * p];
                for ci in 0..c {
                    let src = &f[(tk * c + ci) * p..(tk * c + ci + 1) * p];
                    let dst = &mut o[(tq * c + ci) * p..(tq * c + ci + 1) * p];
                    for i in 0..p {
                        dst[i] += a_plane[i] * src[i];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`attention_mix`] w.r.t. both inputs.
fn attention_mix_backward(
    attn: &Array4<f64>,
    feats: &Array4<f64>,
    dout: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (tq_n, tk_n, h, w) = attn.dim();
    let c = feats.dim().1;
    let p = h * w;
    let a = attn.as_slice().expect("contiguous attention");
    let f = feats.as_slice().expect("contiguous features");
    let d = dout.as_slice().expect("contiguous dout");
    let mut dattn = Array4::zeros((tq_n, tk_n, h, w));
    let mut dfeats = Array4::zeros(feats.dim());
    {
        let da = dattn.as_slice_mut().expect("contiguous dattn");
        let df = dfeats.as_slice_mut().expect("contiguous dfeats");
        for tq in 0..tq_n {
            for tk in 0..tk_n {
                let a_plane = &a[(tq * tk_n + tk) * p..(tq * tk_n + tk + 1) * p];
                let da_plane = &mut da[(tq * tk_n + tk) * p..(tq * tk_n + tk + 1) * p];
                for ci in 0..c {
                    let src = &f[(tk * c + ci) * p..(tk * c + ci + 1) * p];
                    let dsrc = (tk * c + ci) * p;
                    let dout_plane = &d[(tq * c + ci) * p..(tq * c + ci + 1) * p];
                    for i in 0..p {
                        da_plane[i] += dout_plane[i] * src[i];
                        df[dsrc + i] += a_plane[i] * dout_plane[i];
                    }
                }
            }
        }
    }
    (dattn, dfeats)
}

/// Channel-wise concatenation into a freshly allocated standard-layout array.
fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (t, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((t, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<ConvTranspose2d>,
    skip_projs: Option<Vec<Conv2d>>,
    blocks: Vec<ConvBlock>,
    final_conv: Conv2d,
}

struct DecoderPass {
    up_out: Vec<Array4<f64>>,
    aup: Vec<Option<Array4<f64>>>,
    smix: Vec<Option<Array4<f64>>>,
    sproj: Vec<Option<Array4<f64>>>,
    cat: Vec<Array4<f64>>,
    h1: Vec<Array4<f64>>,
    block_out: Vec<Array4<f64>>,
    out: Array4<f64>,
}

impl Decoder {
    fn new(registry: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let (d, dd, l) = (cfg.base_channels, cfg.bottleneck_channels, cfg.levels);
        let mut ups = Vec::with_capacity(l);
        let mut blocks = Vec::with_capacity(l);
        let mut projs = Vec::with_capacity(l);
        for i in 0..l {
            let level = l - 1 - i;
            let c_in = if i == 0 { dd } else { d };
            ups.push(ConvTranspose2d::new(
                registry,
                &format!("dec.up{level}"),
                c_in,
                d,
                rng,
            ));
            if cfg.weighted_skip {
                projs.push(Conv2d::new(
                    registry,
                    &format!("dec.skip{level}"),
                    d,
                    d,
                    1,
                    1,
                    0,
                    rng,
                ));
            }
            blocks.push(ConvBlock::new(
                registry,
                &format!("dec.block{level}"),
                2 * d,
                d,
                rng,
            ));
        }
        let final_conv = Conv2d::new(registry, "dec.final", d, cfg.out_channels, 3, 1, 1, rng);
        Decoder {
            ups,
            skip_projs: if cfg.weighted_skip { Some(projs) } else { None },
            blocks,
            final_conv,
        }
    }

    /// `abar` is the head-averaged bottleneck attention, present only for
    /// weighted skips.
    fn forward(
        &self,
        z: &Array4<f64>,
        pyramid: &[Array4<f64>],
        abar: Option<&Array4<f64>>,
    ) -> DecoderPass {
        let l = self.ups.len();
        let mut up_out = Vec::with_capacity(l);
        let mut aups = Vec::with_capacity(l);
        let mut smixs = Vec::with_capacity(l);
        let mut sprojs = Vec::with_capacity(l);
        let mut cats = Vec::with_capacity(l);
        let mut h1s = Vec::with_capacity(l);
        let mut block_out: Vec<Array4<f64>> = Vec::with_capacity(l);

        for i in 0..l {
            let level = l - 1 - i;
            let input = if i == 0 { z } else { &block_out[i - 1] };
            let mut up = self.ups[i].forward(input);
            relu_inplace(&mut up);

            let skip_feat = &pyramid[level];
            let skip_used = if let (Some(projs), Some(abar)) = (&self.skip_projs, abar) {
                let (t, tk, _, _) = abar.dim();
                let (hl, wl) = (skip_feat.dim().2, skip_feat.dim().3);
                let flat = abar
                    .clone()
                    .into_shape_with_order((t * tk, abar.dim().2, abar.dim().3))
                    .expect("contiguous abar");
                let aup = bilinear_resize(&flat, hl, wl)
                    .into_shape_with_order((t, tk, hl, wl))
                    .expect("reshape aup");
                let smix = attention_mix(&aup, skip_feat);
                let mut sp = projs[i].forward(&smix);
                relu_inplace(&mut sp);
                aups.push(Some(aup));
                smixs.push(Some(smix));
                sprojs.push(Some(sp.clone()));
                sp
            } else {
                aups.push(None);
                smixs.push(None);
                sprojs.push(None);
                skip_feat.clone()
            };

            let cat = concat_channels(&up, &skip_used);
            let (y, h1) = self.blocks[i].forward(&cat);
            up_out.push(up);
            cats.push(cat);
            h1s.push(h1);
            block_out.push(y);
        }

        let mut out = self.final_conv.forward(block_out.last().expect("levels >= 1"));
        sigmoid_inplace(&mut out);

        DecoderPass {
            up_out,
            aup: aups,
            smix: smixs,
            sproj: sprojs,
            cat: cats,
            h1: h1s,
            block_out,
            out,
        }
    }

    /// Returns `(dz, dpyramid, dabar)`.
    fn backward(
        &self,
        z: &Array4<f64>,
        pyramid: &[Array4<f64>],
        pass: &DecoderPass,
        dout: &Array4<f64>,
        grads: &mut GradStore,
    ) -> (Array4<f64>, Vec<Array4<f64>>, Option<Array4<f64>>) {
        let l = self.ups.len();
        let mut dpyramid: Vec<Array4<f64>> = pyramid
            .iter()
            .map(|f| Array4::zeros(f.dim()))
            .collect();
        let mut dabar: Option<Array4<f64>> = None;

        let dlogits = sigmoid_backward(&pass.out, dout);
        let mut dcur = self
            .final_conv
            .backward(pass.block_out.last().expect("levels >= 1"), &dlogits, grads);

        for i in (0..l).rev() {
            let level = l - 1 - i;
            let dcat = self.blocks[i].backward(
                &pass.cat[i],
                &pass.h1[i],
                &pass.block_out[i],
                &dcur,
                grads,
            );
            let d = pass.up_out[i].dim().1;
            let dup = dcat.slice(s![.., ..d, .., ..]).to_owned();
            let dskip_used = dcat.slice(s![.., d.., .., ..]).to_owned();

            if let (Some(projs), Some(aup)) = (&self.skip_projs, &pass.aup[i]) {
                let sp = pass.sproj[i].as_ref().expect("weighted skip cache");
                let smix = pass.smix[i].as_ref().expect("weighted skip cache");
                let dpre = relu_backward(sp, &dskip_used);
                let dsmix = projs[i].backward(smix, &dpre, grads);
                let (daup, dfeat) = attention_mix_backward(aup, &pyramid[level], &dsmix);
                dpyramid[level] += &dfeat;

                let (t, tk, hl, wl) = daup.dim();
                let flat = daup
                    .into_shape_with_order((t * tk, hl, wl))
                    .expect("contiguous daup");
                let coarse = dabar
                    .get_or_insert_with(|| {
                        let (bh, bw) = {
                            let d = pyramid.last().expect("bottleneck").dim();
                            (d.2, d.3)
                        };
                        Array4::zeros((t, tk, bh, bw))
                    });
                let (bh, bw) = (coarse.dim().2, coarse.dim().3);
                let back = bilinear_resize_backward(&flat, bh, bw)
                    .into_shape_with_order((t, tk, bh, bw))
                    .expect("reshape dabar");
                *coarse += &back;
            } else {
                dpyramid[level] += &dskip_used;
            }

            let input = if i == 0 { z } else { &pass.block_out[i - 1] };
            let dpre_up = relu_backward(&pass.up_out[i], &dup);
            let dinput = self.ups[i].backward(input, &dpre_up, grads);
            if i == 0 {
                return (dinput, dpyramid, dabar);
            }
            dcur = dinput;
        }
        unreachable!("levels >= 1");
    }

    fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        for u in &self.ups {
            u.visit(f);
        }
        if let Some(projs) = &self.skip_projs {
            for p in projs {
                p.visit(f);
            }
        }
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        for u in &mut self.ups {
            u.visit_mut(f);
        }
        if let Some(projs) = &mut self.skip_projs {
            for p in projs {
                p.visit_mut(f);
            }
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TemporalUnet {
    pub config: ModelConfig,
    registry: ParamRegistry,
    encoder: Encoder,
    temporal: Option<TemporalEncoder>,
    decoder: Decoder,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    x: Array4<f64>,
    enc: EncoderPass,
    temporal: Option<TemporalCache>,
    z: Array4<f64>,
    dec: DecoderPass,
}

/// Result of a forward evaluation; `output` is `(T, C_out, H, W)` with every
/// value strictly inside `(0, 1)`.
pub struct ForwardPass {
    pub output: Array4<f64>,
    pub attention: Option<AttentionVolume>,
    pub cache: ForwardCache,
}

impl TemporalUnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = ParamRegistry::default();
        let encoder = Encoder::new(&mut registry, &config, &mut rng);
        let temporal = if config.temporal_encoder {
            Some(TemporalEncoder::new(
                &mut registry,
                "te",
                config.bottleneck_channels,
                config.heads,
                config.key_dim,
                config.norm_groups,
                &mut rng,
            ))
        } else {
            None
        };
        let decoder = Decoder::new(&mut registry, &config, &mut rng);
        Ok(TemporalUnet {
            config,
            registry,
            encoder,
            temporal,
            decoder,
        })
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, s| n += s.len());
        n
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        self.encoder.visit(f);
        if let Some(te) = &self.temporal {
            te.visit(f);
        }
        self.decoder.visit(f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        self.encoder.visit_mut(f);
        if let Some(te) = &mut self.temporal {
            te.visit_mut(f);
        }
        self.decoder.visit_mut(f);
    }

    /// Cast a record's image volume to the model's working precision.
    pub fn volume_from_record(record: &SampleRecord) -> Array4<f64> {
        record.images.mapv(f64::from)
    }

    /// Per-frame multi-scale encoding: `(T, C_in, H, W)` → bottleneck
    /// `(T, D, H/2^L, W/2^L)` plus the retained feature pyramid.
    pub fn spatial_encode(&self, x: &Array4<f64>) -> Result<(Array4<f64>, FeaturePyramid)> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::shape(
                "input channels",
                self.config.in_channels.to_string(),
                c.to_string(),
            ));
        }
        self.config.validate_spatial(h, w)?;
        let pass = self.encoder.forward(x);
        let bottleneck = pass.feats.last().expect("levels >= 1").clone();
        Ok((
            bottleneck,
            FeaturePyramid {
                levels: pass.feats,
            },
        ))
    }

    /// Temporal self-attention over the bottleneck embedding.
    pub fn temporal_encode(
        &self,
        bottleneck: &Array4<f64>,
        pe: &Array2<f64>,
    ) -> Result<(Array4<f64>, AttentionVolume)> {
        let te = self
            .temporal
            .as_ref()
            .ok_or_else(|| Error::param("temporal_encoder", "disabled in this configuration"))?;
        let (t, d, h, w) = bottleneck.dim();
        if pe.dim() != (t, d) {
            return Err(Error::shape(
                "positional encoding",
                format!("{t}×{d}"),
                format!("{:?}", pe.dim()),
            ));
        }
        let flat = bottleneck
            .clone()
            .into_shape_with_order((t, d, h * w))
            .expect("contiguous bottleneck");
        let (z, cache) = te.forward(&flat, pe);
        let attn = AttentionVolume::from_heads(&cache.attn, h, w);
        let refined = z
            .into_shape_with_order((t, d, h, w))
            .expect("reshape refined");
        Ok((refined, attn))
    }

    /// Temporally weight one pyramid level with (already upsampled) attention
    /// scores: heads averaged, mixed over key frames, then the shared 1×1
    /// convolution with ReLU.
    pub fn weighted_skip(
        &self,
        level: usize,
        features: &Array4<f64>,
        attn_upsampled: &AttentionVolume,
    ) -> Result<Array4<f64>> {
        let projs = self
            .decoder
            .skip_projs
            .as_ref()
            .ok_or_else(|| Error::param("weighted_skip", "disabled in this configuration"))?;
        let (fh, fw) = (features.dim().2, features.dim().3);
        if attn_upsampled.spatial() != (fh, fw) {
            return Err(Error::shape(
                "upsampled attention",
                format!("{fh}×{fw}"),
                format!("{:?}", attn_upsampled.spatial()),
            ));
        }
        let abar = attn_upsampled.head_mean();
        let smix = attention_mix(&abar, features);
        let i = self.config.levels - 1 - level;
        let mut sp = projs[i].forward(&smix);
        relu_inplace(&mut sp);
        Ok(sp)
    }

    /// Mirror of the encoder: upsample, merge skips, regress reflectances.
    pub fn spatial_decode(
        &self,
        refined: &Array4<f64>,
        pyramid: &FeaturePyramid,
        attention: Option<&AttentionVolume>,
    ) -> Result<Array4<f64>> {
        let abar = match (self.config.weighted_skip, attention) {
            (true, Some(attn)) => Some(attn.head_mean()),
            (true, None) => {
                return Err(Error::param(
                    "attention",
                    "weighted skips need the attention volume",
                ))
            }
            (false, _) => None,
        };
        let pass = self
            .decoder
            .forward(refined, &pyramid.levels, abar.as_ref());
        Ok(pass.out)
    }

    /// Full forward pass on an imprinted record.
    pub fn forward(&self, record: &SampleRecord) -> Result<ForwardPass> {
        if record.channels() != self.config.in_channels {
            return Err(Error::shape(
                "record channels",
                self.config.in_channels.to_string(),
                record.channels().to_string(),
            ));
        }
        if record.reconstruct_indices().len() != self.config.out_channels {
            return Err(Error::shape(
                "reconstruct channels",
                self.config.out_channels.to_string(),
                record.reconstruct_indices().len().to_string(),
            ));
        }
        self.config.validate_spatial(record.height(), record.width())?;
        let x = Self::volume_from_record(record);
        Ok(self.forward_volume(x, &record.days))
    }

    /// Forward pass on a pre-validated `(T, C_in, H, W)` volume.
    pub fn forward_volume(&self, x: Array4<f64>, days: &[u32]) -> ForwardPass {
        let enc = self.encoder.forward(&x);
        let bottleneck = enc.feats.last().expect("levels >= 1");
        let (t, d_model, bh, bw) = bottleneck.dim();

        let (z, temporal_cache, attention, abar) = if let Some(te) = &self.temporal {
            let pe = positional_encoding(days, d_model, self.config.tau, self.config.pe_mode);
            let flat = bottleneck
                .clone()
                .into_shape_with_order((t, d_model, bh * bw))
                .expect("contiguous bottleneck");
            let (z3, cache) = te.forward(&flat, &pe);
            let attn = AttentionVolume::from_heads(&cache.attn, bh, bw);
            let abar = if self.config.weighted_skip {
                Some(attn.head_mean())
            } else {
                None
            };
            let z4 = z3
                .into_shape_with_order((t, d_model, bh, bw))
                .expect("reshape refined");
            (z4, Some(cache), Some(attn), abar)
        } else {
            (bottleneck.clone(), None, None, None)
        };

        let dec = self.decoder.forward(&z, &enc.feats, abar.as_ref());
        let output = dec.out.clone();

        ForwardPass {
            output,
            attention,
            cache: ForwardCache {
                x,
                enc,
                temporal: temporal_cache,
                z,
                dec,
            },
        }
    }

    /// Accumulate parameter gradients for `dL/d(output)` into `grads`.
    pub fn backward(&self, pass: &ForwardPass, doutput: &Array4<f64>, grads: &mut GradStore) {
        let cache = &pass.cache;
        let levels = self.config.levels;
        let (dz, mut dpyramid, dabar) = self.decoder.backward(
            &cache.z,
            &cache.enc.feats,
            &cache.dec,
            doutput,
            grads,
        );

        if let (Some(te), Some(tcache)) = (&self.temporal, &cache.temporal) {
            let (t, d_model, bh, bw) = cache.z.dim();
            let dz3 = dz
                .into_shape_with_order((t, d_model, bh * bw))
                .expect("contiguous dz");
            let g = te.heads();
            let dattn_ext: Vec<Array3<f64>> = match &dabar {
                Some(dab) => {
                    let scaled = dab.mapv(|v| v / g as f64);
                    let flat = scaled
                        .into_shape_with_order((t, t, bh * bw))
                        .expect("contiguous dabar");
                    (0..g).map(|_| flat.clone()).collect()
                }
                None => (0..g).map(|_| Array3::zeros((t, t, bh * bw))).collect(),
            };
            let dfb3 = te.backward(tcache, &dz3, &dattn_ext, grads);
            let dfb = dfb3
                .into_shape_with_order((t, d_model, bh, bw))
                .expect("reshape dfb");
            dpyramid[levels] += &dfb;
        } else {
            dpyramid[levels] += &dz;
        }

        self.encoder
            .backward(&cache.x, &cache.enc, dpyramid, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            out_channels: 2,
            base_channels: 8,
            bottleneck_channels: 16,
            levels: 3,
            heads: 2,
            key_dim: 4,
            norm_groups: 4,
            pe_mode: PositionalEncodingMode::DayOfYear,
            tau: 1000.0,
            temporal_encoder: true,
            weighted_skip: true,
        }
    }

    fn random_volume(t: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((t, c, h, w), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn positional_encoding_matches_scalar_oracle() {
        // Even k with zero argument, odd k phase shift, and a frozen
        // high-precision value of sin(100).
        let pe = positional_encoding(&[0], 4, 1000.0, PositionalEncodingMode::DayOfYear);
        assert_abs_diff_eq!(pe[[0, 0]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pe[[0, 1]], 1.0, epsilon = 1e-15);

        let pe = positional_encoding(&[100], 4, 1000.0, PositionalEncodingMode::DayOfYear);
        assert_abs_diff_eq!(pe[[0, 0]], -0.506_365_641_109_758_8, epsilon = 1e-12);
    }

    #[test]
    fn positional_encoding_modes() {
        let days = [40, 45, 55];
        let doy = positional_encoding(&days, 8, 1000.0, PositionalEncodingMode::DayOfYear);
        let dis = positional_encoding(&days, 8, 1000.0, PositionalEncodingMode::DayInSequence);
        let en = positional_encoding(&days, 8, 1000.0, PositionalEncodingMode::Enumeration);
        let none = positional_encoding(&days, 8, 1000.0, PositionalEncodingMode::None);

        assert_abs_diff_eq!(doy[[1, 0]], (45.0f64).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(dis[[1, 0]], (5.0f64).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(en[[1, 0]], (1.0f64).sin(), epsilon = 1e-15);
        assert!(none.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_and_output_shapes_follow_halving_rule() {
        let model = TemporalUnet::new(tiny_config(), 0).unwrap();
        let x = random_volume(5, 2, 32, 32, 1);
        let (bottleneck, pyramid) = model.spatial_encode(&x).unwrap();
        assert_eq!(bottleneck.dim(), (5, 16, 4, 4));
        assert_eq!(pyramid.levels.len(), 4);
        assert_eq!(pyramid.levels[0].dim(), (5, 8, 32, 32));
        assert_eq!(pyramid.levels[1].dim(), (5, 8, 16, 16));
        assert_eq!(pyramid.levels[2].dim(), (5, 8, 8, 8));

        let pass = model.forward_volume(x, &[10, 20, 30, 40, 50]);
        assert_eq!(pass.output.dim(), (5, 2, 32, 32));
        assert!(pass.output.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_indivisible_spatial_size() {
        let model = TemporalUnet::new(tiny_config(), 0).unwrap();
        let x = random_volume(2, 2, 30, 32, 2);
        assert!(model.spatial_encode(&x).is_err());
    }

    #[test]
    fn attention_key_sums_stay_normalized_after_upsampling() {
        let model = TemporalUnet::new(tiny_config(), 3).unwrap();
        let x = random_volume(4, 2, 16, 16, 4);
        let pass = model.forward_volume(x, &[5, 12, 19, 30]);
        let attn = pass.attention.unwrap();
        assert!(attn.max_key_sum_deviation() < 1e-5);
        assert_eq!(attn.scores.dim(), (2, 4, 4, 2, 2));

        let up = upsample_attention(&attn, 16, 16);
        assert!(up.max_key_sum_deviation() < 1e-5);
        assert_eq!(up.scores.dim(), (2, 4, 4, 16, 16));
    }

    #[test]
    fn upsample_attention_identity_and_constants() {
        let model = TemporalUnet::new(tiny_config(), 5).unwrap();
        let x = random_volume(3, 2, 16, 16, 6);
        let pass = model.forward_volume(x, &[5, 12, 19]);
        let attn = pass.attention.unwrap();
        let same = upsample_attention(&attn, 2, 2);
        assert_eq!(attn.scores, same.scores);

        // A constant map stays constant under interpolation.
        let constant = AttentionVolume {
            scores: Array5::from_elem((1, 2, 2, 3, 3), 0.5),
        };
        let up = upsample_attention(&constant, 9, 9);
        assert!(up.scores.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn weighted_skip_matches_nested_loop_oracle() {
        let model = TemporalUnet::new(tiny_config(), 7).unwrap();
        let x = random_volume(3, 2, 16, 16, 8);
        let pass = model.forward_volume(x, &[5, 12, 19]);
        let attn = pass.attention.unwrap();

        let feats = random_volume(3, 8, 16, 16, 9);
        let up = upsample_attention(&attn, 16, 16);
        let got = model.weighted_skip(0, &feats, &up).unwrap();

        // Independent nested-loop computation of head-mean, mixing, 1×1 conv
        // and ReLU.
        let (g, tq, tk, h, w) = up.scores.dim();
        let mut mixed = Array4::<f64>::zeros((tq, 8, h, w));
        for q in 0..tq {
            for c in 0..8 {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for k in 0..tk {
                            let mut a = 0.0;
                            for gi in 0..g {
                                a += up.scores[[gi, q, k, y, xx]];
                            }
                            acc += a / g as f64 * feats[[k, c, y, xx]];
                        }
                        mixed[[q, c, y, xx]] = acc;
                    }
                }
            }
        }
        let projs = model.decoder.skip_projs.as_ref().unwrap();
        let proj = &projs[model.config.levels - 1];
        let mut want = Array4::<f64>::zeros((tq, 8, h, w));
        for q in 0..tq {
            for co in 0..8 {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = proj.b[co];
                        for ci in 0..8 {
                            acc += proj.w[[co, ci, 0, 0]] * mixed[[q, ci, y, xx]];
                        }
                        want[[q, co, y, xx]] = acc.max(0.0);
                    }
                }
            }
        }
        assert_abs_diff_eq!(
            got.as_slice().unwrap(),
            want.as_slice().unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn diagonal_attention_recovers_per_frame_features() {
        // With identity attention over frames, the mixed features equal the
        // original per-frame features before the 1×1 convolution; with uniform
        // attention they equal the temporal mean.
        let feats = random_volume(4, 3, 4, 4, 10);
        let mut diag = Array4::<f64>::zeros((4, 4, 4, 4));
        for t in 0..4 {
            diag.slice_mut(s![t, t, .., ..]).fill(1.0);
        }
        let mixed = attention_mix(&diag, &feats);
        assert_abs_diff_eq!(
            mixed.as_slice().unwrap(),
            feats.as_slice().unwrap(),
            epsilon = 1e-14
        );

        let uniform = Array4::<f64>::from_elem((4, 4, 4, 4), 0.25);
        let mixed = attention_mix(&uniform, &feats);
        let mean = feats.mean_axis(Axis(0)).unwrap();
        for t in 0..4 {
            assert_abs_diff_eq!(
                mixed.slice(s![t, .., .., ..]).to_owned().as_slice().unwrap(),
                mean.as_slice().unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = TemporalUnet::new(tiny_config(), 11).unwrap();
        let x = random_volume(3, 2, 16, 16, 12);
        let a = model.forward_volume(x.clone(), &[5, 12, 19]);
        let b = model.forward_volume(x, &[5, 12, 19]);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn no_temporal_variant_runs_without_attention() {
        let mut cfg = tiny_config();
        cfg.temporal_encoder = false;
        cfg.weighted_skip = false;
        let model = TemporalUnet::new(cfg, 13).unwrap();
        let x = random_volume(3, 2, 16, 16, 14);
        let pass = model.forward_volume(x, &[5, 12, 19]);
        assert!(pass.attention.is_none());
        assert_eq!(pass.output.dim(), (3, 2, 16, 16));
    }

    #[test]
    fn permuting_frames_permutes_outputs_without_positional_encoding() {
        let mut cfg = tiny_config();
        cfg.pe_mode = PositionalEncodingMode::None;
        let model = TemporalUnet::new(cfg, 15).unwrap();
        let x = random_volume(4, 2, 16, 16, 16);
        let days = [5, 12, 19, 30];
        let base = model.forward_volume(x.clone(), &days);

        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![dst, .., .., ..])
                .assign(&x.slice(s![src, .., .., ..]));
        }
        let permuted = model.forward_volume(xp, &days);

        for (dst, &src) in perm.iter().enumerate() {
            let a = permuted.output.slice(s![dst, .., .., ..]);
            let b = base.output.slice(s![src, .., .., ..]);
            for (x1, x2) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x1, *x2, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn day_positional_encoding_breaks_permutation_equivariance() {
        let model = TemporalUnet::new(tiny_config(), 17).unwrap();
        let x = random_volume(4, 2, 16, 16, 18);
        let days = [5, 12, 19, 30];
        let base = model.forward_volume(x.clone(), &days);

        let perm = [1usize, 0, 3, 2];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![dst, .., .., ..])
                .assign(&x.slice(s![src, .., .., ..]));
        }
        // Same days, permuted frames: outputs must NOT be the permuted originals.
        let permuted = model.forward_volume(xp.clone(), &days);
        let mut max_diff: f64 = 0.0;
        for (dst, &src) in perm.iter().enumerate() {
            let a = permuted.output.slice(s![dst, .., .., ..]);
            let b = base.output.slice(s![src, .., .., ..]);
            for (x1, x2) in a.iter().zip(b.iter()) {
                max_diff = max_diff.max((x1 - x2).abs());
            }
        }
        assert!(max_diff > 1e-6, "day encoding had no effect: {max_diff}");

        // Permuting the days alongside restores equivariance.
        let days_p: Vec<u32> = perm.iter().map(|&s| days[s]).collect();
        let aligned = model.forward_volume(xp, &days_p);
        for (dst, &src) in perm.iter().enumerate() {
            let a = aligned.output.slice(s![dst, .., .., ..]);
            let b = base.output.slice(s![src, .., .., ..]);
            for (x1, x2) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x1, *x2, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn backward_gradients_match_finite_differences_on_weight_subset() {
        let mut model = TemporalUnet::new(tiny_config(), 19).unwrap();
        let x = random_volume(3, 2, 16, 16, 20);
        let days = [5, 12, 19];
        // Smooth scalar loss: a fixed random weighting of the outputs. The
        // production L1 objective has kinks that make per-parameter finite
        // differences unreliable; the masked-L1 gradient check with an
        // agreement quota lives in the acceptance suite.
        let weights = random_volume(3, 2, 16, 16, 21);

        let n = weights.len() as f64;
        let loss_of = |m: &TemporalUnet| -> f64 {
            let pass = m.forward_volume(x.clone(), &days);
            pass.output
                .iter()
                .zip(weights.iter())
                .map(|(p, w)| p * w)
                .sum::<f64>()
                / n
        };

        let pass = model.forward_volume(x.clone(), &days);
        let dout = weights.mapv(|w| w / n);
        let mut grads = GradStore::zeros(model.registry());
        model.backward(&pass, &dout, &mut grads);

        // Probe a few parameters from every part of the network.
        let mut probe_ids: Vec<(ParamId, usize)> = Vec::new();
        model.for_each_param(&mut |id, slice| {
            if !slice.is_empty() {
                probe_ids.push((id, slice.len() / 2));
            }
        });
        let step = (probe_ids.len() / 12).max(1);
        let probes: Vec<(ParamId, usize)> = probe_ids.into_iter().step_by(step).collect();

        // Individual probes can land on ReLU kinks or difference-quotient
        // noise, so agreement is judged as a quota: almost all probes must
        // match tightly and every probe at least loosely.
        let eps = 1e-5;
        let mut tight = 0usize;
        let mut total = 0usize;
        for (id, idx) in probes {
            let mut set = |m: &mut TemporalUnet, v: f64| {
                m.for_each_param_mut(&mut |pid, slice| {
                    if pid == id {
                        slice[idx] = v;
                    }
                });
            };
            let mut orig = 0.0;
            model.for_each_param(&mut |pid, slice| {
                if pid == id {
                    orig = slice[idx];
                }
            });
            set(&mut model, orig + eps);
            let lp = loss_of(&model);
            set(&mut model, orig - eps);
            let lm = loss_of(&model);
            set(&mut model, orig);
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.flat(id)[idx];
            let diff = (numeric - analytic).abs();
            let rel = diff / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                rel < 5e-2 || diff < 1e-7,
                "param {} idx {idx}: analytic {analytic} vs numeric {numeric}",
                model.registry().name(id)
            );
            if rel < 1e-3 || diff < 1e-9 {
                tight += 1;
            }
            total += 1;
        }
        assert!(total >= 8);
        assert!(
            tight * 10 >= total * 9,
            "only {tight}/{total} probes matched tightly"
        );
    }
}
