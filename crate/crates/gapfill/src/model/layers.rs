//! Differentiable building blocks: convolutions (direct and transposed),
//! linear projections, group normalization, activations and bilinear
//! resampling, each with a hand-written backward pass.
//!
//! Layers are immutable during the forward pass; gradients accumulate into a
//! separate [`GradStore`] so evaluation stays pure and concurrent-safe.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix1, Ix2, Ix4};
use rand::Rng;

/// Handle of one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Names and shapes of every parameter, in registration order. Registration
/// order is the canonical order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl ParamRegistry {
    pub fn register(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamRegistry`].
#[derive(Debug, Clone)]
pub struct GradStore {
    slots: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros(registry: &ParamRegistry) -> Self {
        let slots = registry
            .ids()
            .map(|id| ArrayD::zeros(registry.shape(id).to_vec()))
            .collect();
        GradStore { slots }
    }

    pub fn reset(&mut self) {
        for slot in &mut self.slots {
            slot.fill(0.0);
        }
    }

    pub fn flat(&self, id: ParamId) -> &[f64] {
        self.slots[id.0].as_slice().expect("grads are contiguous")
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ndarray::ArrayViewMut1<'_, f64> {
        self.slots[id.0]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 gradient")
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ndarray::ArrayViewMut2<'_, f64> {
        self.slots[id.0]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 gradient")
    }

    pub fn view4_mut(&mut self, id: ParamId) -> ndarray::ArrayViewMut4<'_, f64> {
        self.slots[id.0]
            .view_mut()
            .into_dimensionality::<Ix4>()
            .expect("rank-4 gradient")
    }

    /// Elementwise `self += other`, used to reduce per-sample gradients in a
    /// fixed order.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            *dst += src;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in &mut self.slots {
            slot.mapv_inplace(|v| v * factor);
        }
    }
}

// He-style uniform bound, variance-preserving under ReLU stacks.
fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let bound = (6.0 / fan_in as f64).sqrt();
    move || rng.gen_range(-bound..bound)
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold every frame of a `(T, C, H, W)` volume into a `(C*k*k, T*oh*ow)`
/// patch matrix; column index is `t*oh*ow + oy*ow + ox`. Batching the frames
/// into one matrix lets a single GEMM per layer cover the whole sequence.
#[allow(clippy::too_many_arguments)]
fn im2col_batch(
    x: &[f64],
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<f64>,
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let n = t * oh * ow;
    let cols_slice = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_off = ((ci * k + ky) * k + kx) * n;
                for ti in 0..t {
                    let frame = ti * c * h * w;
                    let out_frame = row_off + ti * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = out_frame + oy * ow;
                        if iy < 0 || iy >= h as isize {
                            cols_slice[dst..dst + ow].fill(0.0);
                            continue;
                        }
                        let src_row = frame + (ci * h + iy as usize) * w;
                        if stride == 1 {
                            // Contiguous span: ix = ox + kx - pad stays in
                            // bounds for ox in [lo, hi).
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(ow);
                            cols_slice[dst..dst + lo].fill(0.0);
                            cols_slice[dst + hi..dst + ow].fill(0.0);
                            let src = src_row + lo + kx - pad;
                            cols_slice[dst + lo..dst + hi]
                                .copy_from_slice(&x[src..src + hi - lo]);
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                cols_slice[dst + ox] = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    x[src_row + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a `(C*k*k, T*oh*ow)` patch matrix back onto a `(T, C, H, W)` volume,
/// adding overlapping contributions.
#[allow(clippy::too_many_arguments)]
fn col2im_batch_add(
    cols: &Array2<f64>,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let n = t * oh * ow;
    let cols_slice = cols.as_slice().expect("contiguous cols");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_off = ((ci * k + ky) * k + kx) * n;
                for ti in 0..t {
                    let frame = ti * c * h * w;
                    let src_frame = row_off + ti * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = frame + (ci * h + iy as usize) * w;
                        let src = src_frame + oy * ow;
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(ow);
                            let base = dst_row + lo + kx - pad;
                            let dst = &mut x[base..base + hi - lo];
                            let add = &cols_slice[src + lo..src + hi];
                            for (d, a) in dst.iter_mut().zip(add) {
                                *d += a;
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[dst_row + ix as usize] += cols_slice[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(T, C, hw)` volume → `(C, T*hw)` matrix (channel-major for GEMM).
fn volume_to_mat(x: &Array4<f64>) -> Array2<f64> {
    let (t, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice().expect("contiguous volume");
    let mut m = Array2::zeros((c, t * hw));
    let ms = m.as_slice_mut().expect("contiguous matrix");
    for ti in 0..t {
        for ci in 0..c {
            let src = (ti * c + ci) * hw;
            let dst = ci * t * hw + ti * hw;
            ms[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    m
}

/// `(C, T*hw)` matrix → `(T, C, h, w)` volume, adding `bias[c]` per channel.
fn mat_to_volume(m: &Array2<f64>, t: usize, h: usize, w: usize, bias: Option<&Array1<f64>>) -> Array4<f64> {
    let (c, n) = m.dim();
    let hw = h * w;
    debug_assert_eq!(n, t * hw);
    let ms = m.as_slice().expect("contiguous matrix");
    let mut x = Array4::zeros((t, c, h, w));
    let xs = x.as_slice_mut().expect("contiguous volume");
    for ti in 0..t {
        for ci in 0..c {
            let src = ci * t * hw + ti * hw;
            let dst = (ti * c + ci) * hw;
            match bias {
                Some(b) => {
                    let bv = b[ci];
                    for (d, s) in xs[dst..dst + hw].iter_mut().zip(&ms[src..src + hw]) {
                        *d = s + bv;
                    }
                }
                None => xs[dst..dst + hw].copy_from_slice(&ms[src..src + hw]),
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2D convolution applied frame-by-frame with shared weights; weight layout
/// `(c_out, c_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub(crate) wid: ParamId,
    pub(crate) bid: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        registry: &mut ParamRegistry,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut init = fan_in_uniform(rng, c_in * k * k);
        let w = Array4::from_shape_simple_fn((c_out, c_in, k, k), &mut init);
        let b = Array1::zeros(c_out);
        let wid = registry.register(format!("{name}.w"), w.shape());
        let bid = registry.register(format!("{name}.b"), b.shape());
        Conv2d {
            w,
            b,
            stride,
            pad,
            wid,
            bid,
        }
    }

    fn w2(&self) -> Array2<f64> {
        let (co, ci, k, _) = self.w.dim();
        let flat = self.w.as_slice().expect("contiguous weight");
        Array2::from_shape_vec((co, ci * k * k), flat.to_vec()).expect("weight reshape")
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        f(self.wid, self.w.as_slice().expect("contiguous"));
        f(self.bid, self.b.as_slice().expect("contiguous"));
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        f(self.wid, self.w.as_slice_mut().expect("contiguous"));
        f(self.bid, self.b.as_slice_mut().expect("contiguous"));
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            conv_out_size(h, k, self.stride, self.pad),
            conv_out_size(w, k, self.stride, self.pad),
        )
    }

    /// `x: (T, c_in, H, W)` → `(T, c_out, oh, ow)`.
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (t, ci, h, w) = x.dim();
        let (_, ci_w, k, _) = self.w.dim();
        assert_eq!(ci, ci_w, "conv input channels");
        let (oh, ow) = self.out_spatial(h, w);

        let mut cols = Array2::zeros((ci * k * k, t * oh * ow));
        im2col_batch(
            x.as_slice().expect("contiguous input"),
            t,
            ci,
            h,
            w,
            k,
            self.stride,
            self.pad,
            &mut cols,
        );
        let y2 = self.w2().dot(&cols);
        mat_to_volume(&y2, t, oh, ow, Some(&self.b))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, grads: &mut GradStore) -> Array4<f64> {
        let (t, ci, h, w) = x.dim();
        let (co, _, k, _) = self.w.dim();
        let (oh, ow) = self.out_spatial(h, w);

        let mut cols = Array2::zeros((ci * k * k, t * oh * ow));
        im2col_batch(
            x.as_slice().expect("contiguous input"),
            t,
            ci,
            h,
            w,
            k,
            self.stride,
            self.pad,
            &mut cols,
        );
        let dy2 = volume_to_mat(dy);
        let dw2 = dy2.dot(&cols.t());

        {
            let mut gw = grads.view4_mut(self.wid);
            let gw_slice = gw.as_slice_mut().expect("contiguous grad");
            for (g, d) in gw_slice
                .iter_mut()
                .zip(dw2.as_slice().expect("contiguous dw"))
            {
                *g += d;
            }
        }
        {
            let mut gb = grads.view1_mut(self.bid);
            for c in 0..co {
                gb[c] += dy2.row(c).sum();
            }
        }

        let dcols = self.w2().t().dot(&dy2);
        let mut dx = Array4::zeros((t, ci, h, w));
        col2im_batch_add(
            &dcols,
            t,
            ci,
            h,
            w,
            k,
            self.stride,
            self.pad,
            dx.as_slice_mut().expect("contiguous dx"),
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

/// Fractionally strided (transposed) convolution doubling the spatial size:
/// kernel 3, stride 2, padding 1, output padding 1. Weight layout
/// `(c_in, c_out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub(crate) wid: ParamId,
    pub(crate) bid: ParamId,
}

const CT_KERNEL: usize = 3;
const CT_STRIDE: usize = 2;
const CT_PAD: usize = 1;

impl ConvTranspose2d {
    pub fn new(
        registry: &mut ParamRegistry,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut init = fan_in_uniform(rng, c_in * CT_KERNEL * CT_KERNEL);
        let w = Array4::from_shape_simple_fn((c_in, c_out, CT_KERNEL, CT_KERNEL), &mut init);
        let b = Array1::zeros(c_out);
        let wid = registry.register(format!("{name}.w"), w.shape());
        let bid = registry.register(format!("{name}.b"), b.shape());
        ConvTranspose2d { w, b, wid, bid }
    }

    fn w2(&self) -> Array2<f64> {
        let (ci, co, k, _) = self.w.dim();
        let flat = self.w.as_slice().expect("contiguous weight");
        Array2::from_shape_vec((ci, co * k * k), flat.to_vec()).expect("weight reshape")
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        f(self.wid, self.w.as_slice().expect("contiguous"));
        f(self.bid, self.b.as_slice().expect("contiguous"));
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        f(self.wid, self.w.as_slice_mut().expect("contiguous"));
        f(self.bid, self.b.as_slice_mut().expect("contiguous"));
    }

    /// `x: (T, c_in, h, w)` → `(T, c_out, 2h, 2w)`.
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (t, ci, h, w) = x.dim();
        let (ci_w, co, k, _) = self.w.dim();
        assert_eq!(ci, ci_w, "transposed conv input channels");
        let (out_h, out_w) = (2 * h, 2 * w);

        // Scatter the per-pixel kernel contributions onto the upsampled grid.
        let x2 = volume_to_mat(x);
        let cols = self.w2().t().dot(&x2); // (co*k*k, t*h*w)
        let mut y = Array4::zeros((t, co, out_h, out_w));
        {
            let ys = y.as_slice_mut().expect("contiguous output");
            col2im_batch_add(&cols, t, co, out_h, out_w, k, CT_STRIDE, CT_PAD, ys);
            let plane = out_h * out_w;
            for ti in 0..t {
                for c in 0..co {
                    let off = (ti * co + c) * plane;
                    let bias = self.b[c];
                    for v in &mut ys[off..off + plane] {
                        *v += bias;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, grads: &mut GradStore) -> Array4<f64> {
        let (t, ci, h, w) = x.dim();
        let (_, co, k, _) = self.w.dim();
        let (out_h, out_w) = (2 * h, 2 * w);

        let mut cols = Array2::zeros((co * k * k, t * h * w));
        im2col_batch(
            dy.as_slice().expect("contiguous dy"),
            t,
            co,
            out_h,
            out_w,
            k,
            CT_STRIDE,
            CT_PAD,
            &mut cols,
        );
        // dx = "forward conv" of dy with the same kernel.
        let dx2 = self.w2().dot(&cols);
        let dx = mat_to_volume(&dx2, t, h, w, None);

        let x2 = volume_to_mat(x);
        let dw2 = x2.dot(&cols.t());
        {
            let mut gw = grads.view4_mut(self.wid);
            let gw_slice = gw.as_slice_mut().expect("contiguous grad");
            for (g, d) in gw_slice
                .iter_mut()
                .zip(dw2.as_slice().expect("contiguous dw"))
            {
                *g += d;
            }
        }
        {
            let mut gb = grads.view1_mut(self.bid);
            let dys = dy.as_slice().expect("contiguous dy");
            let plane = out_h * out_w;
            for ti in 0..t {
                for c in 0..co {
                    let off = (ti * co + c) * plane;
                    gb[c] += dys[off..off + plane].iter().sum::<f64>();
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense projection `y = x Wᵀ + b`, applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>, // (out, in)
    pub b: Array1<f64>,
    pub(crate) wid: ParamId,
    pub(crate) bid: ParamId,
}

impl Linear {
    pub fn new(
        registry: &mut ParamRegistry,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut init = fan_in_uniform(rng, in_features);
        let w = Array2::from_shape_simple_fn((out_features, in_features), &mut init);
        let b = Array1::zeros(out_features);
        let wid = registry.register(format!("{name}.w"), w.shape());
        let bid = registry.register(format!("{name}.b"), b.shape());
        Linear { w, b, wid, bid }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        f(self.wid, self.w.as_slice().expect("contiguous"));
        f(self.bid, self.b.as_slice().expect("contiguous"));
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        f(self.wid, self.w.as_slice_mut().expect("contiguous"));
        f(self.bid, self.b.as_slice_mut().expect("contiguous"));
    }

    /// `x: (n, in)` → `(n, out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut GradStore) -> Array2<f64> {
        {
            let mut gw = grads.view2_mut(self.wid);
            gw += &dy.t().dot(x);
        }
        {
            let mut gb = grads.view1_mut(self.bid);
            for row in dy.rows() {
                gb += &row;
            }
        }
        dy.dot(&self.w)
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

pub(crate) const GROUPNORM_EPS: f64 = 1e-5;

/// Group normalization over `(frames × group channels)` per spatial position,
/// matching the temporal-encoder convention: for each low-resolution pixel,
/// statistics pool the group's channels across the whole sequence, so the
/// normalization is invariant to frame permutations.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub groups: usize,
    pub(crate) gid: ParamId,
    pub(crate) bid: ParamId,
}

/// Saved statistics of one GroupNorm forward: mean and inverse stddev per
/// `(group, pixel)`.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub mean: Array2<f64>,
    pub inv_std: Array2<f64>,
}

impl GroupNorm {
    pub fn new(
        registry: &mut ParamRegistry,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert_eq!(channels % groups, 0, "channels divisible by groups");
        let gamma = Array1::ones(channels);
        let beta = Array1::zeros(channels);
        let gid = registry.register(format!("{name}.gamma"), gamma.shape());
        let bid = registry.register(format!("{name}.beta"), beta.shape());
        GroupNorm {
            gamma,
            beta,
            groups,
            gid,
            bid,
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(ParamId, &[f64])) {
        f(self.gid, self.gamma.as_slice().expect("contiguous"));
        f(self.bid, self.beta.as_slice().expect("contiguous"));
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(ParamId, &mut [f64])) {
        f(self.gid, self.gamma.as_slice_mut().expect("contiguous"));
        f(self.bid, self.beta.as_slice_mut().expect("contiguous"));
    }

    /// `x: (T, C, P)` → normalized `(T, C, P)`.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (t, c, p) = x.dim();
        let gs = c / self.groups;
        let n = (t * gs) as f64;
        let mut mean = Array2::zeros((self.groups, p));
        let mut inv_std = Array2::zeros((self.groups, p));
        let mut y = Array3::zeros((t, c, p));

        for g in 0..self.groups {
            for pi in 0..p {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for ti in 0..t {
                    for ci in g * gs..(g + 1) * gs {
                        let v = x[[ti, ci, pi]];
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mu = sum / n;
                let var = (sum_sq / n - mu * mu).max(0.0);
                let inv = 1.0 / (var + GROUPNORM_EPS).sqrt();
                mean[[g, pi]] = mu;
                inv_std[[g, pi]] = inv;
                for ti in 0..t {
                    for ci in g * gs..(g + 1) * gs {
                        let xhat = (x[[ti, ci, pi]] - mu) * inv;
                        y[[ti, ci, pi]] = self.gamma[ci] * xhat + self.beta[ci];
                    }
                }
            }
        }
        (y, GroupNormCache { mean, inv_std })
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        cache: &GroupNormCache,
        dy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (t, c, p) = x.dim();
        let gs = c / self.groups;
        let n = (t * gs) as f64;
        let mut dx = Array3::zeros((t, c, p));
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);

        for g in 0..self.groups {
            for pi in 0..p {
                let mu = cache.mean[[g, pi]];
                let inv = cache.inv_std[[g, pi]];
                // First pass: accumulate the two reduction terms.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ti in 0..t {
                    for ci in g * gs..(g + 1) * gs {
                        let xhat = (x[[ti, ci, pi]] - mu) * inv;
                        let dyv = dy[[ti, ci, pi]];
                        dgamma[ci] += dyv * xhat;
                        dbeta[ci] += dyv;
                        let dxhat = dyv * self.gamma[ci];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                for ti in 0..t {
                    for ci in g * gs..(g + 1) * gs {
                        let xhat = (x[[ti, ci, pi]] - mu) * inv;
                        let dxhat = dy[[ti, ci, pi]] * self.gamma[ci];
                        dx[[ti, ci, pi]] =
                            inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        }

        {
            let mut gg = grads.view1_mut(self.gid);
            gg += &dgamma;
        }
        {
            let mut gb = grads.view1_mut(self.bid);
            gb += &dbeta;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// dL/dx of a ReLU given its *output* y (y > 0 iff the unit was active).
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

pub fn sigmoid_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d *= yv * (1.0 - yv);
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

// ---------------------------------------------------------------------------
// Bilinear resampling
// ---------------------------------------------------------------------------

/// Sampling positions with `align_corners = false` semantics; interpolation
/// weights always sum to one, so constants map to constants.
fn bilinear_taps(out_size: usize, in_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resize the trailing two axes of a `(N, h, w)` stack to `(out_h, out_w)`.
pub fn bilinear_resize(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (n, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let rows = bilinear_taps(out_h, h);
    let cols = bilinear_taps(out_w, w);
    let mut y = Array3::zeros((n, out_h, out_w));
    for ni in 0..n {
        let plane = x.index_axis(ndarray::Axis(0), ni);
        let mut out = y.index_axis_mut(ndarray::Axis(0), ni);
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                out[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`]: scatter output gradients back to the
/// source grid.
pub fn bilinear_resize_backward(
    dy: &Array3<f64>,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let (n, out_h, out_w) = dy.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let rows = bilinear_taps(out_h, in_h);
    let cols = bilinear_taps(out_w, in_w);
    let mut dx = Array3::zeros((n, in_h, in_w));
    for ni in 0..n {
        let plane = dy.index_axis(ndarray::Axis(0), ni);
        let mut out = dx.index_axis_mut(ndarray::Axis(0), ni);
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = plane[[oy, ox]];
                out[[y0, x0]] += g * (1.0 - fx) * (1.0 - fy);
                out[[y0, x1]] += g * fx * (1.0 - fy);
                out[[y1, x0]] += g * (1.0 - fx) * fy;
                out[[y1, x1]] += g * fx * fy;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct nested-loop convolution used as the oracle.
    fn conv_oracle(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (t, ci, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let mut y = Array4::zeros((t, co, oh, ow));
        for ti in 0..t {
            for c in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[c];
                        for cin in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[ti, cin, iy as usize, ix as usize]]
                                            * w[[c, cin, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ti, c, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_nested_loop_oracle() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let conv = Conv2d::new(&mut registry, "c", 3, 5, 3, stride, pad, &mut r);
            let x = Array4::from_shape_simple_fn((2, 3, 8, 8), || r.gen_range(-1.0..1.0));
            let got = conv.forward(&x);
            let want = conv_oracle(&x, &conv.w, &conv.b, stride, pad);
            assert_abs_diff_eq!(
                got.as_slice().unwrap(),
                want.as_slice().unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn conv_1x1_matches_oracle() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(2);
        let conv = Conv2d::new(&mut registry, "c", 4, 2, 1, 1, 0, &mut r);
        let x = Array4::from_shape_simple_fn((3, 4, 6, 6), || r.gen_range(-1.0..1.0));
        let got = conv.forward(&x);
        let want = conv_oracle(&x, &conv.w, &conv.b, 1, 0);
        assert_abs_diff_eq!(
            got.as_slice().unwrap(),
            want.as_slice().unwrap(),
            epsilon = 1e-12
        );
    }

    /// Finite-difference check for a scalar loss `sum(y^2 / 2)`.
    fn fd_check_conv(stride: usize, pad: usize) {
        let mut registry = ParamRegistry::default();
        let mut r = rng(3);
        let mut conv = Conv2d::new(&mut registry, "c", 2, 3, 3, stride, pad, &mut r);
        let x = Array4::from_shape_simple_fn((2, 2, 6, 6), || r.gen_range(-1.0..1.0));

        let y = conv.forward(&x);
        let dy = y.clone(); // dL/dy for L = sum(y^2)/2
        let mut grads = GradStore::zeros(&registry);
        let dx = conv.backward(&x, &dy, &mut grads);

        let loss = |conv: &Conv2d, x: &Array4<f64>| -> f64 {
            conv.forward(x).iter().map(|v| v * v).sum::<f64>() / 2.0
        };

        let eps = 1e-6;
        // Weight gradient.
        for &idx in &[0usize, 7, 23, 53] {
            let orig = conv.w.as_slice().unwrap()[idx];
            conv.w.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&conv, &x);
            conv.w.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&conv, &x);
            conv.w.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.flat(conv.wid)[idx];
            assert_abs_diff_eq!(analytic, numeric, epsilon = 1e-5);
        }
        // Input gradient.
        let mut x_pert = x.clone();
        for &idx in &[0usize, 11, 37] {
            let orig = x_pert.as_slice().unwrap()[idx];
            x_pert.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&conv, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&conv, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(dx.as_slice().unwrap()[idx], numeric, epsilon = 1e-5);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        fd_check_conv(1, 1);
        fd_check_conv(2, 1);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(4);
        let ct = ConvTranspose2d::new(&mut registry, "u", 4, 2, &mut r);
        let x = Array4::from_shape_simple_fn((2, 4, 5, 7), || r.gen_range(-1.0..1.0));
        let y = ct.forward(&x);
        assert_eq!(y.dim(), (2, 2, 10, 14));
    }

    #[test]
    fn conv_transpose_backward_matches_finite_differences() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(5);
        let mut ct = ConvTranspose2d::new(&mut registry, "u", 2, 2, &mut r);
        let x = Array4::from_shape_simple_fn((1, 2, 4, 4), || r.gen_range(-1.0..1.0));

        let y = ct.forward(&x);
        let dy = y.clone();
        let mut grads = GradStore::zeros(&registry);
        let dx = ct.backward(&x, &dy, &mut grads);

        let loss = |ct: &ConvTranspose2d, x: &Array4<f64>| -> f64 {
            ct.forward(x).iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let eps = 1e-6;
        for &idx in &[0usize, 5, 17, 35] {
            let orig = ct.w.as_slice().unwrap()[idx];
            ct.w.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&ct, &x);
            ct.w.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&ct, &x);
            ct.w.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                grads.flat(ct.wid)[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-5
            );
        }
        let mut x_pert = x.clone();
        for &idx in &[0usize, 13, 29] {
            let orig = x_pert.as_slice().unwrap()[idx];
            x_pert.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&ct, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&ct, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                dx.as_slice().unwrap()[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-5
            );
        }
    }

    #[test]
    fn groupnorm_normalizes_and_backward_matches_fd() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(6);
        let gn = GroupNorm::new(&mut registry, "n", 8, 2);
        let x = Array3::from_shape_simple_fn((3, 8, 4), || r.gen_range(-2.0..2.0));
        let (y, cache) = gn.forward(&x);

        // Per (group, pixel) statistics of the output are ~(0, 1) with unit gamma.
        for g in 0..2 {
            for p in 0..4 {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for t in 0..3 {
                    for c in g * 4..(g + 1) * 4 {
                        sum += y[[t, c, p]];
                        sq += y[[t, c, p]] * y[[t, c, p]];
                    }
                }
                let n = 12.0;
                assert_abs_diff_eq!(sum / n, 0.0, epsilon = 1e-10);
                assert_abs_diff_eq!(sq / n, 1.0, epsilon = 1e-3);
            }
        }

        let dy = y.mapv(|v| v * 0.5 + 0.1);
        let mut grads = GradStore::zeros(&registry);
        let dx = gn.backward(&x, &cache, &dy, &mut grads);

        let loss = |gn: &GroupNorm, x: &Array3<f64>| -> f64 {
            let (y, _) = gn.forward(x);
            y.iter()
                .zip(dy.iter())
                .map(|(yv, dv)| yv * dv)
                .sum::<f64>()
        };
        let eps = 1e-6;
        let mut x_pert = x.clone();
        for &idx in &[0usize, 17, 63, 90] {
            let orig = x_pert.as_slice().unwrap()[idx];
            x_pert.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&gn, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&gn, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                dx.as_slice().unwrap()[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut registry = ParamRegistry::default();
        let mut r = rng(7);
        let mut lin = Linear::new(&mut registry, "l", 5, 3, &mut r);
        let x = Array2::from_shape_simple_fn((4, 5), || r.gen_range(-1.0..1.0));
        let y = lin.forward(&x);
        let dy = y.clone();
        let mut grads = GradStore::zeros(&registry);
        let dx = lin.backward(&x, &dy, &mut grads);

        let loss =
            |l: &Linear, x: &Array2<f64>| l.forward(x).iter().map(|v| v * v).sum::<f64>() / 2.0;
        let eps = 1e-6;
        for &idx in &[0usize, 7, 14] {
            let orig = lin.w.as_slice().unwrap()[idx];
            lin.w.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&lin, &x);
            lin.w.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&lin, &x);
            lin.w.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                grads.flat(lin.wid)[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-6
            );
        }
        let mut x_pert = x.clone();
        for &idx in &[0usize, 9, 19] {
            let orig = x_pert.as_slice().unwrap()[idx];
            x_pert.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&lin, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&lin, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                dx.as_slice().unwrap()[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert_abs_diff_eq!(gelu_grad(x), numeric, epsilon = 1e-8);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_sums() {
        let x = Array3::from_elem((3, 4, 4), 0.7);
        let y = bilinear_resize(&x, 16, 16);
        for v in y.iter() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let mut r = rng(8);
        let x = Array3::from_shape_simple_fn((2, 5, 5), || r.gen_range(0.0..1.0));
        let y = bilinear_resize(&x, 5, 5);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)> for linear maps.
        let mut r = rng(9);
        let x = Array3::from_shape_simple_fn((1, 4, 4), || r.gen_range(-1.0..1.0));
        let g = Array3::from_shape_simple_fn((1, 10, 10), || r.gen_range(-1.0..1.0));
        let y = bilinear_resize(&x, 10, 10);
        let xt = bilinear_resize_backward(&g, 4, 4);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(xt.iter()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }
}
