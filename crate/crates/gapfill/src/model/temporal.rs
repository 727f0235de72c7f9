//! Temporal self-attention at the bottleneck.
//!
//! Operates independently on every low-resolution pixel of the latent
//! embedding. Keys and queries are data-driven linear projections computed per
//! attention head from that head's exclusive block of `D/G` channels; the
//! attention scores are applied directly to the (pre-normalized) embedding
//! channels without a value projection. Two pre-normalized residual sublayers
//! follow the transformer pattern: attention mixing, then a GELU MLP.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::layers::{
    gelu, gelu_grad, GradStore, GroupNorm, GroupNormCache, Linear, ParamRegistry,
};

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub(crate) norm_attn: GroupNorm,
    pub(crate) key_proj: Vec<Linear>,
    pub(crate) query_proj: Vec<Linear>,
    pub(crate) norm_mlp: GroupNorm,
    pub(crate) fc1: Linear,
    pub(crate) fc2: Linear,
    heads: usize,
    d_model: usize,
    key_dim: usize,
}

/// Intermediate activations of one temporal-encoder forward pass.
#[derive(Debug, Clone)]
pub struct TemporalCache {
    /// Bottleneck embedding with the positional encoding added, `(T, D, P)`.
    pub x: Array3<f64>,
    n1: Array3<f64>,
    gn1: GroupNormCache,
    /// Per head: queries/keys `(T*P, key_dim)` and attention `(Tq, Tk, P)`.
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    pub attn: Vec<Array3<f64>>,
    x2: Array3<f64>,
    n2: Array3<f64>,
    gn2: GroupNormCache,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
}

/// Copy channel block `[c0, c0+len)` of a `(T, C, P)` volume into a
/// `(T*P, len)` matrix with row index `t*P + p`.
fn gather_block(x: &Array3<f64>, c0: usize, len: usize) -> Array2<f64> {
    let (t, _, p) = x.dim();
    let mut out = Array2::zeros((t * p, len));
    for ti in 0..t {
        for ci in 0..len {
            for pi in 0..p {
                out[[ti * p + pi, ci]] = x[[ti, c0 + ci, pi]];
            }
        }
    }
    out
}

fn scatter_block_add(dst: &mut Array3<f64>, c0: usize, src: &Array2<f64>) {
    let (t, _, p) = dst.dim();
    let len = src.dim().1;
    for ti in 0..t {
        for ci in 0..len {
            for pi in 0..p {
                dst[[ti, c0 + ci, pi]] += src[[ti * p + pi, ci]];
            }
        }
    }
}

impl TemporalEncoder {
    pub fn new(
        registry: &mut ParamRegistry,
        prefix: &str,
        d_model: usize,
        heads: usize,
        key_dim: usize,
        norm_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group_size = d_model / heads;
        let norm_attn = GroupNorm::new(registry, &format!("{prefix}.norm_attn"), d_model, norm_groups);
        let mut key_proj = Vec::with_capacity(heads);
        let mut query_proj = Vec::with_capacity(heads);
        for g in 0..heads {
            key_proj.push(Linear::new(
                registry,
                &format!("{prefix}.head{g}.key"),
                group_size,
                key_dim,
                rng,
            ));
            query_proj.push(Linear::new(
                registry,
                &format!("{prefix}.head{g}.query"),
                group_size,
                key_dim,
                rng,
            ));
        }
        let norm_mlp = GroupNorm::new(registry, &format!("{prefix}.norm_mlp"), d_model, norm_groups);
        let fc1 = Linear::new(registry, &format!("{prefix}.mlp.fc1"), d_model, d_model, rng);
        let fc2 = Linear::new(registry, &format!("{prefix}.mlp.fc2"), d_model, d_model, rng);
        TemporalEncoder {
            norm_attn,
            key_proj,
            query_proj,
            norm_mlp,
            fc1,
            fc2,
            heads,
            d_model,
            key_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(super::layers::ParamId, &[f64])) {
        self.norm_attn.visit(f);
        for g in 0..self.heads {
            self.key_proj[g].visit(f);
            self.query_proj[g].visit(f);
        }
        self.norm_mlp.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(super::layers::ParamId, &mut [f64])) {
        self.norm_attn.visit_mut(f);
        for g in 0..self.heads {
            self.key_proj[g].visit_mut(f);
            self.query_proj[g].visit_mut(f);
        }
        self.norm_mlp.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }

    /// `bottleneck: (T, D, P)`, `pe: (T, D)` → refined `(T, D, P)` plus the
    /// per-head attention scores.
    pub fn forward(&self, bottleneck: &Array3<f64>, pe: &Array2<f64>) -> (Array3<f64>, TemporalCache) {
        let (t, d, p) = bottleneck.dim();
        assert_eq!(d, self.d_model);
        assert_eq!(pe.dim(), (t, d));

        let mut x = bottleneck.clone();
        for ti in 0..t {
            for ci in 0..d {
                let add = pe[[ti, ci]];
                for pi in 0..p {
                    x[[ti, ci, pi]] += add;
                }
            }
        }

        let (n1, gn1) = self.norm_attn.forward(&x);

        let gs = d / self.heads;
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let mut mixed = Array3::<f64>::zeros((t, d, p));
        let mut qs = Vec::with_capacity(self.heads);
        let mut ks = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);

        for g in 0..self.heads {
            let c0 = g * gs;
            let xg = gather_block(&n1, c0, gs);
            let q = self.query_proj[g].forward(&xg);
            let k = self.key_proj[g].forward(&xg);

            let mut attn = Array3::zeros((t, t, p));
            for pi in 0..p {
                for tq in 0..t {
                    // Scores for one query against all keys, then a stable softmax.
                    let mut row = vec![0.0f64; t];
                    let mut max = f64::NEG_INFINITY;
                    for (tk, r) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for di in 0..self.key_dim {
                            s += q[[tq * p + pi, di]] * k[[tk * p + pi, di]];
                        }
                        *r = s * scale;
                        if *r > max {
                            max = *r;
                        }
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for (tk, r) in row.iter().enumerate() {
                        attn[[tq, tk, pi]] = r / sum;
                    }
                }
            }

            // Apply scores directly to the normalized embedding channels.
            for tq in 0..t {
                for tk in 0..t {
                    for ci in 0..gs {
                        for pi in 0..p {
                            mixed[[tq, c0 + ci, pi]] +=
                                attn[[tq, tk, pi]] * n1[[tk, c0 + ci, pi]];
                        }
                    }
                }
            }

            qs.push(q);
            ks.push(k);
            attns.push(attn);
        }

        let x2 = &x + &mixed;
        let (n2, gn2) = self.norm_mlp.forward(&x2);

        let xm = gather_block(&n2, 0, d);
        let mlp_pre = self.fc1.forward(&xm);
        let mlp_act = mlp_pre.mapv(gelu);
        let mlp_out = self.fc2.forward(&mlp_act);
        let mut z = x2.clone();
        scatter_block_add(&mut z, 0, &mlp_out);

        let cache = TemporalCache {
            x,
            n1,
            gn1,
            q: qs,
            k: ks,
            attn: attns,
            x2,
            n2,
            gn2,
            mlp_pre,
            mlp_act,
        };
        (z, cache)
    }

    /// Backward pass. `dz` is the gradient w.r.t. the refined embedding;
    /// `dattn_ext` carries the external gradient flowing into the attention
    /// scores through the weighted skip connections (zeros if unused).
    /// Returns the gradient w.r.t. the bottleneck input.
    pub fn backward(
        &self,
        cache: &TemporalCache,
        dz: &Array3<f64>,
        dattn_ext: &[Array3<f64>],
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (t, d, p) = cache.x.dim();
        let gs = d / self.heads;
        let scale = 1.0 / (self.key_dim as f64).sqrt();

        // z = x2 + scatter(mlp(gather(n2)))
        let dmlp_out = gather_block(dz, 0, d);
        let dact = self.fc2.backward(&cache.mlp_act, &dmlp_out, grads);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.mlp_pre)
            .for_each(|dv, &pre| *dv *= gelu_grad(pre));
        let xm = gather_block(&cache.n2, 0, d);
        let dxm = self.fc1.backward(&xm, &dpre, grads);
        let mut dn2 = Array3::zeros((t, d, p));
        scatter_block_add(&mut dn2, 0, &dxm);

        let mut dx2 = dz.clone();
        dx2 += &self
            .norm_mlp
            .backward(&cache.x2, &cache.gn2, &dn2, grads);

        // x2 = x + mixed
        let dmixed = &dx2;
        let mut dx = dx2.clone();
        let mut dn1 = Array3::zeros((t, d, p));

        for g in 0..self.heads {
            let c0 = g * gs;
            let attn = &cache.attn[g];
            let q = &cache.q[g];
            let k = &cache.k[g];

            // Gradients into attention scores and values.
            let mut dattn = dattn_ext[g].clone();
            for tq in 0..t {
                for tk in 0..t {
                    for ci in 0..gs {
                        for pi in 0..p {
                            let dm = dmixed[[tq, c0 + ci, pi]];
                            dattn[[tq, tk, pi]] += dm * cache.n1[[tk, c0 + ci, pi]];
                            dn1[[tk, c0 + ci, pi]] += attn[[tq, tk, pi]] * dm;
                        }
                    }
                }
            }

            // Softmax backward, then into the key/query projections.
            let mut dq = Array2::zeros((t * p, self.key_dim));
            let mut dk = Array2::zeros((t * p, self.key_dim));
            for pi in 0..p {
                for tq in 0..t {
                    let mut dot = 0.0;
                    for tk in 0..t {
                        dot += dattn[[tq, tk, pi]] * attn[[tq, tk, pi]];
                    }
                    for tk in 0..t {
                        let ds = attn[[tq, tk, pi]] * (dattn[[tq, tk, pi]] - dot) * scale;
                        for di in 0..self.key_dim {
                            dq[[tq * p + pi, di]] += ds * k[[tk * p + pi, di]];
                            dk[[tk * p + pi, di]] += ds * q[[tq * p + pi, di]];
                        }
                    }
                }
            }

            let xg = gather_block(&cache.n1, c0, gs);
            let dxg_q = self.query_proj[g].backward(&xg, &dq, grads);
            let dxg_k = self.key_proj[g].backward(&xg, &dk, grads);
            scatter_block_add(&mut dn1, c0, &dxg_q);
            scatter_block_add(&mut dn1, c0, &dxg_k);
        }

        dx += &self
            .norm_attn
            .backward(&cache.x, &cache.gn1, &dn1, grads);
        // The positional encoding is constant, so dx is the bottleneck gradient.
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(t: usize, d: usize, p: usize) -> (TemporalEncoder, ParamRegistry, Array3<f64>, Array2<f64>) {
        let mut registry = ParamRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = TemporalEncoder::new(&mut registry, "te", d, 2, 3, 2, &mut rng);
        let x = Array3::from_shape_simple_fn((t, d, p), || rng.gen_range(-1.0..1.0));
        let pe = Array2::from_shape_simple_fn((t, d), || rng.gen_range(-0.5..0.5));
        (enc, registry, x, pe)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (enc, _, x, pe) = setup(5, 8, 6);
        let (_, cache) = enc.forward(&x, &pe);
        for attn in &cache.attn {
            let (tq, _, p) = attn.dim();
            for q in 0..tq {
                for pi in 0..p {
                    let sum: f64 = (0..tq).map(|k| attn[[q, k, pi]]).sum();
                    assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_frame_attention_is_identity() {
        let (enc, _, _, _) = setup(5, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_simple_fn((1, 8, 4), || rng.gen_range(-1.0..1.0));
        let pe = Array2::zeros((1, 8));
        let (_, cache) = enc.forward(&x, &pe);
        for attn in &cache.attn {
            for v in attn.iter() {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let (enc, _, x, pe) = setup(4, 8, 9);
        let (z, cache) = enc.forward(&x, &pe);
        assert_eq!(z.dim(), (4, 8, 9));
        assert_eq!(cache.attn.len(), 2);
        assert_eq!(cache.attn[0].dim(), (4, 4, 9));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (enc, registry, x, pe) = setup(3, 8, 4);
        let (z, cache) = enc.forward(&x, &pe);

        // Scalar loss: weighted sum of outputs plus a term on the attention so
        // the external-attention path is exercised too.
        let wz = Array3::from_shape_fn(z.dim(), |(t, c, p)| {
            0.1 + 0.01 * (t as f64 + 2.0 * c as f64 + 3.0 * p as f64)
        });
        let wa: Vec<Array3<f64>> = cache
            .attn
            .iter()
            .map(|a| Array3::from_shape_fn(a.dim(), |(q, k, p)| 0.02 * (q as f64 - k as f64 + p as f64)))
            .collect();

        let loss = |enc: &TemporalEncoder, x: &Array3<f64>| -> f64 {
            let (z, cache) = enc.forward(x, &pe);
            let mut l: f64 = z.iter().zip(wz.iter()).map(|(a, b)| a * b).sum();
            for (a, w) in cache.attn.iter().zip(&wa) {
                l += a.iter().zip(w.iter()).map(|(x, y)| x * y).sum::<f64>();
            }
            l
        };

        let mut grads = GradStore::zeros(&registry);
        let dx = enc.backward(&cache, &wz, &wa, &mut grads);

        let eps = 1e-6;
        let mut x_pert = x.clone();
        for &idx in &[0usize, 13, 37, 61, 95] {
            let orig = x_pert.as_slice().unwrap()[idx];
            x_pert.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&enc, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&enc, &x_pert);
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(dx.as_slice().unwrap()[idx], numeric, epsilon = 1e-6);
        }

        // Spot-check a weight gradient per parameter kind.
        let mut enc_pert = enc.clone();
        let probes: Vec<(ParamProbe, usize)> = vec![
            (ParamProbe::Key(0), 2),
            (ParamProbe::Query(1), 1),
            (ParamProbe::Fc1, 5),
            (ParamProbe::NormAttnGamma, 3),
        ];
        for (which, idx) in probes {
            let (slice_id, orig) = {
                let (id, sl) = which.slice_mut(&mut enc_pert);
                let orig = sl[idx];
                sl[idx] = orig + eps;
                (id, orig)
            };
            let lp = loss(&enc_pert, &x);
            which.slice_mut(&mut enc_pert).1[idx] = orig - eps;
            let lm = loss(&enc_pert, &x);
            which.slice_mut(&mut enc_pert).1[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(grads.flat(slice_id)[idx], numeric, epsilon = 1e-6);
        }
    }

    enum ParamProbe {
        Key(usize),
        Query(usize),
        Fc1,
        NormAttnGamma,
    }

    impl ParamProbe {
        fn slice_mut<'a>(&self, enc: &'a mut TemporalEncoder) -> (super::super::layers::ParamId, &'a mut [f64]) {
            match self {
                ParamProbe::Key(g) => (
                    enc.key_proj[*g].wid,
                    enc.key_proj[*g].w.as_slice_mut().unwrap(),
                ),
                ParamProbe::Query(g) => (
                    enc.query_proj[*g].wid,
                    enc.query_proj[*g].w.as_slice_mut().unwrap(),
                ),
                ParamProbe::Fc1 => (enc.fc1.wid, enc.fc1.w.as_slice_mut().unwrap()),
                ParamProbe::NormAttnGamma => (
                    enc.norm_attn.gid,
                    enc.norm_attn.gamma.as_slice_mut().unwrap(),
                ),
            }
        }
    }
}
