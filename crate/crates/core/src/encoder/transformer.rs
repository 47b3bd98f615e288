//! Tiny trainable transformer encoder with a hand-written backward pass.
//!
//! Post-norm residual blocks: each sublayer output is `LayerNorm(x + f(x))`,
//! so a zero-layer model is exactly the embedding-plus-position table lookup.
//! All math is f64; attention uses learned absolute positions, per-head
//! scaled dot-product scores, and tanh-approximated GELU in the feed-forward
//! (smooth everywhere, which keeps finite-difference checks honest).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::TensorMap;
use super::{EncoderConfig, EncoderError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, row-wise.
fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    let mut y = Array2::zeros(x.raw_dim());
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = gamma[j] * xh + beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns d_x and accumulates d_gamma / d_beta.
fn layer_norm_backward(
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    d_y: &Array2<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let d = cache.xhat.ncols() as f64;
    let mut d_x = Array2::zeros(cache.xhat.raw_dim());
    for i in 0..cache.xhat.nrows() {
        let xhat = cache.xhat.row(i);
        let dy = d_y.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..xhat.len() {
            let dxh = dy[j] * gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[j];
            d_gamma[j] += dy[j] * xhat[j];
            d_beta[j] += dy[j];
        }
        let is = cache.inv_std[i];
        for j in 0..xhat.len() {
            let dxh = dy[j] * gamma[j];
            d_x[[i, j]] = is * (dxh - sum_dxhat / d - xhat[j] * sum_dxhat_xhat / d);
        }
    }
    d_x
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

struct LayerCache {
    a_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    mask_attn: Option<Array2<f64>>,
    ln1: LnCache,
    h1: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
    mask_ff: Option<Array2<f64>>,
    ln2: LnCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct Cache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
}

impl Cache {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

/// Trainable encoder: embeddings, positions, and post-norm attention blocks.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    pub config: EncoderConfig,
    pub params: TensorMap,
}

impl TinyTransformer {
    /// Fresh parameters: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) linear maps
    /// and embeddings, zero biases, identity layer norms. The single seeded
    /// stream plus fixed creation order makes initialization reproducible.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = TensorMap::new();
        let uniform = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound)).into_dyn()
        };
        params.insert("tok_emb", uniform(config.vocab_size, d, d, &mut rng));
        params.insert("pos_emb", uniform(config.max_len, d, d, &mut rng));
        for l in 0..config.n_layers {
            for mat in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("layer{l}.attn.{mat}"), uniform(d, d, d, &mut rng));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("layer{l}.attn.{bias}"), Array1::zeros(d).into_dyn());
            }
            params.insert(format!("layer{l}.ln1.gamma"), Array1::ones(d).into_dyn());
            params.insert(format!("layer{l}.ln1.beta"), Array1::zeros(d).into_dyn());
            params.insert(format!("layer{l}.ff.w1"), uniform(d, config.d_ff, d, &mut rng));
            params.insert(format!("layer{l}.ff.b1"), Array1::zeros(config.d_ff).into_dyn());
            params.insert(
                format!("layer{l}.ff.w2"),
                uniform(config.d_ff, d, config.d_ff, &mut rng),
            );
            params.insert(format!("layer{l}.ff.b2"), Array1::zeros(d).into_dyn());
            params.insert(format!("layer{l}.ln2.gamma"), Array1::ones(d).into_dyn());
            params.insert(format!("layer{l}.ln2.beta"), Array1::zeros(d).into_dyn());
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: TensorMap) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(Self { config, params })
    }

    /// Deterministic eval-mode encoding (no dropout).
    pub fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        Ok(self.forward(ids, None)?.0)
    }

    /// Full forward pass. With an RNG, dropout masks the two residual
    /// branches (inverted dropout, so eval needs no rescaling).
    pub fn forward(
        &self,
        ids: &[u32],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, Cache), EncoderError> {
        self.config.check_ids(ids)?;
        let d = self.config.d_model;
        let tok = self.params.view2("tok_emb");
        let pos = self.params.view2("pos_emb");
        let mut h = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = h.row_mut(t);
            row.assign(&tok.row(id as usize));
            row += &pos.row(t);
        }
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, cache) = self.forward_layer(l, h, &mut dropout_rng);
            layers.push(cache);
            h = next;
        }
        Ok((
            h,
            Cache {
                ids: ids.to_vec(),
                layers,
            },
        ))
    }

    fn dropout_mask(
        &self,
        shape: (usize, usize),
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Option<Array2<f64>> {
        let p = self.config.dropout;
        let rng = rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some(Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        }))
    }

    fn forward_layer(
        &self,
        l: usize,
        a_in: Array2<f64>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> (Array2<f64>, LayerCache) {
        let cfg = &self.config;
        let (len, d) = (a_in.nrows(), cfg.d_model);
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        let q = a_in.dot(&p.view2(&format!("layer{l}.attn.wq"))) + p.view1(&format!("layer{l}.attn.bq"));
        let k = a_in.dot(&p.view2(&format!("layer{l}.attn.wk"))) + p.view1(&format!("layer{l}.attn.bk"));
        let v = a_in.dot(&p.view2(&format!("layer{l}.attn.wv"))) + p.view1(&format!("layer{l}.attn.bv"));

        let mut ctx = Array2::zeros((len, d));
        let mut attn_probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            attn_probs.push(scores);
        }
        let mut attn = ctx.dot(&p.view2(&format!("layer{l}.attn.wo"))) + p.view1(&format!("layer{l}.attn.bo"));

        let mask_attn = self.dropout_mask((len, d), rng);
        if let Some(mask) = &mask_attn {
            attn *= mask;
        }
        let r1 = &a_in + &attn;
        let (h1, ln1) = layer_norm(
            &r1,
            p.view1(&format!("layer{l}.ln1.gamma")),
            p.view1(&format!("layer{l}.ln1.beta")),
        );

        let z = h1.dot(&p.view2(&format!("layer{l}.ff.w1"))) + p.view1(&format!("layer{l}.ff.b1"));
        let g = z.mapv(gelu);
        let mut ff = g.dot(&p.view2(&format!("layer{l}.ff.w2"))) + p.view1(&format!("layer{l}.ff.b2"));
        let mask_ff = self.dropout_mask((len, d), rng);
        if let Some(mask) = &mask_ff {
            ff *= mask;
        }
        let r2 = &h1 + &ff;
        let (h2, ln2) = layer_norm(
            &r2,
            p.view1(&format!("layer{l}.ln2.gamma")),
            p.view1(&format!("layer{l}.ln2.beta")),
        );

        (
            h2,
            LayerCache {
                a_in,
                q,
                k,
                v,
                attn_probs,
                ctx,
                mask_attn,
                ln1,
                h1,
                z,
                g,
                mask_ff,
                ln2,
            },
        )
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the encoded output.
    pub fn backward(&self, cache: &Cache, d_out: ArrayView2<f64>) -> TensorMap {
        let mut grads = self.params.zeros_like();
        let mut d_h = d_out.to_owned();
        for l in (0..self.config.n_layers).rev() {
            d_h = self.backward_layer(l, &cache.layers[l], d_h, &mut grads);
        }
        {
            let mut g_tok = grads.view2_mut("tok_emb");
            for (t, &id) in cache.ids.iter().enumerate() {
                let mut row = g_tok.row_mut(id as usize);
                row += &d_h.row(t);
            }
        }
        {
            let mut g_pos = grads.view2_mut("pos_emb");
            for t in 0..cache.ids.len() {
                let mut row = g_pos.row_mut(t);
                row += &d_h.row(t);
            }
        }
        grads
    }

    fn backward_layer(
        &self,
        l: usize,
        cache: &LayerCache,
        d_h2: Array2<f64>,
        grads: &mut TensorMap,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        // ln2
        let mut d_gamma2 = Array1::zeros(d);
        let mut d_beta2 = Array1::zeros(d);
        let d_r2 = layer_norm_backward(
            &cache.ln2,
            p.view1(&format!("layer{l}.ln2.gamma")),
            &d_h2,
            &mut d_gamma2,
            &mut d_beta2,
        );
        add1(grads, &format!("layer{l}.ln2.gamma"), &d_gamma2);
        add1(grads, &format!("layer{l}.ln2.beta"), &d_beta2);

        // feed-forward branch
        let mut d_ff = d_r2.clone();
        if let Some(mask) = &cache.mask_ff {
            d_ff *= mask;
        }
        let w2 = p.view2(&format!("layer{l}.ff.w2"));
        let d_g = d_ff.dot(&w2.t());
        add2(grads, &format!("layer{l}.ff.w2"), &cache.g.t().dot(&d_ff));
        add1(grads, &format!("layer{l}.ff.b2"), &d_ff.sum_axis(Axis(0)));
        let d_z = &d_g * &cache.z.mapv(gelu_prime);
        let w1 = p.view2(&format!("layer{l}.ff.w1"));
        let d_h1_ff = d_z.dot(&w1.t());
        add2(grads, &format!("layer{l}.ff.w1"), &cache.h1.t().dot(&d_z));
        add1(grads, &format!("layer{l}.ff.b1"), &d_z.sum_axis(Axis(0)));
        let d_h1 = &d_r2 + &d_h1_ff;

        // ln1
        let mut d_gamma1 = Array1::zeros(d);
        let mut d_beta1 = Array1::zeros(d);
        let d_r1 = layer_norm_backward(
            &cache.ln1,
            p.view1(&format!("layer{l}.ln1.gamma")),
            &d_h1,
            &mut d_gamma1,
            &mut d_beta1,
        );
        add1(grads, &format!("layer{l}.ln1.gamma"), &d_gamma1);
        add1(grads, &format!("layer{l}.ln1.beta"), &d_beta1);

        // attention branch
        let mut d_attn = d_r1.clone();
        if let Some(mask) = &cache.mask_attn {
            d_attn *= mask;
        }
        let wo = p.view2(&format!("layer{l}.attn.wo"));
        let d_ctx = d_attn.dot(&wo.t());
        add2(grads, &format!("layer{l}.attn.wo"), &cache.ctx.t().dot(&d_attn));
        add1(grads, &format!("layer{l}.attn.bo"), &d_attn.sum_axis(Axis(0)));

        let len = cache.a_in.nrows();
        let mut d_q = Array2::zeros((len, d));
        let mut d_k = Array2::zeros((len, d));
        let mut d_v = Array2::zeros((len, d));
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let a = &cache.attn_probs[head];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let d_ctx_h = d_ctx.slice(cols);
            let d_a = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_ctx_h));
            let row_dot = (&d_a * a).sum_axis(Axis(1));
            let mut d_s = Array2::zeros((len, len));
            for i in 0..len {
                for j in 0..len {
                    d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - row_dot[i]);
                }
            }
            let mut d_qh = d_s.dot(&kh);
            d_qh.mapv_inplace(|x| x * scale);
            d_q.slice_mut(cols).assign(&d_qh);
            let mut d_kh = d_s.t().dot(&qh);
            d_kh.mapv_inplace(|x| x * scale);
            d_k.slice_mut(cols).assign(&d_kh);
        }

        let mut d_a_in = d_r1;
        for (mat, bias, d_proj) in [("wq", "bq", &d_q), ("wk", "bk", &d_k), ("wv", "bv", &d_v)] {
            let w = p.view2(&format!("layer{l}.attn.{mat}"));
            d_a_in = d_a_in + d_proj.dot(&w.t());
            add2(grads, &format!("layer{l}.attn.{mat}"), &cache.a_in.t().dot(d_proj));
            add1(grads, &format!("layer{l}.attn.{bias}"), &d_proj.sum_axis(Axis(0)));
        }
        d_a_in
    }
}

fn add2(grads: &mut TensorMap, name: &str, delta: &Array2<f64>) {
    let mut g = grads.view2_mut(name);
    g += delta;
}

fn add1(grads: &mut TensorMap, name: &str, delta: &Array1<f64>) {
    let mut g = grads.view1_mut(name);
    g += delta;
}
