//! Forward and backward kernels for the building blocks of the model.
//!
//! Every `*_forward` returns the output plus whatever the matching
//! `*_backward` needs. Backward functions accumulate parameter gradients in
//! place and return the gradient with respect to their input.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

/// Dense affine map `y = x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    /// `1 × out`.
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    /// `1 × d`.
    pub gain: Array2<f64>,
    /// `1 × d`.
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Array2::ones((1, d)),
            bias: Array2::zeros((1, d)),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gain: Array2::zeros((1, d)),
            bias: Array2::zeros((1, d)),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * s);
            inv_std.push(s);
        }
        let y = &normalized * &self.gain + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = &dy * &self.gain;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.normalized.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let s = cache.inv_std[i];
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = s * (gv - mean_g - xv * mean_gx));
        }
        dx
    }
}

/// In-place row softmax.
pub fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    softmax_rows_inplace(&mut out);
    out
}

pub fn log_softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Backward through a row softmax given its output `p`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dr) in dz.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.dot(&dr);
        Zip::from(&mut out)
            .and(&pr)
            .and(&dr)
            .for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    }
    dz
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rows scaled to unit Euclidean norm, plus the norms used.
pub fn l2_normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut y = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: ArrayView2<f64>, norms: &[f64], dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let yr = y.row(i);
        let dr = dy.row(i);
        let proj = yr.dot(&dr);
        Zip::from(&mut out)
            .and(&yr)
            .and(&dr)
            .for_each(|o, &yv, &dv| *o = (dv - yv * proj) / norms[i]);
    }
    dx
}

/// Inverted dropout mask (entries 0 or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<R: Rng>(shape: (usize, usize), rate: f64, rng: Option<&mut R>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

pub fn apply_mask(x: Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

/// Single-head scaled dot-product attention with its own projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic attention weights (queries × keys).
    pub weights: Array2<f64>,
    context: Array2<f64>,
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
            output: Array2::zeros((d, d)),
        }
    }

    /// Queries come from `xq`, keys and values from `xkv`. With `causal`,
    /// query `i` only sees keys `0..=i`.
    pub fn forward(&self, xq: ArrayView2<f64>, xkv: ArrayView2<f64>, causal: bool) -> (Array2<f64>, AttentionCache) {
        let q = xq.dot(&self.query);
        let k = xkv.dot(&self.key);
        let v = xkv.dot(&self.value);
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut weights = q.dot(&k.t()) * scale;
        if causal {
            for ((i, j), s) in weights.indexed_iter_mut() {
                if j > i {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows_inplace(&mut weights);
        let context = weights.dot(&v);
        let out = context.dot(&self.output);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                weights,
                context,
            },
        )
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        xq: ArrayView2<f64>,
        xkv: ArrayView2<f64>,
        cache: &AttentionCache,
        dout: ArrayView2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
        grad.output += &cache.context.t().dot(&dout);
        let dcontext = dout.dot(&self.output.t());
        let dweights = dcontext.dot(&cache.v.t());
        let dv = cache.weights.t().dot(&dcontext);
        // Masked entries have zero weight, so their score gradient vanishes.
        let dscores = softmax_rows_backward(cache.weights.view(), dweights.view()) * scale;
        let dq = dscores.dot(&cache.k);
        let dk = dscores.t().dot(&cache.q);

        grad.query += &xq.t().dot(&dq);
        grad.key += &xkv.t().dot(&dk);
        grad.value += &xkv.t().dot(&dv);
        let dxq = dq.dot(&self.query.t());
        let dxkv = dk.dot(&self.key.t()) + dv.dot(&self.value.t());
        (dxq, dxkv)
    }
}

/// Two-layer GELU feed-forward block `d → 4d → d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn zeros(d: usize) -> Self {
        Self {
            up: Linear::zeros(d, 4 * d),
            down: Linear::zeros(4 * d, d),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let out = self.down.forward(act.view());
        (out, MlpCache { pre, act })
    }

    pub fn backward(&self, x: ArrayView2<f64>, cache: &MlpCache, dout: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.down.backward(cache.act.view(), dout, &mut grad.down);
        let dpre = Zip::from(&dact).and(&cache.pre).map_collect(|&g, &p| g * gelu_grad(p));
        self.up.backward(x, dpre.view(), &mut grad.up)
    }
}

/// Fixed sinusoidal position code, scaled by `scale`.
pub fn positional_encoding(len: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x` in direction of every entry.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm {
            gain: random(&mut rng, (1, 5)),
            bias: random(&mut rng, (1, 5)),
        };
        let x = random(&mut rng, (3, 5));
        let w = random(&mut rng, (3, 5));
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(x.view());
        let mut g = LayerNorm::zeros(5);
        let dx = ln.backward(&cache, w.view(), &mut g);
        assert_close(&dx, &numeric_grad(&x, loss), 1e-7);
    }

    #[test]
    fn causal_attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = Attention {
            query: random(&mut rng, (4, 4)),
            key: random(&mut rng, (4, 4)),
            value: random(&mut rng, (4, 4)),
            output: random(&mut rng, (4, 4)),
        };
        let x = random(&mut rng, (5, 4));
        let w = random(&mut rng, (5, 4));
        let loss = |x: &Array2<f64>| (&attn.forward(x.view(), x.view(), true).0 * &w).sum();
        let (_, cache) = attn.forward(x.view(), x.view(), true);
        let mut g = Attention::zeros(4);
        let (dq, dkv) = attn.backward(x.view(), x.view(), &cache, w.view(), &mut g);
        assert_close(&(dq + dkv), &numeric_grad(&x, loss), 1e-7);
        // Causal weights are lower triangular.
        assert_eq!(cache.weights[[0, 1]], 0.0);
        assert!((cache.weights[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, (3, 4));
        let w = random(&mut rng, (3, 4));
        let (y, norms) = l2_normalize_rows(x.view());
        let dx = l2_normalize_rows_backward(y.view(), &norms, w.view());
        let num = numeric_grad(&x, |x| (&l2_normalize_rows(x.view()).0 * &w).sum());
        assert_close(&dx, &num, 1e-7);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let z = array![[1000.0, 0.0], [-1000.0, -1000.0]];
        let l = log_softmax_rows(z.view());
        assert!((l[[0, 0]]).abs() < 1e-12);
        assert!((l[[0, 1]] + 1000.0).abs() < 1e-9);
        assert!((l[[1, 0]] + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(3, 4, 1.0);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
