//! Forward and backward kernels shared by the transformer blocks.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Parameter-free layer norm over each row. Returns the normalized rows and
/// the per-row standard deviations.
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut sigmas = Array1::zeros(x.nrows());
    for (mut row, sigma) in out.rows_mut().into_iter().zip(sigmas.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *sigma = (var + LN_EPS).sqrt();
        let inv = 1.0 / *sigma;
        row.mapv_inplace(|v| v * inv);
    }
    (out, sigmas)
}

/// Gradient of [`layer_norm`] with respect to its input.
pub fn layer_norm_backward(grad: &Array2<f64>, normed: &Array2<f64>, sigmas: &Array1<f64>) -> Array2<f64> {
    let d = grad.ncols() as f64;
    let mut out = Array2::zeros(grad.dim());
    for (((mut o, g), n), &sigma) in out
        .rows_mut()
        .into_iter()
        .zip(grad.rows())
        .zip(normed.rows())
        .zip(sigmas)
    {
        let mean_g = g.sum() / d;
        let mean_gn = g.dot(&n) / d;
        for ((o, &gv), &nv) in o.iter_mut().zip(g).zip(n) {
            *o = (gv - mean_g - nv * mean_gn) / sigma;
        }
    }
    out
}

/// Row-wise softmax of a score matrix.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Sinusoidal timestep features: `[sin(1000·t·ω_k), cos(1000·t·ω_k)]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub struct AttentionWeights<'a> {
    pub wq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array2<f64>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax probabilities, one `n × n` matrix per head.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub mixed: Array2<f64>,
    pub output: Array2<f64>,
}

/// Multi-head softmax attention over every row of `u`, no masking.
pub fn attention_forward(u: &Array2<f64>, w: &AttentionWeights<'_>) -> AttentionCache {
    let q = u.dot(w.wq);
    let k = u.dot(w.wk);
    let v = u.dot(w.wv);
    let d = q.ncols();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let output = mixed.dot(w.wo) + w.bo;
    AttentionCache {
        q,
        k,
        v,
        probs,
        mixed,
        output,
    }
}

pub struct AttentionGrads {
    pub du: Array2<f64>,
    pub dwq: Array2<f64>,
    pub dwk: Array2<f64>,
    pub dwv: Array2<f64>,
    pub dwo: Array2<f64>,
    pub dbo: Array2<f64>,
}

pub fn attention_backward(
    dout: &Array2<f64>,
    u: &Array2<f64>,
    w: &AttentionWeights<'_>,
    cache: &AttentionCache,
) -> AttentionGrads {
    let d = cache.q.ncols();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dwo = cache.mixed.t().dot(dout);
    let dbo = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dmixed = dout.dot(&w.wo.t());

    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dmix_h = dmixed.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dmix_h));
        let dp = dmix_h.dot(&cache.v.slice(cols).t());
        let ds = softmax_backward(p, &dp) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let du = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    AttentionGrads {
        du,
        dwq: u.t().dot(&dq),
        dwk: u.t().dot(&dk),
        dwv: u.t().dot(&dv),
        dwo,
        dbo,
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for ((mut out, pr), dpr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.dot(&dpr);
        for ((o, &pv), &dpv) in out.iter_mut().zip(pr).zip(dpr) {
            *o = pv * (dpv - dot);
        }
    }
    ds
}

pub fn all_finite(a: ArrayView2<'_, f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.37 - 2.0);
        let (n, _) = layer_norm(&x);
        for row in n.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let u = Array2::from_shape_vec((1, 4), vec![0.3, -0.2, 0.5, 1.0]).unwrap();
        let wq = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.1);
        let wk = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f64 * 0.05);
        let wv = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 3 + j) % 5) as f64 * 0.2);
        let wo = Array2::eye(4);
        let bo = Array2::zeros((1, 4));
        let w = AttentionWeights {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
            bo: &bo,
            heads: 2,
        };
        let cache = attention_forward(&u, &w);
        assert_eq!(cache.output, u.dot(&wv));
    }

    #[test]
    fn uniform_keys_average_values() {
        // wk = 0 makes every key the zero vector, so each query sees equal
        // scores and the output is the mean of the value rows.
        let u = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let wq = Array2::eye(4);
        let wk = Array2::zeros((4, 4));
        let wv = Array2::eye(4);
        let wo = Array2::eye(4);
        let bo = Array2::zeros((1, 4));
        let w = AttentionWeights {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
            bo: &bo,
            heads: 1,
        };
        let cache = attention_forward(&u, &w);
        let mean = u.mean_axis(Axis(0)).unwrap();
        for row in cache.output.rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silu_gradient_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
