use super::{matmul, matmul_nt, matmul_tn_acc, Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Gaussian init with variance `1 / in`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..inp * out).map(|_| normal.sample(rng)).collect();
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor {
                    shape: vec![inp, out],
                    data: w,
                },
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
            inp,
            out,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[inp, out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
            inp,
            out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.inp {
            return Err(mismatch("linear", &[x.rows(), self.inp], x.shape()));
        }
        let n = x.rows();
        let mut y = matmul(x.data(), n, self.inp, store.get(self.w).data(), self.out);
        let b = store.get(self.b).data();
        for row in y.chunks_mut(self.out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor {
            shape: vec![n, self.out],
            data: y,
        };
        t.check_finite("linear")?;
        Ok(t)
    }

    /// Accumulates parameter gradients only, for layers fed by constants.
    pub fn backward_params(&self, grads: &mut Grads, x: &Tensor, dy: &Tensor) {
        let n = x.rows();
        matmul_tn_acc(
            x.data(),
            n,
            self.inp,
            dy.data(),
            self.out,
            grads.get_mut(self.w),
        );
        let gb = grads.get_mut(self.b);
        for row in dy.data().chunks(self.out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &Tensor,
        dy: &Tensor,
    ) -> Tensor {
        let n = x.rows();
        self.backward_params(grads, x, dy);
        Tensor {
            shape: vec![n, self.inp],
            data: matmul_nt(dy.data(), n, self.out, store.get(self.w).data(), self.inp),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Tanh approximation of GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, d)| gelu_grad_scalar(v) * d)
            .collect(),
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-row normalization with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor {
                    shape: vec![dim],
                    data: vec![1.0; dim],
                },
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        if x.cols() != self.dim {
            return Err(mismatch("layer_norm", &[x.rows(), self.dim], x.shape()));
        }
        let (g, b) = (store.get(self.gamma).data(), store.get(self.beta).data());
        let n = self.dim as f64;
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in x.data().chunks(self.dim) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * g[k] + b[k]);
            }
        }
        let t = Tensor {
            shape: x.shape.clone(),
            data: y,
        };
        t.check_finite("layer_norm")?;
        Ok((t, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &LayerNormCache,
        dy: &Tensor,
    ) -> Tensor {
        let g = store.get(self.gamma).data();
        let d = self.dim;
        let n = d as f64;
        {
            let gg = grads.get_mut(self.gamma);
            for (row_dy, row_h) in dy.data().chunks(d).zip(cache.xhat.chunks(d)) {
                for k in 0..d {
                    gg[k] += row_dy[k] * row_h[k];
                }
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for row_dy in dy.data().chunks(d) {
                for k in 0..d {
                    gb[k] += row_dy[k];
                }
            }
        }
        let mut dx = Vec::with_capacity(dy.len());
        for ((row_dy, row_h), is) in dy
            .data()
            .chunks(d)
            .zip(cache.xhat.chunks(d))
            .zip(&cache.inv_std)
        {
            let dh: Vec<f64> = (0..d).map(|k| row_dy[k] * g[k]).collect();
            let s1: f64 = dh.iter().sum();
            let s2: f64 = dh.iter().zip(row_h).map(|(a, b)| a * b).sum();
            for k in 0..d {
                dx.push(is / n * (n * dh[k] - s1 - row_h[k] * s2));
            }
        }
        Tensor {
            shape: dy.shape.clone(),
            data: dx,
        }
    }
}

/// Single-head scaled dot-product attention of one query over `L` tokens.
/// Returns the `1 × d` output and the softmax weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = q.cols();
    if q.rows() != 1 || k.cols() != d || v.cols() != d || k.rows() != v.rows() || k.rows() == 0 {
        return Err(mismatch("attention", &[k.rows().max(1), d], v.shape()));
    }
    let l = k.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut s = matmul_nt(q.data(), 1, d, k.data(), l);
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in s.iter_mut() {
        *x = ((*x - m) * scale).exp();
        z += *x;
    }
    for x in s.iter_mut() {
        *x /= z;
    }
    let out = matmul(&s, 1, l, v.data(), d);
    let t = Tensor {
        shape: vec![1, d],
        data: out,
    };
    t.check_finite("attention")?;
    Ok((t, s))
}

/// Gradients of [`attention`] with respect to `(q, K, V)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &[f64],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let l = k.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let dv = Tensor {
        shape: vec![l, d],
        data: matmul(weights, l, 1, dout.data(), d),
    };
    let dw = matmul_nt(dout.data(), 1, d, v.data(), l);
    let mix: f64 = weights.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let ds: Vec<f64> = weights
        .iter()
        .zip(&dw)
        .map(|(w, g)| w * (g - mix) * scale)
        .collect();
    let dq = Tensor {
        shape: vec![1, d],
        data: matmul(&ds, 1, l, k.data(), d),
    };
    let dk = Tensor {
        shape: vec![l, d],
        data: matmul(&ds, l, 1, q.data(), d),
    };
    (dq, dk, dv)
}

/// Lookup table with one learned row per index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit std");
        let data: Vec<f64> = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self {
            table: store.add(
                format!("{name}.table"),
                Tensor {
                    shape: vec![rows, dim],
                    data,
                },
            ),
            rows,
            dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, index: usize) -> Result<Tensor> {
        if index >= self.rows {
            return Err(Error::Domain {
                op: "embedding",
                value: index as f64,
            });
        }
        let t = store.get(self.table).data();
        Ok(Tensor {
            shape: vec![1, self.dim],
            data: t[index * self.dim..(index + 1) * self.dim].to_vec(),
        })
    }

    pub fn backward(&self, grads: &mut Grads, index: usize, dy: &Tensor) {
        let g = grads.get_mut(self.table);
        for (a, b) in g[index * self.dim..(index + 1) * self.dim]
            .iter_mut()
            .zip(dy.data())
        {
            *a += b;
        }
    }
}

/// Fixed sinusoidal encoding: `dim / 2` sines then `dim / 2` cosines at
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
