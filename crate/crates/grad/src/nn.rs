//! Layer building blocks expressed on top of [`Graph`] primitives.

use std::rc::Rc;

use rand::Rng;

use crate::graph::{Graph, Mat, Var};
use crate::params::{Bound, ParamId, ParamSet};

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot-style Gaussian init; bias starts at zero.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: ps.normal(format!("{name}.w"), fan_in, fan_out, std, rng),
            b: ps.zeros(format!("{name}.b"), 1, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.filled(format!("{name}.gamma"), 1, width, 1.0),
            beta: ps.zeros(format!("{name}.beta"), 1, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta], 1e-5)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(width.is_multiple_of(heads), "width must be divisible by heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        memory: Var,
        bias: &[Mat],
    ) -> Var {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, memory);
        let v = self.v.forward(g, p, memory);
        let a = g.attention(q, k, v, self.heads, bias);
        self.o.forward(g, p, a)
    }
}

/// ALiBi head slopes `2^(-8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64))
        .collect()
}

/// Per-head symmetric ALiBi biases `-m_h·|i-j|` for a `t×t` self-attention.
pub fn alibi_bias(t: usize, heads: usize) -> Vec<Mat> {
    alibi_slopes(heads)
        .into_iter()
        .map(|m| Mat::from_shape_fn((t, t), |(i, j)| -m * (i as f64 - j as f64).abs()))
        .collect()
}

/// Row indices for a same-length 1-D convolution tap at offset `o`
/// (zero padding outside `[0, t)`).
pub fn shifted_rows(t: usize, offset: isize) -> Rc<[Option<usize>]> {
    (0..t as isize)
        .map(|i| {
            let j = i + offset;
            (0..t as isize).contains(&j).then_some(j as usize)
        })
        .collect()
}

/// Dense temporal convolution over rows, implemented as an unfold followed
/// by one matrix product. `out[t] = Σ_k x[stride·t + k - pad] · W_k + b`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * kernel + c_out) as f64).sqrt();
        Self {
            w: ps.normal(format!("{name}.w"), c_in * kernel, c_out, std, rng),
            b: ps.zeros(format!("{name}.b"), 1, c_out),
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let t_in = g.shape(x).0;
        let t_out = self.out_len(t_in);
        let taps: Vec<Var> = (0..self.kernel)
            .map(|k| {
                let idx: Rc<[Option<usize>]> = (0..t_out)
                    .map(|t| {
                        let j = (self.stride * t + k) as isize - self.pad as isize;
                        (0..t_in as isize).contains(&j).then_some(j as usize)
                    })
                    .collect();
                g.gather_rows(x, idx)
            })
            .collect();
        let unfolded = if taps.len() == 1 {
            taps[0]
        } else {
            g.concat_cols(&taps)
        };
        let y = g.matmul(unfolded, p[self.w]);
        g.add_row(y, p[self.b])
    }
}

/// Per-channel temporal convolution, `same` length, odd kernel.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let std = (1.0 / kernel as f64).sqrt();
        Self {
            w: ps.normal(format!("{name}.w"), kernel, channels, std, rng),
            b: ps.zeros(format!("{name}.b"), 1, channels),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let t = g.shape(x).0;
        let half = (self.kernel / 2) as isize;
        let mut acc: Option<Var> = None;
        for k in 0..self.kernel {
            let shifted = g.gather_rows(x, shifted_rows(t, k as isize - half));
            let idx: Rc<[Option<usize>]> = Rc::from(vec![Some(k)]);
            let wk = g.gather_rows(p[self.w], idx);
            let term = g.mul_row(shifted, wk);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let y = acc.expect("kernel is non-empty");
        g.add_row(y, p[self.b])
    }
}

/// Standard sinusoidal embedding of an integer step at width `dim`.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out[[0, i]] = arg.sin();
        out[[0, i + half]] = arg.cos();
    }
    out
}
