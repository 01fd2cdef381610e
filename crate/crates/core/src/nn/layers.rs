//! SVDF and projection layers with hand-derived gradients.
//!
//! The SVDF layer is a rank-1 factored time x feature convolution. For output
//! channel `c`, a feature filter projects every input frame to a scalar
//! `s[t,c] = F[c,:] . x[t,:]`, and a causal time filter of length K mixes the
//! last K projections: `a[t,c] = sum_j W[c,j] * s[t-j,c] + b[c]`, `y = relu(a)`.
//! Projections before the start of the sequence come from the stream state
//! (zero for a fresh sequence).

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{KwsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Identity => a,
        }
    }

    #[inline]
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdfParams {
    /// `C_out x C_in`
    pub feature_filters: Matrix,
    /// `C_out x K`
    pub time_filters: Matrix,
    pub bias: Vec<f64>,
}

impl SvdfParams {
    pub fn zeros(c_in: usize, c_out: usize, memory: usize) -> Self {
        SvdfParams {
            feature_filters: Matrix::zeros(c_out, c_in),
            time_filters: Matrix::zeros(c_out, memory),
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_in(&self) -> usize {
        self.feature_filters.cols()
    }

    pub fn c_out(&self) -> usize {
        self.feature_filters.rows()
    }

    pub fn memory(&self) -> usize {
        self.time_filters.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let c_out = self.c_out();
        if self.memory() == 0 {
            return Err(KwsError::Shape("svdf memory K must be >= 1".into()));
        }
        if self.time_filters.rows() != c_out || self.bias.len() != c_out {
            return Err(KwsError::Shape(format!(
                "svdf: feature filters {:?}, time filters {:?}, bias {}",
                self.feature_filters.shape(),
                self.time_filters.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// The last `K - 1` feature projections of each channel, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdfState {
    memory: Matrix,
}

impl SvdfState {
    pub fn zeros(p: &SvdfParams) -> Self {
        SvdfState {
            memory: Matrix::zeros(p.memory() - 1, p.c_out()),
        }
    }

    pub fn reset(&mut self) {
        self.memory.as_mut_slice().fill(0.0);
    }

    pub fn memory(&self) -> &Matrix {
        &self.memory
    }
}

/// Intermediates needed by [`svdf_backward`].
#[derive(Debug, Clone)]
pub struct SvdfCache {
    x: Matrix,
    /// `(K - 1 + T) x C_out`: state memory followed by this chunk's projections.
    s_ext: Matrix,
    pre: Matrix,
}

impl SvdfCache {
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdfGrads {
    pub feature_filters: Matrix,
    pub time_filters: Matrix,
    pub bias: Vec<f64>,
}

pub fn svdf_forward(
    x: &Matrix,
    p: &SvdfParams,
    state: Option<&SvdfState>,
) -> Result<(Matrix, SvdfState)> {
    let (y, cache) = svdf_forward_cached(x, p, state)?;
    let k = p.memory();
    let total = cache.s_ext.rows();
    let memory = cache.s_ext.slice_rows(total - (k - 1), total);
    Ok((y, SvdfState { memory }))
}

pub fn svdf_forward_cached(
    x: &Matrix,
    p: &SvdfParams,
    state: Option<&SvdfState>,
) -> Result<(Matrix, SvdfCache)> {
    p.validate()?;
    if x.cols() != p.c_in() {
        return Err(KwsError::Shape(format!(
            "svdf input has {} channels, layer expects {}",
            x.cols(),
            p.c_in()
        )));
    }
    let (t_len, c_out, k) = (x.rows(), p.c_out(), p.memory());
    let mut s_ext = Matrix::zeros(k - 1 + t_len, c_out);
    if let Some(st) = state {
        if st.memory.shape() != (k - 1, c_out) {
            return Err(KwsError::Shape(format!(
                "svdf state {:?}, expected {:?}",
                st.memory.shape(),
                (k - 1, c_out)
            )));
        }
        s_ext.as_mut_slice()[..(k - 1) * c_out].copy_from_slice(st.memory.as_slice());
    }
    for t in 0..t_len {
        let xt = x.row(t);
        let srow = s_ext.row_mut(k - 1 + t);
        for (c, s) in srow.iter_mut().enumerate() {
            *s = dot(p.feature_filters.row(c), xt);
        }
    }
    let wt = transpose(&p.time_filters);
    let mut pre = Matrix::zeros(t_len, c_out);
    for t in 0..t_len {
        let a = pre.row_mut(t);
        a.copy_from_slice(&p.bias);
        for j in 0..k {
            // s_ext row (k - 1 + t - j) holds s[t - j]
            let s = s_ext.row(k - 1 + t - j);
            for ((ac, w), sc) in a.iter_mut().zip(wt.row(j)).zip(s) {
                *ac += w * sc;
            }
        }
    }
    let y = Matrix::from_vec(
        t_len,
        c_out,
        pre.as_slice().iter().map(|a| a.max(0.0)).collect(),
    )?;
    y.ensure_finite("svdf output")?;
    Ok((
        y,
        SvdfCache {
            x: x.clone(),
            s_ext,
            pre,
        },
    ))
}

/// Gradients of the SVDF layer. Returns `(dL/dx, dL/dparams)`; the stream
/// state that fed the forward pass is treated as a constant.
pub fn svdf_backward(
    cache: &SvdfCache,
    p: &SvdfParams,
    dy: &Matrix,
) -> Result<(Matrix, SvdfGrads)> {
    let (t_len, c_out, k) = (cache.pre.rows(), p.c_out(), p.memory());
    if dy.shape() != (t_len, c_out) {
        return Err(KwsError::Shape(format!(
            "svdf dy {:?}, expected {:?}",
            dy.shape(),
            (t_len, c_out)
        )));
    }
    let mut da = Matrix::zeros(t_len, c_out);
    for (d, (g, a)) in da
        .as_mut_slice()
        .iter_mut()
        .zip(dy.as_slice().iter().zip(cache.pre.as_slice()))
    {
        *d = if *a > 0.0 { *g } else { 0.0 };
    }

    let wt = transpose(&p.time_filters);
    let mut d_time_t = Matrix::zeros(k, c_out);
    let mut d_bias = vec![0.0; c_out];
    let mut ds = Matrix::zeros(t_len, c_out);
    for t in 0..t_len {
        let g = da.row(t);
        for (b, gc) in d_bias.iter_mut().zip(g) {
            *b += gc;
        }
        for j in 0..k {
            let s = cache.s_ext.row(k - 1 + t - j);
            for ((d, gc), sc) in d_time_t.row_mut(j).iter_mut().zip(g).zip(s) {
                *d += gc * sc;
            }
            if j <= t {
                for ((d, gc), w) in ds.row_mut(t - j).iter_mut().zip(g).zip(wt.row(j)) {
                    *d += gc * w;
                }
            }
        }
    }
    let d_time = transpose(&d_time_t);

    let c_in = p.c_in();
    let mut d_feat = Matrix::zeros(c_out, c_in);
    let mut dx = Matrix::zeros(t_len, c_in);
    for t in 0..t_len {
        let xt = cache.x.row(t);
        for c in 0..c_out {
            let g = ds.get(t, c);
            if g == 0.0 {
                continue;
            }
            axpy(g, xt, d_feat.row_mut(c));
            axpy(g, p.feature_filters.row(c), dx.row_mut(t));
        }
    }
    dx.ensure_finite("svdf input gradient")?;
    Ok((
        dx,
        SvdfGrads {
            feature_filters: d_feat,
            time_filters: d_time,
            bias: d_bias,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `C_out x C_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ProjectionParams {
    pub fn zeros(c_in: usize, c_out: usize, activation: Activation) -> Self {
        ProjectionParams {
            weight: Matrix::zeros(c_out, c_in),
            bias: vec![0.0; c_out],
            activation,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn c_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    x: Matrix,
    pre: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

pub fn projection_forward(x: &Matrix, p: &ProjectionParams) -> Result<(Matrix, ProjectionCache)> {
    if x.cols() != p.c_in() || p.bias.len() != p.c_out() {
        return Err(KwsError::Shape(format!(
            "projection input {:?} vs weight {:?}, bias {}",
            x.shape(),
            p.weight.shape(),
            p.bias.len()
        )));
    }
    let (t_len, c_out) = (x.rows(), p.c_out());
    let mut pre = Matrix::zeros(t_len, c_out);
    let mut y = Matrix::zeros(t_len, c_out);
    for t in 0..t_len {
        let xt = x.row(t);
        for c in 0..c_out {
            let a = p.bias[c] + dot(p.weight.row(c), xt);
            pre.set(t, c, a);
            y.set(t, c, p.activation.apply(a));
        }
    }
    y.ensure_finite("projection output")?;
    Ok((y, ProjectionCache { x: x.clone(), pre }))
}

pub fn projection_backward(
    cache: &ProjectionCache,
    p: &ProjectionParams,
    dy: &Matrix,
) -> Result<(Matrix, ProjectionGrads)> {
    let (t_len, c_out) = (cache.pre.rows(), p.c_out());
    if dy.shape() != (t_len, c_out) {
        return Err(KwsError::Shape(format!(
            "projection dy {:?}, expected {:?}",
            dy.shape(),
            (t_len, c_out)
        )));
    }
    let mut d_w = Matrix::zeros(c_out, p.c_in());
    let mut d_b = vec![0.0; c_out];
    let mut dx = Matrix::zeros(t_len, p.c_in());
    for t in 0..t_len {
        let xt = cache.x.row(t);
        for c in 0..c_out {
            let g = dy.get(t, c) * p.activation.grad(cache.pre.get(t, c));
            if g == 0.0 {
                continue;
            }
            d_b[c] += g;
            axpy(g, xt, d_w.row_mut(c));
            axpy(g, p.weight.row(c), dx.row_mut(t));
        }
    }
    dx.ensure_finite("projection input gradient")?;
    Ok((
        dx,
        ProjectionGrads {
            weight: d_w,
            bias: d_b,
        },
    ))
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(KwsError::NonFinite("softmax input".into()));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    if !max.is_finite() {
        return Err(KwsError::NonFinite("softmax input".into()));
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

/// Maps `dL/dprobs` to `dL/dlogits` row by row: `p * (dp - <p, dp>)`.
pub fn softmax_backward_rows(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner = dot(p, dp);
        for (o, (pi, dpi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - inner);
        }
    }
    out
}

/// `p <- p - lr * g`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(KwsError::Shape(format!(
            "sgd: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(KwsError::NonFinite("parameters after sgd step".into()));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn transpose(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.cols(), m.rows(), |r, c| m.get(c, r))
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
