use crate::error::{shape_err, Error, Result};

use super::tensor::{Scalar, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Softmax along `axis` of `x / temperature`.
///
/// `-inf` entries are allowed (they receive zero weight); any other
/// non-finite value is rejected, as is a slice made entirely of `-inf`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::ZERO) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= x.ndim() {
        return Err(shape_err!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    if let Some(bad) = x
        .data()
        .iter()
        .find(|v| v.is_nan() || (!v.is_finite() && **v > T::ZERO))
    {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    let mut buf = vec![T::ZERO; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = src[base + a * inner];
            }
            softmax_slice(&mut buf, temperature)?;
            for (a, &b) in buf.iter().enumerate() {
                out[base + a * inner] = b;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// In-place softmax of one slice with temperature scaling.
pub fn softmax_slice<T: Scalar>(row: &mut [T], temperature: T) -> Result<()> {
    let max = row.iter().copied().fold(T::NEG_INFINITY, Scalar::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax slice is entirely -inf".to_string()));
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}

/// Layer normalization over the last dimension.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err!("layer_norm on a 0-d tensor"))?;
    if gain.numel() != d || bias.numel() != d {
        return Err(shape_err!(
            "layer_norm gain/bias sizes {}/{} vs last dim {d}",
            gain.numel(),
            bias.numel()
        ));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for r in 0..out.rows() {
        normalize_row(out.row_mut(r), gain.data(), bias.data(), eps);
    }
    Ok(out)
}

fn normalize_row<T: Scalar>(row: &mut [T], gain: &[T], bias: &[T], eps: T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row.iter() {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &v in row.iter() {
        var += (v - mean) * (v - mean);
    }
    var = var / n;
    let inv = T::ONE / (var + eps).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Layer normalization across channels at every pixel of a `C x H x W` map.
pub fn layer_norm_channels<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("layer_norm_channels")?;
    if gain.numel() != c || bias.numel() != c {
        return Err(shape_err!(
            "layer_norm_channels gain/bias sizes {}/{} vs {c} channels",
            gain.numel(),
            bias.numel()
        ));
    }
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    let mut pixel = vec![T::ZERO; c];
    for p in 0..hw {
        for (ch, v) in pixel.iter_mut().enumerate() {
            *v = src[ch * hw + p];
        }
        normalize_row(&mut pixel, gain.data(), bias.data(), eps);
        for (ch, &v) in pixel.iter().enumerate() {
            out[ch * hw + p] = v;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// GeLU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::ZERO {
        x
    } else {
        T::ZERO
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Affine map `y = x · Wᵀ + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.as_matrix("linear weight")?;
        if bias.shape() != [out] {
            return Err(shape_err!(
                "linear bias {:?} does not match {out} outputs",
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    /// `x` is `rows x in`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul_t(&self.weight)?;
        let b = self.bias.data();
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }
}

/// Per-feature gain and bias of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T: Scalar = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], T::ONE),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gain, &self.bias, T::from_f64(DEFAULT_LN_EPS))
    }

    pub fn forward_channels(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm_channels(x, &self.gain, &self.bias, T::from_f64(DEFAULT_LN_EPS))
    }
}
