use crate::error::{shape_err, Error, Result};

use super::ops::{softmax_slice, Linear};
use super::tensor::{dot, Scalar, Tensor};

/// Projection parameters of one multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<T: Scalar = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> AttnWeights<T> {
    pub fn embed_dim(&self) -> usize {
        self.q.out_dim()
    }

    pub fn head_dim(&self) -> Result<usize> {
        let d = self.embed_dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(d / self.heads)
    }
}

/// Boolean `queries x keys` matrix; `true` admits a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(shape_err!(
                "attention mask of {} entries for {queries} x {keys}",
                allowed.len()
            ));
        }
        Ok(Self { queries, keys, allowed })
    }

    pub fn all(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.keys..(q + 1) * self.keys]
    }

    /// True when row `q` admits no key at all.
    pub fn row_is_empty(&self, q: usize) -> bool {
        !self.row(q).iter().any(|&a| a)
    }
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q` is `Nq x Dq`, `k` and `v` are `Nk x Dk`. Blocked keys get `-inf`
/// before the softmax. A query whose mask row blocks every key attends to
/// all keys instead.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &AttnWeights<T>,
    attn_mask: Option<&AttnMask>,
) -> Result<Tensor<T>> {
    attention_with_weights(q, k, v, weights, attn_mask).map(|(out, _)| out)
}

/// As [`multi_head_attention`], also returning the `heads x Nq x Nk`
/// attention probabilities.
pub fn attention_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &AttnWeights<T>,
    attn_mask: Option<&AttnMask>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let head_dim = weights.head_dim()?;
    let (nq, _) = q.as_matrix("attention queries")?;
    let (nk, _) = k.as_matrix("attention keys")?;
    if v.dim(0) != nk {
        return Err(shape_err!(
            "attention keys {:?} and values {:?} differ in length",
            k.shape(),
            v.shape()
        ));
    }
    if let Some(m) = attn_mask {
        if m.dims() != (nq, nk) {
            return Err(shape_err!("attention mask {:?} for {nq} queries x {nk} keys", m.dims()));
        }
    }
    if nk == 0 {
        return Err(Error::InvalidArgument("attention over zero keys".into()));
    }
    let qp = weights.q.forward(q)?;
    let kp = weights.k.forward(k)?;
    let vp = weights.v.forward(v)?;
    let d = weights.embed_dim();
    if kp.dim(1) != d || vp.dim(1) != d {
        return Err(shape_err!(
            "attention projections disagree on embedding dim: q {d}, k {}, v {}",
            kp.dim(1),
            vp.dim(1)
        ));
    }
    let scale = T::ONE / T::from_f64(head_dim as f64).sqrt();
    let heads = weights.heads;
    let mut probs = vec![T::ZERO; heads * nq * nk];
    let mut mixed = vec![T::ZERO; nq * d];
    let mut scores = vec![T::ZERO; nk];
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        for i in 0..nq {
            let qi = &qp.row(i)[lo..hi];
            let row_mask = attn_mask.filter(|m| !m.row_is_empty(i)).map(|m| m.row(i));
            for (j, s) in scores.iter_mut().enumerate() {
                *s = match row_mask {
                    Some(r) if !r[j] => T::NEG_INFINITY,
                    _ => dot(qi, &kp.row(j)[lo..hi]) * scale,
                };
            }
            softmax_slice(&mut scores, T::ONE)?;
            let out = &mut mixed[i * d + lo..i * d + hi];
            for (j, &p) in scores.iter().enumerate() {
                if p == T::ZERO {
                    continue;
                }
                for (o, &vv) in out.iter_mut().zip(&vp.row(j)[lo..hi]) {
                    *o += p * vv;
                }
            }
            probs[(h * nq + i) * nk..(h * nq + i + 1) * nk].copy_from_slice(&scores);
        }
    }
    let mixed = Tensor::from_vec(&[nq, d], mixed)?;
    let out = weights.out.forward(&mixed)?;
    Ok((out, Tensor::from_vec(&[heads, nq, nk], probs)?))
}
