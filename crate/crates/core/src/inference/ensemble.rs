use crate::error::{shape_err, Error, Result};
use crate::numerics::{softmax_slice, Tensor};

/// Base floor applied before every power in the ensemble.
pub const POW_FLOOR: f64 = 1e-12;
/// Below this `se_clip + se_ldp`, the confidence ratio is taken as 1/2.
pub const SE_DENOM_EPS: f64 = 1e-9;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_BETA: f64 = 0.4;

/// Softmax over cosine logits `g . g_text^T / tau`, one row per mask.
/// Rows flagged invalid are uniform.
pub fn classify(g: &Tensor, valid: &[bool], g_text: &Tensor, tau: f64) -> Result<Tensor<f64>> {
    let (n, d) = g.as_matrix("mask embeddings")?;
    let (c, dt) = g_text.as_matrix("g_text")?;
    if d != dt {
        return Err(shape_err!("embeddings have width {d}, text rows {dt}"));
    }
    if valid.len() != n {
        return Err(shape_err!("{} validity flags for {n} masks", valid.len()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut out = Tensor::<f64>::zeros(&[n, c]);
    for k in 0..n {
        let row = out.row_mut(k);
        if !valid[k] {
            row.fill(1.0 / c as f64);
            continue;
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = g
                .row(k)
                .iter()
                .zip(g_text.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
        }
        softmax_slice(row, tau)?;
    }
    Ok(out)
}

/// `1 - second_largest / largest`.
pub fn selective_entropy(p_row: &[f64]) -> Result<f64> {
    if p_row.len() < 2 {
        return Err(Error::InvalidArgument(
            "selective entropy needs at least two classes".into(),
        ));
    }
    if p_row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    let (first, second) = top_two(p_row);
    if first == 0.0 {
        return Err(Error::InvalidArgument("degenerate distribution".into()));
    }
    Ok(1.0 - second / first)
}

fn top_two(p: &[f64]) -> (f64, f64) {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    (a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistributions {
    pub p_ldp_raw: Tensor<f64>,
    pub p_clip_raw: Tensor<f64>,
    /// True for test categories that were also training categories.
    pub overlap_mask: Vec<bool>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedClassScores {
    /// `N x C`, not renormalized.
    pub p_class: Tensor<f64>,
    pub se_ldp: Vec<f64>,
    pub se_clip: Vec<f64>,
    pub se_conf: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    /// The IoU scores the rows were weighted by.
    pub p_iou: Vec<f64>,
}

impl FusedClassScores {
    pub fn num_masks(&self) -> usize {
        self.p_class.dim(0)
    }

    /// Highest fused score and its class, lower class index on ties.
    pub fn best(&self, k: usize) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &v) in self.p_class.row(k).iter().enumerate() {
            if v > best.1 {
                best = (c, v);
            }
        }
        best
    }
}

/// How the per-mask confidence ratio is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SeConf {
    /// `se_clip / (se_clip + se_ldp)`, 1/2 on a vanishing denominator.
    Adaptive,
    /// A constant for every mask; 0 is the plain geometric ensemble.
    Forced(f64),
}

fn validate(dist: &ClassDistributions, p_iou: &[f64]) -> Result<(usize, usize)> {
    let (n, c) = dist.p_ldp_raw.as_matrix("LDP class rows")?;
    if dist.p_clip_raw.shape() != [n, c] {
        return Err(shape_err!(
            "CLIP class rows {:?} vs LDP class rows {:?}",
            dist.p_clip_raw.shape(),
            dist.p_ldp_raw.shape()
        ));
    }
    if c < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least two classes".into()));
    }
    if dist.overlap_mask.len() != c {
        return Err(shape_err!(
            "overlap mask has {} entries for {c} classes",
            dist.overlap_mask.len()
        ));
    }
    if p_iou.len() != n {
        return Err(shape_err!("{} IoU scores for {n} masks", p_iou.len()));
    }
    if p_iou.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
        return Err(Error::InvalidArgument("invalid IoU scores".into()));
    }
    for (name, v) in [("alpha", dist.alpha), ("beta", dist.beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    for t in [&dist.p_ldp_raw, &dist.p_clip_raw] {
        if t.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "class rows must be non-negative and finite".into(),
            ));
        }
    }
    Ok((n, c))
}

/// Selective entropy of an IoU-weighted row. A row scaled to zero carries
/// no peak, so it scores 0.
fn weighted_se(row: &[f64]) -> f64 {
    let (first, second) = top_two(row);
    if first > 0.0 {
        1.0 - second / first
    } else {
        0.0
    }
}

/// IoU-weighted geometric ensemble with exponents `alpha (1 + se_conf)` on
/// training categories and `beta (1 + se_conf)` on the rest.
pub fn ensemble(dist: &ClassDistributions, p_iou: &[f64], mode: SeConf) -> Result<FusedClassScores> {
    let (n, c) = validate(dist, p_iou)?;
    if let SeConf::Forced(v) = mode {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("forced confidence {v} outside [0, 1]")));
        }
    }
    let mut out = FusedClassScores {
        p_class: Tensor::zeros(&[n, c]),
        se_ldp: Vec::with_capacity(n),
        se_clip: Vec::with_capacity(n),
        se_conf: Vec::with_capacity(n),
        alpha_hat: Vec::with_capacity(n),
        beta_hat: Vec::with_capacity(n),
        p_iou: p_iou.to_vec(),
    };
    for k in 0..n {
        let w = p_iou[k];
        let p_ldp: Vec<f64> = dist.p_ldp_raw.row(k).iter().map(|v| v * w).collect();
        let p_clip: Vec<f64> = dist.p_clip_raw.row(k).iter().map(|v| v * w).collect();
        let se_ldp = weighted_se(&p_ldp);
        let se_clip = weighted_se(&p_clip);
        let se_conf = match mode {
            SeConf::Forced(v) => v,
            SeConf::Adaptive => {
                let denom = se_clip + se_ldp;
                if denom < SE_DENOM_EPS {
                    0.5
                } else {
                    se_clip / denom
                }
            }
        };
        let alpha_hat = dist.alpha * (1.0 + se_conf);
        let beta_hat = dist.beta * (1.0 + se_conf);
        let row = out.p_class.row_mut(k);
        for c in 0..c {
            let l = p_ldp[c].max(POW_FLOOR);
            let v = p_clip[c].max(POW_FLOOR);
            let e = if dist.overlap_mask[c] { alpha_hat } else { beta_hat };
            row[c] = l.powf(1.0 - e) * v.powf(e);
        }
        out.se_ldp.push(se_ldp);
        out.se_clip.push(se_clip);
        out.se_conf.push(se_conf);
        out.alpha_hat.push(alpha_hat);
        out.beta_hat.push(beta_hat);
    }
    Ok(out)
}

/// Mask-aware selective ensemble.
pub fn mase(dist: &ClassDistributions, p_iou: &[f64]) -> Result<FusedClassScores> {
    ensemble(dist, p_iou, SeConf::Adaptive)
}

/// The fixed-exponent baseline.
pub fn geometric_ensemble(dist: &ClassDistributions, p_iou: &[f64]) -> Result<FusedClassScores> {
    ensemble(dist, p_iou, SeConf::Forced(0.0))
}
