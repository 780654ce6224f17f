//! Line-by-line scalar execution of the selective ensemble, one mask at a
//! time, plus a scalar softmax classifier.

pub struct MaseRow {
    pub p_class: Vec<f64>,
    pub se_ldp: f64,
    pub se_clip: f64,
    pub se_conf: f64,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

fn top_two(row: &[f64]) -> (f64, f64) {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    (sorted[n - 1], sorted[n - 2])
}

/// `1 - second / first`, zero for an all-zero row.
fn se(row: &[f64]) -> f64 {
    let (first, second) = top_two(row);
    if first == 0.0 {
        0.0
    } else {
        1.0 - second / first
    }
}

/// `forced` replaces the confidence ratio when given.
#[allow(clippy::too_many_arguments)]
pub fn mase_row(
    ldp_raw: &[f64],
    clip_raw: &[f64],
    m: &[bool],
    alpha: f64,
    beta: f64,
    iou: f64,
    forced: Option<f64>,
) -> MaseRow {
    let c = ldp_raw.len();
    let mut p_ldp = vec![0.0; c];
    let mut p_clip = vec![0.0; c];
    for j in 0..c {
        p_ldp[j] = ldp_raw[j] * iou;
        p_clip[j] = clip_raw[j] * iou;
    }
    let se_ldp = se(&p_ldp);
    let se_clip = se(&p_clip);
    let se_conf = match forced {
        Some(v) => v,
        None => {
            let denom = se_clip + se_ldp;
            if denom < 1e-9 {
                0.5
            } else {
                se_clip / denom
            }
        }
    };
    let alpha_hat = alpha * (1.0 + se_conf);
    let beta_hat = beta * (1.0 + se_conf);
    let mut p_class = vec![0.0; c];
    for j in 0..c {
        let l = p_ldp[j].max(1e-12);
        let v = p_clip[j].max(1e-12);
        let in_voc = l.powf(1.0 - alpha_hat) * v.powf(alpha_hat) * if m[j] { 1.0 } else { 0.0 };
        let out_voc = l.powf(1.0 - beta_hat) * v.powf(beta_hat) * if m[j] { 0.0 } else { 1.0 };
        p_class[j] = in_voc + out_voc;
    }
    MaseRow {
        p_class,
        se_ldp,
        se_clip,
        se_conf,
        alpha_hat,
        beta_hat,
    }
}

/// Softmax of `g . t_c / tau` over unit-normalized rows.
pub fn classify_row(g: &[f64], text: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = text
        .iter()
        .map(|t| g.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}
