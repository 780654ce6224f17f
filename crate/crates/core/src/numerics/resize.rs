use crate::error::{shape_err, Result};

use super::tensor::{Scalar, Tensor};

/// Source sample position and blend weight for each output index.
fn taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|d| {
            let src = if align_corners {
                if out_len > 1 {
                    d as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of every plane of a `C x H x W` tensor.
///
/// With `align_corners = false` sample positions use half-pixel centers and
/// are clamped to the border.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("bilinear_resize")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "bilinear_resize needs non-empty planes, {h}x{w} -> {out_h}x{out_w}"
        ));
    }
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            let wy = T::from_f64(wy);
            for &(x0, x1, wx) in &tx {
                let wx = T::from_f64(wx);
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * wx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * wx;
                out.push(top + (bot - top) * wy);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Nearest-neighbour resampling with half-pixel centers: output index `d`
/// reads source `floor((d + 0.5) * in / out)`.
pub fn nearest_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("nearest_resize")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "nearest_resize needs non-empty planes, {h}x{w} -> {out_h}x{out_w}"
        ));
    }
    let pick = |d: usize, n_in: usize, n_out: usize| ((2 * d + 1) * n_in / (2 * n_out)).min(n_in - 1);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let row = &plane[pick(oy, h, out_h) * w..];
            out.extend((0..out_w).map(|ox| row[pick(ox, w, out_w)]));
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
