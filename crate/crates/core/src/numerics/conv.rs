use crate::error::{shape_err, Error, Result};

use super::tensor::{Scalar, Tensor};

fn kernel_dims<T: Scalar>(kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape() {
        [o, c, kh, kw] => Ok((*o, *c, *kh, *kw)),
        s => Err(shape_err!("kernel must be out x in x kh x kw, got {:?}", s)),
    }
}

/// 2-D cross-correlation of a `C x H x W` map with an `O x C x kh x kw`
/// kernel, zero padding on every side.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("conv2d input")?;
    let (o, kc, kh, kw) = kernel_dims(kernel)?;
    if kc != c {
        return Err(shape_err!("conv2d kernel expects {kc} input channels, input has {c}"));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        ));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let src = x.data();
    let k = kernel.data();
    let mut out = vec![T::ZERO; o * ho * wo];
    for oc in 0..o {
        for ic in 0..c {
            let plane = &src[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                    if kv == T::ZERO {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                        for (ox, ov) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *ov += kv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, ho, wo], out)
}

/// Transposed convolution (no padding): output is
/// `O x ((H-1)*stride + kh) x ((W-1)*stride + kw)`.
pub fn deconv2d_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("deconv2d input")?;
    let (o, kc, kh, kw) = kernel_dims(kernel)?;
    if kc != c {
        return Err(shape_err!("deconv2d kernel expects {kc} input channels, input has {c}"));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("deconv2d stride must be >= 1".into()));
    }
    let ho = (h.max(1) - 1) * stride + kh;
    let wo = (w.max(1) - 1) * stride + kw;
    let src = x.data();
    let k = kernel.data();
    let mut out = vec![T::ZERO; o * ho * wo];
    for ic in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let xv = src[(ic * h + iy) * w + ix];
                if xv == T::ZERO {
                    continue;
                }
                for oc in 0..o {
                    for ky in 0..kh {
                        let oy = iy * stride + ky;
                        let krow = &k[((oc * c + ic) * kh + ky) * kw..((oc * c + ic) * kh + ky + 1) * kw];
                        let base = (oc * ho + oy) * wo + ix * stride;
                        for (kx, &kv) in krow.iter().enumerate() {
                            out[base + kx] += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, ho, wo], out)
}

/// Swaps the channel axes of an `O x C x kh x kw` kernel.
pub fn transpose_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, c, kh, kw) = kernel_dims(kernel)?;
    let k = kernel.data();
    let mut out = vec![T::ZERO; k.len()];
    let area = kh * kw;
    for oc in 0..o {
        for ic in 0..c {
            out[(ic * o + oc) * area..(ic * o + oc + 1) * area]
                .copy_from_slice(&k[(oc * c + ic) * area..(oc * c + ic + 1) * area]);
        }
    }
    Tensor::from_vec(&[c, o, kh, kw], out)
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (c, h, w) = x.as_chw("channel bias")?;
    if bias.numel() != c {
        return Err(shape_err!("bias of {} for {c} channels", bias.numel()));
    }
    let hw = h * w;
    for (ch, &b) in bias.data().iter().enumerate() {
        for v in &mut x.data_mut()[ch * hw..(ch + 1) * hw] {
            *v += b;
        }
    }
    Ok(())
}

/// Keeps the top-left `out_h x out_w` window of a `C x H x W` map.
pub fn crop<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.as_chw("crop")?;
    if out_h > h || out_w > w {
        return Err(shape_err!("cannot crop {h}x{w} to {out_h}x{out_w}"));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let start = (ch * h + y) * w;
            out.extend_from_slice(&x.data()[start..start + out_w]);
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loop_conv(x: &Tensor<f64>, k: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(&[3, 5, 4], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            k.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn seeded_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[5, 3, 3, 3], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let y = conv2d_forward(&x, &k, s, p).unwrap();
            let want = loop_conv(&x, &k, s, p);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_stride_two_doubles() {
        let x = Tensor::<f64>::full(&[2, 3, 5], 1.0);
        let k = Tensor::full(&[4, 2, 2, 2], 0.5);
        let y = deconv2d_forward(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[4, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(conv2d_forward(&x, &k, 1, 0).is_err());
        assert!(deconv2d_forward(&x, &k, 2).is_err());
    }

    #[test]
    fn conv_deconv_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (k_size, s, h) in [(2, 2, 8), (3, 1, 7), (3, 2, 9), (1, 1, 5)] {
            let x = Tensor::<f64>::uniform(&[3, h, h], 1.0, &mut rng);
            let k = Tensor::<f64>::uniform(&[4, 3, k_size, k_size], 1.0, &mut rng);
            let cx = conv2d_forward(&x, &k, s, 0).unwrap();
            let y = Tensor::<f64>::uniform(cx.shape(), 1.0, &mut rng);
            let adj = deconv2d_forward(&y, &transpose_kernel(&k).unwrap(), s).unwrap();
            assert_eq!(adj.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn crop_top_left() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(crop(&x, 1, 2).unwrap().data(), &[1., 2.]);
    }
}
