//! Simple feature pyramid over a single-stride backbone map.
//!
//! Four independent heads project the stride-16 map `F_sam` to strides
//! 32/16/8/4: a stride-2 convolution, a 1x1 convolution, one stride-2
//! deconvolution and two stride-2 deconvolutions. Each convolution is
//! followed by a channel layer norm and GeLU unless activations are off.

use crate::error::{shape_err, Result};
use crate::numerics::{add_channel_bias, conv2d_forward, crop, deconv2d_forward, gelu, NormParams, Tensor};

pub const STRIDES: [usize; 4] = [32, 16, 8, 4];

/// Kernel (`out x in x kh x kw`) and per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim(2)
    }

    pub fn conv(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let pad = self.kernel_size() / 2;
        let mut y = conv2d_forward(x, &self.kernel, stride, pad)?;
        add_channel_bias(&mut y, &self.bias)?;
        Ok(y)
    }

    pub fn deconv(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let mut y = deconv2d_forward(x, &self.kernel, stride)?;
        add_channel_bias(&mut y, &self.bias)?;
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnWeights {
    pub down32: ConvLayer,
    pub norm32: NormParams,
    pub lateral16: ConvLayer,
    pub norm16: NormParams,
    pub up8: ConvLayer,
    pub norm8: NormParams,
    pub up4a: ConvLayer,
    pub norm4a: NormParams,
    pub up4b: ConvLayer,
    pub norm4b: NormParams,
}

impl FpnWeights {
    pub fn out_channels(&self) -> usize {
        self.lateral16.out_channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FpnConfig {
    /// Layer norm + GeLU after every convolution. Off makes the pyramid linear.
    pub activations: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { activations: true }
    }
}

/// Maps at strides 32, 16, 8 and 4, each `D_pix x ceil(H/s) x ceil(W/s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub maps: [Tensor; 4],
}

impl MultiScaleFeatures {
    pub fn at_stride(&self, stride: usize) -> Option<&Tensor> {
        STRIDES.iter().position(|&s| s == stride).map(|i| &self.maps[i])
    }

    pub fn channels(&self) -> usize {
        self.maps[0].dim(0)
    }

    /// The stride-4 per-pixel map.
    pub fn finest(&self) -> &Tensor {
        &self.maps[3]
    }
}

fn activate(x: Tensor, norm: &NormParams, cfg: FpnConfig) -> Result<Tensor> {
    if !cfg.activations {
        return Ok(x);
    }
    Ok(norm.forward_channels(&x)?.map(gelu))
}

pub fn fpn_forward(
    f_sam: &Tensor,
    weights: &FpnWeights,
    image_h: usize,
    image_w: usize,
    cfg: FpnConfig,
) -> Result<MultiScaleFeatures> {
    let (_, h, w) = f_sam.as_chw("f_sam")?;
    if (h, w) != (image_h.div_ceil(16), image_w.div_ceil(16)) {
        return Err(shape_err!(
            "f_sam grid {h}x{w} does not match image {image_h}x{image_w} at stride 16"
        ));
    }
    let target = |s: usize| (image_h.div_ceil(s), image_w.div_ceil(s));

    let s32 = activate(weights.down32.conv(f_sam, 2)?, &weights.norm32, cfg)?;
    let s16 = activate(weights.lateral16.conv(f_sam, 1)?, &weights.norm16, cfg)?;

    let (h8, w8) = target(8);
    let up8 = crop(&weights.up8.deconv(f_sam, 2)?, h8, w8)?;
    let s8 = activate(up8, &weights.norm8, cfg)?;

    let mid = activate(weights.up4a.deconv(f_sam, 2)?, &weights.norm4a, cfg)?;
    let (h4, w4) = target(4);
    let up4 = crop(&weights.up4b.deconv(&mid, 2)?, h4, w4)?;
    let s4 = activate(up4, &weights.norm4b, cfg)?;

    let maps = [s32, s16, s8, s4];
    let d = maps[1].dim(0);
    for (m, s) in maps.iter().zip(STRIDES) {
        let (c, mh, mw) = m.as_chw("pyramid level")?;
        if c != d || (mh, mw) != target(s) {
            return Err(shape_err!(
                "pyramid level at stride {s} is {c}x{mh}x{mw}, expected {d}x{}x{}",
                target(s).0,
                target(s).1
            ));
        }
    }
    Ok(MultiScaleFeatures { maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_weights(d_in: usize, d: usize, seed: u64, zero_bias: bool) -> FpnWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |o: usize, i: usize, k: usize| ConvLayer {
            kernel: Tensor::uniform(&[o, i, k, k], 0.3, &mut rng),
            bias: if zero_bias {
                Tensor::zeros(&[o])
            } else {
                Tensor::uniform(&[o], 0.1, &mut rng)
            },
        };
        FpnWeights {
            down32: layer(d, d_in, 3),
            norm32: NormParams::identity(d),
            lateral16: layer(d, d_in, 1),
            norm16: NormParams::identity(d),
            up8: layer(d, d_in, 2),
            norm8: NormParams::identity(d),
            up4a: layer(d, d_in, 2),
            norm4a: NormParams::identity(d),
            up4b: layer(d, d, 2),
            norm4b: NormParams::identity(d),
        }
    }

    #[test]
    fn shape_law_64() {
        let w = random_weights(3, 8, 0, false);
        let x = Tensor::zeros(&[3, 4, 4]);
        let ms = fpn_forward(&x, &w, 64, 64, FpnConfig::default()).unwrap();
        let dims: Vec<_> = ms.maps.iter().map(|m| (m.dim(1), m.dim(2))).collect();
        assert_eq!(dims, vec![(2, 2), (4, 4), (8, 8), (16, 16)]);
    }

    #[test]
    fn shape_law_range() {
        let w = random_weights(2, 4, 1, false);
        for h in (32..=256).step_by(16) {
            for ww in [32, 48, 80] {
                let x = Tensor::zeros(&[2, h / 16, ww / 16]);
                let ms = fpn_forward(&x, &w, h, ww, FpnConfig::default()).unwrap();
                for (m, s) in ms.maps.iter().zip(STRIDES) {
                    assert_eq!((m.dim(1), m.dim(2)), (h.div_ceil(s), ww.div_ceil(s)));
                }
            }
        }
    }

    #[test]
    fn tiny_image_crops() {
        let w = random_weights(2, 4, 1, false);
        let ms = fpn_forward(&Tensor::zeros(&[2, 1, 1]), &w, 8, 8, FpnConfig::default()).unwrap();
        assert_eq!(ms.finest().shape(), &[4, 2, 2]);
        assert_eq!(ms.maps[2].shape(), &[4, 1, 1]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let w = random_weights(3, 8, 2, true);
        let ms = fpn_forward(&Tensor::zeros(&[3, 4, 4]), &w, 64, 64, FpnConfig::default()).unwrap();
        assert!(ms.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_without_activations() {
        let w = random_weights(3, 4, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[3, 3, 5], 1.0, &mut rng);
        let cfg = FpnConfig { activations: false };
        let a = fpn_forward(&x, &w, 48, 80, cfg).unwrap();
        let b = fpn_forward(&x.scale(2.5), &w, 48, 80, cfg).unwrap();
        for (ma, mb) in a.maps.iter().zip(&b.maps) {
            for (&u, &v) in ma.data().iter().zip(mb.data()) {
                assert!((2.5 * u - v).abs() < 1e-4 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn mismatched_grid_errors() {
        let w = random_weights(3, 4, 3, true);
        assert!(fpn_forward(&Tensor::zeros(&[3, 3, 3]), &w, 64, 64, FpnConfig::default()).is_err());
        assert!(fpn_forward(&Tensor::zeros(&[2, 4, 4]), &w, 64, 64, FpnConfig::default()).is_err());
    }
}
