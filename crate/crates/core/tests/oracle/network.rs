//! Straight-line f64 recomposition of the pyramid, decoder and pooling
//! graph from raw weight arrays, written with explicit loops only.

use ovseg::fixtures::{FeatureBundle, ModelWeights};
use ovseg::numerics::{AttnWeights, Linear, NormParams, Tensor};
use ovseg::pyramid::ConvLayer;

const LN_EPS: f64 = 1e-5;

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `C x H x W` planes.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    fn new(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            c: s[0],
            h: s[1],
            w: s[2],
            v: f64s(t),
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[(c * self.h + y) * self.w + x]
    }

    /// Pixel-major rows, `HW x C`.
    fn tokens(&self) -> Vec<Vec<f64>> {
        (0..self.h * self.w)
            .map(|p| (0..self.c).map(|c| self.v[c * self.h * self.w + p]).collect())
            .collect()
    }
}

struct Lin {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Lin {
    fn of(l: &Linear) -> Self {
        let (o, i) = (l.weight.dim(0), l.weight.dim(1));
        let w = f64s(&l.weight);
        Self {
            w: (0..o).map(|r| w[r * i..(r + 1) * i].to_vec()).collect(),
            b: f64s(&l.bias),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| {
                let mut s = *b;
                for i in 0..x.len() {
                    s += row[i] * x[i];
                }
                s
            })
            .collect()
    }
}

fn layer_norm(x: &[f64], n: &NormParams) -> Vec<f64> {
    let g = f64s(&n.gain);
    let b = f64s(&n.bias);
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn kernel(layer: &ConvLayer) -> (usize, usize, usize, Vec<f64>, Vec<f64>) {
    let s = layer.kernel.shape();
    (s[0], s[1], s[2], f64s(&layer.kernel), f64s(&layer.bias))
}

/// Zero-padded cross-correlation with padding `k / 2`.
fn conv(x: &Map, layer: &ConvLayer, stride: usize) -> Map {
    let (o, c, k, kv, b) = kernel(layer);
    let pad = (k / 2) as isize;
    let ho = (x.h + 2 * (k / 2) - k) / stride + 1;
    let wo = (x.w + 2 * (k / 2) - k) / stride + 1;
    let mut out = Map::new(o, ho, wo);
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad;
                            let ix = (ox * stride + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                s += kv[((oc * c + ic) * k + ky) * k + kx] * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                *out.at_mut(oc, oy, ox) = s;
            }
        }
    }
    out
}

/// Transposed convolution, then a top-left crop to `h x w`.
fn deconv(x: &Map, layer: &ConvLayer, stride: usize, h: usize, w: usize) -> Map {
    let (o, c, k, kv, b) = kernel(layer);
    let mut out = Map::new(o, h, w);
    for oc in 0..o {
        for oy in 0..h {
            for ox in 0..w {
                let mut s = b[oc];
                for ic in 0..c {
                    for iy in 0..x.h {
                        for ix in 0..x.w {
                            let (dy, dx) = (
                                oy as isize - (iy * stride) as isize,
                                ox as isize - (ix * stride) as isize,
                            );
                            if dy >= 0 && dx >= 0 && (dy as usize) < k && (dx as usize) < k {
                                s += kv[((oc * c + ic) * k + dy as usize) * k + dx as usize] * x.at(ic, iy, ix);
                            }
                        }
                    }
                }
                *out.at_mut(oc, oy, ox) = s;
            }
        }
    }
    out
}

fn activate(x: Map, n: &NormParams, on: bool) -> Map {
    if !on {
        return x;
    }
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let px: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx)).collect();
            let normed = layer_norm(&px, n);
            for c in 0..x.c {
                *out.at_mut(c, y, xx) = gelu(normed[c]);
            }
        }
    }
    out
}

/// Pyramid levels at strides 32, 16, 8, 4.
pub fn pyramid(bundle: &FeatureBundle, weights: &ModelWeights, activations: bool) -> [Map; 4] {
    let fw = &weights.fpn;
    let x = Map::from_tensor(&bundle.f_sam);
    let (h, w) = (bundle.image_h, bundle.image_w);
    let s32 = activate(conv(&x, &fw.down32, 2), &fw.norm32, activations);
    let s16 = activate(conv(&x, &fw.lateral16, 1), &fw.norm16, activations);
    let s8 = activate(
        deconv(&x, &fw.up8, 2, h.div_ceil(8), w.div_ceil(8)),
        &fw.norm8,
        activations,
    );
    let mid_h = (x.h - 1) * 2 + fw.up4a.kernel.dim(2);
    let mid_w = (x.w - 1) * 2 + fw.up4a.kernel.dim(3);
    let mid = activate(deconv(&x, &fw.up4a, 2, mid_h, mid_w), &fw.norm4a, activations);
    let s4 = activate(
        deconv(&mid, &fw.up4b, 2, h.div_ceil(4), w.div_ceil(4)),
        &fw.norm4b,
        activations,
    );
    [s32, s16, s8, s4]
}

/// Half-pixel bilinear sample of plane `c` at output `(oy, ox)` of an
/// `oh x ow` grid.
fn bilinear_at(m: &Map, c: usize, oy: usize, ox: usize, oh: usize, ow: usize) -> f64 {
    if (m.h, m.w) == (oh, ow) {
        return m.at(c, oy, ox);
    }
    let src = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let (y0, y1, fy) = src(oy, m.h, oh);
    let (x0, x1, fx) = src(ox, m.w, ow);
    let top = m.at(c, y0, x0) * (1.0 - fx) + m.at(c, y0, x1) * fx;
    let bot = m.at(c, y1, x0) * (1.0 - fx) + m.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn attention(
    q: &[Vec<f64>],
    kv_in: &[Vec<f64>],
    v_in: &[Vec<f64>],
    a: &AttnWeights,
    allow: Option<&[Vec<bool>]>,
) -> Vec<Vec<f64>> {
    let (lq, lk, lv, lo) = (Lin::of(&a.q), Lin::of(&a.k), Lin::of(&a.v), Lin::of(&a.out));
    let qs: Vec<Vec<f64>> = q.iter().map(|r| lq.apply(r)).collect();
    let ks: Vec<Vec<f64>> = kv_in.iter().map(|r| lk.apply(r)).collect();
    let vs: Vec<Vec<f64>> = v_in.iter().map(|r| lv.apply(r)).collect();
    let d = qs[0].len();
    let hd = d / a.heads;
    let mut out = Vec::new();
    for (i, qi) in qs.iter().enumerate() {
        let row_allow = allow.map(|m| &m[i]).filter(|r| r.iter().any(|&b| b));
        let mut mixed = vec![0.0; d];
        for h in 0..a.heads {
            let mut scores: Vec<Option<f64>> = Vec::new();
            for (j, kj) in ks.iter().enumerate() {
                if row_allow.is_some_and(|r| !r[j]) {
                    scores.push(None);
                    continue;
                }
                let mut s = 0.0;
                for t in h * hd..(h + 1) * hd {
                    s += qi[t] * kj[t];
                }
                scores.push(Some(s / (hd as f64).sqrt()));
            }
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vs.iter().enumerate() {
                for t in h * hd..(h + 1) * hd {
                    mixed[t] += e[j] / z * vj[t];
                }
            }
        }
        out.push(lo.apply(&mixed));
    }
    out
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn position_encoding(h: usize, w: usize, d: usize) -> Vec<Vec<f64>> {
    let half = d / 2;
    let mut rows = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut r = vec![0.0; d];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half {
                    let a = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    r[offset + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
            rows.push(r);
        }
    }
    rows
}

pub struct DecoderOut {
    /// `N x h4 x w4` logits as one map of N channels.
    pub logits: Map,
    pub p_iou: Vec<f64>,
    pub f_masked: Vec<Vec<f64>>,
    pub pixel: Map,
}

fn mlp(layers: &[Linear], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = Lin::of(l).apply(&h);
        if i + 1 < layers.len() {
            h = h.into_iter().map(relu).collect();
        }
    }
    h
}

fn masks(queries: &[Vec<f64>], pixel: &Map, weights: &ModelWeights) -> Map {
    let dw = &weights.decoder;
    let mut out = Map::new(queries.len(), pixel.h, pixel.w);
    for (k, q) in queries.iter().enumerate() {
        let e = mlp(&dw.mask_embed.layers, &layer_norm(q, &dw.decoder_norm));
        for y in 0..pixel.h {
            for x in 0..pixel.w {
                let mut s = 0.0;
                for c in 0..pixel.c {
                    s += e[c] * pixel.at(c, y, x);
                }
                *out.at_mut(k, y, x) = s;
            }
        }
    }
    out
}

pub fn decoder(levels: &[Map; 4], weights: &ModelWeights, layers: usize, pe: bool, threshold: f64) -> DecoderOut {
    let dw = &weights.decoder;
    let pixel = conv(&levels[3], &dw.mask_features, 1);
    let n = dw.query_feat.dim(0);
    let d = dw.query_feat.dim(1);
    let qf = f64s(&dw.query_feat);
    let mut queries: Vec<Vec<f64>> = (0..n).map(|i| qf[i * d..(i + 1) * d].to_vec()).collect();
    let mut logits = masks(&queries, &pixel, weights);
    for l in 0..layers {
        let lw = &dw.layers[l];
        let level = &levels[l % 3];
        let memory = level.tokens();
        let keys = if pe {
            add(&memory, &position_encoding(level.h, level.w, d))
        } else {
            memory.clone()
        };
        let allow: Vec<Vec<bool>> = (0..n)
            .map(|k| {
                let mut r = Vec::new();
                for y in 0..level.h {
                    for x in 0..level.w {
                        r.push(sigmoid(bilinear_at(&logits, k, y, x, level.h, level.w)) >= threshold);
                    }
                }
                r
            })
            .collect();
        let a = attention(&queries, &keys, &memory, &lw.cross_attn, Some(&allow));
        queries = add(&queries, &a)
            .iter()
            .map(|r| layer_norm(r, &lw.cross_norm))
            .collect();
        let s = attention(&queries, &queries, &queries, &lw.self_attn, None);
        queries = add(&queries, &s).iter().map(|r| layer_norm(r, &lw.self_norm)).collect();
        let (fi, fo) = (Lin::of(&lw.ffn_in), Lin::of(&lw.ffn_out));
        let f: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| fo.apply(&fi.apply(q).into_iter().map(relu).collect::<Vec<_>>()))
            .collect();
        queries = add(&queries, &f).iter().map(|r| layer_norm(r, &lw.ffn_norm)).collect();
        logits = masks(&queries, &pixel, weights);
    }
    let f_masked: Vec<Vec<f64>> = queries.iter().map(|q| layer_norm(q, &dw.decoder_norm)).collect();
    let p_iou = f_masked
        .iter()
        .map(|f| sigmoid(mlp(&dw.iou_head.layers, f)[0]))
        .collect();
    DecoderOut {
        logits,
        p_iou,
        f_masked,
        pixel,
    }
}

/// Soft mask-pooled rows of `features` under each probability map; `None`
/// where the pooled mass falls below `min_area`.
pub fn pool(features: &Map, probs: &Map, min_area: f64) -> Vec<Option<Vec<f64>>> {
    (0..probs.c)
        .map(|k| {
            let mut mass = 0.0;
            let mut acc = vec![0.0; features.c];
            for y in 0..features.h {
                for x in 0..features.w {
                    let m = bilinear_at(probs, k, y, x, features.h, features.w);
                    mass += m;
                    for c in 0..features.c {
                        acc[c] += m * features.at(c, y, x);
                    }
                }
            }
            (mass >= min_area).then(|| acc.into_iter().map(|v| v / mass).collect())
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `(g_ldp, g_clip)` rows, `None` for invalid masks.
pub fn embeddings(
    out: &DecoderOut,
    bundle: &FeatureBundle,
    weights: &ModelWeights,
    min_area: f64,
) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
    let mut probs = out.logits.clone();
    for v in probs.v.iter_mut() {
        *v = sigmoid(*v);
    }
    let sam = pool(&out.pixel, &probs, min_area);
    let clip = pool(&Map::from_tensor(&bundle.f_clip), &probs, min_area);
    let lw = &weights.ldp;
    sam.into_iter()
        .zip(clip)
        .map(|(s, c)| {
            let (s, c) = (s?, c?);
            let c = unit(&c);
            let tokens = vec![Lin::of(&lw.sam_proj).apply(&s), Lin::of(&lw.clip_proj).apply(&c)];
            let refined = add(&tokens, &attention(&tokens, &tokens, &tokens, &lw.attn, None));
            let avg: Vec<f64> = (0..refined[0].len())
                .map(|i| 0.5 * (refined[0][i] + refined[1][i]))
                .collect();
            Some((unit(&layer_norm(&avg, &lw.norm)), c))
        })
        .collect()
}
