use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderLayerWeights, DecoderWeights, Mlp, DEFAULT_LAYERS, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::ldp::LdpWeights;
use crate::numerics::{l2_normalize, AttnWeights, Linear, NormParams, Tensor};
use crate::pyramid::{ConvLayer, FpnWeights};

use super::store::{read_tensor_dir, take, write_tensor_dir};

pub const DEFAULT_TAU: f32 = 0.07;

/// Architecture hyperparameters shared by weight init and loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_sam: usize,
    pub d_clip: usize,
    pub d_emb: usize,
    pub d_pix: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub ldp_heads: usize,
    pub fpn_kernel: usize,
    pub deconv_kernel: usize,
    pub tau: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_sam: 256,
            d_clip: 64,
            d_emb: 64,
            d_pix: 256,
            num_queries: DEFAULT_QUERIES,
            heads: 8,
            layers: DEFAULT_LAYERS,
            ffn_dim: 2048,
            ldp_heads: 4,
            fpn_kernel: 3,
            deconv_kernel: 2,
            tau: DEFAULT_TAU,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("d_sam", self.d_sam),
            ("d_clip", self.d_clip),
            ("d_emb", self.d_emb),
            ("d_pix", self.d_pix),
            ("num_queries", self.num_queries),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("ldp_heads", self.ldp_heads),
            ("fpn_kernel", self.fpn_kernel),
        ] {
            if v == 0 {
                return bad(format!("arch.{name} must be positive"));
            }
        }
        if self.d_clip != self.d_emb {
            return bad(format!(
                "arch.d_clip ({}) must equal arch.d_emb ({}): CLIP embeddings are scored against text rows",
                self.d_clip, self.d_emb
            ));
        }
        if !self.d_pix.is_multiple_of(self.heads) {
            return bad(format!(
                "arch.d_pix {} not divisible by arch.heads {}",
                self.d_pix, self.heads
            ));
        }
        if !self.d_emb.is_multiple_of(self.ldp_heads) {
            return bad(format!(
                "arch.d_emb {} not divisible by arch.ldp_heads {}",
                self.d_emb, self.ldp_heads
            ));
        }
        if self.deconv_kernel < 2 {
            return bad("arch.deconv_kernel must be >= 2".into());
        }
        if self.fpn_kernel.is_multiple_of(2) {
            return bad("arch.fpn_kernel must be odd".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("arch.tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub arch: ArchConfig,
    pub fpn: FpnWeights,
    pub decoder: DecoderWeights,
    pub ldp: LdpWeights,
    pub tau: f32,
    /// Text-space embedding of the no-object class, `D_emb`.
    pub void_embedding: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn bound(fan_in: usize) -> f64 {
        1.0 / (fan_in as f64).sqrt()
    }

    fn linear(&mut self, i: usize, o: usize) -> Linear {
        let b = Self::bound(i);
        Linear {
            weight: Tensor::uniform(&[o, i], b, &mut self.rng),
            bias: Tensor::uniform(&[o], b, &mut self.rng),
        }
    }

    fn conv(&mut self, o: usize, i: usize, k: usize) -> ConvLayer {
        let b = Self::bound(i * k * k);
        ConvLayer {
            kernel: Tensor::uniform(&[o, i, k, k], b, &mut self.rng),
            bias: Tensor::uniform(&[o], b, &mut self.rng),
        }
    }

    fn attn(&mut self, d: usize, heads: usize) -> AttnWeights {
        AttnWeights {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            out: self.linear(d, d),
            heads,
        }
    }
}

/// Seeded uniform init with bound `1/sqrt(fan_in)`; norms start at identity.
pub fn init_weights(seed: u64, arch: &ArchConfig) -> Result<ModelWeights> {
    arch.validate()?;
    let mut g = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = arch.d_pix;
    let norm = || NormParams::identity(d);
    let fpn = FpnWeights {
        down32: g.conv(d, arch.d_sam, arch.fpn_kernel),
        norm32: norm(),
        lateral16: g.conv(d, arch.d_sam, 1),
        norm16: norm(),
        up8: g.conv(d, arch.d_sam, arch.deconv_kernel),
        norm8: norm(),
        up4a: g.conv(d, arch.d_sam, arch.deconv_kernel),
        norm4a: norm(),
        up4b: g.conv(d, d, arch.deconv_kernel),
        norm4b: norm(),
    };
    let query_feat = Tensor::uniform(&[arch.num_queries, d], Init::bound(d), &mut g.rng);
    let mask_features = g.conv(d, d, 1);
    let layers = (0..arch.layers)
        .map(|_| DecoderLayerWeights {
            cross_attn: g.attn(d, arch.heads),
            cross_norm: norm(),
            self_attn: g.attn(d, arch.heads),
            self_norm: norm(),
            ffn_in: g.linear(d, arch.ffn_dim),
            ffn_out: g.linear(arch.ffn_dim, d),
            ffn_norm: norm(),
        })
        .collect();
    let decoder = DecoderWeights {
        query_feat,
        mask_features,
        layers,
        decoder_norm: norm(),
        mask_embed: Mlp {
            layers: vec![g.linear(d, d), g.linear(d, d), g.linear(d, d)],
        },
        iou_head: Mlp {
            layers: vec![g.linear(d, d), g.linear(d, 1)],
        },
    };
    let e = arch.d_emb;
    let ldp = LdpWeights {
        sam_proj: g.linear(d, e),
        clip_proj: g.linear(arch.d_clip, e),
        attn: g.attn(e, arch.ldp_heads),
        norm: NormParams::identity(e),
    };
    let mut void_embedding = Tensor::uniform(&[e], Init::bound(e), &mut g.rng);
    l2_normalize(void_embedding.data_mut());
    Ok(ModelWeights {
        arch: arch.clone(),
        fpn,
        decoder,
        ldp,
        tau: arch.tau,
        void_embedding,
    })
}

type Named<'a> = Vec<(String, &'a Tensor)>;

fn put_linear<'a>(out: &mut Named<'a>, p: &str, l: &'a Linear) {
    out.push((format!("{p}.weight"), &l.weight));
    out.push((format!("{p}.bias"), &l.bias));
}

fn put_norm<'a>(out: &mut Named<'a>, p: &str, n: &'a NormParams) {
    out.push((format!("{p}.gain"), &n.gain));
    out.push((format!("{p}.bias"), &n.bias));
}

fn put_conv<'a>(out: &mut Named<'a>, p: &str, c: &'a ConvLayer) {
    out.push((format!("{p}.kernel"), &c.kernel));
    out.push((format!("{p}.bias"), &c.bias));
}

fn put_attn<'a>(out: &mut Named<'a>, p: &str, a: &'a AttnWeights) {
    put_linear(out, &format!("{p}.q"), &a.q);
    put_linear(out, &format!("{p}.k"), &a.k);
    put_linear(out, &format!("{p}.v"), &a.v);
    put_linear(out, &format!("{p}.out"), &a.out);
}

fn put_mlp<'a>(out: &mut Named<'a>, p: &str, m: &'a Mlp) {
    for (i, l) in m.layers.iter().enumerate() {
        put_linear(out, &format!("{p}.{i}"), l);
    }
}

struct Reader<'a> {
    tensors: BTreeMap<String, Tensor>,
    dir: &'a Path,
}

impl Reader<'_> {
    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        take(&mut self.tensors, name, self.dir)
    }

    fn linear(&mut self, p: &str) -> Result<Linear> {
        Linear::new(self.tensor(&format!("{p}.weight"))?, self.tensor(&format!("{p}.bias"))?)
    }

    fn norm(&mut self, p: &str) -> Result<NormParams> {
        Ok(NormParams {
            gain: self.tensor(&format!("{p}.gain"))?,
            bias: self.tensor(&format!("{p}.bias"))?,
        })
    }

    fn conv(&mut self, p: &str) -> Result<ConvLayer> {
        Ok(ConvLayer {
            kernel: self.tensor(&format!("{p}.kernel"))?,
            bias: self.tensor(&format!("{p}.bias"))?,
        })
    }

    fn attn(&mut self, p: &str, heads: usize) -> Result<AttnWeights> {
        Ok(AttnWeights {
            q: self.linear(&format!("{p}.q"))?,
            k: self.linear(&format!("{p}.k"))?,
            v: self.linear(&format!("{p}.v"))?,
            out: self.linear(&format!("{p}.out"))?,
            heads,
        })
    }

    fn mlp(&mut self, p: &str, n: usize) -> Result<Mlp> {
        Ok(Mlp {
            layers: (0..n)
                .map(|i| self.linear(&format!("{p}.{i}")))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsMeta {
    kind: String,
    arch: ArchConfig,
    tau: f32,
}

const WEIGHTS_KIND: &str = "model-weights";

impl ModelWeights {
    fn named(&self) -> Named<'_> {
        let mut out = Vec::new();
        let f = &self.fpn;
        put_conv(&mut out, "fpn.down32", &f.down32);
        put_norm(&mut out, "fpn.norm32", &f.norm32);
        put_conv(&mut out, "fpn.lateral16", &f.lateral16);
        put_norm(&mut out, "fpn.norm16", &f.norm16);
        put_conv(&mut out, "fpn.up8", &f.up8);
        put_norm(&mut out, "fpn.norm8", &f.norm8);
        put_conv(&mut out, "fpn.up4a", &f.up4a);
        put_norm(&mut out, "fpn.norm4a", &f.norm4a);
        put_conv(&mut out, "fpn.up4b", &f.up4b);
        put_norm(&mut out, "fpn.norm4b", &f.norm4b);
        let d = &self.decoder;
        out.push(("decoder.query_feat".into(), &d.query_feat));
        put_conv(&mut out, "decoder.mask_features", &d.mask_features);
        for (i, l) in d.layers.iter().enumerate() {
            let p = format!("decoder.layer{i}");
            put_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            put_norm(&mut out, &format!("{p}.cross_norm"), &l.cross_norm);
            put_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            put_norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
            put_linear(&mut out, &format!("{p}.ffn_in"), &l.ffn_in);
            put_linear(&mut out, &format!("{p}.ffn_out"), &l.ffn_out);
            put_norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
        }
        put_norm(&mut out, "decoder.decoder_norm", &d.decoder_norm);
        put_mlp(&mut out, "decoder.mask_embed", &d.mask_embed);
        put_mlp(&mut out, "decoder.iou_head", &d.iou_head);
        put_linear(&mut out, "ldp.sam_proj", &self.ldp.sam_proj);
        put_linear(&mut out, "ldp.clip_proj", &self.ldp.clip_proj);
        put_attn(&mut out, "ldp.attn", &self.ldp.attn);
        put_norm(&mut out, "ldp.norm", &self.ldp.norm);
        out.push(("void_embedding".into(), &self.void_embedding));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = WeightsMeta {
            kind: WEIGHTS_KIND.into(),
            arch: self.arch.clone(),
            tau: self.tau,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::json(dir, e))?;
        write_tensor_dir(dir, meta, &self.named())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors) = read_tensor_dir(dir)?;
        let meta: WeightsMeta = serde_json::from_value(meta).map_err(|e| Error::json(dir, e))?;
        if meta.kind != WEIGHTS_KIND {
            return Err(Error::InvalidData(format!(
                "{} holds a {:?}, not model weights",
                dir.display(),
                meta.kind
            )));
        }
        let arch = meta.arch;
        arch.validate()?;
        if !(meta.tau > 0.0) {
            return Err(Error::InvalidData(format!(
                "temperature must be positive, got {}",
                meta.tau
            )));
        }
        let mut r = Reader { tensors, dir };
        let fpn = FpnWeights {
            down32: r.conv("fpn.down32")?,
            norm32: r.norm("fpn.norm32")?,
            lateral16: r.conv("fpn.lateral16")?,
            norm16: r.norm("fpn.norm16")?,
            up8: r.conv("fpn.up8")?,
            norm8: r.norm("fpn.norm8")?,
            up4a: r.conv("fpn.up4a")?,
            norm4a: r.norm("fpn.norm4a")?,
            up4b: r.conv("fpn.up4b")?,
            norm4b: r.norm("fpn.norm4b")?,
        };
        let query_feat = r.tensor("decoder.query_feat")?;
        if query_feat.shape() != [arch.num_queries, arch.d_pix] {
            return Err(Error::Shape(format!(
                "query features {:?} disagree with {} queries of width {}",
                query_feat.shape(),
                arch.num_queries,
                arch.d_pix
            )));
        }
        let mask_features = r.conv("decoder.mask_features")?;
        let layers = (0..arch.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                Ok(DecoderLayerWeights {
                    cross_attn: r.attn(&format!("{p}.cross_attn"), arch.heads)?,
                    cross_norm: r.norm(&format!("{p}.cross_norm"))?,
                    self_attn: r.attn(&format!("{p}.self_attn"), arch.heads)?,
                    self_norm: r.norm(&format!("{p}.self_norm"))?,
                    ffn_in: r.linear(&format!("{p}.ffn_in"))?,
                    ffn_out: r.linear(&format!("{p}.ffn_out"))?,
                    ffn_norm: r.norm(&format!("{p}.ffn_norm"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderWeights {
            query_feat,
            mask_features,
            layers,
            decoder_norm: r.norm("decoder.decoder_norm")?,
            mask_embed: r.mlp("decoder.mask_embed", 3)?,
            iou_head: r.mlp("decoder.iou_head", 2)?,
        };
        let ldp = LdpWeights {
            sam_proj: r.linear("ldp.sam_proj")?,
            clip_proj: r.linear("ldp.clip_proj")?,
            attn: r.attn("ldp.attn", arch.ldp_heads)?,
            norm: r.norm("ldp.norm")?,
        };
        let void_embedding = r.tensor("void_embedding")?;
        if let Some(extra) = r.tensors.keys().next() {
            return Err(Error::InvalidData(format!("unexpected tensor {extra} in weights")));
        }
        Ok(Self {
            arch,
            fpn,
            decoder,
            ldp,
            tau: meta.tau,
            void_embedding,
        })
    }

    /// Every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// The same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut w = self.clone();
        w.for_each_mut(|t| t.data_mut().fill(0.0));
        w
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        let f = &mut f;
        let lin = |l: &mut Linear, f: &mut dyn FnMut(&mut Tensor)| {
            f(&mut l.weight);
            f(&mut l.bias);
        };
        let norm = |n: &mut NormParams, f: &mut dyn FnMut(&mut Tensor)| {
            f(&mut n.gain);
            f(&mut n.bias);
        };
        let conv = |c: &mut ConvLayer, f: &mut dyn FnMut(&mut Tensor)| {
            f(&mut c.kernel);
            f(&mut c.bias);
        };
        let attn = |a: &mut AttnWeights, f: &mut dyn FnMut(&mut Tensor)| {
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.out] {
                lin(l, f);
            }
        };
        let p = &mut self.fpn;
        for c in [&mut p.down32, &mut p.lateral16, &mut p.up8, &mut p.up4a, &mut p.up4b] {
            conv(c, f);
        }
        for n in [&mut p.norm32, &mut p.norm16, &mut p.norm8, &mut p.norm4a, &mut p.norm4b] {
            norm(n, f);
        }
        let d = &mut self.decoder;
        f(&mut d.query_feat);
        conv(&mut d.mask_features, f);
        for l in &mut d.layers {
            attn(&mut l.cross_attn, f);
            attn(&mut l.self_attn, f);
            lin(&mut l.ffn_in, f);
            lin(&mut l.ffn_out, f);
            for n in [&mut l.cross_norm, &mut l.self_norm, &mut l.ffn_norm] {
                norm(n, f);
            }
        }
        norm(&mut d.decoder_norm, f);
        for l in d.mask_embed.layers.iter_mut().chain(d.iou_head.layers.iter_mut()) {
            lin(l, f);
        }
        lin(&mut self.ldp.sam_proj, f);
        lin(&mut self.ldp.clip_proj, f);
        attn(&mut self.ldp.attn, f);
        norm(&mut self.ldp.norm, f);
        f(&mut self.void_embedding);
    }
}
