//! K-means cluster maps of backbone features and their agreement with a
//! reference partition.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::matching::hungarian;
use crate::numerics::{kmeans, Tensor};

pub const DEFAULT_MAX_ITERS: usize = 100;

/// One label per feature cell, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub labels: Vec<usize>,
}

impl ClusterMap {
    /// Nearest-cell labels on an `image_h x image_w` grid for a feature map
    /// of the given pixel stride.
    pub fn upsample(&self, image_h: usize, image_w: usize, stride: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(image_h * image_w);
        for y in 0..image_h {
            let cy = (y / stride).min(self.height - 1);
            for x in 0..image_w {
                let cx = (x / stride).min(self.width - 1);
                out.push(self.labels[cy * self.width + cx]);
            }
        }
        out
    }
}

/// Clusters the cells of a `D x h x w` feature map into `k` groups.
pub fn cluster_features(features: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<ClusterMap> {
    let (d, h, w) = features.as_chw("features")?;
    let points = features.clone().reshape(&[d, h * w])?.transpose()?;
    let km = kmeans(&points, k, seed, max_iters)?;
    Ok(ClusterMap {
        height: h,
        width: w,
        k,
        labels: km.assignments,
    })
}

/// Fraction of positions whose labels agree under the best one-to-one
/// relabeling of `a` onto `b`.
pub fn partition_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("label maps of {} and {} entries", a.len(), b.len()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let cost = Tensor::<f64>::from_vec(&[ka, kb], table.iter().map(|&v| -(v as f64)).collect())?;
    let best = hungarian(&cost)?;
    let hits: u64 = best.pairs.iter().map(|&(i, j)| table[i * kb + j]).sum();
    Ok(hits as f64 / a.len() as f64)
}

/// Distinct colors for up to twelve labels; cycles beyond that.
const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn label_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

/// Writes labels as an 8-bit RGB PNG, one palette color per label.
pub fn write_label_png(labels: &[usize], height: usize, width: usize, path: &Path) -> Result<()> {
    if labels.len() != height * width {
        return Err(shape_err!("{} labels for a {height}x{width} image", labels.len()));
    }
    let rgb: Vec<u8> = labels.iter().flat_map(|&l| label_color(l)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}
