//! Training-time augmentation of (image, mask) pairs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_bilinear, Raster, SegSample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
            contrast: 0.2,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Identity transform.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
            contrast: 0.0,
            brightness: 0.0,
        }
    }
}

/// Sampled parameters of one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub angle: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    pub contrast: f64,
    pub brightness: f64,
    /// Per-pixel displacement (dy, dx) from the elastic field.
    pub displacement: Option<(Vec<f64>, Vec<f64>)>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = (x as i64 + j as i64 - rad).clamp(0, w as i64 - 1) as usize;
                acc += kv * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = (y as i64 + j as i64 - rad).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, seed: u64, index: u64) -> Self {
        let mut r = rng::stream(seed, "augment", index);
        let angle = if cfg.rotation_deg > 0.0 {
            r.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
        } else {
            0.0
        };
        let flip_h = r.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let flip_v = r.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { r.random_range(lo..=hi) } else { lo };
        let contrast = if cfg.contrast > 0.0 { r.random_range(-cfg.contrast..=cfg.contrast) } else { 0.0 };
        let brightness = if cfg.brightness > 0.0 { r.random_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
        let displacement = (cfg.elastic_alpha > 0.0).then(|| {
            let field = |r: &mut rng::StreamRng| {
                let raw: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
                blur(&raw, h, w, cfg.elastic_sigma).into_iter().map(|v| v * cfg.elastic_alpha).collect::<Vec<_>>()
            };
            let dy = field(&mut r);
            let dx = field(&mut r);
            (dy, dx)
        });
        Self {
            angle,
            flip_h,
            flip_v,
            scale,
            contrast,
            brightness,
            displacement,
        }
    }

    /// Source coordinate for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut yy = y as f64;
        let mut xx = x as f64;
        if let Some((dy, dx)) = &self.displacement {
            yy += dy[y * w + x];
            xx += dx[y * w + x];
        }
        if self.flip_v {
            yy = h as f64 - 1.0 - yy;
        }
        if self.flip_h {
            xx = w as f64 - 1.0 - xx;
        }
        let (oy, ox) = ((yy - cy) / self.scale, (xx - cx) / self.scale);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (cy + c * oy - s * ox, cx + s * oy + c * ox)
    }

    pub fn apply(&self, image: &Raster<f32>, mask: &Raster<u8>) -> (Raster<f32>, Raster<u8>) {
        let (h, w) = (image.height, image.width);
        let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / image.data.len().max(1) as f64;
        let fill = image.data.iter().copied().fold(f32::INFINITY, f32::min);
        let mut out = Raster::new(h, w);
        let mut out_mask = Raster::new(h, w);
        let mut std = 0.0;
        if self.contrast != 0.0 || self.brightness != 0.0 {
            std = (image.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / image.data.len().max(1) as f64).sqrt();
        }
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                let v = sample_bilinear(image, sy, sx, fill) as f64;
                let v = mean + (v - mean) * (1.0 + self.contrast) + self.brightness * std;
                out.set(y, x, v as f32);
                let (ny, nx) = (sy.round(), sx.round());
                let label = if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                    mask.get(ny as usize, nx as usize)
                } else {
                    0
                };
                out_mask.set(y, x, label);
            }
        }
        (out, out_mask)
    }
}

/// Augment one sample; the draw depends only on `(seed, index)`.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, seed: u64, index: u64) -> SegSample {
    let draw = AugmentDraw::sample(cfg, sample.image.height, sample.image.width, seed, index);
    let (image, mask) = draw.apply(&sample.image, &sample.mask);
    SegSample {
        image,
        mask,
        case_id: sample.case_id,
        slice_index: sample.slice_index,
    }
}

/// Parallel batch augmentation; output is independent of the thread count.
pub fn augment_batch(samples: &[SegSample], cfg: &AugmentConfig, seed: u64, first_index: u64) -> Vec<SegSample> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| augment(s, cfg, seed, first_index + i as u64))
        .collect()
}

/// Image-only augmentation used for contrastive views.
pub fn augment_image(image: &Raster<f32>, cfg: &AugmentConfig, seed: u64, index: u64) -> Raster<f32> {
    let draw = AugmentDraw::sample(cfg, image.height, image.width, seed, index);
    let empty = Raster::new(image.height, image.width);
    draw.apply(image, &empty).0
}
