//! Synthetic hierarchical slices, preprocessing, few-shot splitting and the
//! on-disk dataset layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SamoraError};
use crate::rng;

/// Row-major 2D raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SamoraError::dim(format!(
                "{} values for a {height}x{width} raster",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Raster<f32>,
    pub mask: Raster<u8>,
    pub case_id: u32,
    pub slice_index: u32,
}

/// Parameters of the synthetic hierarchical dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_cases: usize,
    pub slices_per_case: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Organ semi-axis as a fraction of the image side.
    pub organ_scale: f64,
    pub min_subregions: usize,
    pub max_subregions: usize,
    pub texture_noise: f64,
    /// Expected fraction of image area covered by each foreground class.
    pub class_area_fractions: Vec<f64>,
    pub unlabeled_images: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_cases: 26,
            slices_per_case: 10,
            num_classes: 4,
            image_size: 64,
            organ_scale: 0.38,
            min_subregions: 2,
            max_subregions: 4,
            texture_noise: 0.03,
            class_area_fractions: vec![0.04, 0.03, 0.025, 0.02],
            unlabeled_images: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(SamoraError::config("num_classes must be in 1..=254"));
        }
        if self.class_area_fractions.len() != self.num_classes {
            return Err(SamoraError::config(format!(
                "{} area fractions for {} classes",
                self.class_area_fractions.len(),
                self.num_classes
            )));
        }
        if self.min_subregions == 0 || self.min_subregions > self.max_subregions {
            return Err(SamoraError::config("sub-region count range is empty"));
        }
        if self.image_size < 8 || self.slices_per_case == 0 {
            return Err(SamoraError::config("image_size >= 8 and slices_per_case >= 1 required"));
        }
        Ok(())
    }

    fn subregion_range(&self) -> (usize, usize) {
        (
            self.min_subregions.min(self.num_classes),
            self.max_subregions.min(self.num_classes),
        )
    }

    /// Probability that a given class is drawn in a slice.
    pub fn presence_probability(&self) -> f64 {
        let (lo, hi) = self.subregion_range();
        let mean_k = (lo + hi) as f64 / 2.0;
        mean_k / self.num_classes as f64
    }

    /// Target pixel proportion of each foreground class (index 0 = class 1).
    pub fn target_proportions(&self) -> Vec<f64> {
        self.class_area_fractions.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub labeled: Vec<SegSample>,
    pub unlabeled: Vec<Raster<f32>>,
}

struct CaseGeometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    class_phase: f64,
    bg_phase: [f64; 4],
}

fn class_intensity(c: usize) -> f64 {
    const BASE: [f64; 4] = [0.66, 0.78, 0.56, 0.88];
    BASE[(c - 1) % 4] - 0.02 * ((c - 1) / 4) as f64
}

/// One slice of a case. Classes listed in `force` are always drawn.
fn render_slice(spec: &SyntheticSpec, geom: &CaseGeometry, slice: usize, seed: u64, case: u64, force: &[usize]) -> (Raster<f32>, Raster<u8>) {
    let s = spec.image_size;
    let sf = s as f64;
    let mut r = rng::stream(seed, "synthetic-slice", case * 100_003 + slice as u64);
    let profile = 0.75 + 0.25 * (std::f64::consts::PI * (slice as f64 + 0.5) / spec.slices_per_case as f64).sin();
    let (a, b) = (geom.a * profile, geom.b * profile);

    // which sub-regions appear in this slice
    let (lo, hi) = spec.subregion_range();
    let k = r.random_range(lo..=hi);
    let mut classes: Vec<usize> = (1..=spec.num_classes).collect();
    classes.shuffle(&mut r);
    let mut chosen: Vec<usize> = classes[..k].to_vec();
    for &c in force {
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();

    let presence = spec.presence_probability();
    struct Blob {
        class: usize,
        cx: f64,
        cy: f64,
        r1: f64,
        r2: f64,
        cos: f64,
        sin: f64,
    }
    let mut blobs = Vec::new();
    for &c in &chosen {
        let area = spec.class_area_fractions[c - 1] / presence * sf * sf * r.random_range(0.8..1.2);
        let rad = (area / std::f64::consts::PI).sqrt();
        let asp: f64 = r.random_range(0.8..1.25);
        let theta = geom.rot + 2.0 * std::f64::consts::PI * (c - 1) as f64 / spec.num_classes as f64 + r.random_range(-0.2..0.2);
        let rho = 0.6 * a.min(b);
        let ang: f64 = r.random_range(0.0..std::f64::consts::PI);
        blobs.push(Blob {
            class: c,
            cx: geom.cx + rho * theta.cos(),
            cy: geom.cy + rho * theta.sin(),
            r1: rad * asp.sqrt(),
            r2: rad / asp.sqrt(),
            cos: ang.cos(),
            sin: ang.sin(),
        });
    }

    let mut img = Raster::<f32>::new(s, s);
    let mut mask = Raster::<u8>::new(s, s);
    let noise = rng::normal(&mut r, spec.texture_noise, s * s);
    let (cr, sr) = (geom.rot.cos(), geom.rot.sin());
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // smooth background
            let bg = 0.15
                + 0.04 * (2.0 * std::f64::consts::PI * px / sf + geom.bg_phase[0]).sin()
                + 0.04 * (2.0 * std::f64::consts::PI * py / sf + geom.bg_phase[1]).cos();
            // organ with a soft boundary
            let (dx, dy) = (px - geom.cx, py - geom.cy);
            let (u, v) = (dx * cr + dy * sr, -dx * sr + dy * cr);
            let rr = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let organ_w = 1.0 / (1.0 + ((rr - 1.0) * 12.0).exp());
            let organ = 0.42 + 0.03 * (px * 0.3 + geom.bg_phase[2]).sin() * (py * 0.3 + geom.bg_phase[3]).cos();
            let mut val = bg * (1.0 - organ_w) + organ * organ_w;
            let mut label = 0u8;
            for bl in &blobs {
                let (ex, ey) = (px - bl.cx, py - bl.cy);
                let (bu, bv) = (ex * bl.cos + ey * bl.sin, -ex * bl.sin + ey * bl.cos);
                if (bu / bl.r1).powi(2) + (bv / bl.r2).powi(2) <= 1.0 {
                    let c = bl.class;
                    let freq = 0.5 + 0.35 * c as f64;
                    let ang = c as f64 * std::f64::consts::PI / spec.num_classes as f64 + geom.class_phase;
                    let stripe = (freq * (px * ang.cos() + py * ang.sin())).sin();
                    val = class_intensity(c) + 0.06 * stripe;
                    label = c as u8;
                    break;
                }
            }
            let v = (val + noise[y * s + x]).clamp(0.0, 1.0);
            img.set(y, x, v as f32);
            mask.set(y, x, label);
        }
    }
    (img, mask)
}

fn case_geometry(spec: &SyntheticSpec, seed: u64, stream: &str, case: u64) -> CaseGeometry {
    let mut r = rng::stream(seed, stream, case);
    let sf = spec.image_size as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    CaseGeometry {
        cx: sf / 2.0 + r.random_range(-0.05..0.05) * sf,
        cy: sf / 2.0 + r.random_range(-0.05..0.05) * sf,
        a: spec.organ_scale * sf * r.random_range(0.9..1.1),
        b: spec.organ_scale * sf * r.random_range(0.9..1.1),
        rot: r.random_range(0.0..two_pi),
        class_phase: r.random_range(-0.2..0.2),
        bg_phase: [
            r.random_range(0.0..two_pi),
            r.random_range(0.0..two_pi),
            r.random_range(0.0..two_pi),
            r.random_range(0.0..two_pi),
        ],
    }
}

/// Labeled cases plus an unlabeled corpus, deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut labeled = Vec::with_capacity(spec.num_cases * spec.slices_per_case);
    for case in 0..spec.num_cases {
        let geom = case_geometry(spec, seed, "synthetic-case", case as u64);
        let mut slices: Vec<(Raster<f32>, Raster<u8>)> = (0..spec.slices_per_case)
            .map(|k| render_slice(spec, &geom, k, seed, case as u64, &[]))
            .collect();
        // every class appears somewhere in the case
        for c in 1..=spec.num_classes {
            if !slices.iter().any(|(_, m)| m.data.contains(&(c as u8))) {
                let k = (c * 7919 + case) % spec.slices_per_case;
                let (img, m) = render_slice(spec, &geom, k, seed, case as u64, &[c]);
                slices[k] = (img, m);
            }
        }
        for (k, (image, mask)) in slices.into_iter().enumerate() {
            labeled.push(SegSample {
                image,
                mask,
                case_id: case as u32,
                slice_index: k as u32,
            });
        }
    }
    let unlabeled = (0..spec.unlabeled_images)
        .map(|i| {
            let case = (i / spec.slices_per_case) as u64;
            let geom = case_geometry(spec, seed, "synthetic-unlabeled-case", case);
            let offset = 1_000_000 + case;
            render_slice(spec, &geom, i % spec.slices_per_case, seed, offset, &[]).0
        })
        .collect();
    Ok(SyntheticData { labeled, unlabeled })
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(src: &Raster<f32>, height: usize, width: usize) -> Raster<f32> {
    let mut out = Raster::new(height, width);
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    for y in 0..height {
        for x in 0..width {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
            out.set(y, x, sample_bilinear(src, fy, fx, 0.0));
        }
    }
    out
}

pub fn resize_nearest<T: Copy + Default>(src: &Raster<T>, height: usize, width: usize) -> Raster<T> {
    let mut out = Raster::new(height, width);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * src.height as f64 / height as f64).floor() as usize;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * src.width as f64 / width as f64).floor() as usize;
            out.set(y, x, src.get(sy.min(src.height - 1), sx.min(src.width - 1)));
        }
    }
    out
}

/// Bilinear sample at fractional `(fy, fx)`; outside the raster returns `fill`.
pub fn sample_bilinear(src: &Raster<f32>, fy: f64, fx: f64, fill: f32) -> f32 {
    if fy < -0.5 || fx < -0.5 || fy > src.height as f64 - 0.5 || fx > src.width as f64 - 0.5 {
        return fill;
    }
    let fy = fy.clamp(0.0, (src.height - 1) as f64);
    let fx = fx.clamp(0.0, (src.width - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(src.height - 1), (x0 + 1).min(src.width - 1));
    let (wy, wx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
    let top = src.get(y0, x0) * (1.0 - wx) + src.get(y0, x1) * wx;
    let bot = src.get(y1, x0) * (1.0 - wx) + src.get(y1, x1) * wx;
    top * (1.0 - wy) + bot * wy
}

pub const ZSCORE_STD_FLOOR: f64 = 1e-8;

/// Zero mean, unit variance. Constant rasters map to zeros.
pub fn zscore(src: &Raster<f32>) -> Raster<f32> {
    let n = src.data.len().max(1) as f64;
    let mean = src.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = src.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ZSCORE_STD_FLOOR);
    Raster {
        height: src.height,
        width: src.width,
        data: src.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
    }
}

/// Resize a raw slice (and its mask) to `size x size`, then z-score it.
pub fn preprocess(image: &Raster<f32>, mask: Option<&Raster<u8>>, size: usize, case_id: u32, slice_index: u32) -> Result<SegSample> {
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(SamoraError::Data("non-finite intensities in raw slice".into()));
    }
    let resized = if image.height == size && image.width == size {
        image.clone()
    } else {
        resize_bilinear(image, size, size)
    };
    let mask = match mask {
        Some(m) if m.height == size && m.width == size => m.clone(),
        Some(m) => resize_nearest(m, size, size),
        None => Raster::new(size, size),
    };
    Ok(SegSample {
        image: zscore(&resized),
        mask,
        case_id,
        slice_index,
    })
}

pub fn preprocess_sample(s: &SegSample, size: usize) -> Result<SegSample> {
    preprocess(&s.image, Some(&s.mask), size, s.case_id, s.slice_index)
}

/// Slice-level few-shot sampling, stratified across cases: slices are taken
/// round-robin over a shuffled case order, so every case contributes once
/// the budget reaches the number of cases.
pub fn split_fewshot(dataset: &[SegSample], fraction: f64, seed: u64) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SamoraError::config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let budget = ((dataset.len() as f64) * fraction + 1e-9).floor() as usize;
    if budget == 0 {
        return Err(SamoraError::Data(format!(
            "fraction {fraction} of {} slices selects nothing",
            dataset.len()
        )));
    }
    let mut by_case: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_case.entry(s.case_id).or_default().push(i);
    }
    let mut r = rng::stream(seed, "fewshot-split", 0);
    let mut cases: Vec<Vec<usize>> = by_case.into_values().collect();
    cases.shuffle(&mut r);
    for c in cases.iter_mut() {
        c.shuffle(&mut r);
    }
    let mut chosen = vec![false; dataset.len()];
    let mut taken = 0;
    let mut round = 0;
    while taken < budget {
        let mut progressed = false;
        for c in &cases {
            if taken == budget {
                break;
            }
            if let Some(&i) = c.get(round) {
                chosen[i] = true;
                taken += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    let mut labeled = Vec::with_capacity(budget);
    let mut rest = Vec::with_capacity(dataset.len() - budget);
    for (i, s) in dataset.iter().enumerate() {
        if chosen[i] {
            labeled.push(s.clone());
        } else {
            rest.push(s.clone());
        }
    }
    Ok((labeled, rest))
}

/// Split a labeled set into train / test by case id: the first
/// `train_cases` distinct cases train, the rest test.
pub fn split_by_case(samples: &[SegSample], train_cases: usize) -> (Vec<SegSample>, Vec<SegSample>) {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.case_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let train_ids: Vec<u32> = ids.iter().take(train_cases).copied().collect();
    samples.iter().cloned().partition(|s| train_ids.contains(&s.case_id))
}

// --- on-disk format -------------------------------------------------------

const IMG_MAGIC: &[u8; 4] = b"SIMG";
const MSK_MAGIC: &[u8; 4] = b"SMSK";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SamoraError::io(path, e))?;
    f.write_all(bytes).map_err(|e| SamoraError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| SamoraError::io(path, e))?;
    Ok(buf)
}

fn header(magic: &[u8; 4], h: usize, w: usize) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(SamoraError::Data(format!("{}: bad raster header", path.display())));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((h, w))
}

/// `.img`: `SIMG`, u32 height, u32 width (little-endian), then f32 LE values.
pub fn write_img(path: &Path, r: &Raster<f32>) -> Result<()> {
    let mut out = header(IMG_MAGIC, r.height, r.width);
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_img(path: &Path) -> Result<Raster<f32>> {
    let bytes = read_file(path)?;
    let (h, w) = parse_header(&bytes, IMG_MAGIC, path)?;
    let body = &bytes[12..];
    if body.len() != h * w * 4 {
        return Err(SamoraError::Data(format!("{}: truncated raster", path.display())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Raster::from_vec(h, w, data)
}

/// `.msk`: `SMSK`, u32 height, u32 width, then one u8 label per pixel.
pub fn write_msk(path: &Path, r: &Raster<u8>) -> Result<()> {
    let mut out = header(MSK_MAGIC, r.height, r.width);
    out.extend_from_slice(&r.data);
    write_file(path, &out)
}

pub fn read_msk(path: &Path) -> Result<Raster<u8>> {
    let bytes = read_file(path)?;
    let (h, w) = parse_header(&bytes, MSK_MAGIC, path)?;
    let body = &bytes[12..];
    if body.len() != h * w {
        return Err(SamoraError::Data(format!("{}: truncated mask", path.display())));
    }
    Raster::from_vec(h, w, body.to_vec())
}

pub fn slice_stem(case_id: u32, slice_index: u32) -> String {
    format!("case{case_id:03}_slice{slice_index:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    case_id: u32,
    slice_index: u32,
    split: String,
    image: String,
    mask: String,
}

/// Labeled splits on disk.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub splits: BTreeMap<String, Vec<SegSample>>,
    pub unlabeled: Vec<Raster<f32>>,
}

/// Write `caseNNN_sliceKKK.{img,msk}`, `manifest.csv` and the unlabeled corpus
/// (`unlabeled/*.img` listed in `unlabeled/manifest.txt`).
pub fn save_dataset(dir: &Path, data: &DatasetSplits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SamoraError::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for (split, samples) in &data.splits {
        for s in samples {
            let stem = slice_stem(s.case_id, s.slice_index);
            let (img, msk) = (format!("{stem}.img"), format!("{stem}.msk"));
            write_img(&dir.join(&img), &s.image)?;
            write_msk(&dir.join(&msk), &s.mask)?;
            w.serialize(ManifestRow {
                case_id: s.case_id,
                slice_index: s.slice_index,
                split: split.clone(),
                image: img,
                mask: msk,
            })?;
        }
    }
    w.flush().map_err(|e| SamoraError::io(&manifest, e))?;
    if !data.unlabeled.is_empty() {
        let udir = dir.join("unlabeled");
        fs::create_dir_all(&udir).map_err(|e| SamoraError::io(&udir, e))?;
        let mut lines = String::new();
        for (i, r) in data.unlabeled.iter().enumerate() {
            let name = format!("u{i:05}.img");
            write_img(&udir.join(&name), r)?;
            lines.push_str(&name);
            lines.push('\n');
        }
        write_file(&udir.join("manifest.txt"), lines.as_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let manifest = dir.join("manifest.csv");
    let mut rd = csv::Reader::from_path(&manifest)?;
    let mut out = DatasetSplits::default();
    for row in rd.deserialize::<ManifestRow>() {
        let row = row?;
        let image = read_img(&dir.join(&row.image))?;
        let mask = read_msk(&dir.join(&row.mask))?;
        out.splits.entry(row.split).or_default().push(SegSample {
            image,
            mask,
            case_id: row.case_id,
            slice_index: row.slice_index,
        });
    }
    let udir = dir.join("unlabeled");
    if udir.join("manifest.txt").exists() {
        out.unlabeled = load_corpus(&udir.join("manifest.txt"))?;
    }
    Ok(out)
}

/// Unlabeled corpus: a manifest listing raster paths relative to it, either
/// `.img` rasters or portable graymaps (`.pgm`, scaled to [0, 1]).
pub fn load_corpus(manifest: &Path) -> Result<Vec<Raster<f32>>> {
    let text = fs::read_to_string(manifest).map_err(|e| SamoraError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    if text.lines().all(|l| l.trim().is_empty()) {
        return Err(SamoraError::Data(format!("{}: empty corpus", manifest.display())));
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| read_raster_any(&base.join(l)))
        .collect()
}

pub fn read_raster_any(path: &Path) -> Result<Raster<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("img") => read_img(path),
        _ => read_gray(path),
    }
}

/// Portable grayscale raster (PGM or PNG) scaled to [0, 1].
pub fn read_gray(path: &Path) -> Result<Raster<f32>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f32 / u16::MAX as f32).collect();
    Raster::from_vec(h as usize, w as usize, data)
}

/// Generic loader for real data: `caseNNN_sliceKKK.pgm` images with
/// `caseNNN_sliceKKK_mask.pgm` label maps (grey value = class index).
pub fn load_pgm_directory(dir: &Path) -> Result<Vec<SegSample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SamoraError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "pgm")
                && !p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with("_mask"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (case_id, slice_index) = parse_stem(&stem)
            .ok_or_else(|| SamoraError::Data(format!("{}: expected caseNNN_sliceKKK name", p.display())))?;
        let image = read_gray(&p)?;
        let mpath = p.with_file_name(format!("{stem}_mask.pgm"));
        let mask = if mpath.exists() {
            let m = image::open(&mpath)?.to_luma8();
            Raster::from_vec(m.height() as usize, m.width() as usize, m.into_raw())?
        } else {
            Raster::new(image.height, image.width)
        };
        out.push(SegSample {
            image,
            mask,
            case_id,
            slice_index,
        });
    }
    Ok(out)
}

pub fn parse_stem(stem: &str) -> Option<(u32, u32)> {
    let rest = stem.strip_prefix("case")?;
    let (case, slice) = rest.split_once("_slice")?;
    Some((case.parse().ok()?, slice.parse().ok()?))
}

/// `[B, 1, H, W]` tensor from equally sized rasters.
pub fn stack_images(images: &[&Raster<f32>], dtype: candle_core::DType, device: &candle_core::Device) -> Result<candle_core::Tensor> {
    let first = images.first().ok_or_else(|| SamoraError::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for r in images {
        if r.height != h || r.width != w {
            return Err(SamoraError::dim(format!("batch mixes {h}x{w} and {}x{}", r.height, r.width)));
        }
        data.extend_from_slice(&r.data);
    }
    Ok(candle_core::Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// `[B, H, W]` u32 label tensor.
pub fn stack_masks(masks: &[&Raster<u8>], device: &candle_core::Device) -> Result<candle_core::Tensor> {
    let first = masks.first().ok_or_else(|| SamoraError::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.height != h || m.width != w {
            return Err(SamoraError::dim(format!("batch mixes {h}x{w} and {}x{}", m.height, m.width)));
        }
        data.extend(m.data.iter().map(|&v| v as u32));
    }
    Ok(candle_core::Tensor::from_vec(data, (masks.len(), h, w), device)?)
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, tag, epoch as u64));
    idx
}

/// Consecutive batches of at most `batch` indices; a trailing remainder
/// smaller than `min_last` is dropped.
pub fn batches(order: &[usize], batch: usize, min_last: usize) -> Vec<Vec<usize>> {
    order
        .chunks(batch.max(1))
        .filter(|c| c.len() >= min_last.max(1) || c.len() == order.len())
        .map(|c| c.to_vec())
        .collect()
}
