//! Dice, Hausdorff distance, volume-level evaluation and paired t-tests.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Raster, SegSample};
use crate::error::{Result, SamoraError};

/// Boolean voxel array `[depth, height, width]` with per-axis spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(SamoraError::dim(format!("{} voxels for shape {shape:?}", data.len())));
        }
        Ok(Self {
            shape,
            data,
            spacing: [1.0; 3],
        })
    }

    pub fn from_2d(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        Self::new([1, height, width], data)
    }

    /// Stack label slices and select one class.
    pub fn from_labels(slices: &[&Raster<u8>], class: u8) -> Result<Self> {
        let first = slices.first().ok_or_else(|| SamoraError::Data("no slices".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.height != h || s.width != w {
                return Err(SamoraError::dim("slices of one volume differ in size"));
            }
            data.extend(s.data.iter().map(|&v| v == class));
        }
        Self::new([slices.len(), h, w], data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Foreground voxels with a background or out-of-bounds face neighbour,
    /// in physical coordinates. Singleton axes are ignored.
    pub fn boundary_points(&self) -> Vec<[f64; 3]> {
        let [d, h, w] = self.shape;
        let mut pts = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.at(z, y, x) {
                        continue;
                    }
                    let mut edge = false;
                    for (axis, n) in [(0usize, d), (1, h), (2, w)] {
                        if n == 1 {
                            continue;
                        }
                        let c = [z, y, x][axis];
                        for delta in [-1i64, 1] {
                            let v = c as i64 + delta;
                            if v < 0 || v >= n as i64 {
                                edge = true;
                            } else {
                                let mut p = [z, y, x];
                                p[axis] = v as usize;
                                edge |= !self.at(p[0], p[1], p[2]);
                            }
                        }
                    }
                    if edge {
                        pts.push([
                            z as f64 * self.spacing[0],
                            y as f64 * self.spacing[1],
                            x as f64 * self.spacing[2],
                        ]);
                    }
                }
            }
        }
        pts
    }

    /// Length of the diagonal of the voxel grid.
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| (self.shape[i] as f64 * self.spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(SamoraError::dim(format!("mask shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; both empty gives 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mean foreground Dice over classes, pixels pooled across all slices.
/// Used for quick model selection on labeled slices.
pub fn pooled_mean_dice(preds: &[Raster<u8>], gts: &[Raster<u8>], num_classes: usize) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(SamoraError::dim("prediction and label counts differ"));
    }
    let mut inter = vec![0usize; num_classes + 1];
    let mut total = vec![0usize; num_classes + 1];
    for (p, g) in preds.iter().zip(gts) {
        if p.data.len() != g.data.len() {
            return Err(SamoraError::dim("prediction and label sizes differ"));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            let (a, b) = (a as usize, b as usize);
            if a <= num_classes {
                total[a] += 1;
            }
            if b <= num_classes {
                total[b] += 1;
            }
            if a == b && a <= num_classes {
                inter[a] += 1;
            }
        }
    }
    let mut s = 0.0;
    for c in 1..=num_classes {
        s += if total[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / total[c] as f64 };
    }
    Ok(s / num_classes.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HdMode {
    /// Symmetric max-min distance.
    #[default]
    Max,
    /// 95th percentile of the pooled directed distances.
    P95,
}

impl FromStr for HdMode {
    type Err = SamoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(HdMode::Max),
            "p95" | "hd95" => Ok(HdMode::P95),
            _ => Err(SamoraError::config(format!("unknown hd mode `{s}`"))),
        }
    }
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            to.iter()
                .map(|q| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric Hausdorff distance between boundary sets. Both empty gives 0,
/// exactly one empty gives the grid diagonal.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask, mode: HdMode) -> Result<f64> {
    check_pair(pred, gt)?;
    let (pa, pb) = (pred.boundary_points(), gt.boundary_points());
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(pred.diagonal()),
        _ => {}
    }
    let mut d = directed(&pa, &pb);
    d.extend(directed(&pb, &pa));
    Ok(match mode {
        HdMode::Max => d.into_iter().fold(0.0, f64::max),
        HdMode::P95 => {
            d.sort_by(|a, b| a.total_cmp(b));
            let k = ((0.95 * d.len() as f64).ceil() as usize).clamp(1, d.len());
            d[k - 1]
        }
    })
}

/// `(1/N) Σ d_H(A_i, B_i)`.
pub fn avg_hausdorff(volumes: &[(BinaryMask, BinaryMask)], mode: HdMode) -> Result<f64> {
    if volumes.is_empty() {
        return Err(SamoraError::Data("no volumes".into()));
    }
    let mut s = 0.0;
    for (a, b) in volumes {
        s += hausdorff(a, b, mode)?;
    }
    Ok(s / volumes.len() as f64)
}

/// One case's predictions and ground truth ordered by slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGroup {
    pub case_id: u32,
    pub slice_indices: Vec<u32>,
    pub preds: Vec<Raster<u8>>,
    pub gts: Vec<Raster<u8>>,
}

impl VolumeGroup {
    pub fn new(case_id: u32, slice_indices: Vec<u32>, preds: Vec<Raster<u8>>, gts: Vec<Raster<u8>>) -> Result<Self> {
        if preds.len() != gts.len() || preds.len() != slice_indices.len() || preds.is_empty() {
            return Err(SamoraError::Protocol(format!("case {case_id}: slice counts differ or are zero")));
        }
        if slice_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SamoraError::Protocol(format!("case {case_id}: slices not strictly increasing")));
        }
        Ok(Self { case_id, slice_indices, preds, gts })
    }
}

/// Group test slices with their predictions by case. Duplicate or missing
/// slice indices (gaps in a case's contiguous range) are refused.
pub fn group_volumes(samples: &[SegSample], preds: &[Raster<u8>]) -> Result<Vec<VolumeGroup>> {
    if samples.len() != preds.len() {
        return Err(SamoraError::Protocol(format!("{} slices but {} predictions", samples.len(), preds.len())));
    }
    let mut by_case: BTreeMap<u32, Vec<(u32, &Raster<u8>, &Raster<u8>)>> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        by_case.entry(s.case_id).or_default().push((s.slice_index, p, &s.mask));
    }
    by_case
        .into_iter()
        .map(|(case, mut v)| {
            v.sort_by_key(|e| e.0);
            let idx: Vec<u32> = v.iter().map(|e| e.0).collect();
            if idx.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(SamoraError::Protocol(format!("case {case}: missing or duplicate slices in {idx:?}")));
            }
            VolumeGroup::new(
                case,
                idx,
                v.iter().map(|e| e.1.clone()).collect(),
                v.iter().map(|e| e.2.clone()).collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub case_id: u32,
    /// Dice (%) per foreground class.
    pub dice: Vec<f64>,
    pub hd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_dice: Vec<f64>,
    pub per_class_hd: Vec<f64>,
    pub mean_dice: f64,
    pub mean_hd: f64,
    pub volumes: Vec<VolumeMetrics>,
    pub hd_mode: HdMode,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-class Dice on stacked volumes, averaged over cases and then classes;
/// Hausdorff per volume averaged the same way.
pub fn evaluate_groups(groups: &[VolumeGroup], num_classes: usize, mode: HdMode) -> Result<MetricsReport> {
    if groups.is_empty() {
        return Err(SamoraError::Protocol("no test volumes".into()));
    }
    let volumes = groups
        .par_iter()
        .map(|g| {
            let preds: Vec<&Raster<u8>> = g.preds.iter().collect();
            let gts: Vec<&Raster<u8>> = g.gts.iter().collect();
            let mut dices = Vec::with_capacity(num_classes);
            let mut hds = Vec::with_capacity(num_classes);
            for c in 1..=num_classes {
                let a = BinaryMask::from_labels(&preds, c as u8)?;
                let b = BinaryMask::from_labels(&gts, c as u8)?;
                dices.push(100.0 * dice(&a, &b)?);
                hds.push(hausdorff(&a, &b, mode)?);
            }
            Ok(VolumeMetrics {
                case_id: g.case_id,
                dice: dices,
                hd: hds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = volumes.len() as f64;
    let per_class_dice: Vec<f64> = (0..num_classes)
        .map(|c| volumes.iter().map(|v| v.dice[c]).sum::<f64>() / n)
        .collect();
    let per_class_hd: Vec<f64> = (0..num_classes)
        .map(|c| volumes.iter().map(|v| v.hd[c]).sum::<f64>() / n)
        .collect();
    let k = num_classes.max(1) as f64;
    Ok(MetricsReport {
        mean_dice: per_class_dice.iter().sum::<f64>() / k,
        mean_hd: per_class_hd.iter().sum::<f64>() / k,
        per_class_dice,
        per_class_hd,
        volumes,
        hd_mode: mode,
        seed: 0,
        config_hash: String::new(),
    })
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    scope: &'a str,
    case_id: String,
    class: String,
    dice: f64,
    hd: f64,
}

impl MetricsReport {
    /// CSV with header `scope,case_id,class,dice,hd`: one `volume` row per
    /// case and class, one `class` row per class, one `summary` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for v in &self.volumes {
            for (c, (d, h)) in v.dice.iter().zip(&v.hd).enumerate() {
                w.serialize(ReportRow { scope: "volume", case_id: v.case_id.to_string(), class: (c + 1).to_string(), dice: *d, hd: *h })?;
            }
        }
        for (c, (d, h)) in self.per_class_dice.iter().zip(&self.per_class_hd).enumerate() {
            w.serialize(ReportRow { scope: "class", case_id: String::new(), class: (c + 1).to_string(), dice: *d, hd: *h })?;
        }
        w.serialize(ReportRow { scope: "summary", case_id: String::new(), class: "mean".into(), dice: self.mean_dice, hd: self.mean_hd })?;
        w.flush().map_err(|e| SamoraError::io(path, e))
    }

    /// Per-volume mean Dice, the paired unit for significance tests.
    pub fn volume_mean_dice(&self) -> Vec<f64> {
        self.volumes
            .iter()
            .map(|v| v.dice.iter().sum::<f64>() / v.dice.len().max(1) as f64)
            .collect()
    }

    pub fn summary(&self) -> String {
        let classes: Vec<String> = self
            .per_class_dice
            .iter()
            .enumerate()
            .map(|(c, d)| format!("class {}: {d:.2}", c + 1))
            .collect();
        format!(
            "mean Dice {:.2}%  mean HD {:.2} ({:?})  [{}]  volumes={}",
            self.mean_dice,
            self.mean_hd,
            self.hd_mode,
            classes.join(", "),
            self.volumes.len()
        )
    }
}

/// Read the `volume` rows of a report CSV back as per-case mean Dice.
pub fn read_volume_scores(path: &Path) -> Result<BTreeMap<u32, f64>> {
    #[derive(Deserialize)]
    struct Row {
        scope: String,
        case_id: String,
        #[allow(dead_code)]
        class: String,
        dice: f64,
        #[allow(dead_code)]
        hd: f64,
    }
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize::<Row>() {
        let row = row?;
        if row.scope != "volume" {
            continue;
        }
        let id: u32 = row
            .case_id
            .parse()
            .map_err(|_| SamoraError::Data(format!("bad case id `{}`", row.case_id)))?;
        let e = acc.entry(id).or_default();
        e.0 += row.dice;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestResult {
    pub n: usize,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Differences have zero variance.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b` with a 95% confidence interval of
/// the mean difference. Zero-variance differences give `p = 0` for a
/// nonzero mean and `p = 1` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(SamoraError::dim(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(SamoraError::Data("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    // rounding in `a - b` leaves ulp-level spread on constant shifts
    let floor = (4.0 * f64::EPSILON * mean.abs().max(1.0)).powi(2);
    if var <= floor || se == 0.0 {
        let nonzero = mean != 0.0;
        return Ok(TTestResult {
            n,
            mean_diff: mean,
            t: if nonzero { mean.signum() * f64::INFINITY } else { 0.0 },
            p: if nonzero { 0.0 } else { 1.0 },
            ci_low: mean,
            ci_high: mean,
            degenerate: true,
        });
    }
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| SamoraError::Data(e.to_string()))?;
    let t = mean / se;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    let q = dist.inverse_cdf(0.975);
    Ok(TTestResult {
        n,
        mean_diff: mean,
        t,
        p,
        ci_low: mean - q * se,
        ci_high: mean + q * se,
        degenerate: false,
    })
}
