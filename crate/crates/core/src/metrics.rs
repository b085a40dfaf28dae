//! Overlap and boundary metrics for binary segmentation, with fold
//! aggregation.
//!
//! Empty-mask policy: when both masks are empty, dice = iou = nsd = 1 and
//! hd95 = 0. When exactly one is empty, dice = iou = nsd = 0 and hd95 is
//! undefined (`None`); such samples are excluded from HD95 means and counted
//! separately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, PixelSpacing};

pub const DEFAULT_NSD_TOLERANCE: f64 = 2.0;

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height(), a.width()],
            actual: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// `(|A ∩ B|, |A|, |B|)`
fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (x, y) in a.data().iter().zip(b.data()) {
        na += *x as usize;
        nb += *y as usize;
        inter += (*x && *y) as usize;
    }
    (inter, na, nb)
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let (inter, na, nb) = overlap_counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let (inter, na, nb) = overlap_counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a 4-neighbour in the background or on the frame edge.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, with anisotropic
/// spacing (separable lower-envelope transform).
pub(crate) fn squared_distance_field(sites: &[(usize, usize)], h: usize, w: usize, sp: PixelSpacing) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    // Columns first (row spacing), then rows (column spacing).
    let wr = sp.row * sp.row;
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = grid[r * w + c];
        }
        envelope_1d(&buf_in[..h], &mut buf_out[..h], wr);
        for r in 0..h {
            grid[r * w + c] = buf_out[r];
        }
    }
    let wc = sp.col * sp.col;
    for r in 0..h {
        buf_in[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        envelope_1d(&buf_in[..w], &mut buf_out[..w], wc);
        grid[r * w..(r + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    grid
}

/// `out[p] = min_q weight * (p - q)^2 + f[q]` over finite `f[q]`.
fn envelope_1d(f: &[f64], out: &mut [f64], weight: f64) {
    let n = f.len();
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let value = |q: usize| f[q] + weight * (q * q) as f64;
    for q in (0..n).filter(|q| f[*q].is_finite()) {
        loop {
            match hull.last() {
                None => {
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let s = (value(q) - value(v)) / (2.0 * weight * (q - v) as f64);
                    if s <= *bounds.last().unwrap() {
                        hull.pop();
                        bounds.pop();
                    } else {
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
        hull.push(q);
    }
    if hull.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() && bounds[k + 1] < p as f64 {
            k += 1;
        }
        let q = hull[k];
        let d = p as f64 - q as f64;
        *o = weight * d * d + f[q];
    }
}

/// Pooled symmetric boundary-to-boundary distances (A→B then B→A).
/// Both masks must be nonempty.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask, spacing: PixelSpacing) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (h, w) = a.shape();
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::Validation("surface distance of an empty mask".into()));
    }
    let field_a = squared_distance_field(&ba, h, w, spacing);
    let field_b = squared_distance_field(&bb, h, w, spacing);
    let mut out = Vec::with_capacity(ba.len() + bb.len());
    out.extend(ba.iter().map(|(r, c)| field_b[r * w + c].sqrt()));
    out.extend(bb.iter().map(|(r, c)| field_a[r * w + c].sqrt()));
    Ok(out)
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 95th-percentile symmetric Hausdorff distance. `None` when exactly one mask
/// is empty; `Some(0.0)` when both are.
pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: PixelSpacing) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(Some(0.0)),
        (true, false) | (false, true) => Ok(None),
        (false, false) => Ok(Some(percentile(&surface_distances(a, b, spacing)?, 95.0))),
    }
}

/// Fraction of pooled boundary points within `tolerance` of the other surface.
pub fn nsd(a: &BinaryMask, b: &BinaryMask, spacing: PixelSpacing, tolerance: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("NSD tolerance {tolerance} must be positive")));
    }
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        (false, false) => {
            let d = surface_distances(a, b, spacing)?;
            Ok(d.iter().filter(|x| **x <= tolerance).count() as f64 / d.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeCase {
    BothEmpty,
    OneEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub spacing: PixelSpacing,
    pub nsd_tolerance: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            spacing: PixelSpacing::default(),
            nsd_tolerance: DEFAULT_NSD_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub nsd: f64,
    pub edge_case: Option<EdgeCase>,
}

pub fn evaluate_pair(
    id: impl Into<String>,
    prediction: &BinaryMask,
    reference: &BinaryMask,
    config: &MetricsConfig,
) -> Result<SampleMetrics> {
    let edge_case = match (prediction.is_empty(), reference.is_empty()) {
        (true, true) => Some(EdgeCase::BothEmpty),
        (false, false) => None,
        _ => Some(EdgeCase::OneEmpty),
    };
    Ok(SampleMetrics {
        id: id.into(),
        dice: dice(prediction, reference)?,
        iou: iou(prediction, reference)?,
        hd95: hd95(prediction, reference, config.spacing)?,
        nsd: nsd(prediction, reference, config.spacing, config.nsd_tolerance)?,
        edge_case,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and sample standard deviation of the per-fold means.
pub fn aggregate_folds(per_fold: &[Vec<f64>]) -> Result<MeanStd> {
    if per_fold.is_empty() || per_fold.iter().any(|f| f.is_empty()) {
        return Err(Error::Validation("aggregation needs nonempty folds".into()));
    }
    let means: Vec<f64> = per_fold.iter().map(|f| mean(f)).collect();
    let m = mean(&means);
    let std = if means.len() < 2 {
        0.0
    } else {
        (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    };
    Ok(MeanStd { mean: m, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub samples: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: MeanStd,
    pub iou: MeanStd,
    /// `None` when no fold has a defined HD95 value.
    pub hd95: Option<MeanStd>,
    pub nsd: MeanStd,
    pub both_empty: usize,
    pub one_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricsConfig,
    pub folds: Vec<FoldMetrics>,
    pub summary: MetricSummary,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>, config: MetricsConfig) -> Result<Self> {
        let collect = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> Vec<Vec<f64>> {
            folds
                .iter()
                .map(|fold| fold.samples.iter().filter_map(f).collect::<Vec<f64>>())
                .collect()
        };
        let hd_folds: Vec<Vec<f64>> = collect(&|s| s.hd95)
            .into_iter()
            .filter(|v| !v.is_empty())
            .collect();
        let count = |e: EdgeCase| {
            folds
                .iter()
                .flat_map(|f| &f.samples)
                .filter(|s| s.edge_case == Some(e))
                .count()
        };
        let summary = MetricSummary {
            dice: aggregate_folds(&collect(&|s| Some(s.dice)))?,
            iou: aggregate_folds(&collect(&|s| Some(s.iou)))?,
            hd95: if hd_folds.is_empty() {
                None
            } else {
                Some(aggregate_folds(&hd_folds)?)
            },
            nsd: aggregate_folds(&collect(&|s| Some(s.nsd)))?,
            both_empty: count(EdgeCase::BothEmpty),
            one_empty: count(EdgeCase::OneEmpty),
        };
        Ok(Self {
            config,
            folds,
            summary,
        })
    }

    pub fn single(samples: Vec<SampleMetrics>, config: MetricsConfig) -> Result<Self> {
        Self::from_folds(vec![FoldMetrics { fold: 0, samples }], config)
    }
}
