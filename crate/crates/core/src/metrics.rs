//! Overlap and surface-distance evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let inter = pred
        .as_array()
        .iter()
        .zip(gt.as_array().iter())
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count();
    (inter, pred.count_ones(), gt.count_ones())
}

/// `2|P & G| / (|P| + |G|)`, or 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, p, g) = overlap(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `|P & G| / |P | G|`, or 1 when both masks are empty.
pub fn iou_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, p, g) = overlap(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels that touch background (4-neighborhood) or the image border.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryPointSet {
    /// Row-major order.
    pub points: Vec<(usize, usize)>,
}

impl BoundaryPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_boundary(mask: &BinaryMask) -> BoundaryPointSet {
    let (h, w) = mask.dims();
    let points = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.is_boundary(r, c))
        .collect();
    BoundaryPointSet { points }
}

/// Stand-in for an infinite squared distance; larger than any squared distance on a
/// grid that fits in memory.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |i: usize| f[i] + (i * i) as f64;
    for q in 1..n {
        let mut s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_field(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distance from each point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &BoundaryPointSet, to: &BoundaryPointSet, dims: (usize, usize)) -> Vec<f64> {
    let (h, w) = dims;
    let field = squared_distance_field(h, w, &to.points);
    from.points.iter().map(|&(r, c)| field[r * w + c].sqrt()).collect()
}

/// A surface distance, flagged when either mask is empty (the value is then the
/// image diagonal).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub value: f64,
    pub undefined: bool,
}

fn diagonal(dims: (usize, usize)) -> f64 {
    ((dims.0 * dims.0 + dims.1 * dims.1) as f64).sqrt()
}

fn both_directions(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_dims(pred, gt)?;
    let (p, g) = (extract_boundary(pred), extract_boundary(gt));
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    Ok(Some((
        directed_distances(&p, &g, pred.dims()),
        directed_distances(&g, &p, pred.dims()),
    )))
}

/// Average symmetric surface distance in pixels.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<SurfaceDistance> {
    Ok(match both_directions(pred, gt)? {
        None => SurfaceDistance {
            value: diagonal(pred.dims()),
            undefined: true,
        },
        Some((a, b)) => SurfaceDistance {
            value: (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64,
            undefined: false,
        },
    })
}

/// Value at index `ceil(0.95 n) - 1` of the ascending distances.
pub fn percentile_95(distances: &[f64]) -> f64 {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((0.95 * sorted.len() as f64).ceil() as usize).saturating_sub(1);
    sorted[idx]
}

/// Symmetric 95th-percentile Hausdorff distance in pixels.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<SurfaceDistance> {
    Ok(match both_directions(pred, gt)? {
        None => SurfaceDistance {
            value: diagonal(pred.dims()),
            undefined: true,
        },
        Some((a, b)) => SurfaceDistance {
            value: percentile_95(&a).max(percentile_95(&b)),
            undefined: false,
        },
    })
}

/// Metrics of one prediction. Dice and IoU are in percent, distances in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub assd: f64,
    pub hd95: f64,
    /// Either mask was empty, so the distances are the diagonal sentinel.
    pub undefined: bool,
}

pub fn evaluate(id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleMetrics> {
    let a = assd(pred, gt)?;
    let h = hd95(pred, gt)?;
    Ok(SampleMetrics {
        id: id.into(),
        dice: 100.0 * dice_score(pred, gt)?,
        iou: 100.0 * iou_score(pred, gt)?,
        assd: a.value,
        hd95: h.value,
        undefined: a.undefined || h.undefined,
    })
}

/// Aggregate statistics; `None` when no sample contributes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
    /// Samples excluded from the distance aggregates.
    pub undefined_count: usize,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let pick = |f: fn(&SampleMetrics) -> f64, defined_only: bool| -> Vec<f64> {
            samples
                .iter()
                .filter(|s| !(defined_only && s.undefined))
                .map(f)
                .collect()
        };
        let (dice_m, dice_s) = mean_std(&pick(|s| s.dice, false));
        let (iou_m, iou_s) = mean_std(&pick(|s| s.iou, false));
        let (assd_m, assd_s) = mean_std(&pick(|s| s.assd, true));
        let (hd_m, hd_s) = mean_std(&pick(|s| s.hd95, true));
        let undefined_count = samples.iter().filter(|s| s.undefined).count();
        Self {
            samples,
            mean: MetricSummary {
                dice: dice_m,
                iou: iou_m,
                assd: assd_m,
                hd95: hd_m,
            },
            std: MetricSummary {
                dice: dice_s,
                iou: iou_s,
                assd: assd_s,
                hd95: hd_s,
            },
            undefined_count,
        }
    }
}
