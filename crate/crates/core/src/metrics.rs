//! nRMSE, PSNR, volumetric SSIM and per-plane error profiles. All sums are
//! accumulated in f64.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flowgen::VoxelField;
use crate::geometry::Axis;

fn check_pair(pred: &VoxelField, truth: &VoxelField) -> Result<()> {
    if pred.extents() != truth.extents() || pred.channels() != truth.channels() {
        let shape = |f: &VoxelField| {
            let e = f.extents();
            vec![e[0], e[1], e[2], f.channels()]
        };
        return Err(Error::shape("metric", &shape(pred), &shape(truth)));
    }
    Ok(())
}

fn sq_err(pred: &[f32], truth: &[f32]) -> (f64, f64) {
    pred.iter().zip(truth).fold((0.0, 0.0), |(e, r), (&p, &t)| {
        let d = p as f64 - t as f64;
        (e + d * d, r + t as f64 * t as f64)
    })
}

fn nrmse_raw(pred: &[f32], truth: &[f32]) -> Result<f64> {
    let (err, norm) = sq_err(pred, truth);
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("nRMSE of a zero-norm reference".into()));
    }
    Ok(libm::sqrt(err / norm))
}

fn psnr_raw(pred: &[f32], truth: &[f32]) -> f64 {
    let (err, _) = sq_err(pred, truth);
    let mse = err / truth.len().max(1) as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let max = truth.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    10.0 * libm::log10(max * max / mse)
}

/// `‖pred − true‖₂ / ‖true‖₂` over all voxels and channels.
pub fn nrmse(pred: &VoxelField, truth: &VoxelField) -> Result<f64> {
    check_pair(pred, truth)?;
    nrmse_raw(pred.data(), truth.data())
}

/// `10 log₁₀(MAX² / MSE)` with `MAX = max |true|`; identical inputs give
/// `+∞`.
pub fn psnr(pred: &VoxelField, truth: &VoxelField) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(psnr_raw(pred.data(), truth.data()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    /// Gaussian window weights with this standard deviation instead of
    /// uniform ones.
    pub gaussian_sigma: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            c1: 0.01,
            c2: 0.03,
            gaussian_sigma: None,
        }
    }
}

fn window_weights(len: usize, sigma: Option<f64>) -> Vec<f64> {
    let raw: Vec<f64> = match sigma {
        None => vec![1.0; len],
        Some(s) => {
            let c = (len as f64 - 1.0) / 2.0;
            (0..len).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * s * s))).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Valid-mode separable weighted sum over a `dims` array.
fn filter(data: &[f64], dims: [usize; 3], weights: &[Vec<f64>; 3]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let w = &weights[axis];
        let k = w.len();
        let mut nd = d;
        nd[axis] = d[axis] + 1 - k;
        let stride = [d[1] * d[2], d[2], 1][axis];
        let mut out = vec![0.0; nd.iter().product()];
        for i in 0..nd[0] {
            for j in 0..nd[1] {
                for l in 0..nd[2] {
                    let o = (i * nd[1] + j) * nd[2] + l;
                    // input offset of the window's first element
                    let start = (i * d[1] + j) * d[2] + l;
                    out[o] = (0..k).map(|m| w[m] * cur[start + m * stride]).sum();
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean SSIM of two single-channel arrays over all valid windows.
fn ssim_single(x: &[f64], y: &[f64], dims: [usize; 3], window: [usize; 3], opts: &SsimOptions) -> f64 {
    let weights = [0, 1, 2].map(|a| window_weights(window[a], opts.gaussian_sigma));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _) = filter(x, dims, &weights);
    let (my, _) = filter(y, dims, &weights);
    let (mxx, _) = filter(&xx, dims, &weights);
    let (myy, _) = filter(&yy, dims, &weights);
    let (mxy, _) = filter(&xy, dims, &weights);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = (mxx[i] - ux * ux).max(0.0);
        let vy = (myy[i] - uy * uy).max(0.0);
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + opts.c1) * (2.0 * cxy + opts.c2))
            / ((ux * ux + uy * uy + opts.c1) * (vx + vy + opts.c2));
    }
    total / n as f64
}

fn channel(data: &[f32], channels: usize, c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(channels).map(|&v| v as f64).collect()
}

/// SSIM over sliding `window³` blocks, per channel, averaged.
pub fn ssim3d(pred: &VoxelField, truth: &VoxelField, opts: &SsimOptions) -> Result<f64> {
    check_pair(pred, truth)?;
    let dims = truth.extents();
    if opts.window == 0 || dims.iter().any(|&e| e < opts.window) {
        return Err(Error::config(alloc::format!(
            "grid {dims:?} is smaller than the {} SSIM window",
            opts.window
        )));
    }
    let ch = truth.channels();
    let total: f64 = (0..ch)
        .map(|c| {
            let x = channel(pred.data(), ch, c);
            let y = channel(truth.data(), ch, c);
            ssim_single(&x, &y, dims, [opts.window; 3], opts)
        })
        .sum();
    Ok(total / ch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneMetrics {
    pub index: usize,
    /// `index − extent / 2`.
    pub relative_position: i64,
    /// `0` for identical planes, NaN when the reference plane is zero and
    /// the prediction is not.
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn plane_values(field: &VoxelField, axis: Axis, index: usize) -> Vec<f32> {
    let e = field.extents();
    let ch = field.channels();
    let (f1, f2) = axis.face();
    let mut out = Vec::with_capacity(e[f1] * e[f2] * ch);
    let mut pos = [0; 3];
    pos[axis.index()] = index;
    for i in 0..e[f1] {
        pos[f1] = i;
        for j in 0..e[f2] {
            pos[f2] = j;
            let o = field.offset(pos[0], pos[1], pos[2]);
            out.extend_from_slice(&field.data()[o..o + ch]);
        }
    }
    out
}

/// Metrics of every slice pair perpendicular to `axis`. SSIM uses a 2D
/// window of `min(window, face extent)` per side.
pub fn per_plane_profile(
    pred: &VoxelField,
    truth: &VoxelField,
    axis: Axis,
    opts: &SsimOptions,
) -> Result<Vec<PlaneMetrics>> {
    check_pair(pred, truth)?;
    let e = truth.extents();
    let ch = truth.channels();
    let (f1, f2) = axis.face();
    let dims = [e[f1], e[f2], 1];
    let window = [opts.window.min(e[f1]).max(1), opts.window.min(e[f2]).max(1), 1];
    let n = e[axis.index()];
    (0..n)
        .map(|index| {
            let p = plane_values(pred, axis, index);
            let t = plane_values(truth, axis, index);
            let (err, norm) = sq_err(&p, &t);
            let nrmse = if err == 0.0 {
                0.0
            } else if norm == 0.0 {
                f64::NAN
            } else {
                libm::sqrt(err / norm)
            };
            let ssim = (0..ch)
                .map(|c| ssim_single(&channel(&p, ch, c), &channel(&t, ch, c), dims, window, opts))
                .sum::<f64>()
                / ch as f64;
            Ok(PlaneMetrics {
                index,
                relative_position: index as i64 - (n / 2) as i64,
                nrmse,
                psnr: psnr_raw(&p, &t),
                ssim,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Profiles along x, y and z.
    pub per_plane: [Vec<PlaneMetrics>; 3],
}

/// Full report. The SSIM window is clamped to the smallest extent so small
/// grids can still be scored.
pub fn evaluate(pred: &VoxelField, truth: &VoxelField, opts: &SsimOptions) -> Result<MetricReport> {
    let min_extent = truth.extents().into_iter().min().unwrap_or(0);
    let vol_opts = SsimOptions {
        window: opts.window.min(min_extent),
        ..*opts
    };
    Ok(MetricReport {
        nrmse: nrmse(pred, truth)?,
        psnr: psnr(pred, truth)?,
        ssim: ssim3d(pred, truth, &vol_opts)?,
        per_plane: [
            per_plane_profile(pred, truth, Axis::X, opts)?,
            per_plane_profile(pred, truth, Axis::Y, opts)?,
            per_plane_profile(pred, truth, Axis::Z, opts)?,
        ],
    })
}
