//! Trajectory-following and reconstruction metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::resample_by_arc_length;

/// Default color tolerance (L∞ in normalized RGB).
pub const COLOR_TOLERANCE: f64 = 0.15;
/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

/// Per-frame intensity-weighted centroid of the pixels within `tolerance` of `color`.
///
/// Frames without a matching pixel are `None`; a color absent from every frame is an error.
pub fn centroid_track(frames: &Tensor, color: [f64; 3], tolerance: f64) -> Result<Vec<Option<[f64; 2]>>> {
    if frames.rank() != 4 || frames.shape()[1] != 3 {
        return Err(Error::shape("centroid_track", "frames", "[L, 3, H, W]", format!("{:?}", frames.shape())));
    }
    let s = frames.shape();
    let (l, h, w) = (s[0], s[2], s[3]);
    let d = frames.data();
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        let base = t * 3 * h * w;
        let (mut sw, mut sx, mut sy, mut count) = (0.0, 0.0, 0.0, 0usize);
        let (mut ux, mut uy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let px = [d[base + i], d[base + h * w + i], d[base + 2 * h * w + i]];
                if px.iter().zip(&color).all(|(a, b)| (a - b).abs() <= tolerance) {
                    let weight = (px[0] + px[1] + px[2]) / 3.0;
                    sw += weight;
                    sx += weight * x as f64;
                    sy += weight * y as f64;
                    ux += x as f64;
                    uy += y as f64;
                    count += 1;
                }
            }
        }
        out.push(match count {
            0 => None,
            // A black target has no intensity to weight by.
            _ if sw <= 0.0 => Some([ux / count as f64, uy / count as f64]),
            _ => Some([sx / sw, sy / sw]),
        });
    }
    if out.iter().all(Option::is_none) {
        return Err(invalid!("target color {color:?} not found in any frame"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Per-frame Euclidean distance; the target is first resampled by arc length
/// when its length differs from the tracked sequence.
pub fn trajectory_error(tracked: &[[f64; 2]], target: &[[f64; 2]]) -> Result<TrajectoryScore> {
    if tracked.is_empty() || target.is_empty() {
        return Err(invalid!("trajectory_error needs non-empty sequences"));
    }
    let target = if target.len() == tracked.len() {
        target.to_vec()
    } else {
        resample_by_arc_length(target, tracked.len())?
    };
    if target.len() != tracked.len() {
        return Err(Error::shape("trajectory_error", "length", tracked.len(), target.len()));
    }
    let per_frame: Vec<f64> = tracked.iter().zip(&target).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let max = per_frame.iter().copied().fold(0.0, f64::max);
    Ok(TrajectoryScore { per_frame, mean, max })
}

/// [`trajectory_error`] over the frames where tracking succeeded.
pub fn tracked_error(tracked: &[Option<[f64; 2]>], target: &[[f64; 2]]) -> Result<(TrajectoryScore, usize)> {
    let target = if target.len() == tracked.len() {
        target.to_vec()
    } else {
        resample_by_arc_length(target, tracked.len())?
    };
    let (a, b): (Vec<[f64; 2]>, Vec<[f64; 2]>) = tracked.iter().zip(&target).filter_map(|(p, q)| p.map(|p| (p, *q))).unzip();
    Ok((trajectory_error(&a, &b)?, tracked.len() - a.len()))
}

/// Last minus first present point.
pub fn net_displacement(points: &[Option<[f64; 2]>]) -> Option<[f64; 2]> {
    let first = points.iter().flatten().next()?;
    let last = points.iter().flatten().last()?;
    Some([last[0] - first[0], last[1] - first[1]])
}

/// `10·log10(1/MSE)` for signals in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", "shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub name: String,
    pub mean_px: f64,
    pub max_px: f64,
    pub psnr: Option<f64>,
    pub missing_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub samples: usize,
    pub mean_px: f64,
    pub max_px: f64,
    pub mean_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleReport>,
    pub aggregate: AggregateReport,
}

impl EvalReport {
    pub fn new(per_sample: Vec<SampleReport>) -> Self {
        let n = per_sample.len();
        let mean_px = if n == 0 { 0.0 } else { per_sample.iter().map(|s| s.mean_px).sum::<f64>() / n as f64 };
        let max_px = per_sample.iter().map(|s| s.max_px).fold(0.0, f64::max);
        let ps: Vec<f64> = per_sample.iter().filter_map(|s| s.psnr).collect();
        let mean_psnr = (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64);
        Self {
            aggregate: AggregateReport {
                samples: n,
                mean_px,
                max_px,
                mean_psnr,
            },
            per_sample,
        }
    }
}

/// Copy of `frame` with the target path drawn in white and tracked points in cyan.
pub fn overlay(frame: &Tensor, tracked: &[Option<[f64; 2]>], target: &[[f64; 2]]) -> Result<Tensor> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(Error::shape("overlay", "frame", "[3, H, W]", format!("{:?}", frame.shape())));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut out = frame.clone();
    let mut put = |p: [f64; 2], rgb: [f64; 3]| {
        let (x, y) = (p[0].round(), p[1].round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            for (c, v) in rgb.iter().enumerate() {
                out.data_mut()[(c * h + y as usize) * w + x as usize] = *v;
            }
        }
    };
    for pair in target.windows(2) {
        for k in 0..=8 {
            let f = k as f64 / 8.0;
            put([pair[0][0] + (pair[1][0] - pair[0][0]) * f, pair[0][1] + (pair[1][1] - pair[0][1]) * f], [1.0, 1.0, 1.0]);
        }
    }
    for p in tracked.iter().flatten() {
        put(*p, [0.0, 1.0, 1.0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_formula_and_cap() {
        let a = Tensor::full(&[10], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Tensor::full(&[10], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn offset_gives_constant_error() {
        let a: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.0]).collect();
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let s = trajectory_error(&a, &b).unwrap();
        assert!(s.per_frame.iter().all(|&d| (d - 5.0).abs() < 1e-12));
        assert_eq!(trajectory_error(&a, &a).unwrap().max, 0.0);
    }

    #[test]
    fn uniform_frame_centroid_is_center() {
        let f = Tensor::full(&[1, 3, 6, 9], 0.8);
        let c = centroid_track(&f, [0.8; 3], COLOR_TOLERANCE).unwrap()[0].unwrap();
        assert!((c[0] - 4.0).abs() < 1e-12 && (c[1] - 2.5).abs() < 1e-12, "{c:?}");
        assert!(centroid_track(&f, [0.0; 3], COLOR_TOLERANCE).is_err());
    }
}
