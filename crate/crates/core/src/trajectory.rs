//! Sparse trajectories sampled from dense flow, and their Gaussian-enhanced maps.
//!
//! The training pipeline is: draw a global grid offset, keep the flow on the
//! offset anchor grid, draw how many trajectories to follow, pick anchors with
//! probability proportional to flow magnitude, track them through the video,
//! and spread the tracked displacements with a Gaussian kernel. User-drawn
//! strokes go through the same rasterize-and-enhance path at inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{flow_magnitude, FlowField, FlowFrame};
use crate::tensor::Tensor;

/// Anchor grid spacing and the trajectory-count ceiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub interval: usize,
    pub max_trajectories: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            interval: 16,
            max_trajectories: 8,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval < 2 {
            return Err(invalid!("anchor interval must be >= 2, got {}", self.interval));
        }
        if self.max_trajectories < 1 {
            return Err(invalid!("max trajectories must be >= 1"));
        }
        Ok(())
    }
}

/// Gaussian enhancement parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            kernel_size: 99,
            sigma: 10.0,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(invalid!("gaussian kernel size must be odd, got {}", self.kernel_size));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid!("gaussian sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Anchor-masked first-frame flow together with the anchor grid itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchoredFlow {
    pub flow: FlowFrame,
    /// `(x, y)` pixel positions satisfying the grid predicate, row-major order.
    pub anchors: Vec<(usize, usize)>,
}

/// Paths of the tracked points plus the sparse flow recorded along them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    /// One path per trajectory, each with one `[x, y]` per video frame.
    pub paths: Vec<Vec<[f64; 2]>>,
    pub sparse: FlowField,
}

/// Dense enhanced trajectory map, one flow-shaped frame per frame transition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMap {
    pub field: FlowField,
}

impl TrajectoryMap {
    pub fn zeros(width: usize, height: usize, video_len: usize) -> Self {
        Self {
            field: FlowField::zeros(width, height, video_len),
        }
    }

    /// `[L-1, 2, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        self.field.to_tensor()
    }
}

fn on_grid(i: usize, delta: i64, interval: usize) -> bool {
    (i as i64 + delta).rem_euclid(interval as i64) == 0
}

/// Keeps `f0` only at pixels where `(row + δy) mod λ == 0` and `(col + δx) mod λ == 0`.
pub fn anchor_flow(f0: &FlowFrame, interval: usize, delta: (i64, i64)) -> Result<AnchoredFlow> {
    if interval == 0 {
        return Err(invalid!("anchor interval must be positive"));
    }
    let (dx, dy) = delta;
    let mut flow = FlowFrame::zeros(f0.width(), f0.height());
    let mut anchors = Vec::new();
    for y in (0..f0.height()).filter(|&y| on_grid(y, dy, interval)) {
        for x in (0..f0.width()).filter(|&x| on_grid(x, dx, interval)) {
            flow.set(x, y, f0.get(x, y));
            anchors.push((x, y));
        }
    }
    Ok(AnchoredFlow { flow, anchors })
}

/// Grid offset `(δx, δy)`, each uniform on the integers of `[−λ/2, λ/2)`.
pub fn sample_delta<R: Rng + ?Sized>(rng: &mut R, interval: usize) -> (i64, i64) {
    let lo = -((interval / 2) as i64);
    let hi = (interval - interval / 2) as i64;
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

/// Number of trajectories, uniform on `1..=max`.
pub fn sample_anchor_count<R: Rng + ?Sized>(rng: &mut R, max: usize) -> Result<usize> {
    if max == 0 {
        return Err(invalid!("max trajectories must be >= 1"));
    }
    Ok(rng.random_range(1..=max))
}

/// Draws up to `n` distinct anchors without replacement, each draw with
/// probability proportional to flow magnitude among the remaining anchors.
///
/// Once no remaining anchor has positive magnitude, draws continue uniformly.
pub fn sample_anchors<R: Rng + ?Sized>(anchored: &AnchoredFlow, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if anchored.anchors.is_empty() {
        return Err(invalid!("no anchors available to sample"));
    }
    if n == 0 {
        return Err(invalid!("must sample at least one anchor"));
    }
    let mag = flow_magnitude(&anchored.flow);
    let w = anchored.flow.width();
    let mut pool: Vec<((usize, usize), f64)> = anchored.anchors.iter().map(|&(x, y)| ((x, y), mag[y * w + x])).collect();
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, p) in pool.iter().enumerate() {
                if p.1 <= 0.0 {
                    continue;
                }
                if r < p.1 {
                    chosen = Some(i);
                    break;
                }
                r -= p.1;
            }
            // Rounding can leave r just past the last positive weight.
            chosen.unwrap_or_else(|| pool.iter().rposition(|p| p.1 > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..pool.len())
        };
        out.push(pool.remove(idx).0);
    }
    Ok(out)
}

fn round_to_grid(p: [f64; 2], width: usize, height: usize) -> (usize, usize) {
    let x = p[0].round().clamp(0.0, (width - 1) as f64) as usize;
    let y = p[1].round().clamp(0.0, (height - 1) as f64) as usize;
    (x, y)
}

fn add_at(frame: &mut FlowFrame, (x, y): (usize, usize), d: (f64, f64)) {
    let cur = frame.get(x, y);
    frame.set(x, y, (cur.0 + d.0, cur.1 + d.1));
}

/// Follows each anchor through `flow`, interpolating bilinearly and clamping to the frame.
///
/// The sparse flow at frame `t` holds each trajectory's sampled displacement at
/// its rounded position; coincident trajectories add.
pub fn track(anchors: &[(usize, usize)], flow: &FlowField) -> Result<TrajectorySet> {
    let (w, h) = (flow.width(), flow.height());
    for &(x, y) in anchors {
        if x >= w || y >= h {
            return Err(invalid!("anchor ({x}, {y}) outside {w}x{h} frame"));
        }
    }
    let mut sparse: Vec<FlowFrame> = vec![FlowFrame::zeros(w, h); flow.len()];
    let mut paths = Vec::with_capacity(anchors.len());
    for &(x, y) in anchors {
        let mut p = [x as f64, y as f64];
        let mut path = Vec::with_capacity(flow.video_len());
        path.push(p);
        for (t, frame) in flow.frames().iter().enumerate() {
            let d = frame.sample_bilinear(p[0], p[1]);
            add_at(&mut sparse[t], round_to_grid(p, w, h), d);
            p = [(p[0] + d.0).clamp(0.0, (w - 1) as f64), (p[1] + d.1).clamp(0.0, (h - 1) as f64)];
            path.push(p);
        }
        paths.push(path);
    }
    Ok(TrajectorySet {
        paths,
        sparse: FlowField::new(sparse)?,
    })
}

/// Peak-normalized 1-D Gaussian taps, `exp(−d²/2σ²)` for `d = −k/2..=k/2`.
pub fn gaussian_taps(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size % 2 == 0 {
        return Err(invalid!("gaussian kernel size must be odd, got {kernel_size}"));
    }
    if !(sigma > 0.0) {
        return Err(invalid!("gaussian sigma must be positive, got {sigma}"));
    }
    let r = (kernel_size / 2) as f64;
    Ok((0..kernel_size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect())
}

/// Zero-padded separable convolution of every frame and channel with the
/// peak-normalized Gaussian, so an isolated point keeps its value.
pub fn gaussian_enhance(sparse: &FlowField, cfg: GaussianConfig) -> Result<TrajectoryMap> {
    let taps = gaussian_taps(cfg.kernel_size, cfg.sigma)?;
    let r = (cfg.kernel_size / 2) as isize;
    let (w, h) = (sparse.width(), sparse.height());
    let frames = sparse
        .frames()
        .iter()
        .map(|f| {
            let mut out = FlowFrame::zeros(w, h);
            for c in 0..2 {
                let src: Vec<f64> = f.uv().iter().skip(c).step_by(2).copied().collect();
                let mut tmp = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for (k, tap) in taps.iter().enumerate() {
                            let sx = x as isize + k as isize - r;
                            if sx >= 0 && (sx as usize) < w {
                                acc += tap * src[y * w + sx as usize];
                            }
                        }
                        tmp[y * w + x] = acc;
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for (k, tap) in taps.iter().enumerate() {
                            let sy = y as isize + k as isize - r;
                            if sy >= 0 && (sy as usize) < h {
                                acc += tap * tmp[sy as usize * w + x];
                            }
                        }
                        let mut cur = out.get(x, y);
                        if c == 0 {
                            cur.0 = acc;
                        } else {
                            cur.1 = acc;
                        }
                        out.set(x, y, cur);
                    }
                }
            }
            out
        })
        .collect();
    Ok(TrajectoryMap {
        field: FlowField::new(frames)?,
    })
}

/// Result of one full sampling pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrajectories {
    pub delta: (i64, i64),
    pub anchors: Vec<(usize, usize)>,
    pub set: TrajectorySet,
    pub map: TrajectoryMap,
}

/// Grid offset → anchored flow → count → anchors → tracking → enhancement.
pub fn sample_trajectories<R: Rng + ?Sized>(
    flow: &FlowField,
    anchors: AnchorConfig,
    gaussian: GaussianConfig,
    rng: &mut R,
) -> Result<SampledTrajectories> {
    if flow.is_empty() {
        return Err(invalid!("flow field is empty"));
    }
    let delta = sample_delta(rng, anchors.interval);
    let anchored = anchor_flow(flow.frame(0), anchors.interval, delta)?;
    let n = sample_anchor_count(rng, anchors.max_trajectories)?;
    let picked = sample_anchors(&anchored, n, rng)?;
    let set = track(&picked, flow)?;
    let map = gaussian_enhance(&set.sparse, gaussian)?;
    Ok(SampledTrajectories {
        delta,
        anchors: picked,
        set,
        map,
    })
}

pub fn sample_trajectory_map<R: Rng + ?Sized>(
    flow: &FlowField,
    anchors: AnchorConfig,
    gaussian: GaussianConfig,
    rng: &mut R,
) -> Result<TrajectoryMap> {
    Ok(sample_trajectories(flow, anchors, gaussian, rng)?.map)
}

/// `n` points spaced evenly by arc length along a polyline, endpoints included.
pub fn resample_by_arc_length(points: &[[f64; 2]], n: usize) -> Result<Vec<[f64; 2]>> {
    if points.is_empty() || n == 0 {
        return Err(invalid!("cannot resample {} points to {n}", points.len()));
    }
    if n == 1 {
        return Ok(vec![points[0]]);
    }
    let mut cumulative = Vec::with_capacity(points.len());
    cumulative.push(0.0);
    for pair in points.windows(2) {
        let seg = (pair[1][0] - pair[0][0]).hypot(pair[1][1] - pair[0][1]);
        cumulative.push(cumulative.last().copied().unwrap_or(0.0) + seg);
    }
    let total = *cumulative.last().expect("non-empty");
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        if i == n - 1 {
            out.push(*points.last().expect("non-empty"));
            break;
        }
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 1 < points.len() - 1 && cumulative[seg + 1] < s {
            seg += 1;
        }
        if points.len() == 1 {
            out.push(points[0]);
            continue;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let f = if len > 0.0 { ((s - cumulative[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]);
    }
    Ok(out)
}

/// Rasterizes user strokes into a sparse flow and enhances it exactly as in training.
pub fn user_trajectory_to_map(
    strokes: &[Vec<[f64; 2]>],
    video_len: usize,
    height: usize,
    width: usize,
    gaussian: GaussianConfig,
) -> Result<TrajectoryMap> {
    if video_len < 2 {
        return Err(invalid!("video length must be >= 2"));
    }
    let mut sparse = vec![FlowFrame::zeros(width, height); video_len - 1];
    for (si, stroke) in strokes.iter().enumerate() {
        if stroke.len() < 2 {
            return Err(invalid!("stroke {si} has {} point(s); at least 2 are required", stroke.len()));
        }
        for (pi, p) in stroke.iter().enumerate() {
            if !in_canvas(*p, width, height) {
                return Err(invalid!("stroke {si} point {pi} ({}, {}) lies outside the {width}x{height} canvas", p[0], p[1]));
            }
        }
        let pts = resample_by_arc_length(stroke, video_len)?;
        for t in 0..video_len - 1 {
            let d = (pts[t + 1][0] - pts[t][0], pts[t + 1][1] - pts[t][1]);
            add_at(&mut sparse[t], round_to_grid(pts[t], width, height), d);
        }
    }
    gaussian_enhance(&FlowField::new(sparse)?, gaussian)
}

fn in_canvas(p: [f64; 2], width: usize, height: usize) -> bool {
    p[0].is_finite() && p[1].is_finite() && p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] <= (height - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokePoint {
    pub x: f64,
    pub y: f64,
}

/// Trajectory interchange document shared by the CLI and the HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDocument {
    pub canvas: Canvas,
    pub strokes: Vec<Vec<StrokePoint>>,
}

/// Location of the first offending point in a [`TrajectoryDocument`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrokeIssue {
    pub path: String,
    pub message: String,
}

impl TrajectoryDocument {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("document serializes")
    }

    pub fn strokes_xy(&self) -> Vec<Vec<[f64; 2]>> {
        self.strokes.iter().map(|s| s.iter().map(|p| [p.x, p.y]).collect()).collect()
    }

    /// Checks canvas sanity, stroke lengths, and that every point lies on the canvas.
    pub fn check(&self) -> std::result::Result<(), StrokeIssue> {
        let c = self.canvas;
        if c.width == 0 || c.height == 0 || c.frames < 2 {
            return Err(StrokeIssue {
                path: "canvas".into(),
                message: format!("invalid canvas {}x{} with {} frames", c.width, c.height, c.frames),
            });
        }
        for (si, stroke) in self.strokes.iter().enumerate() {
            if stroke.len() < 2 {
                return Err(StrokeIssue {
                    path: format!("strokes[{si}]"),
                    message: format!("stroke has {} point(s); at least 2 are required", stroke.len()),
                });
            }
            for (pi, p) in stroke.iter().enumerate() {
                if !in_canvas([p.x, p.y], c.width, c.height) {
                    return Err(StrokeIssue {
                        path: format!("strokes[{si}][{pi}]"),
                        message: format!("point ({}, {}) outside the {}x{} canvas", p.x, p.y, c.width, c.height),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_map(&self, gaussian: GaussianConfig) -> Result<TrajectoryMap> {
        if let Err(issue) = self.check() {
            return Err(Error::InvalidArgument(format!("{}: {}", issue.path, issue.message)));
        }
        user_trajectory_to_map(&self.strokes_xy(), self.canvas.frames, self.canvas.height, self.canvas.width, gaussian)
    }
}
