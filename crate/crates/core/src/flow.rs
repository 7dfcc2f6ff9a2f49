//! Dense optical flow: `.flo` I/O, analytic flow for sprite scenes, and helpers.
//!
//! Coordinates have their origin at the top-left pixel; `u` points right and
//! `v` points down, both in pixels per frame.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::sprites::SceneSpec;
use crate::tensor::Tensor;

/// `.flo` sanity value, stored as an `f32`.
pub const FLO_MAGIC: f32 = 202021.25;

/// One H×W grid of `(u, v)` displacements, stored interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFrame {
    width: usize,
    height: usize,
    uv: Vec<f64>,
}

impl FlowFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            uv: vec![0.0; 2 * width * height],
        }
    }

    pub fn from_uv(width: usize, height: usize, uv: Vec<f64>) -> Result<Self> {
        if uv.len() != 2 * width * height {
            return Err(Error::shape("flow frame", "uv length", 2 * width * height, uv.len()));
        }
        if uv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow frame".into()));
        }
        Ok(Self { width, height, uv })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut frame = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                frame.set(x, y, f(x, y));
            }
        }
        frame
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn uv(&self) -> &[f64] {
        &self.uv
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.uv[i], self.uv[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, (u, v): (f64, f64)) {
        let i = 2 * (y * self.width + x);
        self.uv[i] = u;
        self.uv[i + 1] = v;
    }

    /// Bilinear lookup at a continuous position, clamped to the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> (f64, f64) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
        lerp(top, bottom, fy)
    }

    /// Channels-first `[2, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[2, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.uv[2 * p + c]
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = <[usize; 3]>::try_from(t.shape()).map_err(|_| Error::shape("flow frame", "rank", 3, t.rank()))?;
        if c != 2 {
            return Err(Error::shape("flow frame", "channels (axis 0)", 2, c));
        }
        let plane = h * w;
        let mut uv = vec![0.0; 2 * plane];
        for p in 0..plane {
            uv[2 * p] = t.data()[p];
            uv[2 * p + 1] = t.data()[plane + p];
        }
        Self::from_uv(w, h, uv)
    }
}

/// Flow between each pair of consecutive frames of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    frames: Vec<FlowFrame>,
}

impl FlowField {
    pub fn new(frames: Vec<FlowFrame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("flow field needs at least one frame"))?;
        let (width, height) = (first.width, first.height);
        for (i, f) in frames.iter().enumerate() {
            if f.width != width || f.height != height {
                return Err(Error::shape(
                    "flow field",
                    format!("frame {i} size"),
                    format!("{width}x{height}"),
                    format!("{}x{}", f.width, f.height),
                ));
            }
        }
        Ok(Self { width, height, frames })
    }

    pub fn zeros(width: usize, height: usize, video_len: usize) -> Self {
        Self {
            width,
            height,
            frames: vec![FlowFrame::zeros(width, height); video_len - 1],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of flow frames, one less than the video length.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn video_len(&self) -> usize {
        self.frames.len() + 1
    }

    pub fn frames(&self) -> &[FlowFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &FlowFrame {
        &self.frames[t]
    }

    /// `[L-1, 2, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let parts: Vec<Tensor> = self.frames.iter().map(FlowFrame::to_tensor).collect();
        Tensor::stack(&parts).expect("frames share a size")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape("flow field", "rank", 4, t.rank()));
        }
        let frames = (0..t.shape()[0])
            .map(|i| FlowFrame::from_tensor(&t.index_axis0(i)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }
}

/// Parses a single-frame `.flo` payload.
pub fn read_flo(bytes: &[u8]) -> Result<FlowFrame> {
    let word = |offset: usize, what: &str| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .map(|s| s.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::Format {
                offset: bytes.len(),
                message: format!("truncated {what}: file ends at byte {}", bytes.len()),
            })
    };
    let magic = f32::from_le_bytes(word(0, "magic")?);
    if magic != FLO_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic}, expected {FLO_MAGIC}"),
        });
    }
    let width = i32::from_le_bytes(word(4, "width")?);
    let height = i32::from_le_bytes(word(8, "height")?);
    if width <= 0 || height <= 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("non-positive dimensions {width}x{height}"),
        });
    }
    let (width, height) = (width as usize, height as usize);
    let need = 12 + 8 * width * height;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {need} bytes for {width}x{height}, got {}", bytes.len()),
        });
    }
    let uv: Vec<f64> = bytes[12..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = uv.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: 12 + 4 * i,
            message: "non-finite flow component".into(),
        });
    }
    FlowFrame::from_uv(width, height, uv)
}

/// Serializes a frame as `.flo`, narrowing components to `f32`.
pub fn write_flo(frame: &FlowFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * frame.uv.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(frame.width as i32).to_le_bytes());
    out.extend_from_slice(&(frame.height as i32).to_le_bytes());
    for &v in &frame.uv {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Writes `frame_0000.flo`, `frame_0001.flo`, … into `dir`.
pub fn write_flo_dir(field: &FlowField, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in field.frames.iter().enumerate() {
        let path = dir.join(format!("frame_{t:04}.flo"));
        std::fs::write(&path, write_flo(frame)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads consecutive `frame_%04d.flo` files starting at index 0.
pub fn read_flo_dir(dir: &Path) -> Result<FlowField> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(format!("frame_{:04}.flo", frames.len()));
        if !path.exists() {
            break;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        frames.push(read_flo(&bytes).map_err(|e| invalid!("{}: {e}", path.display()))?);
    }
    if frames.is_empty() {
        return Err(invalid!("{}: no frame_0000.flo found", dir.display()));
    }
    FlowField::new(frames)
}

/// Per-pixel `√(u² + v²)`, row-major H×W.
pub fn flow_magnitude(frame: &FlowFrame) -> Vec<f64> {
    frame.uv.chunks_exact(2).map(|c| c[0].hypot(c[1])).collect()
}

/// Ground-truth forward flow of a sprite scene.
///
/// A pixel covered by a sprite in frame `t` moves with that sprite's
/// displacement to frame `t + 1`; later sprites in draw order win overlaps
/// and uncovered pixels are zero.
pub fn synthetic_flow(scene: &SceneSpec) -> Result<FlowField> {
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let frames = (0..scene.frames - 1)
        .map(|t| {
            let mut frame = FlowFrame::zeros(w, h);
            for sprite in &scene.sprites {
                let p0 = sprite.position(t);
                let p1 = sprite.position(t + 1);
                let d = (p1[0] - p0[0], p1[1] - p0[1]);
                for (x, y) in sprite.covered_pixels(p0, w, h) {
                    frame.set(x, y, d);
                }
            }
            frame
        })
        .collect();
    FlowField::new(frames)
}
