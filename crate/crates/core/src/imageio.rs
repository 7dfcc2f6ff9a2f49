//! 8-bit RGB PNG frames and frame directories.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::write_flo_dir;
use crate::sprites::VideoSample;
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` frame with values in `[0, 1]`.
pub fn encode_png(frame: &Tensor) -> Result<Vec<u8>> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(Error::shape("encode_png", "frame", "[3, H, W]", format!("{:?}", frame.shape())));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            rgb.push(quantize(d[c * h * w + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB or RGBA PNG into `[3, H, W]`; alpha is ignored.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let px = &buf[..info.buffer_size()];
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let c = if channels < 3 { 0 } else { c };
        px[p * channels + c] as f64 / 255.0
    }))
}

pub fn frame_path(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{index:04}.{ext}"))
}

/// Writes `[L, 3, H, W]` frames as `frame_%04d.png`.
pub fn write_frames(frames: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for t in 0..frames.shape()[0] {
        let p = frame_path(dir, t, "png");
        std::fs::write(&p, encode_png(&frames.index_axis0(t)?)?).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Reads consecutive `frame_%04d.png` files starting at 0 into `[L, 3, H, W]`.
pub fn read_frames(dir: &Path) -> Result<Tensor> {
    let mut frames = Vec::new();
    loop {
        let p = frame_path(dir, frames.len(), "png");
        if !p.exists() {
            break;
        }
        frames.push(decode_png(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?);
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("no frame_0000.png in {}", dir.display())));
    }
    Tensor::stack(&frames)
}

/// Writes `frames/`, `flow/`, `scene.json` and `caption.txt` for one sample.
pub fn export_sample(sample: &VideoSample, dir: &Path) -> Result<()> {
    write_frames(&sample.frames, &dir.join("frames"))?;
    write_flo_dir(&sample.flow, &dir.join("flow"))?;
    let scene = dir.join("scene.json");
    std::fs::write(&scene, serde_json::to_string_pretty(&sample.scene)?).map_err(|e| Error::io(&scene, e))?;
    let cap = dir.join("caption.txt");
    std::fs::write(&cap, format!("{}\n", sample.caption)).map_err(|e| Error::io(&cap, e))
}
