//! Synthetic moving-sprite videos with captions and exact flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::Vocabulary;
use crate::error::{invalid, Result};
use crate::flow::{synthetic_flow, FlowField};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Circle,
    Square,
    Triangle,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 3] = [SpriteShape::Circle, SpriteShape::Square, SpriteShape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            SpriteShape::Circle => "circle",
            SpriteShape::Square => "square",
            SpriteShape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorId {
    Black,
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
}

impl ColorId {
    /// Colors sprites may take; black is reserved for backgrounds.
    pub const SPRITE: [ColorId; 7] = [
        ColorId::Red,
        ColorId::Green,
        ColorId::Blue,
        ColorId::Yellow,
        ColorId::Magenta,
        ColorId::Cyan,
        ColorId::White,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorId::Black => [0.0, 0.0, 0.0],
            ColorId::Red => [1.0, 0.0, 0.0],
            ColorId::Green => [0.0, 1.0, 0.0],
            ColorId::Blue => [0.0, 0.0, 1.0],
            ColorId::Yellow => [1.0, 1.0, 0.0],
            ColorId::Magenta => [1.0, 0.0, 1.0],
            ColorId::Cyan => [0.0, 1.0, 1.0],
            ColorId::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorId::Black => "black",
            ColorId::Red => "red",
            ColorId::Green => "green",
            ColorId::Blue => "blue",
            ColorId::Yellow => "yellow",
            ColorId::Magenta => "magenta",
            ColorId::Cyan => "cyan",
            ColorId::White => "white",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    /// Constant velocity in pixels per frame.
    Linear { vx: f64, vy: f64 },
    /// Rotation about `center` at `angular_velocity` radians per frame; the
    /// radius is the distance from the start position to the center.
    Arc { center: [f64; 2], angular_velocity: f64 },
    /// Constant-speed travel from the start position through `waypoints`,
    /// halting at the last one.
    Polyline { waypoints: Vec<[f64; 2]>, speed: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub color: ColorId,
    /// Diameter / side length in pixels.
    pub size: f64,
    /// Center at frame 0.
    pub start: [f64; 2],
    pub motion: Motion,
}

impl Sprite {
    /// Center position at frame `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let tf = t as f64;
        match &self.motion {
            Motion::Linear { vx, vy } => [self.start[0] + vx * tf, self.start[1] + vy * tf],
            Motion::Arc { center, angular_velocity } => {
                let (dx, dy) = (self.start[0] - center[0], self.start[1] - center[1]);
                let r = dx.hypot(dy);
                let theta = dy.atan2(dx) + angular_velocity * tf;
                [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
            }
            Motion::Polyline { waypoints, speed } => {
                let mut remaining = speed * tf;
                let mut cur = self.start;
                for wp in waypoints {
                    let seg = (wp[0] - cur[0]).hypot(wp[1] - cur[1]);
                    if remaining <= seg {
                        let f = if seg > 0.0 { remaining / seg } else { 0.0 };
                        return [cur[0] + (wp[0] - cur[0]) * f, cur[1] + (wp[1] - cur[1]) * f];
                    }
                    remaining -= seg;
                    cur = *wp;
                }
                cur
            }
        }
    }

    /// Whether pixel center `(x, y)` lies inside the sprite centered at `c`.
    pub fn covers(&self, c: [f64; 2], x: f64, y: f64) -> bool {
        let r = self.size / 2.0;
        let (dx, dy) = (x - c[0], y - c[1]);
        match self.shape {
            SpriteShape::Circle => dx * dx + dy * dy <= r * r,
            SpriteShape::Square => dx.abs() <= r && dy.abs() <= r,
            SpriteShape::Triangle => {
                // Equilateral, apex up, inscribed in the radius-r circle.
                let s = 3f64.sqrt() / 2.0 * r;
                let verts = [(0.0, -r), (s, r / 2.0), (-s, r / 2.0)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let e0 = edge(verts[0], verts[1]);
                let e1 = edge(verts[1], verts[2]);
                let e2 = edge(verts[2], verts[0]);
                const TOL: f64 = 1e-9;
                (e0 >= -TOL && e1 >= -TOL && e2 >= -TOL) || (e0 <= TOL && e1 <= TOL && e2 <= TOL)
            }
        }
    }

    /// In-canvas pixels covered when centered at `c`.
    pub fn covered_pixels(&self, c: [f64; 2], width: usize, height: usize) -> Vec<(usize, usize)> {
        let r = self.size / 2.0 + 1.0;
        let x0 = (c[0] - r).floor().max(0.0) as usize;
        let y0 = (c[1] - r).floor().max(0.0) as usize;
        let x1 = ((c[0] + r).ceil().max(-1.0) as isize).min(width as isize - 1);
        let y1 = ((c[1] + r).ceil().max(-1.0) as isize).min(height as isize - 1);
        let mut out = Vec::new();
        if x1 < 0 || y1 < 0 {
            return out;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if self.covers(c, x as f64, y as f64) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Caption direction word for this sprite over `frames` frames.
    pub fn direction(&self, frames: usize) -> &'static str {
        if let Motion::Arc { angular_velocity, .. } = self.motion {
            if angular_velocity != 0.0 {
                return "around";
            }
        }
        let (a, b) = (self.position(0), self.position(frames - 1));
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        if dx.hypot(dy) < 0.5 {
            "stays"
        } else if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                "right"
            } else {
                "left"
            }
        } else if dy > 0.0 {
            "down"
        } else {
            "up"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sprites: Vec<Sprite>,
    pub background: ColorId,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(invalid!("scene needs at least 2 frames, got {}", self.frames));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid!("empty canvas {}x{}", self.width, self.height));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size >= 3.0) || !s.size.is_finite() {
                return Err(invalid!("sprite {i}: size {} below 3 px", s.size));
            }
            for t in 0..self.frames {
                let p = s.position(t);
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(invalid!("sprite {i}: non-finite position at frame {t}"));
                }
            }
        }
        Ok(())
    }

    /// `"<color> <shape> moves <direction>"` per sprite, joined by `"and"`.
    pub fn caption(&self) -> String {
        self.sprites
            .iter()
            .map(|s| match s.direction(self.frames) {
                "stays" => format!("{} {} stays", s.color.name(), s.shape.name()),
                d => format!("{} {} moves {d}", s.color.name(), s.shape.name()),
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Rasterizes frame `t` as `[3, H, W]` in painter's order.
    pub fn render_frame(&self, t: usize) -> Tensor {
        let (w, h) = (self.width, self.height);
        let bg = self.background.rgb();
        let mut img = Tensor::from_fn(&[3, h, w], |i| bg[i / (w * h)]);
        let data = img.data_mut();
        for s in &self.sprites {
            let rgb = s.color.rgb();
            for (x, y) in s.covered_pixels(s.position(t), w, h) {
                for (c, v) in rgb.iter().enumerate() {
                    data[(c * h + y) * w + x] = *v;
                }
            }
        }
        img
    }
}

/// One rendered training clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[L, 3, H, W]` with values in `[0, 1]`.
    pub frames: Tensor,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub flow: FlowField,
    pub scene: SceneSpec,
}

impl VideoSample {
    pub fn first_frame(&self) -> Tensor {
        self.frames.index_axis0(0).expect("video has frames")
    }
}

/// The closed vocabulary every generated caption draws from.
pub fn caption_vocabulary() -> Vocabulary {
    let mut words = vec!["<pad>", "and", "moves", "stays", "right", "left", "up", "down", "around"];
    words.extend(SpriteShape::ALL.iter().map(|s| s.name()));
    words.extend(ColorId::SPRITE.iter().map(|c| c.name()));
    Vocabulary::new(words.into_iter().map(String::from).collect()).expect("static vocabulary is valid")
}

pub fn generate_scene(spec: &SceneSpec) -> Result<VideoSample> {
    spec.validate()?;
    let frames = Tensor::stack(&(0..spec.frames).map(|t| spec.render_frame(t)).collect::<Vec<_>>())?;
    let caption = spec.caption();
    let tokens = caption_vocabulary().tokenize(&caption)?;
    Ok(VideoSample {
        frames,
        caption,
        tokens,
        flow: synthetic_flow(spec)?,
        scene: spec.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Probability that a sprite follows an arc instead of a straight line.
    pub arc_probability: f64,
    /// Probability that a sprite follows a two-segment polyline.
    pub polyline_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            frames: 8,
            min_sprites: 1,
            max_sprites: 3,
            min_size: 5.0,
            max_size: 9.0,
            min_speed: 0.75,
            max_speed: 2.0,
            arc_probability: 0.15,
            polyline_probability: 0.1,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.min_sprites == 0 || self.min_sprites > self.max_sprites {
            return Err(invalid!("sprite count range {}..={}", self.min_sprites, self.max_sprites));
        }
        if !(3.0..=self.max_size).contains(&self.min_size) {
            return Err(invalid!("size range {}..={}", self.min_size, self.max_size));
        }
        if self.max_size >= self.width.min(self.height) as f64 {
            return Err(invalid!("sprites of {} px do not fit a {}x{} canvas", self.max_size, self.width, self.height));
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed) {
            return Err(invalid!("speed range {}..={}", self.min_speed, self.max_speed));
        }
        if self.frames < 2 {
            return Err(invalid!("scene needs at least 2 frames"));
        }
        Ok(())
    }
}

/// Draws a random scene: 1–3 sprites with uniform shape/color and moving
/// (never static) kinematics, each starting fully inside the canvas.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let seed = rng.random();
    let count = rng.random_range(config.min_sprites..=config.max_sprites);
    let mut sprites = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = SpriteShape::ALL[rng.random_range(0..SpriteShape::ALL.len())];
        let color = ColorId::SPRITE[rng.random_range(0..ColorId::SPRITE.len())];
        let size = rng.random_range(config.min_size..=config.max_size);
        let half = size / 2.0;
        let start = [
            rng.random_range(half..=config.width as f64 - 1.0 - half),
            rng.random_range(half..=config.height as f64 - 1.0 - half),
        ];
        let speed = rng.random_range(config.min_speed..=config.max_speed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let roll: f64 = rng.random();
        let motion = if roll < config.arc_probability {
            let radius = rng.random_range(3.0..=8.0f64);
            let center = [start[0] - radius * angle.cos(), start[1] - radius * angle.sin()];
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Motion::Arc {
                center,
                angular_velocity: sign * speed / radius,
            }
        } else if roll < config.arc_probability + config.polyline_probability {
            let leg = speed * (config.frames - 1) as f64 / 2.0;
            let turn = angle + rng.random_range(-1.5..=1.5f64);
            let mid = [start[0] + leg * angle.cos(), start[1] + leg * angle.sin()];
            let end = [mid[0] + leg * turn.cos(), mid[1] + leg * turn.sin()];
            Motion::Polyline {
                waypoints: vec![mid, end],
                speed,
            }
        } else {
            Motion::Linear {
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        };
        sprites.push(Sprite {
            shape,
            color,
            size,
            start,
            motion,
        });
    }
    Ok(SceneSpec {
        width: config.width,
        height: config.height,
        frames: config.frames,
        sprites,
        background: ColorId::Black,
        seed,
    })
}

/// Eight small clips for overfitting: two sprites, each starting at the canvas
/// center and moving along one of the four diagonals.
///
/// The caption only says left or right, so the vertical direction is
/// recoverable from the trajectory alone.
pub fn overfit_scenes(width: usize, height: usize, frames: usize, speed: f64) -> Vec<SceneSpec> {
    let center = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
    let kinds = [(SpriteShape::Circle, ColorId::Red), (SpriteShape::Square, ColorId::Yellow)];
    let mut out = Vec::new();
    for (k, &(shape, color)) in kinds.iter().enumerate() {
        for (d, (sx, sy)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].into_iter().enumerate() {
            out.push(SceneSpec {
                width,
                height,
                frames,
                sprites: vec![Sprite {
                    shape,
                    color,
                    size: 8.0,
                    start: center,
                    motion: Motion::Linear { vx: sx * speed, vy: sy * speed },
                }],
                background: ColorId::Black,
                seed: (k * 4 + d) as u64,
            });
        }
    }
    out
}

/// Stream configuration for [`dataset_stream`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub batch_size: usize,
    /// Brightness jitter amplitude; 0 disables augmentation.
    #[serde(default)]
    pub color_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            batch_size: 1,
            color_jitter: 0.0,
        }
    }
}

/// RNG for sample `index` of a stream seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A batch of rendered samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<VideoSample>,
}

impl Batch {
    /// `[B, L, 3, H, W]`.
    pub fn frames(&self) -> Tensor {
        Tensor::stack(&self.samples.iter().map(|s| s.frames.clone()).collect::<Vec<_>>()).expect("uniform batch")
    }

    /// `[B, L-1, 2, H, W]`.
    pub fn flows(&self) -> Tensor {
        Tensor::stack(&self.samples.iter().map(|s| s.flow.to_tensor()).collect::<Vec<_>>()).expect("uniform batch")
    }

    pub fn tokens(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.tokens.clone()).collect()
    }
}

/// Infinite stream of batches; batch `i` depends only on `(seed, i)`.
pub struct DatasetStream {
    config: DatasetConfig,
    seed: u64,
    next: u64,
}

pub fn dataset_stream(config: DatasetConfig, seed: u64) -> Result<DatasetStream> {
    if config.batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    config.scene.validate()?;
    Ok(DatasetStream { config, seed, next: 0 })
}

impl DatasetStream {
    pub fn batch(&self, index: u64) -> Result<Batch> {
        let bs = self.config.batch_size as u64;
        let samples = (0..bs)
            .map(|i| {
                let mut rng = sample_rng(self.seed, index * bs + i);
                let scene = random_scene(&mut rng, &self.config.scene)?;
                let mut sample = generate_scene(&scene)?;
                if self.config.color_jitter > 0.0 {
                    let j = self.config.color_jitter;
                    let gain = rng.random_range(1.0 - j..=1.0 + j);
                    sample.frames = sample.frames.map(|v| (v * gain).clamp(0.0, 1.0));
                }
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { samples })
    }
}

impl Iterator for DatasetStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: SpriteShape, motion: Motion) -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 32,
            frames: 6,
            sprites: vec![Sprite {
                shape,
                color: ColorId::Red,
                size: 7.0,
                start: [12.0, 14.0],
                motion,
            }],
            background: ColorId::Black,
            seed: 0,
        }
    }

    #[test]
    fn static_sprite_is_still_and_stays() {
        let s = one(SpriteShape::Circle, Motion::Linear { vx: 0.0, vy: 0.0 });
        let v = generate_scene(&s).unwrap();
        assert_eq!(v.caption, "red circle stays");
        for t in 1..6 {
            assert_eq!(v.frames.index_axis0(t).unwrap(), v.first_frame());
        }
        assert!(v.flow.frames().iter().all(|f| f.uv().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn moving_right_caption_and_flow() {
        let s = one(SpriteShape::Square, Motion::Linear { vx: 2.0, vy: 0.0 });
        let v = generate_scene(&s).unwrap();
        assert_eq!(v.caption, "red square moves right");
        for (t, f) in v.flow.frames().iter().enumerate() {
            let sprite = &s.sprites[0];
            let covered = sprite.covered_pixels(sprite.position(t), 32, 32);
            assert!(!covered.is_empty());
            for y in 0..32 {
                for x in 0..32 {
                    let want = if covered.contains(&(x, y)) { (2.0, 0.0) } else { (0.0, 0.0) };
                    assert_eq!(f.get(x, y), want);
                }
            }
        }
    }

    #[test]
    fn arc_positions_follow_parametric_circle() {
        let s = one(
            SpriteShape::Triangle,
            Motion::Arc {
                center: [16.0, 14.0],
                angular_velocity: 0.3,
            },
        );
        assert_eq!(s.caption(), "red triangle moves around");
        for t in 0..6 {
            // start is 4 px left of the center: angle π.
            let theta = std::f64::consts::PI + 0.3 * t as f64;
            let want = [16.0 + 4.0 * theta.cos(), 14.0 + 4.0 * theta.sin()];
            let got = s.sprites[0].position(t);
            assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn polyline_halts_at_end() {
        let s = Sprite {
            shape: SpriteShape::Circle,
            color: ColorId::Blue,
            size: 5.0,
            start: [0.0, 0.0],
            motion: Motion::Polyline {
                waypoints: vec![[3.0, 0.0], [3.0, 4.0]],
                speed: 2.0,
            },
        };
        assert_eq!(s.position(1), [2.0, 0.0]);
        assert_eq!(s.position(2), [3.0, 1.0]);
        assert_eq!(s.position(10), [3.0, 4.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = one(SpriteShape::Circle, Motion::Linear { vx: 1.0, vy: 0.0 });
        s.sprites[0].size = 2.0;
        assert!(generate_scene(&s).is_err());
        let mut s = one(SpriteShape::Circle, Motion::Linear { vx: 1.0, vy: 0.0 });
        s.frames = 1;
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn random_scene_is_seeded_and_in_bounds() {
        let cfg = SceneConfig::default();
        let a = random_scene(&mut sample_rng(3, 0), &cfg).unwrap();
        let b = random_scene(&mut sample_rng(3, 0), &cfg).unwrap();
        assert_eq!(a, b);
        for i in 0..200 {
            let s = random_scene(&mut sample_rng(9, i), &cfg).unwrap();
            for sp in &s.sprites {
                let h = sp.size / 2.0;
                assert!(sp.start[0] >= h && sp.start[0] <= 32.0 - h);
                assert!(sp.start[1] >= h && sp.start[1] <= 32.0 - h);
                assert_ne!(sp.direction(s.frames), "stays");
            }
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let s = random_scene(&mut sample_rng(1, 1), &SceneConfig::default()).unwrap();
        let back: SceneSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
