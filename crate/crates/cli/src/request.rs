//! Generation requests, the shared generation routine, and artifact writing.
//!
//! The CLI `sample` command and the HTTP service both go through
//! [`generate`] and [`write_artifacts`], so identical requests produce
//! identical files.

use std::path::{Path, PathBuf};

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dragflow::conditions::{ConditionSet, Vocabulary};
use dragflow::diffusion::{sample, NoiseSchedule};
use dragflow::imageio::{decode_png, write_frames};
use dragflow::sprites::SceneSpec;
use dragflow::trajectory::TrajectoryDocument;
use dragflow::unet::DragModel;
use dragflow::{Error, Tensor};

pub const DEFAULT_GUIDANCE: f64 = 3.0;

/// First-frame source: an inline PNG or a scene to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    PngBase64(String),
    Scene(SceneSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub image: Option<ImageSource>,
    pub strokes: TrajectoryDocument,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub guidance: Option<f64>,
}

/// A request problem tied to a location in the JSON body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

fn field(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

/// Parses a request body, reporting the JSON path of the first problem.
pub fn parse_request(body: &[u8]) -> Result<GenerateRequest, FieldError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        field(if path == "." { "body".to_string() } else { path }, e.into_inner().to_string())
    })
}

/// Everything a generation needs once the request has been checked.
#[derive(Clone, Debug)]
pub struct PreparedRequest {
    pub conditions: ConditionSet,
    pub seed: u64,
    pub guidance: f64,
    pub unknown_words: Vec<String>,
    pub caption: String,
}

fn load_image(src: &ImageSource) -> Result<Tensor, FieldError> {
    match src {
        ImageSource::PngBase64(b64) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| field("image.png_base64", e.to_string()))?;
            decode_png(&bytes).map_err(|e| field("image.png_base64", e.to_string()))
        }
        ImageSource::Scene(scene) => {
            scene.validate().map_err(|e| field("image.scene", e.to_string()))?;
            Ok(scene.render_frame(0))
        }
    }
}

/// Validates a request against the model and builds its condition set.
///
/// A missing seed is drawn from `fallback_seed`; it is echoed in the metadata.
pub fn prepare(req: &GenerateRequest, model: &DragModel, vocab: &Vocabulary, fallback_seed: u64) -> Result<PreparedRequest, FieldError> {
    let cfg = &model.config;
    if let Err(issue) = req.strokes.check() {
        return Err(field(format!("strokes.{}", issue.path), issue.message));
    }
    let canvas = req.strokes.canvas;
    if (canvas.width, canvas.height, canvas.frames) != (cfg.width, cfg.height, cfg.frames) {
        return Err(field(
            "strokes.canvas",
            format!(
                "canvas {}x{} with {} frames does not match the model ({}x{}, {} frames)",
                canvas.width, canvas.height, canvas.frames, cfg.width, cfg.height, cfg.frames
            ),
        ));
    }
    let guidance = req.guidance.unwrap_or(DEFAULT_GUIDANCE);
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(field("guidance", "must be a finite number >= 0"));
    }
    let (tokens, unknown_words) = vocab.tokenize_lossy(&req.caption);
    if tokens.iter().any(|&t| t >= cfg.vocab_size) {
        return Err(field("caption", "vocabulary does not match the model"));
    }
    let map = req.strokes.to_map(cfg.trajectory_gaussian).map_err(|e| field("strokes", e.to_string()))?;
    let mut conditions = match &req.image {
        Some(src) => {
            let img = load_image(src)?;
            if img.shape() != [3, cfg.height, cfg.width] {
                return Err(field("image", format!("image is {:?}, model expects [3, {}, {}]", img.shape(), cfg.height, cfg.width)));
            }
            ConditionSet::new(tokens, img, map.to_tensor()).map_err(|e| field("image", e.to_string()))?
        }
        None => {
            let mut c = ConditionSet::new(tokens, Tensor::zeros(&[3, cfg.height, cfg.width]), map.to_tensor())
                .map_err(|e| field("strokes", e.to_string()))?;
            c.drop_image();
            c
        }
    };
    if req.caption.trim().is_empty() {
        conditions.drop_text();
    }
    if req.strokes.strokes.is_empty() {
        conditions.drop_trajectory();
    }
    Ok(PreparedRequest {
        conditions,
        seed: req.seed.unwrap_or(fallback_seed),
        guidance,
        unknown_words,
        caption: req.caption.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionHashes {
    pub text: String,
    pub image: String,
    pub trajectory: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub seed: u64,
    pub guidance: f64,
    pub caption: String,
    pub unknown_words: Vec<String>,
    pub schedule: ScheduleMeta,
    pub condition_hashes: ConditionHashes,
    pub frames: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn condition_hashes(c: &ConditionSet) -> ConditionHashes {
    let mut h = Sha256::new();
    for t in if c.dropped.text { &[][..] } else { &c.tokens[..] } {
        h.update((*t as u64).to_le_bytes());
    }
    ConditionHashes {
        text: hex(&h.finalize()),
        image: hash_f64(c.image.data()),
        trajectory: hash_f64(c.trajectory.data()),
    }
}

pub struct Generation {
    pub frames: Tensor,
    pub meta: GenerationMeta,
}

/// Runs the sampler for a prepared request; `progress(k, T)` reports each step.
pub fn generate(model: &DragModel, prepared: &PreparedRequest, progress: &mut dyn FnMut(usize, usize)) -> dragflow::Result<Generation> {
    let cfg = &model.config;
    let schedule = NoiseSchedule::for_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(prepared.seed);
    let frames = sample(model, &prepared.conditions, &schedule, &mut rng, prepared.guidance, progress)?;
    Ok(Generation {
        meta: GenerationMeta {
            seed: prepared.seed,
            guidance: prepared.guidance,
            caption: prepared.caption.clone(),
            unknown_words: prepared.unknown_words.clone(),
            schedule: ScheduleMeta {
                timesteps: cfg.timesteps,
                beta_start: cfg.beta_start,
                beta_end: cfg.beta_end,
            },
            condition_hashes: condition_hashes(&prepared.conditions),
            frames: cfg.frames,
        },
        frames,
    })
}

/// Writes `frame_%04d.png` files and `meta.json` into `dir`.
pub fn write_artifacts(g: &Generation, dir: &Path) -> dragflow::Result<Vec<PathBuf>> {
    let mut paths = write_frames(&g.frames, dir)?;
    let meta = dir.join("meta.json");
    std::fs::write(&meta, serde_json::to_string_pretty(&g.meta)? + "\n").map_err(|e| Error::Io {
        path: meta.clone(),
        source: e,
    })?;
    paths.push(meta);
    Ok(paths)
}
