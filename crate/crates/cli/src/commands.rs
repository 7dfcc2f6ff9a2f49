//! Implementations behind each subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dragflow::conditions::Vocabulary;
use dragflow::diffusion::{adaptive_train, loss_trace_csv, BatchSource, FixedSet, TrainStageConfig};
use dragflow::flow::{read_flo_dir, write_flo_dir, FlowField};
use dragflow::imageio::{decode_png, encode_png, export_sample, read_frames};
use dragflow::metrics::{centroid_track, overlay, psnr, tracked_error, EvalReport, SampleReport, COLOR_TOLERANCE};
use dragflow::sprites::{caption_vocabulary, dataset_stream, generate_scene, overfit_scenes, DatasetConfig, SceneSpec, VideoSample};
use dragflow::trajectory::{sample_trajectories, AnchorConfig, GaussianConfig};
use dragflow::unet::{DragModel, ModelConfig};
use dragflow::{checkpoint, Tensor};

use crate::request::{generate, parse_request, prepare, write_artifacts};

pub const MODEL_JSON: &str = "model.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const VOCAB: &str = "vocab.txt";
pub const LOSS_CSV: &str = "loss.csv";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).with_context(|| format!("invalid JSON in {}", path.display()))
}

/// Loads `model.json`, `checkpoint.bin` and `vocab.txt` from a model directory.
pub fn load_model_dir(dir: &Path) -> Result<(DragModel, Vocabulary)> {
    let config = ModelConfig::from_json(&read_text(&dir.join(MODEL_JSON))?).with_context(|| format!("invalid {}", dir.join(MODEL_JSON).display()))?;
    let ckpt = dir.join(CHECKPOINT);
    let model = DragModel::load(config, &ckpt).with_context(|| format!("cannot load {}", ckpt.display()))?;
    let vocab = Vocabulary::read(&dir.join(VOCAB))?;
    if vocab.len() != model.config.vocab_size {
        bail!("{} has {} words but the model expects {}", dir.join(VOCAB).display(), vocab.len(), model.config.vocab_size);
    }
    Ok((model, vocab))
}

/// Writes a model directory; the loss trace is included when given.
pub fn save_model_dir(dir: &Path, model: &DragModel, vocab: &Vocabulary, trace: Option<&str>) -> Result<()> {
    write_file(&dir.join(MODEL_JSON), model.config.to_json() + "\n")?;
    write_file(&dir.join(CHECKPOINT), checkpoint::encode(&model.params))?;
    write_file(&dir.join(VOCAB), vocab.to_text())?;
    if let Some(csv) = trace {
        write_file(&dir.join(LOSS_CSV), csv)?;
    }
    Ok(())
}

/// Writes `count` dataset samples as `sample_%05d/` directories.
pub fn gen_data(out: &Path, count: usize, seed: u64, config: DatasetConfig) -> Result<()> {
    let stream = dataset_stream(DatasetConfig { batch_size: 1, ..config }, seed)?;
    for i in 0..count {
        let batch = stream.batch(i as u64)?;
        export_sample(&batch.samples[0], &out.join(format!("sample_{i:05}")))?;
    }
    Ok(())
}

/// Where training clips come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// The eight-clip overfit fixture.
    Overfit { speed: f64 },
    /// Random scenes, sample `i` determined by `(seed, i)`.
    Stream { dataset: DatasetConfig, seed: u64 },
    /// Directories written by `gen-data`; clips are re-rendered from `scene.json`.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub stage1: TrainStageConfig,
    pub stage2: TrainStageConfig,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn directory_samples(dir: &Path) -> Result<Vec<VideoSample>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no sample directories with scene.json in {}", dir.display());
    }
    entries
        .iter()
        .map(|p| Ok(generate_scene(&read_json::<SceneSpec>(&p.join("scene.json"))?)?))
        .collect()
}

fn batch_source(cfg: &TrainConfig) -> Result<Box<dyn BatchSource>> {
    let m = &cfg.model;
    Ok(match &cfg.data {
        DataSource::Overfit { speed } => Box::new(FixedSet {
            samples: overfit_scenes(m.width, m.height, m.frames, *speed).iter().map(generate_scene).collect::<dragflow::Result<_>>()?,
        }),
        DataSource::Stream { dataset, seed } => {
            let s = &dataset.scene;
            if (s.width, s.height, s.frames) != (m.width, m.height, m.frames) {
                bail!("dataset scenes are {}x{}x{} but the model is {}x{}x{}", s.width, s.height, s.frames, m.width, m.height, m.frames);
            }
            Box::new(dataset_stream(dataset.clone(), *seed)?)
        }
        DataSource::Directory { path } => Box::new(FixedSet {
            samples: directory_samples(path)?,
        }),
    })
}

/// Runs both training stages and writes the model directory to `out`.
pub fn train(config_path: &Path, out: &Path, log: &mut dyn FnMut(&str)) -> Result<()> {
    let cfg: TrainConfig = read_json(config_path)?;
    let vocab = caption_vocabulary();
    if cfg.model.vocab_size != vocab.len() {
        bail!("model vocab_size {} does not match the caption vocabulary ({} words)", cfg.model.vocab_size, vocab.len());
    }
    let mut data = batch_source(&cfg)?;
    let mut model = DragModel::new(cfg.model.clone())?;
    log(&format!("model has {} parameters", model.num_parameters()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.stage1.steps + cfg.stage2.steps;
    let mut on_step = |rec: &dragflow::diffusion::LossRecord, m: &DragModel| -> dragflow::Result<()> {
        if rec.step % 50 == 0 || rec.step + 1 == total {
            log(&format!("step {}/{} {} loss {:.5}", rec.step + 1, total, rec.stage.name(), rec.loss));
        }
        if cfg.checkpoint_every > 0 && (rec.step + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(&m.params, &out.join(CHECKPOINT))?;
        }
        Ok(())
    };
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let trace = adaptive_train(&mut model, data.as_mut(), &cfg.stage1, &cfg.stage2, &mut rng, &mut on_step)?;
    save_model_dir(out, &model, &vocab, Some(&loss_trace_csv(&trace)))
}

/// Samples one video for a request file and writes frames plus `meta.json`.
///
/// `seed` overrides the request seed; without either a random seed is used
/// and recorded in the metadata.
pub fn sample(model_dir: &Path, request: &Path, out: &Path, seed: Option<u64>, log: &mut dyn FnMut(&str)) -> Result<()> {
    let (model, vocab) = load_model_dir(model_dir)?;
    let body = std::fs::read(request).with_context(|| format!("cannot read {}", request.display()))?;
    let mut req = parse_request(&body).with_context(|| format!("invalid request {}", request.display()))?;
    if seed.is_some() {
        req.seed = seed;
    }
    let prepared = prepare(&req, &model, &vocab, rand::random()).with_context(|| format!("invalid request {}", request.display()))?;
    if !prepared.unknown_words.is_empty() {
        log(&format!("warning: unknown caption words replaced by padding: {}", prepared.unknown_words.join(", ")));
    }
    let mut progress = |k: usize, total: usize| {
        if k % 10 == 0 || k == total {
            log(&format!("denoising {k}/{total}"));
        }
    };
    let g = generate(&model, &prepared, &mut progress)?;
    write_artifacts(&g, out)?;
    log(&format!("wrote {} frames to {} (seed {})", g.frames.shape()[0], out.display(), g.meta.seed));
    Ok(())
}

/// One entry of an evaluation manifest; relative paths resolve against the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    /// Directory of generated `frame_%04d.png` files.
    pub frames: PathBuf,
    /// Sprite color to track, RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Target path; resampled by arc length to the frame count when lengths differ.
    pub target: Vec<[f64; 2]>,
    /// Optional reference frames for PSNR.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub samples: Vec<EvalEntry>,
}

/// Scores every manifest entry; with `overlay_dir`, writes first-frame overlays.
pub fn eval(manifest: &Path, overlay_dir: Option<&Path>) -> Result<EvalReport> {
    let m: EvalManifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut per_sample = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let frames = read_frames(&base.join(&e.frames)).with_context(|| format!("sample {}", e.name))?;
        let tracked = centroid_track(&frames, e.color, e.tolerance.unwrap_or(COLOR_TOLERANCE)).with_context(|| format!("sample {}", e.name))?;
        let (score, missing) = tracked_error(&tracked, &e.target).with_context(|| format!("sample {}", e.name))?;
        let psnr = match &e.reference {
            Some(r) => Some(psnr(&frames, &read_frames(&base.join(r))?).with_context(|| format!("sample {}", e.name))?),
            None => None,
        };
        if let Some(dir) = overlay_dir {
            let img = overlay(&frames.index_axis0(0)?, &tracked, &e.target)?;
            write_file(&dir.join(format!("{}.png", e.name)), encode_png(&img)?)?;
        }
        per_sample.push(SampleReport {
            name: e.name.clone(),
            mean_px: score.mean,
            max_px: score.max,
            psnr,
            missing_frames: missing,
        });
    }
    Ok(EvalReport::new(per_sample))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryArtifact {
    pub delta: (i64, i64),
    pub anchors: Vec<(usize, usize)>,
    pub paths: Vec<Vec<[f64; 2]>>,
}

/// Runs the trajectory sampler on a `.flo` directory.
///
/// Writes `map/` (enhanced map as `.flo`), `sparse/`, `trajectories.json`
/// and `paths.png`.
pub fn sample_traj(flow_dir: &Path, anchors: AnchorConfig, gaussian: GaussianConfig, seed: u64, out: &Path) -> Result<()> {
    let flow = read_flo_dir(flow_dir).with_context(|| format!("cannot read flow from {}", flow_dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_trajectories(&flow, anchors, gaussian, &mut rng)?;
    write_flo_dir(&s.map.field, &out.join("map"))?;
    write_flo_dir(&s.set.sparse, &out.join("sparse"))?;
    let artifact = TrajectoryArtifact {
        delta: s.delta,
        anchors: s.anchors.clone(),
        paths: s.set.paths.clone(),
    };
    write_file(&out.join("trajectories.json"), serde_json::to_string_pretty(&artifact)? + "\n")?;
    write_file(&out.join("paths.png"), encode_png(&paths_image(&flow, &s.set.paths))?)?;
    Ok(())
}

/// First-frame flow magnitude in gray with each path drawn in its own color.
fn paths_image(flow: &FlowField, paths: &[Vec<[f64; 2]>]) -> Tensor {
    const PALETTE: [[f64; 3]; 8] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.3, 0.5, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.3, 1.0],
        [0.2, 1.0, 1.0],
        [1.0, 0.6, 0.1],
        [1.0, 1.0, 1.0],
    ];
    let (w, h) = (flow.width(), flow.height());
    let mag = dragflow::flow::flow_magnitude(flow.frame(0));
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let mut img = Tensor::from_fn(&[3, h, w], |i| if peak > 0.0 { 0.5 * mag[i % (h * w)] / peak } else { 0.0 });
    let data = img.data_mut();
    for (i, path) in paths.iter().enumerate() {
        let rgb = PALETTE[i % PALETTE.len()];
        for pair in path.windows(2) {
            for k in 0..=16 {
                let f = k as f64 / 16.0;
                let x = (pair[0][0] + (pair[1][0] - pair[0][0]) * f).round();
                let y = (pair[0][1] + (pair[1][1] - pair[0][1]) * f).round();
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    for (c, v) in rgb.iter().enumerate() {
                        data[(c * h + y as usize) * w + x as usize] = *v;
                    }
                }
            }
        }
    }
    img
}

/// First frame shown by the editor: a PNG, a scene file, or the first overfit clip.
pub fn base_image(model: &ModelConfig, image: Option<&Path>, scene: Option<&Path>) -> Result<Tensor> {
    let img = match (image, scene) {
        (Some(p), _) => decode_png(&std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)?,
        (None, Some(p)) => read_json::<SceneSpec>(p)?.render_frame(0),
        (None, None) => overfit_scenes(model.width, model.height, model.frames, 1.0)[0].render_frame(0),
    };
    if img.shape() != [3, model.height, model.width] {
        bail!("base image is {:?}, model expects [3, {}, {}]", img.shape(), model.height, model.width);
    }
    Ok(img)
}

/// Artifact root from `DRAGFLOW_HOME`, defaulting to `./dragflow-home`.
pub fn home_dir() -> PathBuf {
    std::env::var_os("DRAGFLOW_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("dragflow-home"))
}

