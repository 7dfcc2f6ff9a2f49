#![allow(dead_code)]

use std::path::Path;

use dragflow::sprites::caption_vocabulary;
use dragflow::trajectory::{Canvas, GaussianConfig, StrokePoint, TrajectoryDocument};
use dragflow::unet::{DragModel, ModelConfig};
use dragflow_cli::commands::save_model_dir;
use dragflow_cli::request::GenerateRequest;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        channels: vec![4, 8],
        frames: 3,
        height: 8,
        width: 8,
        text_len: 6,
        text_dim: 8,
        cond_channels: 4,
        heads: 2,
        time_dim: 8,
        groups: 2,
        timesteps: 6,
        init_seed: 3,
        trajectory_gaussian: GaussianConfig {
            kernel_size: 3,
            sigma: 1.0,
        },
        ..ModelConfig::default()
    }
}

/// Saves a freshly initialized tiny model with its fusion layers perturbed so
/// that every control reaches the output.
pub fn write_tiny_model(dir: &Path) -> DragModel {
    let mut model = DragModel::new(tiny_config()).unwrap();
    for (i, p) in model.params.iter_mut().enumerate() {
        if p.name.contains("fusion") {
            for (k, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = 0.05 * (((i * 31 + k * 17) % 13) as f64 - 6.0) / 6.0;
            }
        }
    }
    save_model_dir(dir, &model, &caption_vocabulary(), None).unwrap();
    model
}

pub fn tiny_request(seed: Option<u64>) -> GenerateRequest {
    let doc = TrajectoryDocument {
        canvas: Canvas {
            width: 8,
            height: 8,
            frames: 3,
        },
        strokes: vec![vec![StrokePoint { x: 1.0, y: 2.0 }, StrokePoint { x: 6.0, y: 5.0 }]],
    };
    GenerateRequest {
        caption: "red circle moves right".into(),
        image: None,
        strokes: doc,
        seed,
        guidance: Some(2.0),
    }
}

pub fn dragflow(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_dragflow")).args(args).output().unwrap()
}

/// Runs the binary and panics with its stderr on failure.
pub fn dragflow_ok(args: &[&str]) -> std::process::Output {
    let out = dragflow(args);
    assert!(out.status.success(), "dragflow {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `dir` keyed by its relative path.
pub fn tree_bytes(dir: &Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut files = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// A two-stage training config for the tiny model on random 8x8 scenes.
pub fn tiny_train_config(steps: usize) -> serde_json::Value {
    let model = tiny_config();
    serde_json::json!({
        "model": model,
        "data": {"kind": "stream", "seed": 5, "dataset": {
            "scene": {"width": 8, "height": 8, "frames": 3, "min_sprites": 1, "max_sprites": 1,
                "min_size": 3.0, "max_size": 4.0, "min_speed": 0.5, "max_speed": 1.0,
                "arc_probability": 0.0, "polyline_probability": 0.0},
            "batch_size": 1}},
        "stage1": {"stage": "dense_flow", "steps": steps, "batch_size": 1, "lr": 1e-3},
        "stage2": {"stage": "sparse_trajectory", "steps": steps, "batch_size": 1, "lr": 1e-3,
            "anchors": {"interval": 2, "max_trajectories": 2}, "gaussian": {"kernel_size": 3, "sigma": 1.0}},
        "seed": 9
    })
}
