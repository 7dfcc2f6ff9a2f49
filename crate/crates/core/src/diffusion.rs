//! Noise schedule, forward noising, the two-stage training objective and
//! ancestral sampling with classifier-free guidance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conditions::{drop_conditions, ConditionSet, DropRatios};
use crate::error::{invalid, Error, Result};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::sprites::VideoSample;
use crate::tensor::Tensor;
use crate::trajectory::{sample_trajectory_map, AnchorConfig, GaussianConfig};
use crate::unet::{DragModel, ModelConfig};

/// Linear-β schedule; index `t` runs over `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn for_model(cfg: &ModelConfig) -> Result<Self> {
        make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    diffuse_with(x0, schedule.alpha_bar(t), eps)
}

fn diffuse_with(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", "noise", format!("{:?}", x0.shape()), format!("{:?}", eps.shape())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Tensor::new(x0.shape(), x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect())
}

/// Pixels in `[0, 1]` to model space `[−1, 1]`.
pub fn to_model_space(pixels: &Tensor) -> Tensor {
    pixels.map(|v| 2.0 * v - 1.0)
}

/// Model space back to clamped pixels.
pub fn to_pixels(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Anything that predicts the added noise for a batch of noisy videos.
pub trait Denoiser {
    fn model_config(&self) -> &ModelConfig;
    fn predict_noise(&self, tape: &mut Tape, x_t: Var, steps: &[usize], conds: &[ConditionSet]) -> Result<Var>;
}

impl Denoiser for DragModel {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict_noise(&self, tape: &mut Tape, x_t: Var, steps: &[usize], conds: &[ConditionSet]) -> Result<Var> {
        DragModel::predict_noise(self, tape, x_t, steps, conds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DenseFlow,
    SparseTrajectory,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::DenseFlow => "dense_flow",
            Stage::SparseTrajectory => "sparse_trajectory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub drop: DropRatios,
    #[serde(default)]
    pub anchors: AnchorConfig,
    #[serde(default)]
    pub gaussian: GaussianConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Cosine-anneals the learning rate from `lr` to this value over the stage.
    #[serde(default)]
    pub final_lr: Option<f64>,
    #[serde(default)]
    pub weighting: LossWeighting,
}

impl TrainStageConfig {
    pub fn new(stage: Stage, steps: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            stage,
            steps,
            batch_size,
            lr,
            drop: DropRatios::default(),
            anchors: AnchorConfig::default(),
            gaussian: GaussianConfig::default(),
            grad_clip: Some(1.0),
            final_lr: None,
            weighting: LossWeighting::Epsilon,
        }
    }

    /// Learning rate for step `i` of the stage.
    pub fn lr_at(&self, i: usize) -> f64 {
        match self.final_lr {
            Some(end) if self.steps > 1 => {
                let p = i as f64 / (self.steps - 1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * p).cos())
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if let Some(end) = self.final_lr {
            if !(end >= 0.0 && end <= self.lr) {
                return Err(invalid!("final learning rate must lie in [0, lr], got {end}"));
            }
        }
        self.drop.validate()?;
        if self.stage == Stage::SparseTrajectory {
            self.anchors.validate()?;
        }
        Ok(())
    }
}

/// The random quantities behind one training loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    /// `[N·L, 3, H, W]` clean videos in model space.
    pub x0: Tensor,
    pub steps: Vec<usize>,
    pub noise: Tensor,
    pub conditions: Vec<ConditionSet>,
}

/// Condition for one training video: dense flow in stage one, a sampled trajectory map in stage two.
fn training_condition<R: Rng + ?Sized>(sample: &VideoSample, cfg: &TrainStageConfig, rng: &mut R) -> Result<ConditionSet> {
    let frames = sample.frames.shape()[0];
    if sample.flow.video_len() != frames || sample.flow.is_empty() {
        return Err(invalid!("sample is missing flow for its {frames} frames"));
    }
    let trajectory = match cfg.stage {
        Stage::DenseFlow => sample.flow.to_tensor(),
        Stage::SparseTrajectory => sample_trajectory_map(&sample.flow, cfg.anchors, cfg.gaussian, rng)?.to_tensor(),
    };
    ConditionSet::new(sample.tokens.clone(), sample.first_frame(), trajectory)
}

/// Draws `t`, the trajectory condition and condition drops per video, then the noise.
pub fn draw_training_inputs<R: Rng + ?Sized>(
    samples: &[VideoSample],
    cfg: &TrainStageConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossDraw> {
    if samples.is_empty() {
        return Err(invalid!("empty training batch"));
    }
    let mut steps = Vec::with_capacity(samples.len());
    let mut conditions = Vec::with_capacity(samples.len());
    for s in samples {
        steps.push(rng.random_range(1..=schedule.steps()));
        let c = training_condition(s, cfg, rng)?;
        conditions.push(drop_conditions(&c, cfg.drop, rng)?);
    }
    let x0 = Tensor::cat0(&samples.iter().map(|s| to_model_space(&s.frames)).collect::<Vec<_>>())?;
    let noise = Tensor::randn(x0.shape(), 1.0, rng);
    Ok(LossDraw {
        x0,
        steps,
        noise,
        conditions,
    })
}

/// Per-timestep weighting of the noise-matching error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain mean squared noise error.
    #[default]
    Epsilon,
    /// Noise error divided by `ᾱ_t`, which equals the velocity error and
    /// weights clean-video errors evenly across noise levels.
    Velocity,
}

/// Mean squared error between the drawn noise and the model's prediction.
pub fn denoising_loss<D: Denoiser + ?Sized>(tape: &mut Tape, model: &D, schedule: &NoiseSchedule, draw: &LossDraw) -> Result<Var> {
    weighted_denoising_loss(tape, model, schedule, draw, LossWeighting::Epsilon)
}

/// [`denoising_loss`] with a per-timestep weighting.
pub fn weighted_denoising_loss<D: Denoiser + ?Sized>(
    tape: &mut Tape,
    model: &D,
    schedule: &NoiseSchedule,
    draw: &LossDraw,
    weighting: LossWeighting,
) -> Result<Var> {
    let frames = model.model_config().frames;
    let per = draw.x0.numel() / draw.steps.len();
    let mut xt = Vec::with_capacity(draw.x0.numel());
    for (i, &t) in draw.steps.iter().enumerate() {
        schedule.check(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let span = i * per..(i + 1) * per;
        xt.extend(draw.x0.data()[span.clone()].iter().zip(&draw.noise.data()[span]).map(|(x, e)| a * x + b * e));
    }
    if draw.x0.shape()[0] != draw.steps.len() * frames {
        return Err(Error::shape("denoising_loss", "batch (axis 0)", draw.steps.len() * frames, draw.x0.shape()[0]));
    }
    let x = tape.constant(Tensor::new(draw.x0.shape(), xt)?);
    let pred = model.predict_noise(tape, x, &draw.steps, &draw.conditions)?;
    if weighting == LossWeighting::Epsilon {
        let target = tape.constant(draw.noise.clone());
        return tape.mse(pred, target);
    }
    let scale: Vec<f64> = draw.steps.iter().flat_map(|&t| std::iter::repeat_n(1.0 / schedule.alpha_bar(t).sqrt(), per)).collect();
    let target = Tensor::new(draw.noise.shape(), draw.noise.data().iter().zip(&scale).map(|(e, s)| e * s).collect())?;
    let scale = tape.constant(Tensor::new(draw.noise.shape(), scale)?);
    let pred = tape.mul(pred, scale)?;
    let target = tape.constant(target);
    tape.mse(pred, target)
}

/// A recorded loss together with the draw that produced it.
pub struct LossEval {
    pub tape: Tape,
    pub loss: Var,
    pub value: f64,
    pub draw: LossDraw,
}

fn stage_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    samples: &[VideoSample],
    model: &D,
    schedule: &NoiseSchedule,
    cfg: &TrainStageConfig,
    rng: &mut R,
) -> Result<LossEval> {
    let draw = draw_training_inputs(samples, cfg, schedule, rng)?;
    let mut tape = Tape::new();
    let loss = weighted_denoising_loss(&mut tape, model, schedule, &draw, cfg.weighting)?;
    let value = tape.value(loss).item();
    Ok(LossEval { tape, loss, value, draw })
}

/// Loss conditioned on the dense ground-truth flow.
pub fn training_loss_stage1<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    samples: &[VideoSample],
    model: &D,
    schedule: &NoiseSchedule,
    drop: DropRatios,
    rng: &mut R,
) -> Result<LossEval> {
    let cfg = TrainStageConfig {
        drop,
        ..TrainStageConfig::new(Stage::DenseFlow, 1, samples.len().max(1), 1.0)
    };
    stage_loss(samples, model, schedule, &cfg, rng)
}

/// Loss conditioned on a trajectory map sampled from the flow.
pub fn training_loss_stage2<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    samples: &[VideoSample],
    model: &D,
    schedule: &NoiseSchedule,
    anchors: AnchorConfig,
    gaussian: GaussianConfig,
    drop: DropRatios,
    rng: &mut R,
) -> Result<LossEval> {
    let cfg = TrainStageConfig {
        drop,
        anchors,
        gaussian,
        ..TrainStageConfig::new(Stage::SparseTrajectory, 1, samples.len().max(1), 1.0)
    };
    stage_loss(samples, model, schedule, &cfg, rng)
}

/// Supplies training batches by global step index.
pub trait BatchSource {
    fn batch(&mut self, step: u64, size: usize) -> Result<Vec<VideoSample>>;
}

impl BatchSource for crate::sprites::DatasetStream {
    fn batch(&mut self, step: u64, size: usize) -> Result<Vec<VideoSample>> {
        let mut out = Vec::with_capacity(size);
        let mut i = 0;
        while out.len() < size {
            out.extend(crate::sprites::DatasetStream::batch(self, step * size as u64 + i)?.samples);
            i += 1;
        }
        out.truncate(size);
        Ok(out)
    }
}

/// A fixed set of clips visited in order, wrapping around.
pub struct FixedSet {
    pub samples: Vec<VideoSample>,
}

impl BatchSource for FixedSet {
    fn batch(&mut self, step: u64, size: usize) -> Result<Vec<VideoSample>> {
        if self.samples.is_empty() {
            return Err(invalid!("fixed training set is empty"));
        }
        let n = self.samples.len() as u64;
        Ok((0..size as u64).map(|i| self.samples[((step * size as u64 + i) % n) as usize].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

/// Loss trace as CSV with header `step,stage,loss`.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,stage,loss\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.step, r.stage.name(), r.loss));
    }
    s
}

/// Runs the dense-flow stage, then the sparse-trajectory stage, with one Adam state.
///
/// `on_step` sees every record after its update and may write checkpoints.
pub fn adaptive_train(
    model: &mut DragModel,
    data: &mut dyn BatchSource,
    stage1: &TrainStageConfig,
    stage2: &TrainStageConfig,
    rng: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(&LossRecord, &DragModel) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    if stage1.stage != Stage::DenseFlow || stage2.stage != Stage::SparseTrajectory {
        return Err(invalid!("adaptive training runs the dense-flow stage before the sparse-trajectory stage"));
    }
    stage1.validate()?;
    stage2.validate()?;
    let schedule = NoiseSchedule::for_model(&model.config)?;
    let mut adam = AdamState::new(&model.params);
    let mut trace = Vec::with_capacity(stage1.steps + stage2.steps);
    let mut step = 0usize;
    for cfg in [stage1, stage2] {
        for i in 0..cfg.steps {
            let adam_cfg = AdamConfig {
                lr: cfg.lr_at(i),
                ..AdamConfig::default()
            };
            let batch = data.batch(step as u64, cfg.batch_size)?;
            let mut eval = stage_loss(&batch, &*model, &schedule, cfg, rng)?;
            if !eval.value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            model.params.zero_grad();
            eval.tape.backward(eval.loss, &mut model.params)?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model.params, max);
            }
            adam_step(&mut model.params, &mut adam, &adam_cfg)
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            let rec = LossRecord {
                step,
                stage: cfg.stage,
                loss: eval.value,
            };
            on_step(&rec, model)?;
            trace.push(rec);
            step += 1;
        }
    }
    Ok(trace)
}

/// Ancestral sampling of one video from pure noise.
///
/// With guidance `w`, `ε̂ = ε_u + w·(ε_c − ε_u)` where the unconditional
/// branch drops every control. `progress(k, T)` is called after each step.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    conds: &ConditionSet,
    schedule: &NoiseSchedule,
    rng: &mut R,
    guidance: f64,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<Tensor> {
    if !(guidance >= 0.0) || !guidance.is_finite() {
        return Err(invalid!("guidance must be a finite value >= 0, got {guidance}"));
    }
    let cfg = model.model_config();
    let shape = [cfg.frames, 3, cfg.height, cfg.width];
    let null = ConditionSet::null(cfg.frames, cfg.height, cfg.width);
    let mut x = Tensor::randn(&shape, 1.0, rng);
    let total = schedule.steps();
    let predict = |x: &Tensor, t: usize, c: &ConditionSet| -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = model.predict_noise(&mut tape, xv, &[t], std::slice::from_ref(c))?;
        Ok(tape.value(y).clone())
    };
    for t in (1..=total).rev() {
        let eps = if guidance == 0.0 {
            predict(&x, t, &null)?
        } else if guidance == 1.0 {
            predict(&x, t, conds)?
        } else {
            let u = predict(&x, t, &null)?;
            let c = predict(&x, t, conds)?;
            Tensor::new(&shape, u.data().iter().zip(c.data()).map(|(u, c)| u + guidance * (c - u)).collect())?
        };
        let (ab, ab_prev, beta, alpha) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1), schedule.beta(t), schedule.alpha(t));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xt, &e)| {
                let x0 = ((xt - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                c0 * x0 + ct * xt
            })
            .collect();
        x = Tensor::new(&shape, next)?;
        if t > 1 {
            let z = Tensor::randn(&shape, var.sqrt(), rng);
            x.data_mut().iter_mut().zip(z.data()).for_each(|(a, b)| *a += b);
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampling state at step {t}")));
        }
        progress(total - t + 1, total);
    }
    Ok(to_pixels(&x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn degenerate_and_zero_inputs() {
        let x0 = Tensor::from_fn(&[4], |i| i as f64);
        let e = Tensor::from_fn(&[4], |i| 1.0 - i as f64);
        assert_eq!(diffuse_with(&x0, 1.0, &e).unwrap(), x0);
        let s = make_schedule(10, 0.01, 0.1).unwrap();
        let z = forward_diffuse(&Tensor::zeros(&[4]), 5, &e, &s).unwrap();
        let k = (1.0 - s.alpha_bar(5)).sqrt();
        assert_eq!(z.data(), e.map(|v| k * v).data());
    }

    #[test]
    fn csv_trace() {
        let t = [LossRecord {
            step: 0,
            stage: Stage::DenseFlow,
            loss: 0.5,
        }];
        assert_eq!(loss_trace_csv(&t), "step,stage,loss\n0,dense_flow,0.5\n");
    }
}
