//! The noise-prediction network: a small video UNet with scale-shift condition
//! fusion at every block, prompt cross-attention and temporal self-attention.
//!
//! Videos are laid out frame-major inside the batch axis: a batch of `N`
//! videos with `L` frames is a `[N·L, C, H, W]` tensor where video `n`,
//! frame `l` sits at index `n·L + l`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conditions::{check_pyramid_dims, pad_trajectory, pool_levels, ConditionSet, ConvEncoder, TextEncoder};
use crate::error::{invalid, Error, Result};
use crate::nn::{multi_head_attention, sinusoidal_embedding, Conv2d, GroupNorm, Linear};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::trajectory::GaussianConfig;

/// Architecture and diffusion settings, stored next to checkpoints as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub cond_channels: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default = "yes")]
    pub temporal_attention: bool,
    #[serde(default = "yes")]
    pub text_positions: bool,
    /// How the UNet output becomes ε̂.
    #[serde(default)]
    pub output: NoiseOutput,
    #[serde(default)]
    pub init_seed: u64,
    /// Enhancement applied to user strokes; should match stage-2 training.
    #[serde(default = "desk_gaussian")]
    pub trajectory_gaussian: GaussianConfig,
}

/// Mapping from the raw UNet output `F` to the noise estimate ε̂.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOutput {
    /// `ε̂ = F`.
    Direct,
    /// `ε̂ = √(1−ᾱ_t)·x_t + F`: the UNet predicts what `x_t` alone does not explain.
    #[default]
    Skip,
    /// `ε̂ = √(1−ᾱ_t)·x_t + √ᾱ_t·F`: `F` is a velocity, so an output error
    /// moves the implied `x0` by at most the same amount at every step.
    Velocity,
}

fn yes() -> bool {
    true
}

fn desk_gaussian() -> GaussianConfig {
    GaussianConfig {
        kernel_size: 9,
        sigma: 1.5,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![32, 64, 128],
            frames: 8,
            height: 32,
            width: 32,
            vocab_size: crate::sprites::caption_vocabulary().len(),
            text_len: 16,
            text_dim: 64,
            cond_channels: 16,
            heads: 4,
            time_dim: 64,
            groups: 8,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            temporal_attention: true,
            text_positions: true,
            output: NoiseOutput::default(),
            init_seed: 0,
            trajectory_gaussian: desk_gaussian(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(invalid!("channels list has {} entries for {} levels", self.channels.len(), self.levels));
        }
        if self.frames < 2 {
            return Err(invalid!("need at least 2 frames"));
        }
        check_pyramid_dims(self.height, self.width, self.levels)?;
        if self.heads == 0 || self.channels.iter().any(|c| c % self.heads != 0) {
            return Err(invalid!("every level width must be divisible by {} heads", self.heads));
        }
        if self.vocab_size == 0 || self.text_len == 0 || self.text_dim == 0 || self.cond_channels == 0 || self.time_dim < 2 {
            return Err(invalid!("model dimensions must be positive"));
        }
        if self.timesteps == 0 {
            return Err(invalid!("timesteps must be positive"));
        }
        self.trajectory_gaussian.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Zero-initialized 1×1 projections producing a scale and a shift from each condition.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub s_scale: Conv2d,
    pub s_shift: Conv2d,
    pub m_scale: Conv2d,
    pub m_shift: Conv2d,
    pub g_scale: Conv2d,
    pub g_shift: Conv2d,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, name: &str, cs: usize, cg: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            s_scale: Conv2d::zero_1x1(store, &format!("{name}.s_scale"), cs, channels)?,
            s_shift: Conv2d::zero_1x1(store, &format!("{name}.s_shift"), cs, channels)?,
            m_scale: Conv2d::zero_1x1(store, &format!("{name}.m_scale"), 1, channels)?,
            m_shift: Conv2d::zero_1x1(store, &format!("{name}.m_shift"), 1, channels)?,
            g_scale: Conv2d::zero_1x1(store, &format!("{name}.g_scale"), cg, channels)?,
            g_shift: Conv2d::zero_1x1(store, &format!("{name}.g_shift"), cg, channels)?,
        })
    }
}

fn scale_shift(tape: &mut Tape, store: &ParamStore, h: Var, c: Var, scale: &Conv2d, shift: &Conv2d) -> Result<Var> {
    let w = scale.forward(tape, store, c)?;
    let b = shift.forward(tape, store, c)?;
    let wh = tape.mul(w, h)?;
    let t = tape.add(wh, b)?;
    tape.add(t, h)
}

/// `h ← w·h + b + h` for the image condition, then the mask, then the trajectory.
pub fn fuse_scale_shift(tape: &mut Tape, store: &ParamStore, h: Var, s: Var, m: Var, g: Var, layer: &FusionLayer) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    for (name, c) in [("s", s), ("m", m), ("g", g)] {
        let cs = tape.shape(c);
        if cs.len() != 4 || cs[0] != hs[0] || cs[2..] != hs[2..] {
            return Err(Error::shape(
                "fuse_scale_shift",
                format!("condition {name} batch/spatial axes"),
                format!("[{}, _, {}, {}]", hs[0], hs[2], hs[3]),
                format!("{cs:?}"),
            ));
        }
    }
    let h = scale_shift(tape, store, h, s, &layer.s_scale, &layer.s_shift)?;
    let h = scale_shift(tape, store, h, m, &layer.m_scale, &layer.m_shift)?;
    scale_shift(tape, store, h, g, &layer.g_scale, &layer.g_shift)
}

/// Spatial positions of the hidden state attend over the caption tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, text_dim: usize, heads: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups)?,
            q: Linear::new(store, &format!("{name}.q"), channels, channels, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), text_dim, channels, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), text_dim, channels, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), channels, channels, true, rng)?,
            heads,
        })
    }
}

/// `[B, C, H, W] → [B, H·W, C]`.
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(t, &[0, 2, 1])
}

fn from_tokens(tape: &mut Tape, t: Var, shape: &[usize]) -> Result<Var> {
    let x = tape.permute(t, &[0, 2, 1])?;
    tape.reshape(x, shape)
}

/// `h + out(attention(q(norm h), k(p), v(p)))` with `p: [B, l_p, c_p]` aligned to `h: [B, C, H, W]`.
pub fn prompt_cross_attention(tape: &mut Tape, store: &ParamStore, h: Var, p: Var, layer: &CrossAttention) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let n = layer.norm.forward(tape, store, h)?;
    let tokens = to_tokens(tape, n)?;
    let q = layer.q.forward(tape, store, tokens)?;
    let k = layer.k.forward(tape, store, p)?;
    let v = layer.v.forward(tape, store, p)?;
    let a = multi_head_attention(tape, q, k, v, layer.heads)?;
    let o = layer.out.forward(tape, store, a)?;
    let o = from_tokens(tape, o, &hs)?;
    tape.add(h, o)
}

/// Self-attention across the frames of each video at every spatial position.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups)?,
            q: Linear::new(store, &format!("{name}.q"), channels, channels, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), channels, channels, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), channels, channels, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), channels, channels, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, frames: usize) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if b % frames != 0 {
            return Err(Error::shape("temporal_attention", "batch (axis 0)", format!("multiple of {frames}"), b));
        }
        let n = b / frames;
        let x = self.norm.forward(tape, store, h)?;
        let x = tape.reshape(x, &[n, frames, c, hw])?;
        let x = tape.permute(x, &[0, 3, 1, 2])?;
        let x = tape.reshape(x, &[n * hw, frames, c])?;
        let pos: Vec<f64> = (0..frames).flat_map(|f| sinusoidal_embedding(f as f64, c)).collect();
        let pos = tape.constant(Tensor::from_fn(&[n * hw, frames, c], |i| pos[i % pos.len()]));
        let x = tape.add(x, pos)?;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let a = multi_head_attention(tape, q, k, v, self.heads)?;
        let o = self.out.forward(tape, store, a)?;
        let o = tape.reshape(o, &[n, hw, frames, c])?;
        let o = tape.permute(o, &[0, 2, 3, 1])?;
        let o = tape.reshape(o, &s)?;
        tape.add(h, o)
    }
}

/// GroupNorm → SiLU → conv → time shift → GroupNorm → SiLU → conv, plus a residual.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, time_dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, cout, true, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng)?,
            skip: if cin != cout {
                Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)?)
            } else {
                None
            },
        })
    }

    /// `temb` is the activated per-frame time embedding `[B, time_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h)?;
        let t = self.time.forward(tape, store, temb)?;
        let h = tape.add_channel(h, t)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// One resolution level: residual block, condition fusion, cross-attention,
/// and (on the way down) temporal attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub res: ResBlock,
    pub fusion: FusionLayer,
    pub cross: CrossAttention,
    pub temporal: Option<TemporalAttention>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub conv_in: Conv2d,
    pub time_in: Linear,
    pub time_out: Linear,
    pub down: Vec<Block>,
    pub mid: ResBlock,
    pub mid_temporal: Option<TemporalAttention>,
    pub up: Vec<Block>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

/// Per-level condition tensors already aligned with the `[N·L, ·, h, w]` hidden state.
#[derive(Clone, Debug)]
pub struct FusedLevel {
    pub s: Var,
    pub m: Var,
    pub g: Var,
}

/// Everything the UNet needs besides `x_t`.
#[derive(Clone, Debug)]
pub struct EncodedConditions {
    pub levels: Vec<FusedLevel>,
    /// `[N·L, l_p, c_p]`.
    pub text: Var,
    /// `[N·L, time_dim]`, already passed through SiLU.
    pub time: Var,
}

impl UNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ch = &cfg.channels;
        let (cs, td, g, heads) = (cfg.cond_channels, cfg.time_dim, cfg.groups, cfg.heads);
        let temporal = |store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng| -> Result<Option<TemporalAttention>> {
            if cfg.temporal_attention {
                Ok(Some(TemporalAttention::new(store, name, c, heads, g, rng)?))
            } else {
                Ok(None)
            }
        };
        let conv_in = Conv2d::new(store, "unet.conv_in", 3, ch[0], 3, 1, rng)?;
        let time_in = Linear::new(store, "unet.time_in", td, td, true, rng)?;
        let time_out = Linear::new(store, "unet.time_out", td, td, true, rng)?;
        let mut down = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            let name = format!("unet.down.{l}");
            down.push(Block {
                res: ResBlock::new(store, &format!("{name}.res"), cin, c, td, g, rng)?,
                fusion: FusionLayer::new(store, &format!("{name}.fusion"), cs, cs, c)?,
                cross: CrossAttention::new(store, &format!("{name}.cross"), c, cfg.text_dim, heads, g, rng)?,
                temporal: temporal(store, &format!("{name}.temporal"), c, rng)?,
            });
        }
        let last = *ch.last().expect("validated");
        let mid = ResBlock::new(store, "unet.mid.res", last, last, td, g, rng)?;
        let mid_temporal = temporal(store, "unet.mid.temporal", last, rng)?;
        let mut up = Vec::new();
        for l in (0..ch.len()).rev() {
            let below = if l + 1 < ch.len() { ch[l + 1] } else { last };
            let name = format!("unet.up.{l}");
            up.push(Block {
                res: ResBlock::new(store, &format!("{name}.res"), below + ch[l], ch[l], td, g, rng)?,
                fusion: FusionLayer::new(store, &format!("{name}.fusion"), cs, cs, ch[l])?,
                cross: CrossAttention::new(store, &format!("{name}.cross"), ch[l], cfg.text_dim, heads, g, rng)?,
                temporal: None,
            });
        }
        Ok(Self {
            conv_in,
            time_in,
            time_out,
            down,
            mid,
            mid_temporal,
            up,
            norm_out: GroupNorm::new(store, "unet.norm_out", ch[0], g)?,
            conv_out: Conv2d::new(store, "unet.conv_out", ch[0], 3, 3, 1, rng)?,
        })
    }

    /// Sinusoidal timestep features through a two-layer MLP, then SiLU: `[N, time_dim]`.
    pub fn time_embedding(&self, tape: &mut Tape, store: &ParamStore, steps: &[usize], dim: usize) -> Result<Var> {
        let feats: Vec<f64> = steps.iter().flat_map(|&t| sinusoidal_embedding(t as f64, dim)).collect();
        let x = tape.constant(Tensor::new(&[steps.len(), dim], feats)?);
        let x = self.time_in.forward(tape, store, x)?;
        let x = tape.silu(x);
        let x = self.time_out.forward(tape, store, x)?;
        Ok(tape.silu(x))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, conds: &EncodedConditions, frames: usize) -> Result<Var> {
        if conds.levels.len() != self.down.len() {
            return Err(Error::shape("unet_forward", "pyramid levels", self.down.len(), conds.levels.len()));
        }
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(Error::shape("unet_forward", "input", "[N·L, 3, H, W]", format!("{xs:?}")));
        }
        let mut h = self.conv_in.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, block) in self.down.iter().enumerate() {
            if l > 0 {
                h = tape.avg_pool2(h)?;
            }
            h = block.res.forward(tape, store, h, conds.time)?;
            let c = &conds.levels[l];
            h = fuse_scale_shift(tape, store, h, c.s, c.m, c.g, &block.fusion)?;
            h = prompt_cross_attention(tape, store, h, conds.text, &block.cross)?;
            if let Some(t) = &block.temporal {
                h = t.forward(tape, store, h, frames)?;
            }
            skips.push(h);
        }
        h = self.mid.forward(tape, store, h, conds.time)?;
        if let Some(t) = &self.mid_temporal {
            h = t.forward(tape, store, h, frames)?;
        }
        for (i, block) in self.up.iter().enumerate() {
            let l = self.down.len() - 1 - i;
            if i > 0 {
                h = tape.upsample2(h)?;
            }
            h = tape.concat(&[h, skips[l]], 1)?;
            h = block.res.forward(tape, store, h, conds.time)?;
            let c = &conds.levels[l];
            h = fuse_scale_shift(tape, store, h, c.s, c.m, c.g, &block.fusion)?;
            h = prompt_cross_attention(tape, store, h, conds.text, &block.cross)?;
        }
        let h = self.norm_out.forward(tape, store, h)?;
        let h = tape.silu(h);
        self.conv_out.forward(tape, store, h)
    }
}

/// Complete denoiser: text, image and trajectory encoders plus the UNet.
#[derive(Clone, Debug)]
pub struct DragModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub image: ConvEncoder,
    pub trajectory: ConvEncoder,
    pub unet: UNet,
}

fn per_video_keep(tape: &mut Tape, keep: &[bool], frames: usize, channels: usize) -> Var {
    let data: Vec<f64> = keep
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, frames * channels))
        .collect();
    tape.constant(Tensor::new(&[keep.len() * frames, channels], data).expect("sized"))
}

impl DragModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, "text", config.vocab_size, config.text_len, config.text_dim, config.text_positions, &mut rng)?;
        let image = ConvEncoder::new(&mut params, "image_encoder", 3, config.cond_channels, 0, &mut rng)?;
        let trajectory = ConvEncoder::new(&mut params, "trajectory_encoder", 2, config.cond_channels, 0, &mut rng)?;
        let unet = UNet::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            text,
            image,
            trajectory,
            unet,
        })
    }

    /// Rebuilds a model from a config and a checkpoint written by [`crate::checkpoint`].
    pub fn load(config: ModelConfig, checkpoint: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        crate::checkpoint::load(&mut m.params, checkpoint)?;
        Ok(m)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn check_conditions(&self, conds: &[ConditionSet]) -> Result<()> {
        let c = &self.config;
        for (i, cs) in conds.iter().enumerate() {
            if cs.frames() != c.frames || cs.height() != c.height || cs.width() != c.width {
                return Err(Error::shape(
                    "predict_noise",
                    format!("conditions of video {i}"),
                    format!("{} frames at {}x{}", c.frames, c.width, c.height),
                    format!("{} frames at {}x{}", cs.frames(), cs.width(), cs.height()),
                ));
            }
        }
        Ok(())
    }

    /// Encodes the controls of `N` videos and aligns them with the `[N·L, ...]` hidden layout.
    pub fn encode_conditions(&self, tape: &mut Tape, conds: &[ConditionSet], steps: &[usize]) -> Result<EncodedConditions> {
        self.check_conditions(conds)?;
        if steps.len() != conds.len() {
            return Err(Error::shape("encode_conditions", "timesteps", conds.len(), steps.len()));
        }
        let c = &self.config;
        let (n, l, h, w, cs) = (conds.len(), c.frames, c.height, c.width, c.cond_channels);
        let store = &self.params;

        // The image encoder is per-frame and deterministic, so encoding the
        // first frame once and repeating it equals encoding L copies.
        let s = if conds.iter().all(|x| x.dropped.image) {
            tape.constant(Tensor::zeros(&[n * l, cs, h, w]))
        } else {
            let imgs = Tensor::stack(&conds.iter().map(|x| x.image.clone()).collect::<Vec<_>>())?;
            let imgs = tape.constant(imgs);
            let e = self.image.forward(tape, store, imgs)?;
            let e = tape.repeat_batch(e, l)?;
            let keep: Vec<bool> = conds.iter().map(|x| !x.dropped.image).collect();
            if keep.iter().all(|&k| k) {
                e
            } else {
                let k = per_video_keep(tape, &keep, l, cs);
                tape.mul_channel(e, k)?
            }
        };
        let g = if conds.iter().all(|x| x.dropped.trajectory) {
            tape.constant(Tensor::zeros(&[n * l, cs, h, w]))
        } else {
            let padded = conds.iter().map(|x| pad_trajectory(&x.trajectory)).collect::<Result<Vec<_>>>()?;
            let t = tape.constant(Tensor::cat0(&padded)?);
            let e = self.trajectory.forward(tape, store, t)?;
            let keep: Vec<bool> = conds.iter().map(|x| !x.dropped.trajectory).collect();
            if keep.iter().all(|&k| k) {
                e
            } else {
                let k = per_video_keep(tape, &keep, l, cs);
                tape.mul_channel(e, k)?
            }
        };
        let mask: Vec<f64> = conds.iter().flat_map(|x| x.mask.iter().flat_map(|&m| std::iter::repeat_n(m, h * w))).collect();
        let m = tape.constant(Tensor::new(&[n * l, 1, h, w], mask)?);

        let ss = pool_levels(tape, s, c.levels)?;
        let gs = pool_levels(tape, g, c.levels)?;
        let ms = pool_levels(tape, m, c.levels)?;
        let levels = (0..c.levels)
            .map(|i| FusedLevel {
                s: ss[i],
                m: ms[i],
                g: gs[i],
            })
            .collect();

        let tokens: Vec<Vec<usize>> = conds.iter().map(|x| if x.dropped.text { Vec::new() } else { x.tokens.clone() }).collect();
        let text = self.text.forward(tape, store, &tokens)?;
        let text = tape.repeat_batch(text, l)?;

        for &t in steps {
            if t == 0 || t > c.timesteps {
                return Err(invalid!("timestep {t} outside 1..={}", c.timesteps));
            }
        }
        // Schedule step t in 1..=T is embedded as index t − 1 in [0, T).
        let idx: Vec<usize> = steps.iter().map(|t| t - 1).collect();
        let time = self.unet.time_embedding(tape, store, &idx, c.time_dim)?;
        let time = tape.repeat_batch(time, l)?;
        Ok(EncodedConditions { levels, text, time })
    }

    /// ε̂ for `x_t: [N·L, 3, H, W]` with one timestep and condition set per video.
    pub fn predict_noise(&self, tape: &mut Tape, x_t: Var, steps: &[usize], conds: &[ConditionSet]) -> Result<Var> {
        let xs = tape.shape(x_t).to_vec();
        let c = &self.config;
        let want = [conds.len() * c.frames, 3, c.height, c.width];
        if xs != want {
            return Err(Error::shape("predict_noise", "x_t", format!("{want:?}"), format!("{xs:?}")));
        }
        let enc = self.encode_conditions(tape, conds, steps)?;
        let out = self.unet.forward(tape, &self.params, x_t, &enc, c.frames)?;
        if c.output == NoiseOutput::Direct {
            return Ok(out);
        }
        let schedule = crate::diffusion::NoiseSchedule::for_model(c)?;
        let per = xs[1] * xs[2] * xs[3] * c.frames;
        let per_step = |f: fn(f64) -> f64| -> Result<Tensor> {
            Tensor::new(&xs, steps.iter().flat_map(|&t| std::iter::repeat_n(f(schedule.alpha_bar(t)), per)).collect())
        };
        let skip_scale = tape.constant(per_step(|ab| (1.0 - ab).sqrt())?);
        let skip = tape.mul(x_t, skip_scale)?;
        let out = if c.output == NoiseOutput::Velocity {
            let out_scale = tape.constant(per_step(|ab| ab.sqrt())?);
            tape.mul(out, out_scale)?
        } else {
            out
        };
        tape.add(out, skip)
    }

    /// Inference-only ε̂ as a tensor.
    pub fn predict_noise_tensor(&self, x_t: &Tensor, steps: &[usize], conds: &[ConditionSet]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(x_t.clone());
        let y = self.predict_noise(&mut tape, x, steps, conds)?;
        Ok(tape.value(y).clone())
    }
}
