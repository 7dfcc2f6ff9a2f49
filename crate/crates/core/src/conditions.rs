//! Caption vocabulary, condition encoders, condition dropping and the
//! multiscale condition pyramid.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2d, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;

/// Closed word list; a token's id is its index, id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(invalid!("vocabulary needs at least the padding token"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(invalid!("vocabulary entry {i} is not a single word: {w:?}"));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(invalid!("duplicate vocabulary entry {w:?}"));
            }
        }
        Ok(Self { words, index })
    }

    /// Parses newline-separated tokens; blank lines are ignored only at the end.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.trim_end().lines().map(|l| l.trim().to_owned()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        caption
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).ok_or_else(|| invalid!("unknown caption word {w:?}")))
            .collect()
    }

    /// Like [`Vocabulary::tokenize`] but maps unknown words to padding and reports them.
    pub fn tokenize_lossy(&self, caption: &str) -> (Vec<usize>, Vec<String>) {
        let mut unknown = Vec::new();
        let ids = caption
            .split_whitespace()
            .map(|w| {
                self.id(&w.to_lowercase()).unwrap_or_else(|| {
                    unknown.push(w.to_owned());
                    PAD
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.words.get(i).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Pads with [`PAD`] or truncates to exactly `len` ids.
pub fn pad_tokens(tokens: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}

/// Learned token table plus fixed sinusoidal positions, followed by a residual
/// two-layer MLP that mixes information across token positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub mix_in: Linear,
    pub mix_out: Linear,
    pub len: usize,
    pub dim: usize,
    pub positions: bool,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        len: usize,
        dim: usize,
        positions: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size == 0 || len == 0 || dim == 0 {
            return Err(invalid!("text encoder needs positive vocab, length and width"));
        }
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab_size, dim], 1.0, rng))?;
        Ok(Self {
            table,
            mix_in: Linear::new(store, &format!("{name}.mix_in"), len, len, true, rng)?,
            mix_out: Linear::new(store, &format!("{name}.mix_out"), len, len, true, rng)?,
            len,
            dim,
            positions,
        })
    }

    fn position_table(&self) -> Vec<f64> {
        (0..self.len).flat_map(|i| sinusoidal_embedding(i as f64, self.dim)).collect()
    }

    /// Lookup plus position encoding, `[N, len, dim]`; no mixing yet.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid!("empty caption batch"));
        }
        let ids: Vec<usize> = batch.iter().flat_map(|t| pad_tokens(t, self.len)).collect();
        let table = tape.param(store, self.table);
        let e = tape.embedding(table, &ids)?;
        let e = tape.reshape(e, &[batch.len(), self.len, self.dim])?;
        if !self.positions {
            return Ok(e);
        }
        let pos = self.position_table();
        let pos = Tensor::from_fn(&[batch.len(), self.len, self.dim], |i| pos[i % pos.len()]);
        let pos = tape.constant(pos);
        tape.add(e, pos)
    }

    /// Full encoder output `[N, len, dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        let e = self.embed(tape, store, batch)?;
        let t = tape.permute(e, &[0, 2, 1])?;
        let t = self.mix_in.forward(tape, store, t)?;
        let t = tape.silu(t);
        let t = self.mix_out.forward(tape, store, t)?;
        let t = tape.permute(t, &[0, 2, 1])?;
        tape.add(e, t)
    }

    /// Embedding matrix `[len, dim]` of one caption before mixing.
    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let e = self.embed(&mut tape, store, &[tokens.to_vec()])?;
        let e = tape.reshape(e, &[self.len, self.dim])?;
        Ok(tape.value(e).clone())
    }
}

/// Per-frame convolutional encoder: a 3×3 stem, `stages` stride-2 convolutions,
/// and a 3×3 head, with SiLU between layers.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub layers: Vec<Conv2d>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stages: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = vec![Conv2d::new(store, &format!("{name}.stem"), cin, cout, 3, 1, rng)?];
        for i in 0..stages {
            layers.push(Conv2d::new(store, &format!("{name}.down.{i}"), cout, cout, 3, 2, rng)?);
        }
        layers.push(Conv2d::new(store, &format!("{name}.head"), cout, cout, 3, 1, rng)?);
        Ok(Self {
            layers,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.silu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    fn run(&self, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(x);
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Repeats the first frame `L` times and encodes every copy: `[L, c_s, h, w]`.
pub fn encode_image_condition(first_frame: &Tensor, frames: usize, encoder: &ConvEncoder, store: &ParamStore) -> Result<Tensor> {
    if frames == 0 {
        return Err(invalid!("frame count must be positive"));
    }
    if first_frame.rank() != 3 || first_frame.shape()[0] != encoder.in_channels {
        return Err(Error::shape(
            "encode_image_condition",
            "frame shape",
            format!("[{}, H, W]", encoder.in_channels),
            format!("{:?}", first_frame.shape()),
        ));
    }
    let repeated = Tensor::stack(&vec![first_frame.clone(); frames])?;
    encoder.run(store, repeated)
}

/// Prepends a zero frame to an `[L-1, 2, H, W]` map: `[L, 2, H, W]`.
pub fn pad_trajectory(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 4 {
        return Err(Error::shape("pad_trajectory", "rank", 4, map.rank()));
    }
    let s = map.shape();
    let mut data = vec![0.0; s[1] * s[2] * s[3]];
    data.extend_from_slice(map.data());
    Tensor::new(&[s[0] + 1, s[1], s[2], s[3]], data)
}

/// Zero-pads the trajectory map in front and encodes each frame: `[L, c_g, h, w]`.
pub fn encode_trajectory_condition(map: &Tensor, encoder: &ConvEncoder, store: &ParamStore) -> Result<Tensor> {
    encoder.run(store, pad_trajectory(map)?)
}

/// First-frame indicator `[1, 0, …, 0]`.
pub fn first_frame_mask(frames: usize) -> Vec<f64> {
    (0..frames).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropFlags {
    pub text: bool,
    pub image: bool,
    pub trajectory: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRatios {
    pub text: f64,
    pub image: f64,
    pub trajectory: f64,
}

impl DropRatios {
    pub const NONE: DropRatios = DropRatios::uniform(0.0);
    pub const ALL: DropRatios = DropRatios::uniform(1.0);

    pub const fn uniform(r: f64) -> Self {
        Self {
            text: r,
            image: r,
            trajectory: r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("text", self.text), ("image", self.image), ("trajectory", self.trajectory)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid!("{name} drop ratio {r} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

impl Default for DropRatios {
    fn default() -> Self {
        Self::uniform(0.1)
    }
}

/// The controls for one video, before encoding.
///
/// A dropped control holds its null value (no tokens, zero image, zero
/// trajectory) and the model replaces its encoding with exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub tokens: Vec<usize>,
    /// `[3, H, W]` first frame, pixel values in `[0, 1]`.
    pub image: Tensor,
    /// `[L-1, 2, H, W]` dense flow or enhanced trajectory map.
    pub trajectory: Tensor,
    pub mask: Vec<f64>,
    pub dropped: DropFlags,
}

impl ConditionSet {
    pub fn new(tokens: Vec<usize>, image: Tensor, trajectory: Tensor) -> Result<Self> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("ConditionSet", "image", "[3, H, W]", format!("{:?}", image.shape())));
        }
        let ts = trajectory.shape();
        if trajectory.rank() != 4 || ts[1] != 2 || ts[2..] != image.shape()[1..] {
            return Err(Error::shape(
                "ConditionSet",
                "trajectory",
                format!("[L-1, 2, {}, {}]", image.shape()[1], image.shape()[2]),
                format!("{ts:?}"),
            ));
        }
        let frames = ts[0] + 1;
        Ok(Self {
            tokens,
            image,
            trajectory,
            mask: first_frame_mask(frames),
            dropped: DropFlags::default(),
        })
    }

    /// Every control replaced by its null.
    pub fn null(frames: usize, height: usize, width: usize) -> Self {
        Self {
            tokens: Vec::new(),
            image: Tensor::zeros(&[3, height, width]),
            trajectory: Tensor::zeros(&[frames - 1, 2, height, width]),
            mask: first_frame_mask(frames),
            dropped: DropFlags {
                text: true,
                image: true,
                trajectory: true,
            },
        }
    }

    pub fn frames(&self) -> usize {
        self.mask.len()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn drop_text(&mut self) {
        self.tokens.clear();
        self.dropped.text = true;
    }

    pub fn drop_image(&mut self) {
        self.image = Tensor::zeros(self.image.shape());
        self.dropped.image = true;
    }

    pub fn drop_trajectory(&mut self) {
        self.trajectory = Tensor::zeros(self.trajectory.shape());
        self.dropped.trajectory = true;
    }
}

/// Independently replaces each control by its null with the given probability.
///
/// Always consumes exactly three uniform draws (text, image, trajectory).
pub fn drop_conditions<R: Rng + ?Sized>(conds: &ConditionSet, ratios: DropRatios, rng: &mut R) -> Result<ConditionSet> {
    ratios.validate()?;
    let draws: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut out = conds.clone();
    if draws[0] < ratios.text {
        out.drop_text();
    }
    if draws[1] < ratios.image {
        out.drop_image();
    }
    if draws[2] < ratios.trajectory {
        out.drop_trajectory();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub s: Tensor,
    pub g: Tensor,
    pub m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Checks that `h × w` halves cleanly `depths − 1` times.
pub fn check_pyramid_dims(height: usize, width: usize, depths: usize) -> Result<()> {
    if depths == 0 {
        return Err(invalid!("pyramid needs at least one level"));
    }
    let f = 1usize << (depths - 1);
    if height % f != 0 || width % f != 0 {
        return Err(invalid!("{height}x{width} is not divisible by {f} for a {depths}-level pyramid"));
    }
    Ok(())
}

/// Level `l` is the 2×2 average pool of level `l − 1`, for `[.., .., h, w]` inputs.
pub fn pool_levels(tape: &mut Tape, x: Var, depths: usize) -> Result<Vec<Var>> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape("pool_levels", "rank", ">= 2", s.len()));
    }
    check_pyramid_dims(s[s.len() - 2], s[s.len() - 1], depths)?;
    let mut out = vec![x];
    for _ in 1..depths {
        let prev = *out.last().expect("non-empty");
        out.push(tape.avg_pool2(prev)?);
    }
    Ok(out)
}

/// Average-pool pyramid of `s` and `g`; the mask is resolution-free and copied per level.
pub fn build_pyramid(s: &Tensor, g: &Tensor, m: &[f64], depths: usize) -> Result<ConditionPyramid> {
    if s.rank() != 4 || g.rank() != 4 {
        return Err(Error::shape("build_pyramid", "rank", 4, format!("{}/{}", s.rank(), g.rank())));
    }
    if s.shape()[0] != m.len() || g.shape()[0] != m.len() {
        return Err(Error::shape("build_pyramid", "frames (axis 0)", m.len(), format!("{}/{}", s.shape()[0], g.shape()[0])));
    }
    let mut tape = Tape::inference();
    let sv = tape.constant(s.clone());
    let gv = tape.constant(g.clone());
    let ss = pool_levels(&mut tape, sv, depths)?;
    let gs = pool_levels(&mut tape, gv, depths)?;
    Ok(ConditionPyramid {
        levels: ss
            .into_iter()
            .zip(gs)
            .map(|(s, g)| PyramidLevel {
                s: tape.value(s).clone(),
                g: tape.value(g).clone(),
                m: m.to_vec(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["<pad>", "red", "circle", "moves", "right"].map(String::from).to_vec()).unwrap()
    }

    #[test]
    fn tokenize_and_lossy() {
        let v = vocab();
        assert_eq!(v.tokenize("red circle moves right").unwrap(), vec![1, 2, 3, 4]);
        assert!(v.tokenize("blue circle").is_err());
        let (ids, unk) = v.tokenize_lossy("blue circle");
        assert_eq!(ids, vec![PAD, 2]);
        assert_eq!(unk, vec!["blue".to_string()]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn text_rows_are_local_before_mixing() {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "t", 5, 6, 8, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = enc.encode_text(&store, &[1, 2, 3]).unwrap();
        let b = enc.encode_text(&store, &[1, 4, 3]).unwrap();
        assert_eq!(a, enc.encode_text(&store, &[1, 2, 3]).unwrap());
        for row in 0..6 {
            let same = a.data()[row * 8..(row + 1) * 8] == b.data()[row * 8..(row + 1) * 8];
            assert_eq!(same, row != 1, "row {row}");
        }
        let empty = enc.encode_text(&store, &[]).unwrap();
        assert_eq!(empty, enc.encode_text(&store, &[PAD; 6]).unwrap());
        assert!(enc.encode_text(&store, &[9]).is_err());
    }

    #[test]
    fn null_set_equals_full_drop() {
        let c = ConditionSet::new(vec![1, 2], Tensor::full(&[3, 4, 4], 0.5), Tensor::full(&[3, 2, 4, 4], 1.0)).unwrap();
        let d = drop_conditions(&c, DropRatios::ALL, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d, ConditionSet::null(4, 4, 4));
        let k = drop_conditions(&c, DropRatios::NONE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(k, c);
    }

    #[test]
    fn pyramid_rejects_indivisible() {
        let s = Tensor::zeros(&[2, 1, 6, 6]);
        assert!(build_pyramid(&s, &s, &[1.0, 0.0], 3).is_err());
        assert_eq!(build_pyramid(&s, &s, &[1.0, 0.0], 2).unwrap().levels[1].s.shape(), &[2, 1, 3, 3]);
    }
}
