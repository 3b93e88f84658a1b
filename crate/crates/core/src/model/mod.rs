//! A small randomly initialised latent video denoiser with the attention
//! layout of a text-to-video UNet: per-frame spatial blocks with text
//! cross-attention at every resolution and one temporal attention block at
//! the bottleneck.
//!
//! The noise prediction is `sqrt(1 - a_t) z + residual_scale * net(z)`. The
//! first term is the exact posterior-mean noise for a standard-normal data
//! prior, so a sampling run keeps latents at unit scale even though the
//! network weights are untrained.

mod ddim;
mod maps;
mod stub;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, field};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::syntax::TokenSequence;

pub use ddim::{ddim_step, predict_x0, DdimSchedule, LatentState, BETA_END, BETA_START, TRAIN_TIMESTEPS};
pub use maps::{CAMapStack, CaLayer, CaVar, TAMap};
pub use stub::LinearAttentionStub;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub frames: usize,
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub down_grid: (usize, usize),
    pub mid_grid: (usize, usize),
    pub up_grid: (usize, usize),
    pub max_tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
    /// Layer returned by [`ToyModel::denoise_step`].
    pub capture: CaLayer,
    /// Multiplier on the scaled dot-product cross-attention logits.
    pub attn_gain: f64,
    /// Multiplier on the pooled latent before the input projection.
    pub input_gain: f64,
    pub residual_scale: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            latent_channels: 4,
            latent_h: 16,
            latent_w: 16,
            down_grid: (8, 8),
            mid_grid: (4, 4),
            up_grid: (8, 8),
            max_tokens: 16,
            dim: 32,
            heads: 2,
            seed: 0,
            capture: CaLayer::DownUp,
            attn_gain: 2.0,
            input_gain: 8.0,
            residual_scale: 0.2,
        }
    }
}

fn grid(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Input(format!("invalid grid {value:?} for {key}, expected HxW")))?;
    Ok((field(key, h.trim())?, field(key, w.trim())?))
}

impl ToyModelConfig {
    /// A reduced configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            latent_channels: 2,
            latent_h: 8,
            latent_w: 8,
            down_grid: (4, 4),
            mid_grid: (2, 2),
            up_grid: (4, 4),
            dim: 8,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "frames" => self.frames = field(key, value)?,
            "latent_channels" => self.latent_channels = field(key, value)?,
            "latent_grid" => (self.latent_h, self.latent_w) = grid(key, value)?,
            "down_grid" => self.down_grid = grid(key, value)?,
            "mid_grid" => self.mid_grid = grid(key, value)?,
            "up_grid" => self.up_grid = grid(key, value)?,
            "max_tokens" => self.max_tokens = field(key, value)?,
            "dim" => self.dim = field(key, value)?,
            "heads" => self.heads = field(key, value)?,
            "seed" => self.seed = field(key, value)?,
            "capture" => self.capture = value.parse()?,
            "attn_gain" => self.attn_gain = field(key, value)?,
            "input_gain" => self.input_gain = field(key, value)?,
            "residual_scale" => self.residual_scale = field(key, value)?,
            _ => return Err(Error::Input(format!("unknown model config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        config::apply_file(text, |k, v| cfg.set(k, v))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.frames == 0 || self.latent_channels == 0 || self.dim == 0 || self.heads == 0 {
            return bad("frames, latent_channels, dim and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        let divides = |(h, w): (usize, usize), (sh, sw): (usize, usize)| h > 0 && w > 0 && sh % h == 0 && sw % w == 0;
        let latent = (self.latent_h, self.latent_w);
        if !divides(self.down_grid, latent) {
            return bad(format!("down grid {:?} must divide the latent grid {latent:?}", self.down_grid));
        }
        if !divides(self.mid_grid, self.down_grid) {
            return bad(format!("mid grid {:?} must divide the down grid {:?}", self.mid_grid, self.down_grid));
        }
        if self.up_grid != self.down_grid {
            return bad(format!("up grid {:?} must equal the down grid {:?}", self.up_grid, self.down_grid));
        }
        if self.max_tokens < 3 {
            return bad("max_tokens must leave room for the begin/end tokens".into());
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.latent_channels, self.latent_h, self.latent_w]
    }

    pub fn grid_of(&self, layer: CaLayer) -> (usize, usize) {
        match layer {
            CaLayer::Down | CaLayer::DownUp => self.down_grid,
            CaLayer::Mid => self.mid_grid,
            CaLayer::Up => self.up_grid,
        }
    }
}

/// Text-encoder output `[max_tokens, dim]`. Row 0 is the begin token, rows
/// `1..=words` hold the prompt words, then the end token and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub emb: Tensor,
    pub words: usize,
}

impl TextEmbedding {
    pub const TOKEN_OFFSET: usize = 1;
}

struct CrossAttention {
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Vec<Tensor>,
}

struct Temporal {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    frame_pos: Tensor,
}

/// Output of one differentiable forward pass.
pub struct ModelOutput<'t> {
    pub noise: Var<'t>,
    pub down: CaVar<'t>,
    pub mid: CaVar<'t>,
    pub up: CaVar<'t>,
    /// `[N_mid, F, F]`
    pub temporal: Var<'t>,
}

impl<'t> ModelOutput<'t> {
    /// Head-averaged cross-attention of `layer`; [`CaLayer::DownUp`] is the
    /// mean of the down and up maps.
    pub fn ca(&self, layer: CaLayer) -> Result<CaVar<'t>> {
        match layer {
            CaLayer::Down => Ok(self.down),
            CaLayer::Mid => Ok(self.mid),
            CaLayer::Up => Ok(self.up),
            CaLayer::DownUp => Ok(CaVar {
                maps: self.down.maps.add(self.up.maps)?.scale(0.5)?,
                ..self.down
            }),
        }
    }
}

pub struct ToyModel {
    config: ToyModelConfig,
    w_in: Tensor,
    pos_down: Tensor,
    ca_down: CrossAttention,
    w_mid: Tensor,
    pos_mid: Tensor,
    ca_mid: CrossAttention,
    temporal: Temporal,
    w_up: Tensor,
    ca_up: CrossAttention,
    w_out: Tensor,
    /// Pooling / upsampling operators, stored transposed for right-multiplication.
    pool_in_t: Tensor,
    pool_mid_t: Tensor,
    unpool_mid_t: Tensor,
    unpool_out_t: Tensor,
    text_pos: Tensor,
    special: [Tensor; 3],
}

/// `[dst_h * dst_w, src_h * src_w]` block averaging (dst coarser than src).
fn pool_matrix(src: (usize, usize), dst: (usize, usize)) -> Tensor {
    let (fy, fx) = (src.0 / dst.0, src.1 / dst.1);
    let weight = 1.0 / (fy * fx) as f64;
    let mut data = vec![0.0; dst.0 * dst.1 * src.0 * src.1];
    for r in 0..src.0 {
        for c in 0..src.1 {
            let d = (r / fy) * dst.1 + c / fx;
            data[d * src.0 * src.1 + r * src.1 + c] = weight;
        }
    }
    Tensor::new(&[dst.0 * dst.1, src.0 * src.1], data)
        .and_then(|t| t.transpose2d())
        .expect("sizes agree by construction")
}

/// `[dst_h * dst_w, src_h * src_w]` nearest-neighbour upsampling.
fn unpool_matrix(src: (usize, usize), dst: (usize, usize)) -> Tensor {
    let (fy, fx) = (dst.0 / src.0, dst.1 / src.1);
    let mut data = vec![0.0; dst.0 * dst.1 * src.0 * src.1];
    for r in 0..dst.0 {
        for c in 0..dst.1 {
            let s = (r / fy) * src.1 + c / fx;
            data[(r * dst.1 + c) * src.0 * src.1 + s] = 1.0;
        }
    }
    Tensor::new(&[dst.0 * dst.1, src.0 * src.1], data)
        .and_then(|t| t.transpose2d())
        .expect("sizes agree by construction")
}

/// Smooth positional features `[h * w, dim]`: random low-frequency
/// sinusoids over the unit square, RMS 0.5 per channel.
fn grid_features(grid: (usize, usize), dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let freq = Normal::new(0.0, 1.0).expect("valid normal");
    let channels: Vec<(f64, f64, f64)> = (0..dim)
        .map(|_| (freq.sample(rng), freq.sample(rng), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let (h, w) = grid;
    let mut data = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
            for &(a, b, phase) in &channels {
                data.push(0.5 * std::f64::consts::SQRT_2 * (std::f64::consts::TAU * (a * y + b * x) + phase).sin());
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("sizes agree by construction")
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Sinusoidal embedding of a training timestep.
fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        data[k] = 0.5 * (t as f64 * freq).sin();
        data[k + half] = 0.5 * (t as f64 * freq).cos();
    }
    Tensor::from_vec(data)
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let dh = d / config.heads;
        let c = config.latent_channels;
        let latent = (config.latent_h, config.latent_w);
        let mut lin = |fan_in: usize, fan_out: usize| Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), &mut rng);

        let cross = |lin: &mut dyn FnMut(usize, usize) -> Tensor| CrossAttention {
            wq: (0..config.heads).map(|_| lin(d, dh)).collect(),
            wk: (0..config.heads).map(|_| lin(d, dh)).collect(),
            wv: (0..config.heads).map(|_| lin(d, dh)).collect(),
            wo: (0..config.heads).map(|_| lin(dh, d)).collect(),
        };
        let w_in = lin(c, d);
        let ca_down = cross(&mut lin);
        let w_mid = lin(d, d);
        let ca_mid = cross(&mut lin);
        let temporal_w = [lin(d, d), lin(d, d), lin(d, d), lin(d, d)];
        let w_up = lin(d, d);
        let ca_up = cross(&mut lin);
        let w_out = lin(d, c);

        let [tq, tk, tv, to] = temporal_w;
        let pos_down = grid_features(config.down_grid, d, &mut rng);
        let pos_mid = grid_features(config.mid_grid, d, &mut rng);
        let frame_pos = Tensor::randn(&[config.frames, d], 0.5, &mut rng);
        let text_pos = Tensor::randn(&[config.max_tokens, d], 0.3, &mut rng);
        let special = [
            Tensor::randn(&[d], 1.0, &mut rng),
            Tensor::randn(&[d], 1.0, &mut rng),
            Tensor::randn(&[d], 1.0, &mut rng),
        ];

        Ok(Self {
            pool_in_t: pool_matrix(latent, config.down_grid),
            pool_mid_t: pool_matrix(config.down_grid, config.mid_grid),
            unpool_mid_t: unpool_matrix(config.mid_grid, config.up_grid),
            unpool_out_t: unpool_matrix(config.up_grid, latent),
            config,
            w_in,
            pos_down,
            ca_down,
            w_mid,
            pos_mid,
            ca_mid,
            temporal: Temporal {
                wq: tq,
                wk: tk,
                wv: tv,
                wo: to,
                frame_pos,
            },
            w_up,
            ca_up,
            w_out,
            text_pos,
            special,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Seeded lookup embedding: each word's row depends only on its text,
    /// its position and the model seed.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        let (l, d) = (self.config.max_tokens, self.config.dim);
        let words = tokens.len();
        if words + 2 > l {
            return Err(Error::Input(format!(
                "prompt has {words} words; at most {} fit in {l} token slots",
                l - 2
            )));
        }
        let [bos, eos, pad] = &self.special;
        let mut data = Vec::with_capacity(l * d);
        for row in 0..l {
            let base: Vec<f64> = if row == 0 {
                bos.data().to_vec()
            } else if row <= words {
                let text = &tokens.tokens()[row - 1].text;
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text) ^ self.config.seed.rotate_left(32));
                Tensor::randn(&[d], 1.0, &mut rng).into_data()
            } else if row == words + 1 {
                eos.data().to_vec()
            } else {
                pad.data().to_vec()
            };
            let pos = &self.text_pos.data()[row * d..(row + 1) * d];
            data.extend(base.iter().zip(pos).map(|(b, p)| b + p));
        }
        Ok(TextEmbedding {
            emb: Tensor::new(&[l, d], data)?,
            words,
        })
    }

    fn cross_attention<'t>(
        &self,
        block: &CrossAttention,
        h: Var<'t>,
        grid: (usize, usize),
        text: &TextEmbedding,
    ) -> Result<(Var<'t>, CaVar<'t>)> {
        let tape = h.tape();
        let shape = h.shape();
        let (f, n, d) = (shape[0], shape[1], shape[2]);
        let l = text.emb.shape()[0];
        let dh = d / self.config.heads;
        let gain = self.config.attn_gain / (dh as f64).sqrt();
        let rows = h.reshape(&[f * n, d])?;
        let mut out: Option<Var<'t>> = None;
        let mut attn_sum: Option<Var<'t>> = None;
        for head in 0..self.config.heads {
            let k_t = text.emb.matmul(&block.wk[head])?.transpose2d()?;
            let v = text.emb.matmul(&block.wv[head])?;
            let q = rows.matmul(tape.constant(block.wq[head].clone()))?;
            let attn = q.matmul(tape.constant(k_t))?.scale(gain)?.softmax_lastdim()?;
            let o = attn
                .matmul(tape.constant(v))?
                .matmul(tape.constant(block.wo[head].clone()))?;
            out = Some(match out {
                Some(acc) => acc.add(o)?,
                None => o,
            });
            attn_sum = Some(match attn_sum {
                Some(acc) => acc.add(attn)?,
                None => attn,
            });
        }
        let (out, attn_sum) = (out.expect("heads > 0"), attn_sum.expect("heads > 0"));
        let h = rows.add(out)?.reshape(&[f, n, d])?;
        let maps = attn_sum.scale(1.0 / self.config.heads as f64)?.reshape(&[f, n, l])?;
        Ok((
            h,
            CaVar {
                maps,
                grid_h: grid.0,
                grid_w: grid.1,
                token_offset: TextEmbedding::TOKEN_OFFSET,
            },
        ))
    }

    /// Applies a `[N_src, N_dst]` spatial operator to `x: [F, N_src, ch]`.
    fn resample<'t>(x: Var<'t>, op_t: &Tensor) -> Result<Var<'t>> {
        let shape = x.shape();
        let (f, n, ch) = (shape[0], shape[1], shape[2]);
        let dst = op_t.shape()[1];
        x.permute(&[0, 2, 1])?
            .reshape(&[f * ch, n])?
            .matmul(x.tape().constant(op_t.clone()))?
            .reshape(&[f, ch, dst])?
            .permute(&[0, 2, 1])
    }

    fn dense<'t>(x: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
        let shape = x.shape();
        let (f, n, d) = (shape[0], shape[1], shape[2]);
        x.reshape(&[f * n, d])?
            .matmul(x.tape().constant(w.clone()))?
            .reshape(&[f, n, w.shape()[1]])
    }

    fn temporal_attention<'t>(&self, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = h.tape();
        let shape = h.shape();
        let (f, n, d) = (shape[0], shape[1], shape[2]);
        let t = &self.temporal;
        // [N, F, d] so every pixel attends over its own frames
        let x = h.permute(&[1, 0, 2])?.add(tape.constant(t.frame_pos.clone()))?;
        let proj = |w: &Tensor| -> Result<Var<'t>> {
            x.reshape(&[n * f, d])?
                .matmul(tape.constant(w.clone()))?
                .reshape(&[n, f, d])
        };
        let (q, k, v) = (proj(&t.wq)?, proj(&t.wk)?, proj(&t.wv)?);
        let attn = q
            .batch_matmul(k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (d as f64).sqrt())?
            .softmax_lastdim()?;
        let out = attn
            .batch_matmul(v)?
            .reshape(&[n * f, d])?
            .matmul(tape.constant(t.wo.clone()))?
            .reshape(&[n, f, d])?
            .permute(&[1, 0, 2])?;
        Ok((h.add(out)?, attn))
    }

    /// Differentiable noise prediction for sampler step `step`.
    pub fn forward<'t>(
        &self,
        z: Var<'t>,
        step: usize,
        schedule: &DdimSchedule,
        text: &TextEmbedding,
    ) -> Result<ModelOutput<'t>> {
        let cfg = &self.config;
        let expected = cfg.latent_shape();
        if z.shape() != expected {
            return Err(Error::dim("toy_model", &z.shape(), &expected));
        }
        if text.emb.shape() != [cfg.max_tokens, cfg.dim] {
            return Err(Error::dim("toy_model text", text.emb.shape(), &[cfg.max_tokens, cfg.dim]));
        }
        let tape = z.tape();
        let [f, c, lh, lw] = expected;
        let alpha_bar = schedule.alpha_bar(step)?;
        let temb = tape.constant(timestep_embedding(schedule.train_timestep(step)?, cfg.dim));

        let pixels = z.reshape(&[f, c, lh * lw])?.permute(&[0, 2, 1])?;
        let x = Self::resample(pixels, &self.pool_in_t)?.scale(cfg.input_gain)?;
        let h = Self::dense(x, &self.w_in)?
            .add(tape.constant(self.pos_down.clone()))?
            .add(temb)?
            .tanh()?;
        let (skip, down) = self.cross_attention(&self.ca_down, h, cfg.down_grid, text)?;

        let m = Self::resample(skip, &self.pool_mid_t)?;
        let m = Self::dense(m, &self.w_mid)?
            .add(tape.constant(self.pos_mid.clone()))?
            .tanh()?;
        let (m, mid) = self.cross_attention(&self.ca_mid, m, cfg.mid_grid, text)?;
        let (m, temporal) = self.temporal_attention(m)?;

        let u = Self::resample(m, &self.unpool_mid_t)?.add(skip)?;
        let u = Self::dense(u, &self.w_up)?.tanh()?;
        let (u, up) = self.cross_attention(&self.ca_up, u, cfg.up_grid, text)?;

        let net = Self::dense(u, &self.w_out)?;
        let net = Self::resample(net, &self.unpool_out_t)?
            .permute(&[0, 2, 1])?
            .reshape(&expected)?;
        let noise = z
            .scale((1.0 - alpha_bar).sqrt())?
            .add(net.scale(cfg.residual_scale)?)?;
        Ok(ModelOutput {
            noise,
            down,
            mid,
            up,
            temporal,
        })
    }

    /// Forward pass without gradient tracking; returns the noise prediction,
    /// the configured capture layer and the temporal map.
    pub fn denoise_step(
        &self,
        latent: &LatentState,
        step: usize,
        schedule: &DdimSchedule,
        text: &TextEmbedding,
    ) -> Result<(Tensor, CAMapStack, TAMap)> {
        let tape = Tape::new();
        let out = self.forward(tape.constant(latent.z.clone()), step, schedule, text)?;
        let ca = out.ca(self.config.capture)?.to_stack(self.config.capture)?;
        Ok((out.noise.value(), ca, TAMap { maps: out.temporal.value() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::tokenize;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig::default()).unwrap()
    }

    #[test]
    fn text_embedding_is_deterministic_and_local() {
        let m = model();
        let a = m.encode_text(&tokenize("a man is walking and a dog is running").unwrap()).unwrap();
        let b = m.encode_text(&tokenize("a man is walking and a dog is running").unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.emb.shape(), [16, 32]);
        assert_eq!(a.words, 9);
        let c = m.encode_text(&tokenize("a man is walking and a cat is running").unwrap()).unwrap();
        let differing: Vec<usize> = (0..16)
            .filter(|&r| a.emb.data()[r * 32..(r + 1) * 32] != c.emb.data()[r * 32..(r + 1) * 32])
            .collect();
        // word 6 ("dog" -> "cat") sits in row 7
        assert_eq!(differing, vec![7]);
    }

    #[test]
    fn long_prompt_is_rejected() {
        let m = model();
        let long = tokenize(&vec!["word"; 15].join(" ")).unwrap();
        assert!(matches!(m.encode_text(&long), Err(Error::Input(_))));
    }

    #[test]
    fn attention_maps_are_distributions() {
        let m = model();
        let s = DdimSchedule::linear(50).unwrap();
        let text = m.encode_text(&tokenize("a man is walking").unwrap()).unwrap();
        let latent = LatentState::from_seed(&m.config().latent_shape(), 50, 3);
        let (noise, ca, ta) = m.denoise_step(&latent, 1, &s, &text).unwrap();
        assert_eq!(noise.shape(), latent.z.shape());
        assert_eq!(ca.maps.shape(), [8, 64, 16]);
        for row in ca.maps.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(ta.maps.shape(), [16, 8, 8]);
        for row in ta.maps.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic_and_sensitive() {
        let m = model();
        let s = DdimSchedule::linear(50).unwrap();
        let text = m.encode_text(&tokenize("a dog is running").unwrap()).unwrap();
        let latent = LatentState::from_seed(&m.config().latent_shape(), 50, 4);
        let first = m.denoise_step(&latent, 1, &s, &text).unwrap();
        let second = m.denoise_step(&latent, 1, &s, &text).unwrap();
        assert_eq!(first.0, second.0);
        assert_eq!(first.1, second.1);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let nudged = LatentState {
            z: latent.z.add(&Tensor::randn(latent.z.shape(), 1e-2, &mut rng)).unwrap(),
            ..latent.clone()
        };
        let third = m.denoise_step(&nudged, 1, &s, &text).unwrap();
        assert!(third.1.maps.max_abs_diff(&first.1.maps).unwrap() > 0.0);
    }

    #[test]
    fn wrong_latent_shape() {
        let m = model();
        let s = DdimSchedule::linear(50).unwrap();
        let text = m.encode_text(&tokenize("a dog is running").unwrap()).unwrap();
        let latent = LatentState::from_seed(&[8, 4, 8, 8], 50, 0);
        assert!(matches!(m.denoise_step(&latent, 1, &s, &text), Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ToyModelConfig::from_kv("frames = 4\nlatent_grid = 8x8\ndown_grid = 4x4\nup_grid = 4x4\nmid_grid = 2x2\ncapture = mid\n").unwrap();
        assert_eq!((cfg.frames, cfg.latent_h, cfg.down_grid, cfg.capture), (4, 8, (4, 4), CaLayer::Mid));
        assert!(ToyModelConfig::from_kv("up_grid = 4x4\n").is_err());
        assert!(matches!(ToyModelConfig::from_kv("\nnope = 1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn pooling_operators() {
        let p = pool_matrix((4, 4), (2, 2));
        assert_eq!(p.shape(), [16, 4]);
        // every coarse cell averages four fine cells
        for col in 0..4 {
            let s: f64 = (0..16).map(|r| p.data()[r * 4 + col]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let u = unpool_matrix((2, 2), (4, 4));
        assert_eq!(u.shape(), [4, 16]);
        assert_eq!(u.sum(), 16.0);
    }
}
