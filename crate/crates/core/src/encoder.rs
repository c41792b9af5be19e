//! Convolutional feature extractor and background-aware slot attention.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::nn::{softmax, upsample2x, Builder, Conv3x3, GruCell, LayerNorm, Linear, Mlp};
use crate::raygeom::Camera;

/// Added to the attention mass in the weighted-mean denominator.
pub const ATTENTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub slot_dim: usize,
    pub feature_channels: usize,
    pub num_slots: usize,
    pub iterations: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            slot_dim: 128,
            feature_channels: 128,
            num_slots: 5,
            iterations: 3,
            mlp_hidden: 128,
        }
    }
}

/// Flattened spatial features, (N, C) with N = H'·W'.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Six 3×3 convolutions; the second and third stride by 2, and the fourth and
/// fifth are followed by 2× bilinear upsampling. The fifth and sixth layers
/// also see the same-resolution activations of the second and first layers,
/// so the grid comes back at input resolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub convs: Vec<Conv3x3>,
}

impl FeatureExtractor {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let c = channels;
        let spec = [(7, c, 1), (c, c, 2), (c, c, 2), (c, c, 1), (2 * c, c, 1), (2 * c, c, 1)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(i_c, o_c, s))| Conv3x3::new(&mut b.sub(&format!("conv{i}")), i_c, o_c, s))
            .collect::<Result<_>>()?;
        Ok(FeatureExtractor { convs })
    }

    /// Output grid size for an input of `size`×`size`.
    pub fn output_size(size: usize) -> usize {
        let down = |n: usize| (n + 2 - 3) / 2 + 1;
        2 * 2 * down(down(size))
    }

    /// `image` is (H, W, 3) in [0, 1].
    pub fn forward(&self, image: &Tensor) -> Result<FeatureGrid> {
        let (h, w, c) = image.dims3()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(ColfError::Config(format!(
                "encoder expects an H×W×3 image with sides divisible by 4, got {h}×{w}×{c}"
            )));
        }
        let rgb = image.permute((2, 0, 1))?.unsqueeze(0)?;
        let coords = pixel_coordinates(h, w, image.dtype(), image.device())?;
        let x = Tensor::cat(&[&rgb, &coords], 1)?;

        let x0 = self.convs[0].forward(&x)?.relu()?;
        let x1 = self.convs[1].forward(&x0)?.relu()?;
        let x2 = self.convs[2].forward(&x1)?.relu()?;
        let u2 = upsample2x(&self.convs[3].forward(&x2)?.relu()?)?;
        let u1 = upsample2x(&self.convs[4].forward(&Tensor::cat(&[&u2, &x1], 1)?)?.relu()?)?;
        let out = self.convs[5].forward(&Tensor::cat(&[&u1, &x0], 1)?)?.relu()?;

        let (_, ch, oh, ow) = out.dims4()?;
        let features = out.reshape((ch, oh * ow))?.t()?.contiguous()?;
        Ok(FeatureGrid {
            features,
            height: oh,
            width: ow,
        })
    }
}

/// Channels (x, y, −x, −y) with x and y spanning [−1, 1] across the image.
pub fn pixel_coordinates(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let lin = |n: usize, i: usize| {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = vec![0f64; 4 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (lin(w, x), lin(h, y));
            let i = y * w + x;
            data[i] = px;
            data[h * w + i] = py;
            data[2 * h * w + i] = -px;
            data[3 * h * w + i] = -py;
        }
    }
    Ok(Tensor::from_vec(data, (1, 4, h, w), device)?.to_dtype(dtype)?)
}

/// Mean and log-scale of a diagonal Gaussian slot prior.
#[derive(Clone, Debug)]
pub struct SlotPrior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl SlotPrior {
    fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        let xavier = (6.0 / (1 + dim) as f64).sqrt();
        Ok(SlotPrior {
            mu: b.normal("mu", &[1, dim], 1.0)?,
            log_sigma: b.uniform("log_sigma", &[1, dim], xavier)?,
        })
    }

    /// Reparameterized draw `mu + exp(log_sigma)·noise`, noise shaped (n, D).
    fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        Ok(noise
            .broadcast_mul(&self.log_sigma.exp()?)?
            .broadcast_add(&self.mu)?)
    }
}

/// Separate query, value, recurrent and residual parameters for one slot role.
#[derive(Clone, Debug)]
pub struct SlotRoleParams {
    pub prior: SlotPrior,
    pub norm_query: LayerNorm,
    pub to_q: Linear,
    pub to_v: Linear,
    pub gru: GruCell,
    pub norm_residual: LayerNorm,
    pub mlp: Mlp,
}

impl SlotRoleParams {
    fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.slot_dim;
        Ok(SlotRoleParams {
            prior: SlotPrior::new(&mut b.sub("prior"), d)?,
            norm_query: LayerNorm::new(&mut b.sub("norm_q"), d)?,
            to_q: Linear::new(&mut b.sub("to_q"), d, d, false)?,
            to_v: Linear::new(&mut b.sub("to_v"), cfg.feature_channels, d, false)?,
            gru: GruCell::new(&mut b.sub("gru"), d)?,
            norm_residual: LayerNorm::new(&mut b.sub("norm_res"), d)?,
            mlp: Mlp::new(&mut b.sub("mlp"), &[d, cfg.mlp_hidden, d])?,
        })
    }

    fn update(&self, prev: &Tensor, updates: &Tensor) -> Result<Tensor> {
        let s = self.gru.forward(updates, prev)?;
        Ok((&s + self.mlp.forward(&self.norm_residual.forward(&s)?)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub norm_input: LayerNorm,
    pub to_k: Linear,
    pub background: SlotRoleParams,
    pub foreground: SlotRoleParams,
    pub slot_dim: usize,
}

/// Standard normal draws that seed the slots, (1, D) and (K, D).
#[derive(Clone, Debug)]
pub struct SlotNoise {
    pub background: Tensor,
    pub foreground: Tensor,
}

impl SlotNoise {
    pub fn sample(rng: &mut ChaCha8Rng, k: usize, dim: usize, dtype: DType) -> Result<Self> {
        let mut draw = |n: usize| -> Result<Tensor> {
            let v: Vec<f64> = (0..n * dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Ok(Tensor::from_vec(v, (n, dim), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(SlotNoise {
            background: draw(1)?,
            foreground: draw(k)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttentionOutput {
    /// (1, D)
    pub background: Tensor,
    /// (K, D)
    pub foreground: Tensor,
    /// Final-iteration attention, (N, K+1); column 0 is the background slot.
    pub attention: Tensor,
    /// Attention of every iteration, in order.
    pub per_iteration: Vec<Tensor>,
}

impl SlotAttention {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        Ok(SlotAttention {
            norm_input: LayerNorm::new(&mut b.sub("norm_in"), cfg.feature_channels)?,
            to_k: Linear::new(&mut b.sub("to_k"), cfg.feature_channels, cfg.slot_dim, false)?,
            background: SlotRoleParams::new(&mut b.sub("bg"), cfg)?,
            foreground: SlotRoleParams::new(&mut b.sub("fg"), cfg)?,
            slot_dim: cfg.slot_dim,
        })
    }

    pub fn forward(&self, feat: &FeatureGrid, noise: &SlotNoise, iterations: usize) -> Result<SlotAttentionOutput> {
        if iterations == 0 || noise.foreground.dim(0)? == 0 {
            return Err(ColfError::Config("slot attention needs T ≥ 1 and K ≥ 1".into()));
        }
        let k_fg = noise.foreground.dim(0)?;
        let scale = 1.0 / (self.slot_dim as f64).sqrt();
        let normed = self.norm_input.forward(&feat.features)?;
        let keys = self.to_k.forward(&normed)?;
        let values_bg = self.background.to_v.forward(&normed)?;
        let values_fg = self.foreground.to_v.forward(&normed)?;

        let mut slot_bg = self.background.prior.sample(&noise.background)?;
        let mut slots_fg = self.foreground.prior.sample(&noise.foreground)?;
        let mut per_iteration = Vec::with_capacity(iterations);
        for t in 0..iterations {
            let queries = Tensor::cat(
                &[
                    &self.background.to_q.forward(&self.background.norm_query.forward(&slot_bg)?)?,
                    &self.foreground.to_q.forward(&self.foreground.norm_query.forward(&slots_fg)?)?,
                ],
                0,
            )?;
            let logits = (keys.matmul(&queries.t()?)? * scale)?;
            let attn = softmax(&logits, 1)?;
            let mass = attn.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !mass.is_finite() {
                return Err(ColfError::Numerical(format!(
                    "non-finite slot attention at iteration {t}"
                )));
            }
            let attn_bg = attn.narrow(1, 0, 1)?;
            let attn_fg = attn.narrow(1, 1, k_fg)?;
            let updates_bg = weighted_mean(&attn_bg, &values_bg)?;
            let updates_fg = weighted_mean(&attn_fg, &values_fg)?;
            slot_bg = self.background.update(&slot_bg, &updates_bg)?;
            slots_fg = self.foreground.update(&slots_fg, &updates_fg)?;
            per_iteration.push(attn);
        }
        Ok(SlotAttentionOutput {
            background: slot_bg,
            foreground: slots_fg,
            attention: per_iteration.last().expect("iterations ≥ 1").clone(),
            per_iteration,
        })
    }
}

/// (N, S) weights over (N, D) values → (S, D) means.
fn weighted_mean(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mass = (weights.sum_keepdim(0)? + ATTENTION_EPS)?.t()?;
    Ok(weights.t()?.matmul(values)?.broadcast_div(&mass)?)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub extractor: FeatureExtractor,
    pub slot_attention: SlotAttention,
}

/// Encoded scene: one background latent in world frame and K foreground
/// latents in the context camera's frame.
#[derive(Clone, Debug)]
pub struct SlotSet {
    /// (1, D)
    pub background: Tensor,
    /// (K, D)
    pub foreground: Tensor,
    pub context_camera: Camera,
    /// The background latent is the constant zero vector.
    pub background_fixed: bool,
}

impl SlotSet {
    pub fn num_foreground(&self) -> usize {
        self.foreground.dims()[0]
    }

    pub fn slot_dim(&self) -> usize {
        self.background.dims()[1]
    }

    /// All latents as (K+1, D), background first.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.background, &self.foreground], 0)?)
    }

    pub fn latents_f32(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.stacked()?.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}

impl Encoder {
    pub fn new(b: &mut Builder, config: EncoderConfig) -> Result<Self> {
        Ok(Encoder {
            extractor: FeatureExtractor::new(&mut b.sub("extractor"), config.feature_channels)?,
            slot_attention: SlotAttention::new(&mut b.sub("slots"), &config)?,
            config,
        })
    }

    pub fn encode_with_noise(
        &self,
        image: &Tensor,
        camera: &Camera,
        noise: &SlotNoise,
        background_fixed: bool,
    ) -> Result<(SlotSet, Tensor)> {
        let feat = self.extractor.forward(image)?;
        let out = self.slot_attention.forward(&feat, noise, self.config.iterations)?;
        let background = if background_fixed {
            out.background.zeros_like()?.detach()
        } else {
            out.background
        };
        Ok((
            SlotSet {
                background,
                foreground: out.foreground,
                context_camera: *camera,
                background_fixed,
            },
            out.attention,
        ))
    }

    pub fn encode(
        &self,
        image: &Tensor,
        camera: &Camera,
        rng: &mut ChaCha8Rng,
        background_fixed: bool,
    ) -> Result<SlotSet> {
        let noise = SlotNoise::sample(rng, self.config.num_slots, self.config.slot_dim, image.dtype())?;
        Ok(self.encode_with_noise(image, camera, &noise, background_fixed)?.0)
    }
}
