//! Hypernetwork-generated light field networks and the shared color/ordering heads.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::nn::{sigmoid, Builder, Linear, Mlp};
use crate::raygeom::{to_plucker, transform_ray, Camera, OrientedRay, RigidTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hyper_hidden: usize,
    pub lfn_hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// Scale applied to the hypernetwork output-layer weights at initialization.
    pub hyper_output_gain: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            latent_dim: 128,
            hyper_hidden: 256,
            lfn_hidden: 256,
            feature_dim: 64,
            head_hidden: 128,
            hyper_output_gain: 1e-2,
        }
    }
}

impl DecoderConfig {
    /// (fan_in, fan_out) of each LFN layer: 6 → hidden → hidden → feature.
    pub fn lfn_layers(&self) -> [(usize, usize); 3] {
        [
            (6, self.lfn_hidden),
            (self.lfn_hidden, self.lfn_hidden),
            (self.lfn_hidden, self.feature_dim),
        ]
    }

    pub fn lfn_param_count(&self) -> usize {
        self.lfn_layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Which coordinate frame a slot's light field is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotRole {
    Background,
    Foreground,
}

/// Frame tag of a slot latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlotFrame {
    World,
    Camera(Camera),
}

impl SlotFrame {
    pub fn role_matches(&self, role: SlotRole) -> bool {
        matches!(
            (self, role),
            (SlotFrame::World, SlotRole::Background) | (SlotFrame::Camera(_), SlotRole::Foreground)
        )
    }

    /// Transform from world coordinates into this frame.
    pub fn from_world(&self) -> RigidTransform {
        match self {
            SlotFrame::World => RigidTransform::identity(),
            SlotFrame::Camera(c) => c.camera_from_world(),
        }
    }
}

/// Maps world-frame query rays into a slot's light-field frame.
///
/// `edit` is the slot's world-space edit transform; rays are first pulled back
/// through its inverse and then mapped into the slot frame.
pub fn slot_from_world(role: SlotRole, frame: &SlotFrame, edit: &RigidTransform) -> Result<RigidTransform> {
    if !frame.role_matches(role) {
        return Err(ColfError::Contract(format!("{role:?} slot cannot use frame {frame:?}")));
    }
    Ok(frame.from_world().compose(&edit.inverse()))
}

/// Plücker coordinates of `rays` after mapping through `to_slot`, as f32 rows of 6.
pub fn plucker_inputs(rays: &[OrientedRay], to_slot: &RigidTransform) -> Vec<f32> {
    let mut out = Vec::with_capacity(rays.len() * 6);
    for ray in rays {
        let p = to_plucker(&transform_ray(to_slot, ray));
        out.extend(p.to_array().iter().map(|&v| v as f32));
    }
    out
}

/// Per-slot LFN weights, batched over slots.
#[derive(Clone, Debug)]
pub struct LfnWeights {
    /// Per layer: weight (S, in, out) and bias (S, 1, out).
    pub layers: Vec<(Tensor, Tensor)>,
}

impl LfnWeights {
    /// Slices a (S, P) hypernetwork output layer-major, weight before bias.
    pub fn from_flat(flat: &Tensor, cfg: &DecoderConfig) -> Result<Self> {
        let (s, p) = flat.dims2()?;
        if p != cfg.lfn_param_count() {
            return Err(ColfError::Contract(format!(
                "expected {} LFN parameters, got {p}",
                cfg.lfn_param_count()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(3);
        for (i, o) in cfg.lfn_layers() {
            let w = flat.narrow(1, offset, i * o)?.reshape((s, i, o))?;
            offset += i * o;
            let b = flat.narrow(1, offset, o)?.reshape((s, 1, o))?;
            offset += o;
            layers.push((w, b));
        }
        Ok(LfnWeights { layers })
    }

    /// (S, R, 6) ray embeddings → (S, R, feature_dim) ray features.
    pub fn forward(&self, rays: &Tensor) -> Result<Tensor> {
        let mut h = rays.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.broadcast_add(b)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Per-slot, per-ray decoded values: colors (S, R, 3) in [0, 1] and orderings (S, R).
#[derive(Clone, Debug)]
pub struct SlotShades {
    pub colors: Tensor,
    pub orderings: Tensor,
}

#[derive(Clone, Debug)]
pub struct LightFieldDecoder {
    pub config: DecoderConfig,
    pub hyper_hidden: Linear,
    pub hyper_out: Linear,
    pub color_head: Mlp,
    pub ordering_head: Mlp,
}

impl LightFieldDecoder {
    pub fn new(b: &mut Builder, config: DecoderConfig) -> Result<Self> {
        let hyper_hidden = Linear::new(&mut b.sub("hyper.l0"), config.latent_dim, config.hyper_hidden, true)?;
        let hyper_out = {
            let mut hb = b.sub("hyper.l1");
            let bound = config.hyper_output_gain / (config.hyper_hidden as f64).sqrt();
            let weight = hb.uniform("weight", &[config.hyper_hidden, config.lfn_param_count()], bound)?;
            let target = lfn_initial_values(&config, hb.rng());
            let bias = hb.from_values("bias", &[config.lfn_param_count()], target)?;
            Linear {
                weight,
                bias: Some(bias),
            }
        };
        let h = config.head_hidden;
        let f = config.feature_dim;
        Ok(LightFieldDecoder {
            hyper_hidden,
            hyper_out,
            color_head: Mlp::new(&mut b.sub("color_head"), &[f, h, h, h, 3])?,
            ordering_head: Mlp::new(&mut b.sub("ordering_head"), &[f, h, h, h, 1])?,
            config,
        })
    }

    /// (S, D) latents → flat (S, P) LFN parameters.
    pub fn materialize_flat(&self, latents: &Tensor) -> Result<Tensor> {
        let h = self.hyper_hidden.forward(latents)?.relu()?;
        self.hyper_out.forward(&h)
    }

    pub fn materialize(&self, latents: &Tensor) -> Result<LfnWeights> {
        LfnWeights::from_flat(&self.materialize_flat(latents)?, &self.config)
    }

    /// Heads applied to (S, R, F) features.
    pub fn decode_features(&self, features: &Tensor) -> Result<SlotShades> {
        let colors = sigmoid(&self.color_head.forward(features)?)?;
        let orderings = self.ordering_head.forward(features)?.squeeze(2)?;
        Ok(SlotShades { colors, orderings })
    }

    /// `latents` (S, D), `rays` (S, R, 6) already in each slot's frame.
    pub fn shade(&self, latents: &Tensor, rays: &Tensor) -> Result<SlotShades> {
        let (s, _) = latents.dims2()?;
        let (rs, _, six) = rays.dims3()?;
        if rs != s || six != 6 {
            return Err(ColfError::Contract(format!(
                "ray batch {:?} does not match {s} slots",
                rays.dims()
            )));
        }
        let w = self.materialize(latents)?;
        self.decode_features(&w.forward(rays)?)
    }
}

/// Uniform(±1/√fan_in) values for a freshly initialized LFN, in slice order.
fn lfn_initial_values(cfg: &DecoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let mut out = Vec::with_capacity(cfg.lfn_param_count());
    for (i, o) in cfg.lfn_layers() {
        let bound = 1.0 / (i as f64).sqrt();
        out.extend((0..i * o + o).map(|_| rng.random_range(-bound..=bound)));
    }
    out
}

/// Ray embeddings for a list of rays mapped into one frame, as a (R, 6) tensor.
pub fn ray_tensor(rays: &[OrientedRay], to_slot: &RigidTransform, dtype: DType) -> Result<Tensor> {
    let data = plucker_inputs(rays, to_slot);
    Ok(Tensor::from_vec(data, (rays.len(), 6), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
