//! The full auto-encoder: encoder, hypernetwork decoder and compositor, plus scene rendering.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{composite_tensor, VisibilityNet};
use crate::encoder::{Encoder, EncoderConfig, SlotNoise, SlotSet};
use crate::error::{ColfError, Result};
use crate::lfdecoder::{plucker_inputs, slot_from_world, DecoderConfig, LfnWeights, LightFieldDecoder, SlotFrame, SlotRole};
use crate::nn::{Builder, ParamStore};
use crate::raygeom::{Camera, OrientedRay, RigidTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub visibility_hidden: usize,
    /// Replace the background latent with the zero vector.
    pub background_fixed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            visibility_hidden: 128,
            background_fixed: false,
        }
    }
}

impl ModelConfig {
    pub fn num_slots(&self) -> usize {
        self.encoder.num_slots
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.slot_dim != self.decoder.latent_dim {
            return Err(ColfError::Config(format!(
                "slot dimension {} differs from decoder latent dimension {}",
                self.encoder.slot_dim, self.decoder.latent_dim
            )));
        }
        if self.encoder.num_slots == 0 || self.encoder.iterations == 0 {
            return Err(ColfError::Config("need at least one foreground slot and one iteration".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(ColfError::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Placement of one latent in a rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPlacement {
    pub role: SlotRole,
    pub frame: SlotFrame,
    /// World-space edit applied to this slot.
    pub edit: RigidTransform,
    /// Identifier of the scene the latent was encoded from, for imported slots.
    pub source: Option<String>,
}

/// Latents plus per-slot frames and edits; slot 0 is the background.
#[derive(Clone, Debug)]
pub struct ComposedScene {
    /// (S, D)
    pub latents: Tensor,
    pub slots: Vec<SlotPlacement>,
}

impl ComposedScene {
    pub fn from_slot_set(set: &SlotSet) -> Result<Self> {
        let mut slots = vec![SlotPlacement {
            role: SlotRole::Background,
            frame: SlotFrame::World,
            edit: RigidTransform::identity(),
            source: None,
        }];
        for _ in 0..set.num_foreground() {
            slots.push(SlotPlacement {
                role: SlotRole::Foreground,
                frame: SlotFrame::Camera(set.context_camera),
                edit: RigidTransform::identity(),
                source: None,
            });
        }
        Ok(ComposedScene {
            latents: set.stacked()?,
            slots,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Keeps only the listed slots, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<ComposedScene> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(ColfError::NotFound(format!("slot {bad}")));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), &Device::Cpu)?;
        Ok(ComposedScene {
            latents: self.latents.index_select(&idx, 0)?,
            slots: indices.iter().map(|&i| self.slots[i].clone()).collect(),
        })
    }

    /// Per-slot ray embeddings (S, R, 6).
    pub fn ray_inputs(&self, rays: &[OrientedRay], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * rays.len() * 6);
        for slot in &self.slots {
            let to_slot = slot_from_world(slot.role, &slot.frame, &slot.edit)?;
            data.extend(plucker_inputs(rays, &to_slot));
        }
        Ok(Tensor::from_vec(data, (self.len(), rays.len(), 6), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Differentiable render of a ray batch: colors (R, 3), weights (S, R), orderings (S, R).
#[derive(Clone, Debug)]
pub struct RayRender {
    pub colors: Tensor,
    pub weights: Tensor,
    pub orderings: Tensor,
}

/// A rendered view: row-major H×W×3 image and pixel-major H×W×S weights.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub num_slots: usize,
    pub image: Vec<f32>,
    pub weights: Vec<f32>,
}

impl RenderedView {
    /// Per-pixel argmax slot, ties to the lowest index.
    pub fn segmentation(&self) -> Vec<usize> {
        self.weights
            .chunks(self.num_slots)
            .map(|w| {
                let mut best = 0;
                for (i, &v) in w.iter().enumerate() {
                    if v > w[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

pub struct ColfModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: LightFieldDecoder,
    pub visibility: VisibilityNet,
    lfn_evaluations: AtomicU64,
}

/// Rays rendered per chunk during inference.
pub const RENDER_CHUNK: usize = 4096;

impl ColfModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), config.encoder.clone())?;
        let decoder = LightFieldDecoder::new(&mut b.sub("decoder"), config.decoder.clone())?;
        let visibility = VisibilityNet::new(&mut b.sub("visibility"), config.visibility_hidden)?;
        Ok(ColfModel {
            config,
            store,
            encoder,
            decoder,
            visibility,
            lfn_evaluations: AtomicU64::new(0),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Total per-slot light field evaluations performed so far.
    pub fn lfn_evaluations(&self) -> u64 {
        self.lfn_evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.lfn_evaluations.store(0, Ordering::Relaxed);
    }

    /// Row-major H×W×3 values in [0, 1] → (H, W, 3) tensor.
    pub fn image_tensor(&self, image: &[f32], height: usize, width: usize) -> Result<Tensor> {
        if image.len() != height * width * 3 {
            return Err(ColfError::Contract(format!(
                "image buffer of {} values does not match {height}×{width}×3",
                image.len()
            )));
        }
        Ok(Tensor::from_slice(image, (height, width, 3), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn encode_with_noise(&self, image: &[f32], camera: &Camera, noise: &SlotNoise) -> Result<SlotSet> {
        let size = self.config.image_size;
        if camera.width != size || camera.height != size {
            return Err(ColfError::Config(format!(
                "context image is {}×{}, model expects {size}×{size}",
                camera.width, camera.height
            )));
        }
        let t = self.image_tensor(image, size, size)?;
        Ok(self
            .encoder
            .encode_with_noise(&t, camera, noise, self.config.background_fixed)?
            .0)
    }

    pub fn sample_noise(&self, rng: &mut ChaCha8Rng) -> Result<SlotNoise> {
        SlotNoise::sample(rng, self.config.encoder.num_slots, self.config.encoder.slot_dim, self.dtype())
    }

    pub fn encode(&self, image: &[f32], camera: &Camera, rng: &mut ChaCha8Rng) -> Result<SlotSet> {
        let noise = self.sample_noise(rng)?;
        self.encode_with_noise(image, camera, &noise)
    }

    pub fn materialize(&self, scene: &ComposedScene) -> Result<LfnWeights> {
        self.decoder.materialize(&scene.latents)
    }

    /// Shades and composites `rays` with pre-materialized LFN weights.
    pub fn render_rays_with(&self, scene: &ComposedScene, lfn: &LfnWeights, rays: &[OrientedRay]) -> Result<RayRender> {
        let inputs = scene.ray_inputs(rays, self.dtype())?;
        let features = lfn.forward(&inputs)?;
        self.lfn_evaluations
            .fetch_add((scene.len() * rays.len()) as u64, Ordering::Relaxed);
        let shades = self.decoder.decode_features(&features)?;
        let vis = self.visibility.forward(&shades.orderings)?;
        let (colors, weights) = composite_tensor(&shades.colors, &vis)?;
        Ok(RayRender {
            colors,
            weights,
            orderings: shades.orderings,
        })
    }

    pub fn render_rays(&self, scene: &ComposedScene, rays: &[OrientedRay]) -> Result<RayRender> {
        let lfn = self.materialize(scene)?;
        self.render_rays_with(scene, &lfn, rays)
    }

    /// Renders every pixel of `camera` in chunks, without gradient tracking.
    pub fn render_view(&self, scene: &ComposedScene, camera: &Camera) -> Result<RenderedView> {
        let lfn = self.materialize(scene)?;
        self.render_view_with(scene, &lfn, camera)
    }

    pub fn render_view_with(&self, scene: &ComposedScene, lfn: &LfnWeights, camera: &Camera) -> Result<RenderedView> {
        let rays = camera.pixel_center_rays();
        let s = scene.len();
        let mut image = Vec::with_capacity(rays.len() * 3);
        let mut weights = Vec::with_capacity(rays.len() * s);
        for (tile, chunk) in rays.chunks(RENDER_CHUNK).enumerate() {
            let out = self.render_rays_with(scene, lfn, chunk).map_err(|e| match e {
                ColfError::Numerical(m) => ColfError::Numerical(format!("pixel tile {tile}: {m}")),
                other => other,
            })?;
            image.extend(out.colors.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
            weights.extend(out.weights.t()?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        if let Some(i) = image.iter().position(|v| !v.is_finite()) {
            return Err(ColfError::Numerical(format!("non-finite color at pixel {}", i / 3)));
        }
        Ok(RenderedView {
            width: camera.width,
            height: camera.height,
            num_slots: s,
            image,
            weights,
        })
    }

    /// Encodes a context view and renders each query camera.
    pub fn render_scene(
        &self,
        context_image: &[f32],
        context_camera: &Camera,
        query_cameras: &[Camera],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RenderedView>> {
        let set = self.encode(context_image, context_camera, rng)?;
        let scene = ComposedScene::from_slot_set(&set)?;
        let lfn = self.materialize(&scene)?;
        query_cameras
            .iter()
            .enumerate()
            .map(|(v, cam)| {
                self.render_view_with(&scene, &lfn, cam).map_err(|e| match e {
                    ColfError::Numerical(m) => ColfError::Numerical(format!("view {v}: {m}")),
                    other => other,
                })
            })
            .collect()
    }
}
