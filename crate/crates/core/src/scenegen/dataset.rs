use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::raygeom::{Camera, CameraRecord};

use super::{sample_scene, trace_view, GeneratorConfig, Profile};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub generator: GeneratorConfig,
    pub image_size: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub views_per_scene: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(name: &str, profile: Profile, image_size: usize, num_train: usize, num_test: usize, seed: u64) -> Self {
        DatasetConfig {
            name: name.to_string(),
            generator: GeneratorConfig::for_profile(profile),
            image_size,
            num_train,
            num_test,
            views_per_scene: 4,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub profile: Profile,
    pub image_size: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
    pub views_per_scene: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = ColfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(ColfError::Config(format!("unknown split '{other}'"))),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Distinct for distinct indices under a fixed dataset seed.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed ^ (index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Writes the dataset; each scene directory is written by a single worker and
/// only appears under its final name once complete.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Manifest> {
    if cfg.views_per_scene == 0 || cfg.image_size == 0 {
        return Err(ColfError::Config("views_per_scene and image_size must be positive".into()));
    }
    let scenes = root.join("scenes");
    fs::create_dir_all(&scenes).map_err(|e| ColfError::io(&scenes, e))?;

    let total = cfg.num_train + cfg.num_test;
    (0..total)
        .into_par_iter()
        .try_for_each(|index| write_scene(cfg, &scenes, index))?;

    let manifest = Manifest {
        name: cfg.name.clone(),
        profile: cfg.generator.profile,
        image_size: cfg.image_size,
        num_train: cfg.num_train,
        num_test: cfg.num_test,
        seed: cfg.seed,
        views_per_scene: cfg.views_per_scene,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| ColfError::io(&path, e))?;
    Ok(manifest)
}

fn write_scene(cfg: &DatasetConfig, scenes: &Path, index: usize) -> Result<()> {
    let final_dir = scenes.join(scene_dir_name(index));
    let partial = scenes.join(format!("{}.partial", scene_dir_name(index)));
    let _ = fs::remove_dir_all(&partial);
    fs::create_dir_all(&partial).map_err(|e| ColfError::io(&partial, e))?;

    let result = render_scene_files(cfg, &partial, index);
    if let Err(err) = result {
        let _ = fs::remove_dir_all(&partial);
        return Err(err);
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| ColfError::io(&final_dir, e))?;
    }
    fs::rename(&partial, &final_dir).map_err(|e| ColfError::io(&final_dir, e))
}

fn render_scene_files(cfg: &DatasetConfig, dir: &Path, index: usize) -> Result<()> {
    let seed = scene_seed(cfg.seed, index);
    let scene = sample_scene(seed, &cfg.generator)?;
    let mut cam_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed.wrapping_add(1)));
    let mut records = Vec::with_capacity(cfg.views_per_scene);
    for view in 0..cfg.views_per_scene {
        let azimuth = cam_rng.random_range(0.0..std::f64::consts::TAU);
        let camera = cfg.generator.rig.camera(azimuth, cfg.image_size)?;
        let record = trace_view(&scene, &camera, cfg.generator.supersample);
        let (w, h) = (camera.width as u32, camera.height as u32);

        let rgb: Vec<u8> = record.image.iter().map(|&v| to_u8(v)).collect();
        let img = RgbImage::from_raw(w, h, rgb).expect("buffer matches image size");
        let path = dir.join(format!("view_{view}.png"));
        img.save(&path)?;

        let mask = GrayImage::from_raw(w, h, record.mask).expect("buffer matches image size");
        mask.save(dir.join(format!("mask_{view}.png")))?;
        records.push(camera.to_record());
    }
    let cams = dir.join("cameras.json");
    fs::write(&cams, serde_json::to_vec_pretty(&records)?).map_err(|e| ColfError::io(&cams, e))?;
    let meta = dir.join("meta.json");
    fs::write(&meta, serde_json::to_vec_pretty(&scene)?).map_err(|e| ColfError::io(&meta, e))?;
    Ok(())
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug)]
pub struct ViewData {
    /// Row-major H×W×3 in [0, 1].
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub camera: Camera,
}

impl ViewData {
    pub fn size(&self) -> usize {
        self.camera.width
    }

    /// Box-filters the image and takes the per-block mode of the mask
    /// (ties to the lowest label). Only integer downsampling is supported.
    pub fn downsampled(&self, size: usize) -> Result<ViewData> {
        let src = self.camera.width;
        if size == src {
            return Ok(self.clone());
        }
        if size == 0 || size > src || src % size != 0 || self.camera.height != src {
            return Err(ColfError::Config(format!(
                "cannot resample a {src}x{} view to {size}x{size}",
                self.camera.height
            )));
        }
        let f = src / size;
        let mut image = vec![0f32; size * size * 3];
        let mut mask = vec![0u8; size * size];
        let mut counts = [0u32; 256];
        for y in 0..size {
            for x in 0..size {
                counts.iter_mut().for_each(|c| *c = 0);
                let mut acc = [0f32; 3];
                for dy in 0..f {
                    for dx in 0..f {
                        let s = (y * f + dy) * src + x * f + dx;
                        for ch in 0..3 {
                            acc[ch] += self.image[s * 3 + ch];
                        }
                        counts[self.mask[s] as usize] += 1;
                    }
                }
                let d = size * y + x;
                for ch in 0..3 {
                    image[d * 3 + ch] = acc[ch] / (f * f) as f32;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                mask[d] = counts.iter().position(|&c| c == best).unwrap_or(0) as u8;
            }
        }
        Ok(ViewData {
            image,
            mask,
            camera: self.camera.resized(size, size)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub index: usize,
    pub views: Vec<ViewData>,
}

impl SceneData {
    pub fn at_resolution(&self, size: usize) -> Result<SceneData> {
        Ok(SceneData {
            index: self.index,
            views: self
                .views
                .iter()
                .map(|v| v.downsampled(size))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Dataset> {
        let root = root.into();
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| ColfError::io(&path, e))?;
        let manifest = serde_json::from_slice(&bytes)?;
        Ok(Dataset { root, manifest })
    }

    pub fn scene_indices(&self, split: Split) -> std::ops::Range<usize> {
        let m = &self.manifest;
        match split {
            Split::Train => 0..m.num_train,
            Split::Test => m.num_train..m.num_train + m.num_test,
        }
    }

    pub fn scene_dir(&self, index: usize) -> PathBuf {
        self.root.join("scenes").join(scene_dir_name(index))
    }

    pub fn load_scene(&self, index: usize) -> Result<SceneData> {
        let dir = self.scene_dir(index);
        let cams_path = dir.join("cameras.json");
        let bytes = fs::read(&cams_path).map_err(|e| ColfError::io(&cams_path, e))?;
        let records: Vec<CameraRecord> = serde_json::from_slice(&bytes)?;
        let mut views = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let camera = Camera::from_record(rec)?;
            let img = image::open(dir.join(format!("view_{i}.png")))?.to_rgb8();
            let mask = image::open(dir.join(format!("mask_{i}.png")))?.to_luma8();
            if img.width() as usize != camera.width || mask.width() as usize != camera.width {
                return Err(ColfError::Config(format!(
                    "scene {index} view {i}: image size does not match camera"
                )));
            }
            views.push(ViewData {
                image: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
                mask: mask.into_raw(),
                camera,
            });
        }
        Ok(SceneData { index, views })
    }

    pub fn load_split(&self, split: Split, resolution: usize) -> Result<Vec<SceneData>> {
        self.scene_indices(split)
            .map(|i| self.load_scene(i)?.at_resolution(resolution))
            .collect()
    }
}
