//! Losses, optimization steps, staged training and the metrics log.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ColfError, Result};
use crate::metrics::{evaluate, EvalReport, SceneRenderer, ViewPrediction};
use crate::model::{ColfModel, ComposedScene, ModelConfig};
use crate::nn::Adam;
use crate::raygeom::OrientedRay;
use crate::scenegen::{Dataset, SceneData, Split};

pub const RESOLUTIONS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub dataset: PathBuf,
    pub resolution: usize,
    pub steps: u64,
    /// Checkpoint whose parameters seed this stage.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub latent_penalty: f64,
    #[serde(default)]
    pub l1_weight: f64,
    #[serde(default)]
    pub perceptual_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            latent_penalty: 1e-3,
            l1_weight: 0.0,
            perceptual_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossConfig,
    /// Supervised rays per query view; 0 means every pixel.
    #[serde(default)]
    pub rays_per_view: usize,
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_scenes")]
    pub eval_scenes: usize,
    #[serde(default)]
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
}

fn default_seed() -> u64 {
    0
}
fn default_batch() -> usize {
    1
}
fn default_every() -> u64 {
    1000
}
fn default_eval_scenes() -> usize {
    8
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| ColfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ColfError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ColfError::Config("learning rate must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(ColfError::Config("batch size must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(ColfError::Config("at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 {
                return Err(ColfError::Config(format!("stage {i}: steps must be positive")));
            }
            if !RESOLUTIONS.contains(&s.resolution) {
                return Err(ColfError::Config(format!(
                    "stage {i}: resolution {} not in {RESOLUTIONS:?}",
                    s.resolution
                )));
            }
            if s.resolution < self.model.image_size || s.resolution % self.model.image_size != 0 {
                return Err(ColfError::Config(format!(
                    "stage {i}: resolution {} must be a multiple of the encoder input size {}",
                    s.resolution, self.model.image_size
                )));
            }
        }
        Ok(())
    }
}

/// Image-space loss term with gradients, e.g. a deep-feature perceptual distance.
pub trait PerceptualLoss: Send + Sync {
    /// `pred` and `gt` are (R, 3) ray colors of full query views, stacked.
    fn loss(&self, pred: &Tensor, gt: &Tensor) -> Result<Tensor>;
}

/// Total loss tensor plus each term for logging.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub l2: f64,
    pub latent: f64,
    pub l1: f64,
    pub perceptual: f64,
}

/// MSE over all supervised rays + λ·Σ‖z‖² + optional L1 and perceptual terms.
///
/// `latents` are the penalized codes (the fixed zero background is excluded by the caller).
pub fn loss(
    pred: &Tensor,
    gt: &Tensor,
    latents: &Tensor,
    cfg: &LossConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossTerms> {
    if pred.dims() != gt.dims() {
        return Err(ColfError::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let diff = (pred - gt)?;
    let l2 = diff.sqr()?.mean_all()?;
    let latent = latents.sqr()?.sum_all()?;
    let mut total = (&l2 + (&latent * cfg.latent_penalty)?)?;
    let mut l1_value = 0.0;
    if cfg.l1_weight != 0.0 {
        let l1 = diff.abs()?.mean_all()?;
        l1_value = scalar(&l1)?;
        total = (total + (l1 * cfg.l1_weight)?)?;
    }
    let mut perceptual_value = 0.0;
    if let (Some(p), true) = (perceptual, cfg.perceptual_weight != 0.0) {
        let term = p.loss(pred, gt)?;
        perceptual_value = scalar(&term)?;
        total = (total + (term * cfg.perceptual_weight)?)?;
    }
    Ok(LossTerms {
        l2: scalar(&l2)?,
        latent: scalar(&latent)? * cfg.latent_penalty,
        l1: l1_value,
        perceptual: perceptual_value,
        total,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One scene's training example: encoder input plus supervised rays.
#[derive(Clone, Debug)]
pub struct Example {
    pub context_image: Vec<f32>,
    pub context_camera: crate::raygeom::Camera,
    pub context_view: usize,
    pub rays: Vec<OrientedRay>,
    pub targets: Vec<f32>,
}

impl Example {
    /// Context view encoded at `encoder_size`; all views supervised (optionally a random
    /// subset of `rays_per_view` pixels each).
    pub fn build(scene: &SceneData, context_view: usize, encoder_size: usize, rays_per_view: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ctx = scene.views[context_view].downsampled(encoder_size)?;
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        for view in &scene.views {
            let all = view.camera.pixel_center_rays();
            if rays_per_view == 0 || rays_per_view >= all.len() {
                rays.extend_from_slice(&all);
                targets.extend_from_slice(&view.image);
            } else {
                for i in sample(rng, all.len(), rays_per_view).into_iter() {
                    rays.push(all[i]);
                    targets.extend_from_slice(&view.image[i * 3..i * 3 + 3]);
                }
            }
        }
        Ok(Example {
            context_image: ctx.image,
            context_camera: ctx.camera,
            context_view,
            rays,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub step: u64,
    pub loss: f64,
    pub l2: f64,
    pub latent: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub grad_norm: f64,
    pub step_seconds: f64,
    pub wall_seconds: f64,
}

/// Tab-delimited, append-only training log.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ColfError::io(path, e))?;
        let writer = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .has_headers(!exists)
            .from_writer(file);
        Ok(MetricsLog { writer })
    }

    pub fn append(&mut self, record: &StepRecord) -> Result<()> {
        self.writer.serialize(record)?;
        self.writer.flush().map_err(|e| ColfError::io("metrics log", e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<StepRecord>> {
        let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
        reader.deserialize().map(|r| r.map_err(ColfError::from)).collect()
    }
}

pub struct Trainer {
    pub model: ColfModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub stage: usize,
    pub perceptual: Option<Box<dyn PerceptualLoss>>,
    pub last_checkpoint: Option<PathBuf>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let model = ColfModel::new(config.model.clone(), config.seed, dtype)?;
        Ok(Trainer {
            adam: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            model,
            config,
            step: 0,
            stage: 0,
            perceptual: None,
            last_checkpoint: None,
            started: Instant::now(),
        })
    }

    /// Draws a batch of examples from `scenes` with random context views.
    pub fn sample_batch(&mut self, scenes: &[SceneData]) -> Result<Vec<Example>> {
        (0..self.config.batch_size)
            .map(|_| {
                let scene = &scenes[self.rng.random_range(0..scenes.len())];
                let ctx = self.rng.random_range(0..scene.views.len());
                Example::build(scene, ctx, self.config.model.image_size, self.config.rays_per_view, &mut self.rng)
            })
            .collect()
    }

    /// Loss over a batch, averaged over examples.
    pub fn batch_loss(&mut self, batch: &[Example]) -> Result<LossTerms> {
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let noise = self.model.sample_noise(&mut self.rng)?;
            let set = self.model.encode_with_noise(&ex.context_image, &ex.context_camera, &noise)?;
            let scene = ComposedScene::from_slot_set(&set)?;
            let out = self.model.render_rays(&scene, &ex.rays)?;
            let gt = Tensor::from_slice(&ex.targets, (ex.rays.len(), 3), &Device::Cpu)?.to_dtype(self.model.dtype())?;
            let penalized = if set.background_fixed {
                set.foreground.clone()
            } else {
                set.stacked()?
            };
            parts.push(loss(&out.colors, &gt, &penalized, &self.config.loss, self.perceptual.as_deref())?);
        }
        let n = parts.len() as f64;
        let mut total = parts[0].total.clone();
        for p in &parts[1..] {
            total = (total + &p.total)?;
        }
        Ok(LossTerms {
            total: (total / n)?,
            l2: parts.iter().map(|p| p.l2).sum::<f64>() / n,
            latent: parts.iter().map(|p| p.latent).sum::<f64>() / n,
            l1: parts.iter().map(|p| p.l1).sum::<f64>() / n,
            perceptual: parts.iter().map(|p| p.perceptual).sum::<f64>() / n,
        })
    }

    /// One forward/backward/update.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepRecord> {
        let t0 = Instant::now();
        let terms = self.batch_loss(batch)?;
        let value = scalar(&terms.total)?;
        if !value.is_finite() {
            let last = self
                .last_checkpoint
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string());
            return Err(ColfError::Numerical(format!(
                "non-finite loss at step {}; last good checkpoint: {last}",
                self.step
            )));
        }
        let grads = terms.total.backward()?;
        let mut sq = 0.0;
        for (_, var) in self.model.store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        self.adam.apply(&self.model.store, &grads)?;
        self.step += 1;
        Ok(StepRecord {
            stage: self.stage,
            step: self.step,
            loss: value,
            l2: terms.l2,
            latent: terms.latent,
            l1: terms.l1,
            perceptual: terms.perceptual,
            grad_norm: sq.sqrt(),
            step_seconds: t0.elapsed().as_secs_f64(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.model,
            Some(&self.adam),
            self.stage,
            self.step,
            Some(serde_json::to_value(&self.config)?),
        )
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Loads parameters from `path`. Its model configuration must match up to the slot count,
    /// which no parameter depends on.
    pub fn init_from(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(ColfError::Config(format!("init checkpoint {} does not exist", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        let mut theirs = ck.model.clone();
        theirs.encoder.num_slots = self.config.model.encoder.num_slots;
        if theirs != self.config.model {
            return Err(ColfError::Config(format!(
                "init checkpoint {} has a different model configuration",
                path.display()
            )));
        }
        ck.restore_model(&self.model)?;
        self.adam = Adam::new(self.config.learning_rate);
        Ok(())
    }

    pub fn evaluate(&self, scenes: &[SceneData]) -> Result<EvalReport> {
        let r = ModelRenderer {
            model: &self.model,
            seed: self.config.seed,
        };
        evaluate(&r, scenes, Some(serde_json::to_value(&self.config.model)?))
    }

    /// Runs every stage in order, writing checkpoints, `train_log.tsv` and
    /// `eval_log.tsv` under `out_dir`. Returns the final checkpoint path.
    pub fn fit(&mut self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| ColfError::io(out_dir, e))?;
        let mut log = MetricsLog::open(&out_dir.join("train_log.tsv"))?;
        let mut eval_log = EvalLog::open(&out_dir.join("eval_log.tsv"))?;
        let stages = self.config.stages.clone();
        for (i, stage) in stages.iter().enumerate() {
            self.stage = i;
            if let Some(init) = &stage.init_from {
                self.init_from(init)?;
            }
            let data = Dataset::open(&stage.dataset)?;
            let train = data.load_split(Split::Train, stage.resolution)?;
            if train.is_empty() {
                return Err(ColfError::Config(format!("stage {i}: dataset has no training scenes")));
            }
            let held_out: Vec<SceneData> = data
                .load_split(Split::Test, stage.resolution)?
                .into_iter()
                .take(self.config.eval_scenes)
                .collect();
            log::info!("stage {i}: {} training scenes at {}px", train.len(), stage.resolution);
            for local in 0..stage.steps {
                let batch = self.sample_batch(&train)?;
                let record = self.train_step(&batch)?;
                log.append(&record)?;
                let done = local + 1 == stage.steps;
                if self.step % self.config.checkpoint_every == 0 || done {
                    self.save(&out_dir.join(format!("stage{i}_step{}.ckpt", self.step)))?;
                }
                if (self.step % self.config.eval_every == 0 || done) && !held_out.is_empty() {
                    let report = self.evaluate(&held_out)?;
                    eval_log.append(i, self.step, &report)?;
                }
            }
            self.save(&out_dir.join(format!("stage{i}.ckpt")))?;
        }
        let last = out_dir.join("final.ckpt");
        self.save(&last)?;
        Ok(last)
    }
}

/// Held-out metrics over training time.
pub struct EvalLog {
    writer: csv::Writer<fs::File>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: usize,
    pub step: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ari: Option<f64>,
    pub nv_ari: Option<f64>,
    pub fg_ari: Option<f64>,
}

impl EvalLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ColfError::io(path, e))?;
        Ok(EvalLog {
            writer: csv::WriterBuilder::new()
                .delimiter(b'\t')
                .has_headers(!exists)
                .from_writer(file),
        })
    }

    pub fn append(&mut self, stage: usize, step: u64, report: &EvalReport) -> Result<()> {
        let a = &report.aggregate;
        self.writer.serialize(EvalRecord {
            stage,
            step,
            psnr: a.psnr,
            ssim: a.ssim,
            ari: a.ari,
            nv_ari: a.nv_ari,
            fg_ari: a.fg_ari,
        })?;
        self.writer.flush().map_err(|e| ColfError::io("eval log", e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<EvalRecord>> {
        let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
        reader.deserialize().map(|r| r.map_err(ColfError::from)).collect()
    }
}

/// Renders dataset scenes with a trained model; slot noise is seeded per scene.
pub struct ModelRenderer<'a> {
    pub model: &'a ColfModel,
    pub seed: u64,
}

impl SceneRenderer for ModelRenderer<'_> {
    fn render_scene(&self, scene: &SceneData, context_view: usize) -> Result<Vec<ViewPrediction>> {
        let size = self.model.config.image_size;
        let ctx = scene.views[context_view].downsampled(size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (scene.index as u64).wrapping_mul(0x9E37_79B9));
        let cams: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
        let views = self.model.render_scene(&ctx.image, &ctx.camera, &cams, &mut rng)?;
        Ok(views
            .into_iter()
            .map(|v| ViewPrediction {
                labels: Some(v.segmentation().into_iter().map(|s| s as u32).collect()),
                image: v.image,
            })
            .collect())
    }
}
