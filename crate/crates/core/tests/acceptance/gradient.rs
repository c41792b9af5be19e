use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use colf::encoder::EncoderConfig;
use colf::lfdecoder::DecoderConfig;
use colf::model::{ColfModel, ComposedScene, ModelConfig};
use colf::raygeom::OrientedRay;
use colf::scenegen::{sample_scene, trace_view, GeneratorConfig, Profile};
use colf::train::{loss, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{err, flat_f64, Check, Outcome};

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
const TOP_ENTRIES: usize = 3;
const RANDOM_ENTRIES: usize = 2;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        encoder: EncoderConfig {
            slot_dim: 8,
            feature_channels: 8,
            num_slots: 2,
            iterations: 1,
            mlp_hidden: 8,
        },
        decoder: DecoderConfig {
            latent_dim: 8,
            hyper_hidden: 8,
            lfn_hidden: 8,
            feature_dim: 8,
            head_hidden: 8,
            hyper_output_gain: 1.0,
        },
        visibility_hidden: 8,
        background_fixed: false,
    }
}

struct Problem {
    image: Vec<f32>,
    camera: colf::raygeom::Camera,
    rays: Vec<OrientedRay>,
    targets: Tensor,
    noise: colf::encoder::SlotNoise,
}

impl Problem {
    fn new(model: &ColfModel) -> Result<Self, String> {
        let gen = GeneratorConfig::for_profile(Profile::ToyClevr);
        let spec = sample_scene(5, &gen).map_err(err)?;
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        let mut context = None;
        for (i, az) in [0.3, 1.9].iter().enumerate() {
            let cam = gen.rig.camera(*az, 8).map_err(err)?;
            let view = trace_view(&spec, &cam, false);
            rays.extend(cam.pixel_center_rays());
            targets.extend(view.image.iter().map(|&v| v as f64));
            if i == 0 {
                context = Some((view.image.clone(), cam));
            }
        }
        let (image, camera) = context.unwrap();
        let n = rays.len();
        Ok(Problem {
            image,
            camera,
            rays,
            targets: Tensor::from_vec(targets, (n, 3), &Device::Cpu).map_err(err)?,
            noise: model.sample_noise(&mut ChaCha8Rng::seed_from_u64(11)).map_err(err)?,
        })
    }

    fn loss(&self, model: &ColfModel) -> Result<Tensor, String> {
        let set = model.encode_with_noise(&self.image, &self.camera, &self.noise).map_err(err)?;
        let scene = ComposedScene::from_slot_set(&set).map_err(err)?;
        let out = model.render_rays(&scene, &self.rays).map_err(err)?;
        let latents = set.stacked().map_err(err)?;
        Ok(loss(&out.colors, &self.targets, &latents, &LossConfig::default(), None)
            .map_err(err)?
            .total)
    }

    fn loss_value(&self, model: &ColfModel) -> Result<f64, String> {
        Ok(flat_f64(&self.loss(model)?)[0])
    }
}

fn set_entry(var: &Var, values: &[f64], index: usize, value: f64) -> Result<(), String> {
    let mut v = values.to_vec();
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).map_err(err)?)
        .map_err(err)
}

pub fn run() -> Check {
    let start = Instant::now();
    let model = ColfModel::new(micro_config(), 17, DType::F64).map_err(err)?;
    let problem = Problem::new(&model)?;
    let grads = problem.loss(&model)?.backward().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut groups = 0;
    let mut entries = 0;
    for (name, var) in model.store.iter() {
        groups += 1;
        let values = flat_f64(var.as_tensor());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat_f64(g),
            None => vec![0.0; values.len()],
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut picked: Vec<usize> = order.iter().copied().take(TOP_ENTRIES).collect();
        while picked.len() < (TOP_ENTRIES + RANDOM_ENTRIES).min(values.len()) {
            let i = rng.random_range(0..values.len());
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for &i in &picked {
            set_entry(var, &values, i, values[i] + STEP)?;
            let up = problem.loss_value(&model)?;
            set_entry(var, &values, i, values[i] - STEP)?;
            let down = problem.loss_value(&model)?;
            set_entry(var, &values, i, values[i])?;
            let numeric = (up - down) / (2.0 * STEP);
            diff_sq += (numeric - analytic[i]).powi(2);
            a_sq += analytic[i].powi(2);
            n_sq += numeric.powi(2);
            entries += 1;
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        let rel = if scale < 1e-12 { diff_sq.sqrt() } else { diff_sq.sqrt() / scale };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        if rel >= TOL {
            failures.push(format!("{name} {rel:.2e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        failures.push(format!("runtime {secs:.0}s exceeds 300s"));
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{groups} parameter groups, {entries} entries, worst rel. error {:.2e} ({}), {secs:.1}s{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; over tolerance: {}", failures.join(", ")) }
        ),
    )
}
