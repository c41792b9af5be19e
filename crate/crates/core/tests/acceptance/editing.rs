use candle_core::{DType, IndexOp, Tensor, Var};
use colf::checkpoint::Checkpoint;
use colf::editor::{ground_position, EditOp, EditedScene, PortableSlot};
use colf::lfdecoder::{SlotFrame, SlotRole};
use colf::model::{ColfModel, ComposedScene, RenderedView, SlotPlacement};
use colf::raygeom::{Camera, RigidTransform, Vec3};
use colf::scenegen::{Dataset, Profile, SceneData, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{err, flat_f64, Check, Outcome};
use crate::micro;

const NEGLIGIBLE: f64 = 1e-3;
const DELETE_BOUND: f64 = 1e-2;
const ROUND_TRIP: f64 = 1e-6;
const SIGN_RATE: f64 = 0.8;
const MIN_REGION: usize = 3;

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn slot_weights(view: &RenderedView, pos: usize) -> impl Iterator<Item = f32> + '_ {
    view.weights.chunks(view.num_slots).map(move |w| w[pos])
}

fn test_scenes() -> Result<Vec<SceneData>, String> {
    let data = Dataset::open(micro::dataset(Profile::ToyClevr)?).map_err(err)?;
    data.load_split(Split::Test, micro::SIZE).map_err(err)
}

/// Gradient descent on a fresh latent until its compositing weight is negligible in every view.
fn negligible_latent(model: &ColfModel, scene: &EditedScene, cameras: &[Camera]) -> Result<Vec<f32>, String> {
    let base = scene.composed(DType::F32).map_err(err)?;
    let dim = model.config.decoder.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let init: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = Var::from_tensor(&Tensor::from_vec(init, dim, &candle_core::Device::Cpu).map_err(err)?).map_err(err)?;
    let rays: Vec<_> = cameras.iter().flat_map(|c| c.pixel_center_rays()).collect();
    let mut slots = base.slots.clone();
    slots.push(SlotPlacement {
        role: SlotRole::Foreground,
        frame: SlotFrame::Camera(cameras[0]),
        edit: RigidTransform::identity(),
        source: None,
    });
    for _ in 0..400 {
        let latents = Tensor::cat(&[base.latents.clone(), z.as_tensor().unsqueeze(0).map_err(err)?], 0).map_err(err)?;
        let composed = ComposedScene { latents, slots: slots.clone() };
        let out = model.render_rays(&composed, &rays).map_err(err)?;
        let w = out.weights.i(slots.len() - 1).map_err(err)?;
        let max = flat_f64(&w).into_iter().fold(0.0, f64::max);
        if max < NEGLIGIBLE / 10.0 {
            break;
        }
        let loss = w.log().and_then(|l| l.mean_all()).map_err(err)?;
        let g = loss.backward().map_err(err)?;
        let g = g.get(z.as_tensor()).ok_or("latent received no gradient")?;
        let norm = flat_f64(g).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        z.set(&(z.as_tensor() - (g * (0.5 / norm)).map_err(err)?).map_err(err)?).map_err(err)?;
    }
    z.as_tensor().to_vec1::<f32>().map_err(err)
}

/// Identity edit, negligible-slot deletion and duplicate/delete round trip on an untrained model.
fn untrained(failures: &mut Vec<String>) -> Result<String, String> {
    // At the small training gain a fresh latent barely moves its slot's visibility.
    let mut config = micro::model_config();
    config.decoder.hyper_output_gain = 1.0;
    let model = ColfModel::new(config, 3, DType::F32).map_err(err)?;
    let scenes = test_scenes()?;
    let scene = &scenes[0];
    let ctx = &scene.views[0];
    let set = model
        .encode(&ctx.image, &ctx.camera, &mut ChaCha8Rng::seed_from_u64(4))
        .map_err(err)?;
    let edited = EditedScene::from_slot_set(&set).map_err(err)?;
    let cameras: Vec<Camera> = scene.views.iter().map(|v| v.camera).collect();
    let render_all = |s: &EditedScene| -> Result<Vec<RenderedView>, String> {
        cameras.iter().map(|c| s.render(&model, c).map_err(err)).collect()
    };
    let base = render_all(&edited)?;

    let moved = edited
        .apply_all(&[
            EditOp::Translate { slot: 1, offset: [0.0; 3] },
            EditOp::Translate { slot: 2, offset: [0.0; 3] },
        ])
        .map_err(err)?;
    let identical = render_all(&moved)?.iter().zip(&base).all(|(a, b)| a.image == b.image && a.weights == b.weights);
    if !identical {
        failures.push("zero translation changed the render".into());
    }

    let latent = negligible_latent(&model, &edited, &cameras)?;
    let with = edited
        .apply(&EditOp::Import {
            from: PortableSlot {
                latent,
                context_camera: cameras[0].to_record(),
                source: "negligible".into(),
            },
            transform: RigidTransform::identity(),
        })
        .map_err(err)?;
    let new_id = with.slots.last().unwrap().id;
    let pos = with.position(new_id).map_err(err)?;
    let with_views = render_all(&with)?;
    let w_max = with_views
        .iter()
        .flat_map(|v| slot_weights(v, pos))
        .fold(0f32, f32::max) as f64;
    let deleted = render_all(&with.apply(&EditOp::Delete { slot: new_id }).map_err(err)?)?;
    let delete_change = with_views
        .iter()
        .zip(&deleted)
        .map(|(a, b)| max_diff(&a.image, &b.image))
        .fold(0.0, f64::max);
    if w_max >= NEGLIGIBLE {
        failures.push(format!("could not make a slot negligible (max weight {w_max:.1e})"));
    }
    if delete_change > DELETE_BOUND {
        failures.push(format!("deleting a negligible slot changed a pixel by {delete_change:.2e}"));
    }

    let dup = edited
        .apply(&EditOp::Duplicate {
            slot: 1,
            transform: RigidTransform::from_translation(Vec3::new(0.6, 0.0, -0.4)).compose(&RigidTransform::from_yaw(0.7)),
        })
        .map_err(err)?;
    let dup_id = dup.slots.last().unwrap().id;
    let back = render_all(&dup.apply(&EditOp::Delete { slot: dup_id }).map_err(err)?)?;
    let round_trip = back.iter().zip(&base).map(|(a, b)| max_diff(&a.image, &b.image)).fold(0.0, f64::max);
    if round_trip > ROUND_TRIP {
        failures.push(format!("duplicate/delete round trip error {round_trip:.2e}"));
    }
    Ok(format!(
        "untrained: zero translation {}, negligible slot (max weight {w_max:.1e}) delete change {delete_change:.1e}, \
         duplicate/delete round trip {round_trip:.1e}",
        if identical { "bit-identical" } else { "differs" }
    ))
}

fn centroid(view: &RenderedView, pos: usize) -> Option<(f64, f64, usize)> {
    let (mut x, mut y, mut n) = (0.0, 0.0, 0);
    for (i, s) in view.segmentation().into_iter().enumerate() {
        if s == pos {
            x += (i % view.width) as f64 + 0.5;
            y += (i / view.width) as f64 + 0.5;
            n += 1;
        }
    }
    (n > 0).then(|| (x / n as f64, y / n as f64, n))
}

/// Translating a slot moves its segmentation region in the projected direction.
fn translation_sign(failures: &mut Vec<String>) -> Result<String, String> {
    let ckpt = micro::stage_a()?.checkpoint;
    let model = Checkpoint::load(&ckpt).map_err(err)?.build_model(DType::F32).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut trials, mut agree) = (0, 0);
    for scene in test_scenes()? {
        let ctx = &scene.views[0];
        let cam = ctx.camera;
        let set = model.encode(&ctx.image, &cam, &mut ChaCha8Rng::seed_from_u64(scene.index as u64)).map_err(err)?;
        let edited = EditedScene::from_slot_set(&set).map_err(err)?;
        let view = edited.render(&model, &cam).map_err(err)?;
        for slot in edited.slots.iter().filter(|s| s.placement.role == SlotRole::Foreground) {
            let pos = edited.position(slot.id).map_err(err)?;
            let Some((x0, y0, n)) = centroid(&view, pos) else { continue };
            if n < MIN_REGION {
                continue;
            }
            let Ok(at) = ground_position(&edited, &view, &cam, slot.id) else { continue };
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = Vec3::new(0.6 * a.cos(), 0.0, 0.6 * a.sin());
            let (Some(p0), Some(p1)) = (cam.project(&at), cam.project(&(at + d))) else { continue };
            let moved = edited
                .apply(&EditOp::Translate { slot: slot.id, offset: [d.x, d.y, d.z] })
                .map_err(err)?
                .render(&model, &cam)
                .map_err(err)?;
            trials += 1;
            if let Some((x1, y1, _)) = centroid(&moved, pos) {
                if (x1 - x0) * (p1[0] - p0[0]) + (y1 - y0) * (p1[1] - p0[1]) > 0.0 {
                    agree += 1;
                }
            }
        }
    }
    let rate = agree as f64 / trials.max(1) as f64;
    if trials == 0 || rate < SIGN_RATE {
        failures.push(format!("translation sign agreement {agree}/{trials}"));
    }
    Ok(format!(
        "trained: centroid shift agrees with projected translation in {agree}/{trials} trials ({:.0}%, need {:.0}%)",
        100.0 * rate,
        100.0 * SIGN_RATE
    ))
}

pub fn run() -> Check {
    let mut failures = Vec::new();
    let a = untrained(&mut failures)?;
    let b = translation_sign(&mut failures)?;
    Outcome::new(
        failures.is_empty(),
        format!(
            "{a}; {b}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}
