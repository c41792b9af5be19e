//! Object-level editing on encoded scenes: translate, delete, duplicate and import.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::SlotSet;
use crate::error::{ColfError, Result};
use crate::lfdecoder::{SlotFrame, SlotRole};
use crate::model::{ColfModel, ComposedScene, RenderedView, SlotPlacement};
use crate::raygeom::{Camera, CameraRecord, RigidTransform, Vec3};

/// A slot latent carried across scenes together with the camera it was encoded under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortableSlot {
    pub latent: Vec<f32>,
    pub context_camera: CameraRecord,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Translate { slot: usize, offset: [f64; 3] },
    Delete { slot: usize },
    Duplicate { slot: usize, transform: RigidTransform },
    Import { from: PortableSlot, transform: RigidTransform },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditedSlot {
    /// Stable identifier; the background is always 0.
    pub id: usize,
    pub latent: Vec<f32>,
    pub placement: SlotPlacement,
}

/// Roster entry as reported to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub index: usize,
    pub role: SlotRole,
    pub edit_transform: RigidTransform,
    pub source: Option<String>,
}

/// An encoded scene plus edits; immutable, every edit returns a new value.
#[derive(Clone, Debug, PartialEq)]
pub struct EditedScene {
    pub slots: Vec<EditedSlot>,
    next_id: usize,
}

impl EditedScene {
    pub fn from_slot_set(set: &SlotSet) -> Result<Self> {
        let base = ComposedScene::from_slot_set(set)?;
        let latents = set.latents_f32()?;
        let slots: Vec<EditedSlot> = base
            .slots
            .into_iter()
            .zip(latents)
            .enumerate()
            .map(|(id, (placement, latent))| EditedSlot { id, latent, placement })
            .collect();
        Ok(EditedScene {
            next_id: slots.len(),
            slots,
        })
    }

    pub fn roster(&self) -> Vec<RosterEntry> {
        self.slots
            .iter()
            .map(|s| RosterEntry {
                index: s.id,
                role: s.placement.role,
                edit_transform: s.placement.edit,
                source: s.placement.source.clone(),
            })
            .collect()
    }

    pub fn position(&self, id: usize) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| ColfError::NotFound(format!("slot {id}")))
    }

    pub fn slot(&self, id: usize) -> Result<&EditedSlot> {
        Ok(&self.slots[self.position(id)?])
    }

    fn foreground_position(&self, id: usize, action: &str) -> Result<usize> {
        let pos = self.position(id)?;
        if self.slots[pos].placement.role == SlotRole::Background {
            return Err(ColfError::Contract(format!("cannot {action} the background slot")));
        }
        Ok(pos)
    }

    /// The slot as a portable record for import into another scene.
    pub fn export(&self, id: usize, source: &str) -> Result<PortableSlot> {
        let pos = self.foreground_position(id, "export")?;
        let slot = &self.slots[pos];
        let SlotFrame::Camera(cam) = slot.placement.frame else {
            return Err(ColfError::Contract("foreground slot without a camera frame".into()));
        };
        Ok(PortableSlot {
            latent: slot.latent.clone(),
            context_camera: cam.to_record(),
            source: slot.placement.source.clone().unwrap_or_else(|| source.to_string()),
        })
    }

    pub fn apply(&self, op: &EditOp) -> Result<EditedScene> {
        let mut next = self.clone();
        match op {
            EditOp::Translate { slot, offset } => {
                let pos = next.foreground_position(*slot, "translate")?;
                let t = Vec3::from(*offset);
                if !t.iter().all(|v| v.is_finite()) {
                    return Err(ColfError::Domain("translation must be finite".into()));
                }
                let p = &mut next.slots[pos].placement;
                p.edit = RigidTransform::from_translation(t).compose(&p.edit);
            }
            EditOp::Delete { slot } => {
                let pos = next.foreground_position(*slot, "delete")?;
                next.slots.remove(pos);
            }
            EditOp::Duplicate { slot, transform } => {
                let pos = next.foreground_position(*slot, "duplicate")?;
                check_rigid(transform)?;
                let mut copy = next.slots[pos].clone();
                copy.id = next.next_id;
                copy.placement.edit = transform.compose(&copy.placement.edit);
                next.next_id += 1;
                next.slots.push(copy);
            }
            EditOp::Import { from, transform } => {
                check_rigid(transform)?;
                let dim = self.slots[0].latent.len();
                if from.latent.len() != dim {
                    return Err(ColfError::Contract(format!(
                        "imported latent has {} entries, scene uses {dim}",
                        from.latent.len()
                    )));
                }
                let camera = Camera::from_record(&from.context_camera)?;
                next.slots.push(EditedSlot {
                    id: next.next_id,
                    latent: from.latent.clone(),
                    placement: SlotPlacement {
                        role: SlotRole::Foreground,
                        frame: SlotFrame::Camera(camera),
                        edit: *transform,
                        source: Some(from.source.clone()),
                    },
                });
                next.next_id += 1;
            }
        }
        Ok(next)
    }

    /// Applies `ops` in order; on any error nothing is applied.
    pub fn apply_all(&self, ops: &[EditOp]) -> Result<EditedScene> {
        let mut scene = self.clone();
        for (i, op) in ops.iter().enumerate() {
            scene = scene.apply(op).map_err(|e| match e {
                ColfError::NotFound(m) => ColfError::NotFound(format!("edit {i}: {m}")),
                ColfError::Contract(m) => ColfError::Contract(format!("edit {i}: {m}")),
                ColfError::Domain(m) => ColfError::Domain(format!("edit {i}: {m}")),
                other => other,
            })?;
        }
        Ok(scene)
    }

    pub fn composed(&self, dtype: DType) -> Result<ComposedScene> {
        let dim = self.slots[0].latent.len();
        let flat: Vec<f32> = self.slots.iter().flat_map(|s| s.latent.iter().copied()).collect();
        Ok(ComposedScene {
            latents: Tensor::from_vec(flat, (self.slots.len(), dim), &Device::Cpu)?.to_dtype(dtype)?,
            slots: self.slots.iter().map(|s| s.placement.clone()).collect(),
        })
    }

    pub fn render(&self, model: &ColfModel, camera: &Camera) -> Result<RenderedView> {
        model.render_view(&self.composed(model.dtype())?, camera)
    }
}

fn check_rigid(t: &RigidTransform) -> Result<()> {
    if !t.is_rigid(1e-6) {
        return Err(ColfError::Domain("edit transform is not rigid".into()));
    }
    Ok(())
}

/// Ground-plane point under the weight-averaged pixel of slot `id` in `view`,
/// rendered from `camera`.
pub fn ground_position(scene: &EditedScene, view: &RenderedView, camera: &Camera, id: usize) -> Result<Vec3> {
    let pos = scene.position(id)?;
    let seg = view.segmentation();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &s) in seg.iter().enumerate() {
        if s == pos {
            sx += (i % view.width) as f64 + 0.5;
            sy += (i / view.width) as f64 + 0.5;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ColfError::NotFound(format!("slot {id} is not visible")));
    }
    let ray = crate::raygeom::pixel_to_ray(camera, [sx / n as f64, sy / n as f64])?;
    if ray.direction.y >= -1e-9 {
        return Err(ColfError::Domain("slot centroid ray does not hit the ground".into()));
    }
    Ok(ray.at(-ray.origin.y / ray.direction.y))
}

/// Moves slot `id` so its estimated ground position lands on `target`.
pub fn centering_edits(model: &ColfModel, scene: &EditedScene, camera: &Camera, id: usize, target: Vec3) -> Result<Vec<EditOp>> {
    let view = scene.render(model, camera)?;
    let at = ground_position(scene, &view, camera, id)?;
    Ok(vec![EditOp::Translate {
        slot: id,
        offset: [target.x - at.x, 0.0, target.z - at.z],
    }])
}

/// One edit list per frame, moving slot `id` around a circle of `radius` about `center`.
pub fn circling_edits(
    model: &ColfModel,
    scene: &EditedScene,
    camera: &Camera,
    id: usize,
    center: Vec3,
    radius: f64,
    frames: usize,
) -> Result<Vec<Vec<EditOp>>> {
    let view = scene.render(model, camera)?;
    let at = ground_position(scene, &view, camera, id)?;
    Ok((0..frames)
        .map(|f| {
            let a = std::f64::consts::TAU * f as f64 / frames as f64;
            let goal = center + Vec3::new(radius * a.cos(), 0.0, radius * a.sin());
            vec![EditOp::Translate {
                slot: id,
                offset: [goal.x - at.x, 0.0, goal.z - at.z],
            }]
        })
        .collect())
}
