//! Procedural multi-object scenes on a ground plane, traced analytically.
//!
//! Two profiles are provided: `toy-clevr` (spheres, cubes and cylinders on a
//! flat gray floor) and `toy-room` (identical tall boxes standing in for
//! chairs, with one of three floor finishes per scene).

mod dataset;
mod trace;

pub use dataset::{generate_dataset, scene_seed, to_u8, Dataset, DatasetConfig, Manifest, SceneData, Split, ViewData};
pub use trace::{intersect_primitive, trace_view, Hit, ViewRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::raygeom::{Camera, RigidTransform, Vec3};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_LAYOUT_RESTARTS: usize = 20;

/// Half extents of the `tall-box` shape in units of the primitive size.
pub const TALL_BOX_ASPECT: [f64; 3] = [0.55, 1.25, 0.55];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    TallBox,
}

impl Shape {
    /// Distance from the object center down to the ground contact.
    pub fn half_height(self, size: f64) -> f64 {
        match self {
            Shape::TallBox => size * TALL_BOX_ASPECT[1],
            _ => size,
        }
    }

    pub fn bounding_radius(self, size: f64) -> f64 {
        match self {
            Shape::Sphere => size,
            Shape::Cube => size * 3f64.sqrt(),
            Shape::Cylinder => size * 2f64.sqrt(),
            Shape::TallBox => {
                let [a, b, c] = TALL_BOX_ASPECT;
                size * (a * a + b * b + c * c).sqrt()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    /// Object-to-world pose; the translation is the object center.
    pub pose: RigidTransform,
    pub size: f64,
    pub albedo: [f64; 3],
    pub object_id: u8,
}

impl ScenePrimitive {
    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn bounding_radius(&self) -> f64 {
        self.shape.bounding_radius(self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub albedo: [f64; 3],
    /// Second color of a checkerboard with unit tiles.
    #[serde(default)]
    pub checker: Option<[f64; 3]>,
}

impl Floor {
    pub fn plain(albedo: [f64; 3]) -> Self {
        Floor {
            albedo,
            checker: None,
        }
    }

    pub fn albedo_at(&self, x: f64, z: f64) -> [f64; 3] {
        match self.checker {
            Some(other) if (x.floor() as i64 + z.floor() as i64).rem_euclid(2) == 1 => other,
            _ => self.albedo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<ScenePrimitive>,
    pub floor: Floor,
    /// Unit vector pointing toward the light.
    pub light_direction: [f64; 3],
    pub ambient: f64,
    pub sky: [f64; 3],
    #[serde(default)]
    pub shadows: bool,
}

impl SceneSpec {
    pub fn empty(floor: Floor) -> Self {
        SceneSpec {
            primitives: Vec::new(),
            floor,
            light_direction: default_light(),
            ambient: 0.35,
            sky: [0.82, 0.85, 0.9],
            shadows: false,
        }
    }

    pub fn light(&self) -> Vec3 {
        Vec3::from(self.light_direction).normalize()
    }
}

fn default_light() -> [f64; 3] {
    let l = Vec3::new(-0.4, 1.0, -0.3).normalize();
    [l.x, l.y, l.z]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    ToyClevr,
    ToyRoom,
}

impl std::str::FromStr for Profile {
    type Err = ColfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-clevr" => Ok(Profile::ToyClevr),
            "toy-room" => Ok(Profile::ToyRoom),
            other => Err(ColfError::Config(format!("unknown scene profile '{other}'"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::ToyClevr => "toy-clevr",
            Profile::ToyRoom => "toy-room",
        })
    }
}

/// Camera placement: fixed elevation, random azimuth, aimed at `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub distance: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub target: [f64; 3],
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            distance: 5.5,
            elevation_deg: 35.0,
            fov_deg: 50.0,
            target: [0.0, 0.0, 0.0],
        }
    }
}

impl CameraRig {
    pub fn camera(&self, azimuth: f64, image_size: usize) -> Result<Camera> {
        let elev = self.elevation_deg.to_radians();
        let target = Vec3::from(self.target);
        let eye = target
            + Vec3::new(
                self.distance * elev.cos() * azimuth.cos(),
                self.distance * elev.sin(),
                self.distance * elev.cos() * azimuth.sin(),
            );
        Camera::look_at(eye, target, self.fov_deg.to_radians(), image_size, image_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub profile: Profile,
    pub n_min: usize,
    pub n_max: usize,
    pub size_range: [f64; 2],
    pub placement_radius: f64,
    pub shapes: Vec<Shape>,
    pub palette: Vec<[f64; 3]>,
    pub floors: Vec<Floor>,
    pub ambient: f64,
    pub shadows: bool,
    /// 2×2 supersampling for images; masks and depth always use the pixel center.
    pub supersample: bool,
    pub rig: CameraRig,
}

const CLEVR_PALETTE: [[f64; 3]; 8] = [
    [0.68, 0.16, 0.14],
    [0.16, 0.32, 0.75],
    [0.11, 0.55, 0.22],
    [0.51, 0.30, 0.10],
    [0.50, 0.17, 0.63],
    [0.16, 0.68, 0.70],
    [0.95, 0.85, 0.20],
    [0.97, 0.97, 0.97],
];

impl GeneratorConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::ToyClevr => GeneratorConfig {
                profile,
                n_min: 2,
                n_max: 4,
                size_range: [0.45, 0.7],
                placement_radius: 1.8,
                shapes: vec![Shape::Sphere, Shape::Cube, Shape::Cylinder],
                palette: CLEVR_PALETTE.to_vec(),
                floors: vec![Floor::plain([0.5, 0.5, 0.5])],
                ambient: 0.35,
                shadows: false,
                supersample: true,
                rig: CameraRig::default(),
            },
            Profile::ToyRoom => GeneratorConfig {
                profile,
                n_min: 2,
                n_max: 3,
                size_range: [0.5, 0.6],
                placement_radius: 1.7,
                shapes: vec![Shape::TallBox],
                palette: CLEVR_PALETTE[..6].to_vec(),
                floors: vec![
                    Floor::plain([0.62, 0.52, 0.40]),
                    Floor::plain([0.35, 0.38, 0.42]),
                    Floor {
                        albedo: [0.75, 0.75, 0.72],
                        checker: Some([0.45, 0.45, 0.43]),
                    },
                ],
                ambient: 0.35,
                shadows: false,
                supersample: true,
                rig: CameraRig::default(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.palette.is_empty() || self.shapes.is_empty() || self.floors.is_empty() {
            return Err(ColfError::Config(
                "palette, shapes and floors must be nonempty".into(),
            ));
        }
        if self.n_min > self.n_max {
            return Err(ColfError::Config(format!(
                "n_min {} exceeds n_max {}",
                self.n_min, self.n_max
            )));
        }
        if self.n_max > u8::MAX as usize {
            return Err(ColfError::Config("at most 255 objects per scene".into()));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(ColfError::Config("invalid size range".into()));
        }
        Ok(())
    }
}

/// Samples a scene deterministically from `seed`.
///
/// Objects are placed by rejection sampling so that bounding spheres never
/// overlap.
pub fn sample_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(cfg.n_min..=cfg.n_max);
    let floor = cfg.floors[rng.random_range(0..cfg.floors.len())].clone();

    let mut failure = 0;
    let mut primitives = None;
    for _ in 0..MAX_LAYOUT_RESTARTS {
        match place_objects(&mut rng, count, cfg) {
            Ok(p) => {
                primitives = Some(p);
                break;
            }
            Err(index) => failure = index,
        }
    }
    let primitives = primitives.ok_or_else(|| ColfError::Generation {
        seed,
        reason: format!(
            "could not place object {} after {MAX_PLACEMENT_ATTEMPTS} attempts in each of {MAX_LAYOUT_RESTARTS} layouts",
            failure + 1
        ),
    })?;

    Ok(SceneSpec {
        primitives,
        floor,
        light_direction: default_light(),
        ambient: cfg.ambient,
        sky: [0.82, 0.85, 0.9],
        shadows: cfg.shadows,
    })
}

/// One rejection-sampled layout; on failure returns the index of the object
/// that could not be placed.
fn place_objects(rng: &mut ChaCha8Rng, count: usize, cfg: &GeneratorConfig) -> std::result::Result<Vec<ScenePrimitive>, usize> {
    let mut primitives: Vec<ScenePrimitive> = Vec::with_capacity(count);
    for index in 0..count {
        let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let size = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
        let albedo = cfg.palette[rng.random_range(0..cfg.palette.len())];
        let radius = shape.bounding_radius(size);

        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = cfg.placement_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let center = Vec3::new(r * phi.cos(), shape.half_height(size), r * phi.sin());
            let clear = primitives
                .iter()
                .all(|p| (p.center() - center).norm() > p.bounding_radius() + radius);
            if clear {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or(index)?;
        let yaw = match shape {
            Shape::Sphere => 0.0,
            _ => rng.random_range(0.0..std::f64::consts::TAU),
        };
        primitives.push(ScenePrimitive {
            shape,
            pose: RigidTransform {
                translation: center,
                ..RigidTransform::from_yaw(yaw)
            },
            size,
            albedo,
            object_id: (index + 1) as u8,
        });
    }

    Ok(primitives)
}
