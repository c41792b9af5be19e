use crate::raygeom::{transform_ray, Camera, OrientedRay, Vec3};

use super::{SceneSpec, ScenePrimitive, Shape, TALL_BOX_ASPECT};

const EPS: f64 = 1e-9;

/// One traced view with ground truth.
#[derive(Clone, Debug)]
pub struct ViewRecord {
    /// Row-major H×W×3 in [0, 1].
    pub image: Vec<f32>,
    /// Row-major H×W; 0 is background, k is the object id.
    pub mask: Vec<u8>,
    /// Ray distance to the visible surface; infinite for sky pixels.
    pub depth: Vec<f32>,
    pub camera: Camera,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

/// Nearest intersection of `ray` with a primitive, in world units.
pub fn intersect_primitive(prim: &ScenePrimitive, ray: &OrientedRay) -> Option<Hit> {
    let local = transform_ray(&prim.pose.inverse(), ray);
    let hit = match prim.shape {
        Shape::Sphere => hit_sphere(&local, prim.size),
        Shape::Cube => hit_box(&local, Vec3::repeat(prim.size)),
        Shape::TallBox => hit_box(&local, Vec3::from(TALL_BOX_ASPECT) * prim.size),
        Shape::Cylinder => hit_cylinder(&local, prim.size, prim.size),
    }?;
    Some(Hit {
        t: hit.t,
        normal: prim.pose.apply_vector(&hit.normal),
    })
}

fn hit_sphere(ray: &OrientedRay, radius: f64) -> Option<Hit> {
    let b = ray.origin.dot(&ray.direction);
    let c = ray.origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = [-b - sq, -b + sq].into_iter().find(|&t| t > EPS)?;
    Some(Hit {
        t,
        normal: ray.at(t).normalize(),
    })
}

fn hit_box(ray: &OrientedRay, half: Vec3) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        if d.abs() < 1e-15 {
            if o.abs() > half[axis] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((-half[axis] - o) / d, (half[axis] - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = axis;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > EPS {
        (t_near, near_axis)
    } else if t_far > EPS {
        (t_far, far_axis)
    } else {
        return None;
    };
    let mut normal = Vec3::zeros();
    normal[axis] = ray.at(t)[axis].signum();
    Some(Hit { t, normal })
}

fn hit_cylinder(ray: &OrientedRay, radius: f64, half_height: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, normal: Vec3| {
        if t > EPS && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, normal });
        }
    };

    let (ox, oz, dx, dz) = (ray.origin.x, ray.origin.z, ray.direction.x, ray.direction.z);
    let a = dx * dx + dz * dz;
    if a > 1e-15 {
        let b = ox * dx + oz * dz;
        let c = ox * ox + oz * oz - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let p = ray.at(t);
                if p.y.abs() <= half_height {
                    consider(t, Vec3::new(p.x, 0.0, p.z).normalize());
                }
            }
        }
    }
    if ray.direction.y.abs() > 1e-15 {
        for cap in [-half_height, half_height] {
            let t = (cap - ray.origin.y) / ray.direction.y;
            let p = ray.at(t);
            if p.x * p.x + p.z * p.z <= radius * radius {
                consider(t, Vec3::new(0.0, cap.signum(), 0.0));
            }
        }
    }
    best
}

enum Surface<'a> {
    Object(&'a ScenePrimitive, Hit),
    Ground(f64),
    Sky,
}

fn nearest<'a>(scene: &'a SceneSpec, ray: &OrientedRay) -> Surface<'a> {
    let mut best: Option<(&ScenePrimitive, Hit)> = None;
    for prim in &scene.primitives {
        if let Some(hit) = intersect_primitive(prim, ray) {
            if best.is_none_or(|(_, b)| hit.t < b.t) {
                best = Some((prim, hit));
            }
        }
    }
    let ground = if ray.direction.y < -1e-12 && ray.origin.y > 0.0 {
        Some(-ray.origin.y / ray.direction.y)
    } else {
        None
    };
    match (best, ground) {
        (Some((p, h)), g) if g.is_none_or(|g| h.t <= g) => Surface::Object(p, h),
        (_, Some(g)) => Surface::Ground(g),
        _ => Surface::Sky,
    }
}

fn occluded(scene: &SceneSpec, point: Vec3, light: Vec3) -> bool {
    let ray = OrientedRay {
        origin: point,
        direction: light,
    };
    scene
        .primitives
        .iter()
        .any(|p| intersect_primitive(p, &ray).is_some())
}

fn shade(scene: &SceneSpec, albedo: [f64; 3], point: Vec3, normal: Vec3) -> [f64; 3] {
    let light = scene.light();
    let mut lambert = normal.dot(&light).max(0.0);
    if scene.shadows && lambert > 0.0 && occluded(scene, point + normal * 1e-6, light) {
        lambert = 0.0;
    }
    let k = scene.ambient + (1.0 - scene.ambient) * lambert;
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

/// Returns (color, object id, depth) along one ray.
fn trace_ray(scene: &SceneSpec, ray: &OrientedRay) -> ([f64; 3], u8, f64) {
    match nearest(scene, ray) {
        Surface::Object(prim, hit) => {
            let color = shade(scene, prim.albedo, ray.at(hit.t), hit.normal);
            (color, prim.object_id, hit.t)
        }
        Surface::Ground(t) => {
            let p = ray.at(t);
            let albedo = scene.floor.albedo_at(p.x, p.z);
            (shade(scene, albedo, p, Vec3::y()), 0, t)
        }
        Surface::Sky => (scene.sky, 0, f64::INFINITY),
    }
}

/// Renders `scene` from `camera` with Lambertian + ambient shading.
pub fn trace_view(scene: &SceneSpec, camera: &Camera, supersample: bool) -> ViewRecord {
    let (w, h) = (camera.width, camera.height);
    let mut image = vec![0f32; w * h * 3];
    let mut mask = vec![0u8; w * h];
    let mut depth = vec![0f32; w * h];
    let offsets: &[(f64, f64)] = if supersample {
        &[(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    } else {
        &[(0.5, 0.5)]
    };
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let center = crate::raygeom::pixel_to_ray(camera, [x as f64 + 0.5, y as f64 + 0.5])
                .expect("pixel center inside image");
            let (center_color, id, t) = trace_ray(scene, &center);
            mask[idx] = id;
            depth[idx] = t as f32;

            let mut acc = [0.0f64; 3];
            if supersample {
                for &(dx, dy) in offsets {
                    let ray = crate::raygeom::pixel_to_ray(camera, [x as f64 + dx, y as f64 + dy])
                        .expect("subpixel inside image");
                    let (c, _, _) = trace_ray(scene, &ray);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
                acc.iter_mut().for_each(|v| *v /= offsets.len() as f64);
            } else {
                acc = center_color;
            }
            for ch in 0..3 {
                image[idx * 3 + ch] = acc[ch] as f32;
            }
        }
    }
    ViewRecord {
        image,
        mask,
        depth,
        camera: *camera,
    }
}
