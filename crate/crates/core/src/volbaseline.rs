//! Per-slot volumetric decoder used as the cost baseline, peak-memory probe and
//! the rendering benchmark.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::lfdecoder::slot_from_world;
use crate::model::{ColfModel, ComposedScene, ModelConfig, RenderedView};
use crate::nn::{sigmoid, Builder, Mlp, ParamStore};
use crate::raygeom::{Camera, OrientedRay};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Global allocator wrapper that records current and peak heap usage.
/// Install with `#[global_allocator]` in a binary or test target to enable
/// memory figures in benchmark reports.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

fn record_alloc(size: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Peak-allocation probe over the process heap.
pub mod memory {
    use super::*;

    /// True once a [`TrackingAllocator`] has served an allocation.
    pub fn tracking() -> bool {
        ACTIVE.load(Ordering::Relaxed)
    }

    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current usage.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub frequencies: usize,
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// Rays processed per chunk.
    pub chunk_rays: usize,
}

impl Default for VolConfig {
    fn default() -> Self {
        VolConfig {
            latent_dim: 128,
            hidden: 128,
            frequencies: 5,
            samples: 64,
            near: 2.5,
            far: 9.0,
            chunk_rays: 256,
        }
    }
}

impl VolConfig {
    pub fn encoded_dim(&self) -> usize {
        3 + 6 * self.frequencies
    }

    /// Sample count that keeps `density` samples per world unit over [near, far].
    pub fn samples_for_density(near: f64, far: f64, density: f64) -> usize {
        ((far - near) * density).ceil().max(2.0) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(ColfError::Config("volumetric rendering needs at least 2 samples".into()));
        }
        if !(self.near < self.far && self.near >= 0.0) {
            return Err(ColfError::Config("need 0 ≤ near < far".into()));
        }
        if self.chunk_rays == 0 {
            return Err(ColfError::Config("chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// Latent-conditioned radiance field shared by all slots.
pub struct VolDecoder {
    pub config: VolConfig,
    pub store: ParamStore,
    pub mlp: Mlp,
    evaluations: AtomicU64,
}

impl VolDecoder {
    pub fn new(config: VolConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mlp = Mlp::new(
            &mut Builder::new(&mut store, &mut rng).sub("vol"),
            &[config.encoded_dim() + config.latent_dim, h, h, h, 4],
        )?;
        Ok(VolDecoder {
            config,
            store,
            mlp,
            evaluations: AtomicU64::new(0),
        })
    }

    /// Per-slot point evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn positional_encoding(&self, p: [f64; 3], out: &mut Vec<f32>) {
        out.extend(p.iter().map(|&v| v as f32));
        for f in 0..self.config.frequencies {
            let scale = (1u64 << f) as f64 * std::f64::consts::PI;
            for &v in &p {
                out.push((scale * v).sin() as f32);
            }
            for &v in &p {
                out.push((scale * v).cos() as f32);
            }
        }
    }

    /// Evaluates (density, rgb) for every slot at the given sample points.
    /// Returns tensors (S, P) and (S, P, 3).
    fn query(&self, scene: &ComposedScene, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
        let s = scene.len();
        let enc = self.config.encoded_dim();
        let mut data = Vec::with_capacity(s * points.len() * enc);
        for slot in &scene.slots {
            let to_slot = slot_from_world(slot.role, &slot.frame, &slot.edit)?;
            for p in points {
                let q = to_slot.apply_point(&(*p).into());
                self.positional_encoding([q.x, q.y, q.z], &mut data);
            }
        }
        let x = Tensor::from_vec(data, (s, points.len(), enc), &Device::Cpu)?;
        let z = scene
            .latents
            .to_dtype(DType::F32)?
            .unsqueeze(1)?
            .broadcast_as((s, points.len(), self.config.latent_dim))?;
        let out = self.mlp.forward(&Tensor::cat(&[&x, &z], 2)?)?;
        self.evaluations.fetch_add((s * points.len()) as u64, Ordering::Relaxed);
        let raw_density = out.narrow(2, 0, 1)?.squeeze(2)?;
        // softplus(x) = max(x, 0) + ln(1 + e^{-|x|})
        let density = (raw_density.relu()? + (raw_density.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        let rgb = sigmoid(&out.narrow(2, 1, 3)?)?;
        Ok((density, rgb))
    }

    /// Composites stratified samples along `rays`; returns colors (R·3) and per-ray alpha weights (R·N).
    pub fn render_rays(&self, scene: &ComposedScene, rays: &[OrientedRay], rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, Vec<f32>)> {
        use rand::Rng;
        let n = self.config.samples;
        let (near, far) = (self.config.near, self.config.far);
        let bin = (far - near) / n as f64;
        let mut ts = Vec::with_capacity(rays.len() * n);
        let mut points = Vec::with_capacity(rays.len() * n);
        for ray in rays {
            for i in 0..n {
                let t = near + bin * (i as f64 + rng.random::<f64>());
                ts.push(t);
                let p = ray.at(t);
                points.push([p.x, p.y, p.z]);
            }
        }
        let (density, rgb) = self.query(scene, &points)?;
        // Sum densities over slots; color is the density-weighted mean.
        let sigma = density.sum(0)?;
        let mixed = rgb
            .broadcast_mul(&density.unsqueeze(2)?)?
            .sum(0)?
            .broadcast_div(&(sigma.unsqueeze(1)? + 1e-10)?)?;
        let sigma = sigma.to_vec1::<f32>()?;
        let mixed = mixed.flatten_all()?.to_vec1::<f32>()?;
        let mut colors = vec![0f32; rays.len() * 3];
        let mut weights = vec![0f32; rays.len() * n];
        for r in 0..rays.len() {
            let mut transmittance = 1.0f64;
            for i in 0..n {
                let k = r * n + i;
                let delta = if i + 1 < n { ts[k + 1] - ts[k] } else { far - ts[k] };
                let alpha = 1.0 - (-(sigma[k] as f64) * delta).exp();
                let w = transmittance * alpha;
                weights[k] = w as f32;
                for c in 0..3 {
                    colors[r * 3 + c] += (w * mixed[k * 3 + c] as f64) as f32;
                }
                transmittance *= 1.0 - alpha;
            }
        }
        Ok((colors, weights))
    }

    pub fn render_view(&self, scene: &ComposedScene, camera: &Camera, seed: u64) -> Result<Vec<f32>> {
        let rays = camera.pixel_center_rays();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Vec::with_capacity(rays.len() * 3);
        for chunk in rays.chunks(self.config.chunk_rays) {
            image.extend(self.render_rays(scene, chunk, &mut rng)?.0);
        }
        Ok(image)
    }

    /// Rough peak working set of one chunk, in bytes.
    pub fn estimated_chunk_bytes(&self, slots: usize) -> usize {
        let pts = self.config.chunk_rays.min(usize::MAX) * self.config.samples * slots;
        let width = self.config.encoded_dim() + self.config.latent_dim;
        // input, three hidden activations kept alive during the forward, outputs
        pts * 4 * (2 * width + 3 * self.config.hidden + 8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Lightfield,
    Volumetric,
}

impl std::str::FromStr for DecoderKind {
    type Err = ColfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lightfield" => Ok(DecoderKind::Lightfield),
            "volumetric" => Ok(DecoderKind::Volumetric),
            other => Err(ColfError::Config(format!("unknown decoder '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub decoder: DecoderKind,
    pub slots: usize,
    pub samples: usize,
    pub resolution: usize,
    pub warmup: usize,
    pub frames: usize,
    /// Estimated working sets above this are reported as out of memory.
    pub memory_budget: usize,
    pub seed: u64,
}

impl BenchSettings {
    pub fn new(decoder: DecoderKind, slots: usize, samples: usize, resolution: usize) -> Self {
        BenchSettings {
            decoder,
            slots,
            samples,
            resolution,
            warmup: 3,
            frames: 10,
            memory_budget: 3 << 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub decoder: DecoderKind,
    /// Foreground slots; one background slot is rendered in addition.
    pub slots: usize,
    /// Samples per ray; `None` for the light-field decoder.
    pub samples: Option<usize>,
    pub resolution: usize,
    pub out_of_memory: bool,
    pub frame_seconds: Option<f64>,
    pub fps: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub evaluations_per_frame: Option<u64>,
}

impl BenchReport {
    /// Table cell: FPS with one decimal, or '-' when out of memory.
    pub fn fps_cell(&self) -> String {
        match self.fps {
            Some(f) if !self.out_of_memory => format!("{f:.1}"),
            _ => "-".into(),
        }
    }

    pub fn memory_cell(&self) -> String {
        match self.peak_bytes {
            Some(b) if !self.out_of_memory => format!("{:.1} MB", b as f64 / (1 << 20) as f64),
            _ => "-".into(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A random encoded scene with `slots` foreground latents.
pub fn random_scene(latent_dim: usize, slots: usize, camera: &Camera, seed: u64) -> Result<ComposedScene> {
    use crate::encoder::SlotSet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = crate::encoder::SlotNoise::sample(&mut rng, slots, latent_dim, DType::F32)?;
    ComposedScene::from_slot_set(&SlotSet {
        background: noise.background,
        foreground: noise.foreground,
        context_camera: *camera,
        background_fixed: false,
    })
}

/// Times rendering of one encoded scene. The light-field path uses `model`
/// (random weights are fine: cost does not depend on values), the volumetric
/// path a fresh [`VolDecoder`].
pub fn bench(model: Option<&ColfModel>, settings: &BenchSettings) -> Result<BenchReport> {
    if settings.slots == 0 {
        return Err(ColfError::Config("benchmark needs K ≥ 1".into()));
    }
    if settings.frames == 0 {
        return Err(ColfError::Config("benchmark needs at least one timed frame".into()));
    }
    let camera = crate::scenegen::CameraRig::default().camera(0.7, settings.resolution)?;
    let mut report = BenchReport {
        decoder: settings.decoder,
        slots: settings.slots,
        samples: (settings.decoder == DecoderKind::Volumetric).then_some(settings.samples),
        resolution: settings.resolution,
        out_of_memory: false,
        frame_seconds: None,
        fps: None,
        peak_bytes: None,
        evaluations_per_frame: None,
    };
    let owned;
    let mut times = Vec::with_capacity(settings.frames);
    let mut evals = 0;
    match settings.decoder {
        DecoderKind::Lightfield => {
            let model = match model {
                Some(m) => m,
                None => {
                    owned = ColfModel::new(ModelConfig::default(), settings.seed, DType::F32)?;
                    &owned
                }
            };
            let scene = random_scene(model.config.decoder.latent_dim, settings.slots, &camera, settings.seed)?;
            let run = || -> Result<RenderedView> {
                let lfn = model.materialize(&scene)?;
                model.render_view_with(&scene, &lfn, &camera)
            };
            for _ in 0..settings.warmup {
                run()?;
            }
            memory::reset_peak();
            let base = memory::current();
            for _ in 0..settings.frames {
                model.reset_counters();
                let t = Instant::now();
                run()?;
                times.push(t.elapsed().as_secs_f64());
                evals = model.lfn_evaluations();
            }
            if memory::tracking() {
                report.peak_bytes = Some((memory::peak() - base.min(memory::peak())) as u64);
            }
        }
        DecoderKind::Volumetric => {
            let vol = VolDecoder::new(
                VolConfig {
                    samples: settings.samples,
                    ..VolConfig::default()
                },
                settings.seed,
            )?;
            let scene = random_scene(vol.config.latent_dim, settings.slots, &camera, settings.seed)?;
            if vol.estimated_chunk_bytes(scene.len()) > settings.memory_budget {
                report.out_of_memory = true;
                return Ok(report);
            }
            for _ in 0..settings.warmup {
                vol.render_view(&scene, &camera, settings.seed)?;
            }
            memory::reset_peak();
            let base = memory::current();
            for _ in 0..settings.frames {
                vol.reset_counters();
                let t = Instant::now();
                vol.render_view(&scene, &camera, settings.seed)?;
                times.push(t.elapsed().as_secs_f64());
                evals = vol.evaluations();
            }
            if memory::tracking() {
                report.peak_bytes = Some((memory::peak() - base.min(memory::peak())) as u64);
            }
        }
    }
    let frame = median(times);
    report.frame_seconds = Some(frame);
    report.fps = Some(1.0 / frame);
    report.evaluations_per_frame = Some(evals);
    Ok(report)
}

/// Table-3-style grid: one row per decoder (and sample count), one column per K.
pub fn format_grid(reports: &[BenchReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().map(|r| r.slots).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut rows: Vec<(DecoderKind, Option<usize>, usize)> =
        reports.iter().map(|r| (r.decoder, r.samples, r.resolution)).collect();
    rows.sort_by_key(|&(d, s, r)| (d == DecoderKind::Volumetric, s, r));
    rows.dedup();
    let mut out = String::from("decoder\tsamples\tres");
    for k in &ks {
        out.push_str(&format!("\tK={k} fps\tK={k} mem"));
    }
    out.push('\n');
    for (d, s, res) in rows {
        let name = match d {
            DecoderKind::Lightfield => "lightfield",
            DecoderKind::Volumetric => "volumetric",
        };
        out.push_str(&format!("{name}\t{}\t{res}", s.map_or("-".into(), |s| s.to_string())));
        for k in &ks {
            match reports
                .iter()
                .find(|r| r.decoder == d && r.samples == s && r.resolution == res && r.slots == *k)
            {
                Some(r) => out.push_str(&format!("\t{}\t{}", r.fps_cell(), r.memory_cell())),
                None => out.push_str("\t\t"),
            }
        }
        out.push('\n');
    }
    out
}
