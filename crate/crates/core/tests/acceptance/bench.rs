use colf::model::{ColfModel, ModelConfig};
use colf::scenegen::CameraRig;
use colf::volbaseline::{bench, format_grid, random_scene, BenchReport, BenchSettings, DecoderKind, VolConfig, VolDecoder};
use candle_core::DType;

use crate::common::{err, Check, Outcome};

const MIN_RATIO: f64 = 10.0;
const SWEEP: [usize; 4] = [1, 2, 4, 7];

/// Exact evaluation counts for both decoders, including sample counts derived from the depth span.
fn counters(failures: &mut Vec<String>) -> Result<String, String> {
    let model = ColfModel::new(ModelConfig::default(), 0, DType::F32).map_err(err)?;
    let camera = CameraRig::default().camera(0.3, 16).map_err(err)?;
    let rays = (camera.width * camera.height) as u64;
    let mut checked = 0;
    for k in [1usize, 3, 7] {
        let scene = random_scene(model.config.decoder.latent_dim, k, &camera, k as u64).map_err(err)?;
        model.reset_counters();
        model.render_view(&scene, &camera).map_err(err)?;
        let want = rays * (k as u64 + 1);
        if model.lfn_evaluations() != want {
            failures.push(format!("lightfield K={k}: {} evaluations, expected {want}", model.lfn_evaluations()));
        }
        checked += 1;
        let spans = [(2.5, 9.0), (2.5, 15.0)];
        let mut samples = vec![2, 16];
        samples.extend(spans.iter().map(|&(near, far)| VolConfig::samples_for_density(near, far, 4.0)));
        for (i, s) in samples.into_iter().enumerate() {
            let (near, far) = if i >= 2 { spans[i - 2] } else { (2.5, 9.0) };
            let vol = VolDecoder::new(
                VolConfig {
                    samples: s,
                    near,
                    far,
                    ..VolConfig::default()
                },
                0,
            )
            .map_err(err)?;
            let scene = random_scene(vol.config.latent_dim, k, &camera, k as u64).map_err(err)?;
            vol.render_view(&scene, &camera, 0).map_err(err)?;
            let want = rays * (k as u64 + 1) * s as u64;
            if vol.evaluations() != want {
                failures.push(format!("volumetric K={k} S={s}: {} evaluations, expected {want}", vol.evaluations()));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} exact counter checks"))
}

fn report_line(r: &BenchReport) -> String {
    format!(
        "{:?} K={} S={} {}²: {} fps, {}",
        r.decoder,
        r.slots,
        r.samples.map_or("-".into(), |s| s.to_string()),
        r.resolution,
        r.fps_cell(),
        r.memory_cell()
    )
}

pub fn run() -> Check {
    let mut failures = Vec::new();
    let mut details = vec![counters(&mut failures)?];

    // Speed ratio at the reference setting, medians of 10 frames after 3 warmup frames.
    let lf = bench(None, &BenchSettings::new(DecoderKind::Lightfield, 7, 0, 128)).map_err(err)?;
    let vol = bench(None, &BenchSettings::new(DecoderKind::Volumetric, 7, 64, 128)).map_err(err)?;
    let ratio = match (lf.fps, vol.fps) {
        (Some(a), Some(b)) => a / b,
        _ => f64::NAN,
    };
    if !(ratio >= MIN_RATIO) {
        failures.push(format!("fps ratio {ratio:.1} below {MIN_RATIO}"));
    }
    details.push(format!("{}; {}; ratio {ratio:.1}", report_line(&lf), report_line(&vol)));

    // Peak memory against K at 32×32.
    let mut sweep = Vec::new();
    for decoder in [DecoderKind::Lightfield, DecoderKind::Volumetric] {
        let mut peaks = Vec::new();
        for k in SWEEP {
            let mut s = BenchSettings::new(decoder, k, 64, 32);
            s.warmup = 1;
            s.frames = 1;
            let r = bench(None, &s).map_err(err)?;
            peaks.push(r.peak_bytes.ok_or("allocation tracking is not active")?);
            sweep.push(r);
        }
        if peaks.windows(2).any(|w| w[1] < w[0]) {
            failures.push(format!("{decoder:?} peak memory not monotone in K: {peaks:?}"));
        }
        let mb: Vec<String> = peaks.iter().map(|b| format!("{:.1}", *b as f64 / (1 << 20) as f64)).collect();
        details.push(format!("{decoder:?} peak MB over K={SWEEP:?}: [{}]", mb.join(", ")));
    }

    // Working sets above the budget are reported, not attempted.
    let oom = bench(None, &BenchSettings::new(DecoderKind::Volumetric, 7, 1024, 128)).map_err(err)?;
    let grid = format_grid(&[lf.clone(), vol.clone(), oom.clone()]);
    let marked = oom.out_of_memory && grid.lines().any(|l| l.starts_with("volumetric\t1024\t128\t-\t-"));
    if !marked {
        failures.push("volumetric S=1024 at 128² was not reported as '-'".into());
    }
    details.push(format!("volumetric K=7 S=1024 128² under a 3 GiB budget: {}", oom.fps_cell()));

    if !failures.is_empty() {
        details.push(failures.join("; "));
    }
    Outcome::new(failures.is_empty(), details.join("; "))
}
