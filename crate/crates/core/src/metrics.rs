//! Reconstruction and segmentation metrics, and held-out evaluation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};
use crate::scenegen::SceneData;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for values in [0, 1]; identical inputs give +∞.
pub fn psnr(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(ColfError::Contract(format!(
            "psnr needs equal nonempty inputs, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x] / (total * total);
        }
    }
    w
}

fn grayscale(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks(3)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / 3.0)
        .collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows of the channel-mean
/// grayscale images (σ = 1.5, C1 = 0.01², C2 = 0.03²).
pub fn ssim(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Result<f64> {
    if pred.len() != width * height * 3 || gt.len() != pred.len() {
        return Err(ColfError::Contract("ssim inputs do not match the image size".into()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(ColfError::Domain(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {width}×{height}"
        )));
    }
    let (a, b) = (grayscale(pred), grayscale(gt));
    let w = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = w[dy * SSIM_WINDOW + dx];
                    let i = (y0 + dy) * width + x0 + dx;
                    ma += k * a[i];
                    mb += k * b[i];
                    saa += k * a[i] * a[i];
                    sbb += k * b[i] * b[i];
                    sab += k * a[i] * b[i];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Pair counts behind the adjusted Rand index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    /// Pairs grouped together by both labelings.
    pub both: u128,
    /// Pairs grouped together by the prediction.
    pub pred: u128,
    /// Pairs grouped together by the ground truth.
    pub gt: u128,
    pub total: u128,
}

/// Contingency-table pair counts over the pixels where `filter` holds; `None` when none do.
pub fn pair_counts(pred: &[u32], gt: &[u32], filter: Option<&[bool]>) -> Result<Option<PairCounts>> {
    if pred.len() != gt.len() || filter.is_some_and(|f| f.len() != pred.len()) {
        return Err(ColfError::Contract("ari label arrays differ in length".into()));
    }
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut n = 0u64;
    for i in 0..pred.len() {
        if filter.is_some_and(|f| !f[i]) {
            continue;
        }
        *table.entry((pred[i], gt[i])).or_default() += 1;
        *rows.entry(pred[i]).or_default() += 1;
        *cols.entry(gt[i]).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(PairCounts {
        both: table.values().map(|&c| pairs(c)).sum(),
        pred: rows.values().map(|&c| pairs(c)).sum(),
        gt: cols.values().map(|&c| pairs(c)).sum(),
        total: pairs(n),
    }))
}

/// Adjusted Rand index over the pixels where `filter` holds (all pixels when `None`).
///
/// Returns `None` when no pixel survives the filter, and 0 when the expected
/// index equals its maximum.
pub fn ari(pred: &[u32], gt: &[u32], filter: Option<&[bool]>) -> Result<Option<f64>> {
    let Some(c) = pair_counts(pred, gt, filter)? else {
        return Ok(None);
    };
    if c.total == 0 {
        return Ok(Some(0.0));
    }
    let expected = c.pred as f64 * c.gt as f64 / c.total as f64;
    let max = (c.pred + c.gt) as f64 / 2.0;
    if max == expected {
        return Ok(Some(0.0));
    }
    Ok(Some((c.both as f64 - expected) / (max - expected)))
}

/// Predicted image and optional per-pixel slot labels for one view.
#[derive(Clone, Debug)]
pub struct ViewPrediction {
    pub image: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

/// Produces predictions for every view of a scene given the index of the context view.
pub trait SceneRenderer: Sync {
    fn render_scene(&self, scene: &SceneData, context_view: usize) -> Result<Vec<ViewPrediction>>;
}

/// Writes `+inf` PSNR as the string "inf" since JSON has no infinity.
mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => Repr::Text("inf".into()).serialize(s),
            Some(x) => Repr::Num(*x).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Repr::Text(t)) => return Err(serde::de::Error::custom(format!("bad number '{t}'"))),
            None => None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(with = "inf_sentinel")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ari: Option<f64>,
    pub nv_ari: Option<f64>,
    pub fg_ari: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: usize,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub context_view: usize,
    pub novel_views: Vec<usize>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub image_metrics: String,
    pub ari: String,
    pub nv_ari: String,
    pub fg_ari: String,
    pub omitted: Vec<String>,
}

impl EvalSettings {
    pub fn standard(num_views: usize) -> Self {
        EvalSettings {
            context_view: 0,
            novel_views: (1..num_views).collect(),
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_c1: SSIM_C1,
            ssim_c2: SSIM_C2,
            image_metrics: "mean over novel views".into(),
            ari: "input view, all pixels, background is cluster 0".into(),
            nv_ari: "mean over novel views, all pixels, background is cluster 0".into(),
            fg_ari: "mean over all views, ground-truth foreground pixels only".into(),
            omitted: vec!["lpips".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub config: Option<serde_json::Value>,
    pub num_scenes: usize,
    pub num_views: usize,
    pub aggregate: MetricSet,
    pub scenes: Vec<SceneMetrics>,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn scene_metrics(scene: &SceneData, preds: &[ViewPrediction], settings: &EvalSettings) -> Result<(MetricSet, Vec<String>)> {
    let mut warnings = Vec::new();
    if preds.len() != scene.views.len() {
        return Err(ColfError::Contract(format!(
            "renderer returned {} views for a {}-view scene",
            preds.len(),
            scene.views.len()
        )));
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for &v in &settings.novel_views {
        let view = &scene.views[v];
        psnrs.push(Some(psnr(&preds[v].image, &view.image)?));
        ssims.push(match ssim(&preds[v].image, &view.image, view.camera.width, view.camera.height) {
            Ok(s) => Some(s),
            Err(ColfError::Domain(m)) => {
                warnings.push(format!("scene {}: {m}", scene.index));
                None
            }
            Err(e) => return Err(e),
        });
    }
    let mut metrics = MetricSet {
        psnr: mean(psnrs.into_iter()),
        ssim: mean(ssims.into_iter()),
        ..MetricSet::default()
    };
    if preds.iter().any(|p| p.labels.is_none()) {
        warnings.push(format!("scene {}: no segmentation, ARI skipped", scene.index));
        return Ok((metrics, warnings));
    }
    let gt_labels = |v: usize| -> Vec<u32> { scene.views[v].mask.iter().map(|&m| m as u32).collect() };
    let labels = |v: usize| preds[v].labels.as_deref().expect("checked above");
    let c = settings.context_view;
    metrics.ari = ari(labels(c), &gt_labels(c), None)?;
    let mut nv = Vec::new();
    for &v in &settings.novel_views {
        nv.push(ari(labels(v), &gt_labels(v), None)?);
    }
    metrics.nv_ari = mean(nv.into_iter());
    let mut fg = Vec::new();
    for v in 0..scene.views.len() {
        let gt = gt_labels(v);
        let filter: Vec<bool> = gt.iter().map(|&g| g != 0).collect();
        fg.push(ari(labels(v), &gt, Some(&filter))?);
    }
    metrics.fg_ari = mean(fg.into_iter());
    Ok((metrics, warnings))
}

/// Renders every scene from its context view and scores the predictions.
pub fn evaluate(renderer: &dyn SceneRenderer, scenes: &[SceneData], config: Option<serde_json::Value>) -> Result<EvalReport> {
    let num_views = scenes.first().map_or(0, |s| s.views.len());
    if num_views < 2 || scenes.iter().any(|s| s.views.len() != num_views) {
        return Err(ColfError::Contract("evaluation needs scenes with a common view count of at least 2".into()));
    }
    let settings = EvalSettings::standard(num_views);
    let per_scene: Vec<(SceneMetrics, Vec<String>)> = scenes
        .par_iter()
        .map(|scene| {
            let preds = renderer.render_scene(scene, settings.context_view)?;
            let (metrics, warnings) = scene_metrics(scene, &preds, &settings)?;
            Ok((
                SceneMetrics {
                    scene: scene.index,
                    metrics,
                },
                warnings,
            ))
        })
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(per_scene.len());
    for (row, w) in per_scene {
        rows.push(row);
        warnings.extend(w);
    }
    let agg = |f: fn(&MetricSet) -> Option<f64>| mean(rows.iter().map(|r| f(&r.metrics)));
    let aggregate = MetricSet {
        psnr: agg(|m| m.psnr),
        ssim: agg(|m| m.ssim),
        ari: agg(|m| m.ari),
        nv_ari: agg(|m| m.nv_ari),
        fg_ari: agg(|m| m.fg_ari),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(EvalReport {
        settings,
        config,
        num_scenes: scenes.len(),
        num_views,
        aggregate,
        scenes: rows,
        warnings,
    })
}
