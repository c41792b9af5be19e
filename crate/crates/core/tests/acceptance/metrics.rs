use colf::metrics::{ari, pair_counts, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{err, Check, Outcome};

const TOL: f64 = 1e-9;
const TRIALS: usize = 200;

/// PSNR from the root-mean-square error.
fn psnr_oracle(a: &[f32], b: &[f32]) -> f64 {
    let se: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let rmse = (se / a.len() as f64).sqrt();
    -20.0 * rmse.log10()
}

/// SSIM via separable Gaussian filtering of the moment maps.
fn ssim_oracle(a: &[f32], b: &[f32], w: usize, h: usize) -> f64 {
    let gray = |img: &[f32]| -> Vec<f64> { img.chunks(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect() };
    let (x, y) = (gray(a), gray(b));
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half) / SSIM_SIGMA).powi(2) / 2.0).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let filter = |m: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * m[r * w + c + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
            }
        }
        out
    };
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let (mx, my) = (filter(&x), filter(&y));
    let (sxx, syy, sxy) = (filter(&prod(&x, &x)), filter(&prod(&y, &y)), filter(&prod(&x, &y)));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cxy = sxy[i] - mx[i] * my[i];
        total += (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2)
            / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    total / mx.len() as f64
}

/// ARI by enumerating all pixel pairs.
fn ari_oracle(pred: &[u32], gt: &[u32]) -> (u128, u128, u128, u128, f64) {
    let n = pred.len();
    let (mut both, mut same_pred, mut same_gt) = (0u128, 0u128, 0u128);
    for i in 0..n {
        for j in i + 1..n {
            let p = pred[i] == pred[j];
            let g = gt[i] == gt[j];
            both += (p && g) as u128;
            same_pred += p as u128;
            same_gt += g as u128;
        }
    }
    let total = (n * (n - 1) / 2) as u128;
    let expected = same_pred as f64 * same_gt as f64 / total as f64;
    let max = (same_pred + same_gt) as f64 / 2.0;
    let value = if max == expected { 0.0 } else { (both as f64 - expected) / (max - expected) };
    (both, same_pred, same_gt, total, value)
}

pub fn run() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut psnr_err, mut ssim_err, mut ari_err, mut ident_err) = (0f64, 0f64, 0f64, 0f64);
    let mut failures = Vec::new();
    let mut exact_counts = 0;
    for t in 0..TRIALS {
        let w = rng.random_range(11..=20);
        let h = rng.random_range(11..=20);
        let a: Vec<f32> = (0..w * h * 3).map(|_| rng.random()).collect();
        let noise = rng.random_range(0.0..0.3f32);
        let b: Vec<f32> = a.iter().map(|v| (v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();

        let p = psnr(&a, &b).map_err(err)?;
        if noise > 0.0 {
            psnr_err = psnr_err.max((p - psnr_oracle(&a, &b)).abs());
        }
        if psnr(&a, &a).map_err(err)? != f64::INFINITY {
            failures.push(format!("trial {t}: psnr(x, x) is not infinite"));
        }
        ssim_err = ssim_err.max((ssim(&a, &b, w, h).map_err(err)? - ssim_oracle(&a, &b, w, h)).abs());
        ident_err = ident_err.max((ssim(&a, &a, w, h).map_err(err)? - 1.0).abs());

        let n = rng.random_range(2..=60);
        let kp = rng.random_range(1..=5u32);
        let kg = rng.random_range(1..=5u32);
        let pred: Vec<u32> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let gt: Vec<u32> = (0..n).map(|_| rng.random_range(0..kg)).collect();
        let got = ari(&pred, &gt, None).map_err(err)?.ok_or("ari returned no value")?;
        let (both, same_pred, same_gt, total, want) = ari_oracle(&pred, &gt);
        ari_err = ari_err.max((got - want).abs());
        let counts = pair_counts(&pred, &gt, None).map_err(err)?.ok_or("no pair counts")?;
        if (counts.both, counts.pred, counts.gt, counts.total) != (both, same_pred, same_gt, total) {
            failures.push(format!("trial {t}: contingency pair counts differ from enumeration"));
        } else {
            exact_counts += 1;
        }

        // Relabeling invariance and the filtered path against the oracle on the kept subset.
        let relabeled: Vec<u32> = pred.iter().map(|&l| 7 * l + 3).collect();
        if ari(&relabeled, &gt, None).map_err(err)? != Some(got) {
            failures.push(format!("trial {t}: ari changed under relabeling"));
        }
        let keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let (sp, sg): (Vec<u32>, Vec<u32>) = (0..n).filter(|&i| keep[i]).map(|i| (pred[i], gt[i])).unzip();
        let filtered = ari(&pred, &gt, Some(&keep)).map_err(err)?;
        match (filtered, sp.len()) {
            (None, 0) => {}
            (Some(v), 1) if v == 0.0 => {}
            (Some(v), m) if m >= 2 => ari_err = ari_err.max((v - ari_oracle(&sp, &sg).4).abs()),
            other => failures.push(format!("trial {t}: unexpected filtered ari {other:?}")),
        }
    }
    // Closed forms.
    let psnr_closed = (psnr(&[0.0; 12], &[0.25; 12]).map_err(err)? - 40.0 * 2f64.log10()).abs();
    psnr_err = psnr_err.max(psnr_closed);
    let perfect = ari(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9], None).map_err(err)?;
    if perfect != Some(1.0) {
        failures.push(format!("ari of a relabeled partition is {perfect:?}"));
    }
    for (name, v) in [("psnr", psnr_err), ("ssim", ssim_err), ("ssim identity", ident_err), ("ari", ari_err)] {
        if v > TOL {
            failures.push(format!("{name} error {v:.2e}"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{TRIALS} random trials: psnr {psnr_err:.1e}, ssim {ssim_err:.1e}, ssim(x,x)-1 {ident_err:.1e}, ari vs pair enumeration {ari_err:.1e} with {exact_counts}/{TRIALS} exact pair counts{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}
