use candle_core::{DType, Device, Tensor};
use colf::encoder::{EncoderConfig, FeatureGrid, SlotAttention, SlotNoise, SlotRoleParams};
use colf::nn::{Builder, GruCell, LayerNorm, Linear, Mlp, ParamStore, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{err, flat_f64, max_abs_diff, Check, Outcome};

const TOL_F32: f64 = 1e-5;
const TOL_REFERENCE: f64 = 1e-12;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().expect("2-d tensor");
    let v = flat_f64(t);
    (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
}

fn vector(t: &Tensor) -> Vec<f64> {
    flat_f64(t)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn linear(x: &Mat, l: &Linear) -> Mat {
    let y = matmul(x, &mat(&l.weight));
    match &l.bias {
        Some(b) => add_bias(&y, &vector(b)),
        None => y,
    }
}

fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    let g = vector(&ln.gain);
    let b = vector(&ln.shift);
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - m) / (v + LAYER_NORM_EPS).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gru(g: &GruCell, input: &Mat, state: &Mat) -> Mat {
    let d = state[0].len();
    let gi = add_bias(&matmul(input, &mat(&g.w_ih)), &vector(&g.b_ih));
    let gh = add_bias(&matmul(state, &mat(&g.w_hh)), &vector(&g.b_hh));
    (0..state.len())
        .map(|s| {
            (0..d)
                .map(|j| {
                    let r = sig(gi[s][j] + gh[s][j]);
                    let z = sig(gi[s][d + j] + gh[s][d + j]);
                    let n = (gi[s][2 * d + j] + r * gh[s][2 * d + j]).tanh();
                    (1.0 - z) * n + z * state[s][j]
                })
                .collect()
        })
        .collect()
}

fn mlp(m: &Mlp, x: &Mat) -> Mat {
    let mut h = x.clone();
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(&h, l);
        if i + 1 < m.layers.len() {
            h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

fn prior_sample(p: &SlotRoleParams, noise: &Mat) -> Mat {
    let mu = vector(&p.prior.mu);
    let ls = vector(&p.prior.log_sigma);
    noise
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, n)| mu[j] + ls[j].exp() * n).collect())
        .collect()
}

fn weighted_mean(attn: &Mat, col0: usize, cols: usize, values: &Mat) -> Mat {
    (col0..col0 + cols)
        .map(|j| {
            let mass: f64 = attn.iter().map(|r| r[j]).sum::<f64>() + 1e-8;
            (0..values[0].len())
                .map(|d| attn.iter().zip(values).map(|(a, v)| a[j] * v[d]).sum::<f64>() / mass)
                .collect()
        })
        .collect()
}

/// Straight-line background-aware slot attention: returns (slot_bg, slots_fg, attention per iteration).
fn reference(sa: &SlotAttention, feat: &Mat, noise_bg: &Mat, noise_fg: &Mat, iters: usize) -> (Mat, Mat, Vec<Mat>) {
    let d = sa.slot_dim as f64;
    let k = noise_fg.len();
    let feat = layer_norm(feat, &sa.norm_input);
    let keys = linear(&feat, &sa.to_k);
    let v_bg = linear(&feat, &sa.background.to_v);
    let v_fg = linear(&feat, &sa.foreground.to_v);
    let mut slot_bg = prior_sample(&sa.background, noise_bg);
    let mut slots_fg = prior_sample(&sa.foreground, noise_fg);
    let mut attns = Vec::new();
    for _ in 0..iters {
        let prev_bg = slot_bg.clone();
        let prev_fg = slots_fg.clone();
        let mut q = linear(&layer_norm(&slot_bg, &sa.background.norm_query), &sa.background.to_q);
        q.extend(linear(&layer_norm(&slots_fg, &sa.foreground.norm_query), &sa.foreground.to_q));
        let attn: Mat = keys
            .iter()
            .map(|key| {
                let logits: Vec<f64> = q
                    .iter()
                    .map(|qj| key.iter().zip(qj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            })
            .collect();
        let up_bg = weighted_mean(&attn, 0, 1, &v_bg);
        let up_fg = weighted_mean(&attn, 1, k, &v_fg);
        slot_bg = gru(&sa.background.gru, &up_bg, &prev_bg);
        slots_fg = gru(&sa.foreground.gru, &up_fg, &prev_fg);
        let res_bg = mlp(&sa.background.mlp, &layer_norm(&slot_bg, &sa.background.norm_residual));
        for (s, r) in slot_bg.iter_mut().zip(res_bg) {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let res_fg = mlp(&sa.foreground.mlp, &layer_norm(&slots_fg, &sa.foreground.norm_residual));
        for (s, r) in slots_fg.iter_mut().zip(res_fg) {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        attns.push(attn);
    }
    (slot_bg, slots_fg, attns)
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn build(cfg: &EncoderConfig, dtype: DType, seed: u64) -> Result<(ParamStore, SlotAttention), String> {
    let mut store = ParamStore::new(dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sa = SlotAttention::new(&mut Builder::new(&mut store, &mut rng).sub("slots"), cfg).map_err(err)?;
    Ok((store, sa))
}

/// Moves every parameter off its initial value so constant initializations are exercised too.
fn perturb(store: &ParamStore, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in store.iter() {
        let noise: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let noise = Tensor::from_vec(noise, var.shape(), &Device::Cpu).map_err(err)?;
        var.set(&(var.as_tensor() + noise).map_err(err)?).map_err(err)?;
    }
    Ok(())
}

fn grid(n_side: usize, channels: usize, dtype: DType, seed: u64) -> Result<FeatureGrid, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = SlotNoise::sample(&mut rng, n_side * n_side, channels, dtype).map_err(err)?;
    Ok(FeatureGrid {
        features: noise.foreground,
        height: n_side,
        width: n_side,
    })
}

pub fn run() -> Check {
    let mut failures = Vec::new();

    // Full-size random weights, f32.
    let cfg = EncoderConfig::default();
    let (_, sa) = build(&cfg, DType::F32, 4)?;
    let feat = grid(16, cfg.feature_channels, DType::F32, 5)?;
    let noise = SlotNoise::sample(&mut ChaCha8Rng::seed_from_u64(6), cfg.num_slots, cfg.slot_dim, DType::F32).map_err(err)?;
    let out = sa.forward(&feat, &noise, cfg.iterations).map_err(err)?;
    let mut worst_norm = 0f64;
    for attn in &out.per_iteration {
        let a = flat_f64(attn);
        for row in a.chunks(cfg.num_slots + 1) {
            worst_norm = worst_norm.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_norm > TOL_F32 {
        failures.push(format!("attention rows deviate from 1 by {worst_norm:.2e}"));
    }

    let perm: Vec<u32> = vec![3, 0, 4, 2, 1];
    let idx = Tensor::new(perm.as_slice(), &Device::Cpu).map_err(err)?;
    let permuted = SlotNoise {
        background: noise.background.clone(),
        foreground: noise.foreground.index_select(&idx, 0).map_err(err)?,
    };
    let out_p = sa.forward(&feat, &permuted, cfg.iterations).map_err(err)?;
    let fg = flat_f64(&out.foreground.index_select(&idx, 0).map_err(err)?);
    let mut cols: Vec<u32> = vec![0];
    cols.extend(perm.iter().map(|p| p + 1));
    let attn_perm = flat_f64(
        &out.attention
            .index_select(&Tensor::new(cols.as_slice(), &Device::Cpu).map_err(err)?, 1)
            .map_err(err)?,
    );
    let perm_err = max_abs_diff(&fg, &flat_f64(&out_p.foreground))
        .max(max_abs_diff(&flat_f64(&out.background), &flat_f64(&out_p.background)))
        .max(max_abs_diff(&attn_perm, &flat_f64(&out_p.attention)));
    if perm_err > TOL_F32 {
        failures.push(format!("foreground permutation error {perm_err:.2e}"));
    }

    // Tiny f64 instance against the straight-line reference.
    let tiny = EncoderConfig {
        slot_dim: 3,
        feature_channels: 4,
        num_slots: 2,
        iterations: 3,
        mlp_hidden: 5,
    };
    let (store, sa) = build(&tiny, DType::F64, 9)?;
    perturb(&store, 10)?;
    let feat = grid(3, tiny.feature_channels, DType::F64, 10)?;
    let noise = SlotNoise::sample(&mut ChaCha8Rng::seed_from_u64(12), tiny.num_slots, tiny.slot_dim, DType::F64).map_err(err)?;
    let out = sa.forward(&feat, &noise, tiny.iterations).map_err(err)?;
    let (bg, fg, attns) = reference(&sa, &mat(&feat.features), &mat(&noise.background), &mat(&noise.foreground), tiny.iterations);
    let mut ref_err = max_abs_diff(&flat(&bg), &flat_f64(&out.background)).max(max_abs_diff(&flat(&fg), &flat_f64(&out.foreground)));
    for (a, b) in attns.iter().zip(&out.per_iteration) {
        ref_err = ref_err.max(max_abs_diff(&flat(a), &flat_f64(b)));
    }
    if ref_err > TOL_REFERENCE {
        failures.push(format!("reference mismatch {ref_err:.2e}"));
    }

    Outcome::new(
        failures.is_empty(),
        format!(
            "row sums within {worst_norm:.1e}, fg permutation error {perm_err:.1e} (D={}, K={}, T={}); \
             reference (N=9, D=3, K=2, T=3) max error {ref_err:.1e}{}",
            cfg.slot_dim,
            cfg.num_slots,
            cfg.iterations,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}
