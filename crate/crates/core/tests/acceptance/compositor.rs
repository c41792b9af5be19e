use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use colf::compositor::{composite, composite_tensor, RayShade, VisibilityNet};
use colf::nn::{Builder, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::common::{err, Check, Outcome};

const INSTANCES: usize = 10_000;
const TOL_NORM: f64 = 1e-6;
const TOL_PERM: f64 = 1e-6;
const TOL_SHIFT: f64 = 1e-7;
const TOL_TENSOR: f64 = 1e-6;

fn visibility_nets(n: usize) -> Result<Vec<VisibilityNet>, String> {
    (0..n)
        .map(|i| {
            let mut store = ParamStore::new(DType::F64);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            VisibilityNet::new(&mut Builder::new(&mut store, &mut rng).sub("vis"), 128).map_err(err)
        })
        .collect()
}

pub fn run() -> Check {
    let start = Instant::now();
    let nets = visibility_nets(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ordering = Normal::new(0.0, 3.0).unwrap();
    let (mut worst_norm, mut worst_perm, mut worst_shift, mut worst_tensor) = (0f64, 0f64, 0f64, 0f64);
    let mut failures: Vec<String> = Vec::new();
    let mut singletons = 0;
    let mut monotone_checked = 0;

    for inst in 0..INSTANCES {
        let net = &nets[inst % nets.len()];
        let n = rng.random_range(1..=8usize);
        let mut shades: Vec<RayShade> = (0..n)
            .map(|_| RayShade {
                color: [rng.random(), rng.random(), rng.random()],
                ordering: ordering.sample(&mut rng),
                ..RayShade::default()
            })
            .collect();
        let o_min = net.fill(&mut shades).map_err(err)?;
        let front = shades.iter().position(|s| s.ordering == o_min).unwrap();
        let base = composite(&mut shades).map_err(err)?;

        let sum: f64 = base.weights.iter().sum();
        worst_norm = worst_norm.max((sum - 1.0).abs());
        if base.weights.iter().any(|&w| w < 0.0) {
            failures.push(format!("instance {inst}: negative weight"));
        }
        if net.visibility(shades[front].ordering, 0.0).map_err(err)? != shades[front].visibility {
            failures.push(format!("instance {inst}: frontmost slot did not see rel = 0"));
        }

        // Permutation equivariance through the whole V + softmax path.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut permuted: Vec<RayShade> = perm
            .iter()
            .map(|&i| RayShade {
                visibility: 0.0,
                weight: 0.0,
                ..shades[i]
            })
            .collect();
        net.fill(&mut permuted).map_err(err)?;
        let p = composite(&mut permuted).map_err(err)?;
        for (j, &i) in perm.iter().enumerate() {
            worst_perm = worst_perm.max((p.weights[j] - base.weights[i]).abs());
        }
        for c in 0..3 {
            worst_perm = worst_perm.max((p.color[c] - base.color[c]).abs());
        }

        // Shift invariance of the softmax.
        let shift = rng.random_range(-50.0..50.0);
        let mut shifted: Vec<RayShade> = shades
            .iter()
            .map(|s| RayShade {
                visibility: s.visibility + shift,
                ..*s
            })
            .collect();
        let sh = composite(&mut shifted).map_err(err)?;
        for i in 0..n {
            worst_shift = worst_shift.max((sh.weights[i] - base.weights[i]).abs());
        }

        // Monotonicity under a finite increase of one visibility.
        let i = rng.random_range(0..n);
        let delta = rng.random_range(1e-3..1.0);
        let mut bumped = shades.clone();
        bumped[i].visibility += delta;
        let b = composite(&mut bumped).map_err(err)?;
        let w = base.weights[i];
        if b.weights[i] < w {
            failures.push(format!("instance {inst}: weight decreased when its visibility increased"));
        }
        if n > 1 && w > 1e-300 && w < 1.0 - 1e-12 {
            monotone_checked += 1;
            if b.weights[i] <= w {
                failures.push(format!("instance {inst}: weight not strictly increasing"));
            }
        }

        // Output color inside the per-channel hull of the inputs.
        for c in 0..3 {
            let lo = shades.iter().map(|s| s.color[c]).fold(f64::INFINITY, f64::min);
            let hi = shades.iter().map(|s| s.color[c]).fold(f64::NEG_INFINITY, f64::max);
            if base.color[c] < lo - 1e-12 || base.color[c] > hi + 1e-12 {
                failures.push(format!("instance {inst}: color channel {c} outside input hull"));
            }
        }

        if n == 1 {
            singletons += 1;
            if base.color != shades[0].color || base.weights != vec![1.0] {
                failures.push(format!("instance {inst}: single slot is not the identity"));
            }
        }

        // Batched tensor route against the scalar route.
        if inst % 50 == 0 {
            let orderings: Vec<f64> = shades.iter().map(|s| s.ordering).collect();
            let colors: Vec<f64> = shades.iter().flat_map(|s| s.color).collect();
            let o = Tensor::from_vec(orderings, (n, 1), &Device::Cpu).map_err(err)?;
            let c = Tensor::from_vec(colors, (n, 1, 3), &Device::Cpu).map_err(err)?;
            let v = net.forward(&o).map_err(err)?;
            let (color, weights) = composite_tensor(&c, &v).map_err(err)?;
            let color = crate::common::flat_f64(&color);
            let weights = crate::common::flat_f64(&weights);
            worst_tensor = worst_tensor
                .max(crate::common::max_abs_diff(&color, &base.color))
                .max(crate::common::max_abs_diff(&weights, &base.weights));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    if worst_norm > TOL_NORM {
        failures.push(format!("normalization error {worst_norm:.2e}"));
    }
    if worst_perm > TOL_PERM {
        failures.push(format!("permutation error {worst_perm:.2e}"));
    }
    if worst_shift > TOL_SHIFT {
        failures.push(format!("shift error {worst_shift:.2e}"));
    }
    if worst_tensor > TOL_TENSOR {
        failures.push(format!("tensor/scalar mismatch {worst_tensor:.2e}"));
    }
    if secs >= 60.0 {
        failures.push(format!("runtime {secs:.1}s exceeds 60s"));
    }
    let detail = format!(
        "{INSTANCES} instances ({singletons} single-slot, {monotone_checked} strict monotonicity checks): \
         |Σw-1| {worst_norm:.1e}, perm {worst_perm:.1e}, shift {worst_shift:.1e}, tensor route {worst_tensor:.1e}, {secs:.1}s{}",
        if failures.is_empty() { String::new() } else { format!("; {}", failures[..failures.len().min(3)].join("; ")) }
    );
    Outcome::new(failures.is_empty(), detail)
}
