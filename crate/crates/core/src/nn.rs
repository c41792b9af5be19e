//! Parameter storage, the handful of layers the model needs, and Adam.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ColfError, Result};

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(ColfError::Contract(format!("parameter '{name}' registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies values from `other` into this store; names and shapes must match.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(ColfError::Contract("parameter sets differ in size".into()));
        }
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| ColfError::NotFound(format!("parameter '{name}'")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn set_values(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| ColfError::NotFound(format!("parameter '{name}'")))?;
        if var.elem_count() != values.len() {
            return Err(ColfError::Integrity(format!(
                "parameter '{name}' expects {} values, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        let var = self
            .get(name)
            .ok_or_else(|| ColfError::NotFound(format!("parameter '{name}'")))?;
        Ok(var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Registers parameters under a dotted prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let full = self.full_name(name);
        self.store.insert(full, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let full = self.full_name(name);
        self.store.insert(full, values, shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let full = self.full_name(name);
        self.store.insert(full, values, shape)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// `y = x·W + b` with `W` stored as (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform(±1/√fan_in) for weight and bias.
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = b.uniform("weight", &[in_dim, out_dim], bound)?;
        let bias = if bias {
            Some(b.uniform("bias", &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let flat = if dims.len() == 2 {
            x.clone()
        } else {
            x.reshape(((), self.in_dim()))?
        };
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        if dims.len() == 2 {
            Ok(y)
        } else {
            let mut out = dims;
            *out.last_mut().expect("nonempty shape") = self.out_dim();
            Ok(y.reshape(out)?)
        }
    }
}

/// ReLU between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut Builder, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.sub(&format!("l{i}")), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// GRU cell with reset/update/new gate ordering `r, z, n`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
    dim: usize,
}

impl GruCell {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(GruCell {
            w_ih: b.uniform("w_ih", &[dim, 3 * dim], bound)?,
            w_hh: b.uniform("w_hh", &[dim, 3 * dim], bound)?,
            b_ih: b.uniform("b_ih", &[3 * dim], bound)?,
            b_hh: b.uniform("b_hh", &[3 * dim], bound)?,
            dim,
        })
    }

    pub fn forward(&self, input: &Tensor, state: &Tensor) -> Result<Tensor> {
        let d = self.dim;
        let gi = input.matmul(&self.w_ih)?.broadcast_add(&self.b_ih)?;
        let gh = state.matmul(&self.w_hh)?.broadcast_add(&self.b_hh)?;
        let r = sigmoid(&(gi.narrow(1, 0, d)? + gh.narrow(1, 0, d)?)?)?;
        let z = sigmoid(&(gi.narrow(1, d, d)? + gh.narrow(1, d, d)?)?)?;
        let n = (gi.narrow(1, 2 * d, d)? + (&r * gh.narrow(1, 2 * d, d)?)?)?.tanh()?;
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        Ok((&n + (&z * (state - &n)?)?)?)
    }
}

/// 3×3 convolution with padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(b: &mut Builder, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        Ok(Conv3x3 {
            weight: b.uniform("weight", &[out_ch, in_ch, 3, 3], bound)?,
            bias: b.uniform("bias", &[out_ch], bound)?,
            stride,
        })
    }

    /// (B, C, H, W) → (B, C', H', W').
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax along `dim` with the maximum subtracted before exponentiation.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Interpolation matrix for 2× bilinear upsampling with half-pixel centers
/// and clamped borders, shape (2n, n).
pub fn bilinear_upsample_matrix(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; 2 * n * n];
    for i in 0..2 * n {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        m[i * n + i0] += 1.0 - frac;
        m[i * n + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (2 * n, n), device)?.to_dtype(dtype)?)
}

/// 2× bilinear upsampling of a (B, C, H, W) tensor as two matrix products.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let uh = bilinear_upsample_matrix(h, x.dtype(), x.device())?;
    let uw = bilinear_upsample_matrix(w, x.dtype(), x.device())?;
    let wide = x.broadcast_matmul(&uw.t()?)?;
    Ok(uh.broadcast_matmul(&wide)?)
}

/// Layer normalization over the last dimension with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.from_values("gain", &[dim], vec![1.0; dim])?,
            shift: b.from_values("shift", &[dim], vec![0.0; dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Runs `f` on the contiguous f32 data of a CPU tensor without copying.
fn with_f32_slice<R>(t: &Tensor, f: impl FnOnce(&[f32]) -> R) -> Result<R> {
    let (storage, layout) = t.storage_and_layout();
    let candle_core::Storage::Cpu(cpu) = &*storage else {
        return Err(ColfError::Contract("parameters must live on the CPU".into()));
    };
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| ColfError::Contract("expected a contiguous tensor".into()))?;
    Ok(f(&cpu.as_slice::<f32>()?[start..end]))
}

/// Adam over every parameter of a [`ParamStore`], with f32 moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, var) in store.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = grad.to_dtype(DType::F32)?.contiguous()?;
            let p = var.as_tensor().to_dtype(DType::F32)?.contiguous()?;
            let n = var.elem_count();
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let updated = with_f32_slice(&g, |g| {
                with_f32_slice(&p, |p| {
                    let mut out = Vec::with_capacity(n);
                    for i in 0..n {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        out.push(p[i] - step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps));
                    }
                    out
                })
            })??;
            if self.lr == 0.0 {
                continue;
            }
            let updated = Tensor::from_vec(updated, var.shape(), store.device())?.to_dtype(store.dtype())?;
            var.set(&updated)?;
        }
        Ok(())
    }
}
