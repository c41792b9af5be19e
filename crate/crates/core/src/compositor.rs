//! Learned visibility and softmax compositing of per-slot light fields.

use candle_core::{Device, Tensor};

use crate::error::{ColfError, Result};
use crate::nn::{softmax, Builder, Mlp};

/// Per-slot, per-ray values: color c, ordering o, visibility v and softmax weight w.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RayShade {
    pub color: [f64; 3],
    pub ordering: f64,
    pub visibility: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub o_min: f64,
    pub argmax_slot: usize,
}

/// The visibility network V: (o, o_min − o) → visibility logit.
#[derive(Clone, Debug)]
pub struct VisibilityNet {
    pub mlp: Mlp,
}

impl VisibilityNet {
    pub fn new(b: &mut Builder, hidden: usize) -> Result<Self> {
        Ok(VisibilityNet {
            mlp: Mlp::new(b, &[2, hidden, hidden, hidden, 1])?,
        })
    }

    /// Orderings (S, R) → visibilities (S, R).
    pub fn forward(&self, orderings: &Tensor) -> Result<Tensor> {
        let o_min = orderings.min_keepdim(0)?;
        let rel = o_min.broadcast_sub(orderings)?;
        let input = Tensor::stack(&[orderings, &rel], 2)?;
        Ok(self.mlp.forward(&input)?.squeeze(2)?)
    }

    /// V at a single (o, rel) pair.
    pub fn visibility(&self, o: f64, rel: f64) -> Result<f64> {
        let dtype = self.mlp.layers[0].weight.dtype();
        let x = Tensor::new(&[[o, rel]], &Device::Cpu)?.to_dtype(dtype)?;
        let y = self.mlp.forward(&x)?;
        Ok(y.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
    }

    /// Fills the visibility of each shade from its ordering.
    pub fn fill(&self, shades: &mut [RayShade]) -> Result<f64> {
        let orderings: Vec<f64> = shades.iter().map(|s| s.ordering).collect();
        let o_min = min_ordering(&orderings)?;
        for s in shades.iter_mut() {
            s.visibility = self.visibility(s.ordering, o_min - s.ordering)?;
        }
        Ok(o_min)
    }
}

/// Softmax blend of slot colors, (S, R, 3) and (S, R) visibilities → ((R, 3), (S, R) weights).
pub fn composite_tensor(colors: &Tensor, visibilities: &Tensor) -> Result<(Tensor, Tensor)> {
    let weights = softmax(visibilities, 0)?;
    let color = colors.broadcast_mul(&weights.unsqueeze(2)?)?.sum(0)?;
    Ok((color, weights))
}

pub fn min_ordering(orderings: &[f64]) -> Result<f64> {
    if orderings.is_empty() {
        return Err(ColfError::Contract("minimum of an empty ordering list".into()));
    }
    Ok(orderings.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Composites shades whose visibilities are already set, filling their weights.
pub fn composite(shades: &mut [RayShade]) -> Result<CompositeResult> {
    if shades.is_empty() {
        return Err(ColfError::Contract("compositing needs at least one slot".into()));
    }
    if let Some(i) = shades.iter().position(|s| !s.visibility.is_finite()) {
        return Err(ColfError::Numerical(format!("non-finite visibility for slot {i}")));
    }
    let max = shades.iter().map(|s| s.visibility).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shades.iter().map(|s| (s.visibility - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(shades.len());
    for (s, e) in shades.iter_mut().zip(&exps) {
        s.weight = e / total;
        for c in 0..3 {
            color[c] += s.weight * s.color[c];
        }
        weights.push(s.weight);
    }
    let orderings: Vec<f64> = shades.iter().map(|s| s.ordering).collect();
    Ok(CompositeResult {
        color,
        argmax_slot: argmax(&weights),
        weights,
        o_min: min_ordering(&orderings)?,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax over `num_slots` weights stored pixel-major.
pub fn segment(weights: &[f64], num_slots: usize) -> Vec<usize> {
    weights.chunks(num_slots).map(argmax).collect()
}
