use std::path::PathBuf;

use candle_core::Tensor;

pub type Check = Result<Outcome, String>;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Check {
        Ok(Outcome {
            passed,
            detail: detail.into(),
        })
    }
}

pub fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Persistent scratch space for datasets and cached training runs.
pub fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("colf-acceptance");
    std::fs::create_dir_all(&dir).expect("create acceptance cache dir");
    dir
}

pub fn flat_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(candle_core::DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f64>())
        .expect("tensor to f64")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
