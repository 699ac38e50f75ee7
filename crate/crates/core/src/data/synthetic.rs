use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian blobs around fixed anchors: anchor `c` has ones at every
/// coordinate `k` with `k % classes == c`, so anchors are orthogonal when
/// `dim ≥ classes`. Samples cycle through the classes.
pub fn synthetic_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
    }
    if dim == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("spread must be finite and non-negative, got {spread}")));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for c in 0..classes {
            for k in 0..dim {
                let anchor = if k % classes == c { 1.0 } else { 0.0 };
                data.push(anchor + noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}
