use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal timestep encoding: component `2k` is `sin(t / 10000^(2k/dim))`
/// and component `2k+1` the matching cosine.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dim must be even and >= 2, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    Ok(out)
}

/// Embeddings for a batch of timesteps, shape `(batch, dim)`.
pub fn time_embedding_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim)?);
    }
    Tensor::new(vec![ts.len(), dim], data)
}
