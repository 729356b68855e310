use crate::autodiff::{kernels, Tape, Tensor};
use crate::error::{Error, Result};

/// `mask[t][s]` is true iff position `t` may attend to position `s`:
/// `s ≤ t` and `t − s < k`.
pub fn sliding_window_mask(t_len: usize, k: usize) -> Vec<Vec<bool>> {
    (0..t_len)
        .map(|t| (0..t_len).map(|s| s <= t && t - s < k).collect())
        .collect()
}

/// Rotary embedding of the rows of `x` (`[n, d]`, one row per position).
pub fn apply_rope(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[0] != positions.len() {
        return Err(Error::Shape(format!(
            "{} positions for rows of {:?}",
            positions.len(),
            x.shape()
        )));
    }
    let d = x.shape()[1];
    if !d.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary embedding needs an even head dimension, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for (row, &p) in x.data().chunks(d).zip(positions) {
        out.extend(kernels::rope(row, d, p, theta, false));
    }
    Tensor::new(x.shape(), out)
}

/// RMS-normalizes each row of `q` and `k` and applies the per-dimension
/// gains.
pub fn qk_normalize(
    q: &Tensor,
    k: &Tensor,
    q_gain: &Tensor,
    k_gain: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let norm = |x: &Tensor, g: &Tensor| -> Result<Tensor> {
        Ok(tape
            .constant(x)
            .rms_norm(Some(tape.constant(g)), eps)?
            .value())
    };
    Ok((norm(q, q_gain)?, norm(k, k_gain)?))
}
