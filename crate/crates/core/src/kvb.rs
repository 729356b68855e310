//! Key-value binding layers and the ladder of variants that leads from them
//! to next-token test-time training.
//!
//! [`kvb_chunk`] is the batched form used inside the model. The per-token
//! functions below it work on plain tensors and serve as its reference.

use crate::autodiff::{Band, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{FastFraction, ModelSpec, Variant};

/// Slow projections of one key-value binding layer. Without a query
/// projection the layer outputs its own reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct KvbProjections<'t> {
    pub theta_k: Var<'t>,
    pub theta_v: Var<'t>,
    pub theta_q: Option<Var<'t>>,
}

/// Keys and queries are RMS-normalized per head so the inner step size
/// cannot grow with the slow projections.
pub const KEY_NORM_EPS: f64 = 1e-6;

/// Derivative of `z · sigmoid(z)`: `s · (1 + z · (1 − s))`.
pub fn silu_grad(z: Var<'_>) -> Result<Var<'_>> {
    let s = z.sigmoid()?;
    s.mul(z.mul(s.affine(-1.0, 1.0)?)?.affine(1.0, 1.0)?)
}

/// One batch of key-value binding over the rows of `h` `[n, d]`.
///
/// `w1` `[d, e·dh]` and `w2` `[H·e·dh, dh]` hold the per-head fast MLPs
/// `silu(u · A_i) · B_i`, stacked by rows. Every token's reconstruction
/// gradient is taken at the batch-start weights. With a query projection,
/// the output for token `t` uses the weights after the gradients of tokens
/// `≤ t`, written in closed form through causal attention-like sums so that
/// no per-token weight copy exists; `c` is the per-token step size.
/// Returns the output `[n, d]` and the batch-end `w1`, `w2`.
pub fn kvb_chunk<'t>(
    tape: &'t Tape,
    h: Var<'t>,
    proj: KvbProjections<'t>,
    w1: Var<'t>,
    w2: Var<'t>,
    heads: usize,
    c: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let [n, d] = h.shape()[..] else {
        return Err(Error::Shape(format!(
            "expected [n, d] input, got {:?}",
            h.shape()
        )));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dh = d / heads;
    let inner = w1.shape()[1];
    if w1.shape() != [d, inner] || w2.shape() != [heads * inner, dh] {
        return Err(Error::Shape(format!(
            "fast weights {:?} and {:?} do not fit width {d}",
            w1.shape(),
            w2.shape()
        )));
    }
    let keys = h.matmul(proj.theta_k)?;
    let targets = h.matmul(proj.theta_v)?;
    let queries = proj.theta_q.map(|q| h.matmul(q)).transpose()?;
    let band = Band {
        q0: 0,
        nq: n,
        k0: 0,
        nk: n,
        width: n,
    };
    let mut outs = Vec::with_capacity(heads);
    let mut new_w1 = Vec::with_capacity(heads);
    let mut new_w2 = Vec::with_capacity(heads);
    for i in 0..heads {
        let a1 = w1.slice_rows(i * dh, dh)?;
        let a2 = w2.slice_rows(i * inner, inner)?;
        let k = keys.slice_cols(i * dh, dh)?.rms_norm(None, KEY_NORM_EPS)?;
        let v = targets.slice_cols(i * dh, dh)?;
        let pre = k.matmul(a1)?;
        let act = pre.silu()?;
        let pred = act.matmul(a2)?;
        let d_out = pred.sub(v)?.scale(2.0)?;
        let d_pre = d_out.matmul_ex(a2, false, true)?.mul(silu_grad(pre)?)?;
        let out = match queries {
            None => pred,
            Some(qs) => {
                let q = qs.slice_cols(i * dh, dh)?.rms_norm(None, KEY_NORM_EPS)?;
                let q_pre = q
                    .matmul(a1)?
                    .axpy(-c, q.band_qk(k, band)?.band_pv(d_pre, band)?)?;
                let q_act = q_pre.silu()?;
                q_act
                    .matmul(a2)?
                    .axpy(-c, q_act.band_qk(act, band)?.band_pv(d_out, band)?)?
            }
        };
        outs.push(out);
        new_w1.push(a1.axpy(-c, k.matmul_ex(d_pre, true, false)?)?);
        new_w2.push(a2.axpy(-c, act.matmul_ex(d_out, true, false)?)?);
    }
    Ok((
        tape.concat_cols(&outs)?,
        tape.concat_rows(&new_w1)?,
        tape.concat_rows(&new_w2)?,
    ))
}

// ---- per-token reference ------------------------------------------------

/// Per-head fast map `g`.
#[derive(Clone, Debug, PartialEq)]
pub enum FastMap {
    /// `u · W_i` with `W_i` `[dh, dh]`.
    Linear(Vec<Tensor>),
    /// `silu(u · A_i) · B_i` with `A_i` `[dh, m]`, `B_i` `[m, dh]`.
    Mlp(Vec<Tensor>, Vec<Tensor>),
}

impl FastMap {
    /// Splits the stacked layout used by the model into heads.
    pub fn from_stacked(w1: &Tensor, w2: &Tensor, heads: usize) -> Result<Self> {
        let (d, inner) = (w1.rows(), w1.cols());
        if heads == 0 || d % heads != 0 || w2.rows() != heads * inner {
            return Err(Error::Shape(format!(
                "cannot split {:?} / {:?} into {heads} heads",
                w1.shape(),
                w2.shape()
            )));
        }
        let dh = d / heads;
        let rows = |t: &Tensor, r0: usize, n: usize| {
            let c = t.cols();
            Tensor::matrix(n, c, t.data()[r0 * c..(r0 + n) * c].to_vec())
        };
        let a = (0..heads)
            .map(|i| rows(w1, i * dh, dh))
            .collect::<Result<_>>()?;
        let b = (0..heads)
            .map(|i| rows(w2, i * inner, inner))
            .collect::<Result<_>>()?;
        Ok(FastMap::Mlp(a, b))
    }

    /// Inverse of [`FastMap::from_stacked`].
    pub fn to_stacked(&self) -> Result<(Tensor, Tensor)> {
        let FastMap::Mlp(a, b) = self else {
            return Err(Error::Config(
                "only MLP fast maps have a stacked layout".into(),
            ));
        };
        let (dh, inner) = (a[0].rows(), a[0].cols());
        let w1 = a.iter().flat_map(|t| t.data().iter().copied()).collect();
        let w2 = b.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok((
            Tensor::matrix(a.len() * dh, inner, w1)?,
            Tensor::matrix(b.len() * inner, dh, w2)?,
        ))
    }

    pub fn heads(&self) -> usize {
        match self {
            FastMap::Linear(w) => w.len(),
            FastMap::Mlp(a, _) => a.len(),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            FastMap::Linear(w) => w.iter().collect(),
            FastMap::Mlp(a, b) => a.iter().chain(b).collect(),
        }
    }

    fn with_tensors(&self, mut ts: Vec<Tensor>) -> Self {
        match self {
            FastMap::Linear(_) => FastMap::Linear(ts),
            FastMap::Mlp(a, _) => {
                let b = ts.split_off(a.len());
                FastMap::Mlp(ts, b)
            }
        }
    }

    /// `self − step · other`, entry by entry.
    pub fn sub_scaled(&self, other: &FastMap, step: f64) -> Result<FastMap> {
        let ts = self
            .tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|(w, g)| {
                let data = w
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a + -step * b)
                    .collect();
                Tensor::new(w.shape(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.with_tensors(ts))
    }

    pub fn max_abs_diff(&self, other: &FastMap) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Slow parameters of one key-value binding layer. Projections act on row
/// vectors: `key = x · θ_K`.
#[derive(Clone, Debug)]
pub struct KvbLayer {
    pub theta_k: Tensor,
    pub theta_v: Tensor,
    pub theta_q: Tensor,
}

impl KvbLayer {
    fn project(&self, x: &Tensor, theta: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let row = tape.constant(x).reshape(&[1, x.len()])?;
        Ok(row.matmul(tape.constant(theta))?.value())
    }

    /// Projection followed by per-head RMS normalization, for keys and queries.
    fn project_unit(&self, x: &Tensor, theta: &Tensor, heads: usize) -> Result<Tensor> {
        let u = self.project(x, theta)?;
        let dh = u.len() / heads;
        let mut out = Vec::with_capacity(u.len());
        for h in u.data().chunks(dh) {
            let ms = h.iter().map(|v| v * v).sum::<f64>() * (1.0 / dh as f64) + KEY_NORM_EPS;
            let r = ms.powf(-0.5);
            out.extend(h.iter().map(|v| v * r));
        }
        Tensor::matrix(1, u.len(), out)
    }
}

fn apply<'t>(tape: &'t Tape, kind: &FastMap, ws: &[Var<'t>], u: Var<'t>) -> Result<Var<'t>> {
    let heads = kind.heads();
    let dh = u.shape()[1] / heads;
    let outs = (0..heads)
        .map(|i| {
            let ui = u.slice_cols(i * dh, dh)?;
            match kind {
                FastMap::Linear(_) => ui.matmul(ws[i]),
                FastMap::Mlp(..) => ui.matmul(ws[i])?.silu()?.matmul(ws[heads + i]),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&outs)
}

/// `g(u; W)` for a single row vector `u`.
pub fn fast_apply(fast: &FastMap, u: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let ws: Vec<Var> = fast
        .tensors()
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let u = tape.constant(u).reshape(&[1, u.len()])?;
    Ok(Tensor::from_vec(
        apply(&tape, fast, &ws, u)?.value().into_data(),
    ))
}

/// Reconstruction `g(x · θ_K; W)` of the value `x · θ_V`.
pub fn kvb_predict(layer: &KvbLayer, x: &Tensor, fast: &FastMap) -> Result<Tensor> {
    fast_apply(fast, &layer.project_unit(x, &layer.theta_k, fast.heads())?)
}

/// `‖g(x · θ_K; W) − x · θ_V‖²`.
pub fn kvb_loss(layer: &KvbLayer, x: &Tensor, fast: &FastMap) -> Result<f64> {
    let pred = kvb_predict(layer, x, fast)?;
    let v = layer.project(x, &layer.theta_v)?;
    Ok(pred
        .data()
        .iter()
        .zip(v.data())
        .map(|(p, v)| (p - v) * (p - v))
        .sum())
}

/// Gradient of [`kvb_loss`] with respect to the fast weights.
pub fn kvb_grad(layer: &KvbLayer, x: &Tensor, fast: &FastMap) -> Result<FastMap> {
    let tape = Tape::new();
    let ws: Vec<Var> = fast.tensors().into_iter().map(|t| tape.param(t)).collect();
    let k = tape.constant(&layer.project_unit(x, &layer.theta_k, fast.heads())?);
    let v = tape.constant(&layer.project(x, &layer.theta_v)?);
    let diff = apply(&tape, fast, &ws, k)?.sub(v)?;
    let loss = diff.mul(diff)?.sum()?;
    Ok(fast.with_tensors(tape.backward(loss, &ws)?.grads))
}

/// Output with the weights already stepped on this token: `g(x · θ_Q; W_t)`.
pub fn kvb_output(layer: &KvbLayer, x: &Tensor, fast_updated: &FastMap) -> Result<Tensor> {
    fast_apply(
        fast_updated,
        &layer.project_unit(x, &layer.theta_q, fast_updated.heads())?,
    )
}

/// Output reusing the reconstruction before the step: `g(x · θ_K; W_{t−1})`.
pub fn kvb_output_simplified(
    layer: &KvbLayer,
    x: &Tensor,
    fast_previous: &FastMap,
) -> Result<Tensor> {
    kvb_predict(layer, x, fast_previous)
}

/// Token-by-token mini-batch reference for [`kvb_chunk`] over the rows of
/// `xs`. Gradients in a batch are taken at its start weights and averaged
/// over the batch size; token `t` is output with the start weights minus
/// the averaged gradients of tokens `≤ t` in its batch.
pub fn kvb_reference(
    layer: &KvbLayer,
    xs: &Tensor,
    fast: &FastMap,
    eta: f64,
    batch_b: usize,
    simplified: bool,
) -> Result<(Tensor, FastMap)> {
    let (n, d) = (xs.rows(), xs.cols());
    let mut w = fast.clone();
    let mut out = Vec::with_capacity(n * d);
    for start in (0..n).step_by(batch_b.max(1)) {
        let end = (start + batch_b).min(n);
        let c = eta / (end - start) as f64;
        let mut cur = w.clone();
        for t in start..end {
            let x = Tensor::from_vec(xs.data()[t * d..(t + 1) * d].to_vec());
            cur = cur.sub_scaled(&kvb_grad(layer, &x, &w)?, c)?;
            let z = if simplified {
                kvb_output_simplified(layer, &x, &w)?
            } else {
                kvb_output(layer, &x, &cur)?
            };
            out.extend_from_slice(z.data());
        }
        w = cur;
    }
    Ok((Tensor::matrix(n, d, out)?, w))
}

// ---- variant ladder -----------------------------------------------------

/// Names of the ladder steps, from key-value binding to next-token TTT.
pub const LADDER: [&str; 4] = ["kvb", "kvb_simplified", "e2e_all_layers_mh", "e2e"];

/// Applies one ladder step to `base`.
pub fn build_variant(base: &ModelSpec, name: &str) -> Result<ModelSpec> {
    let mut spec = base.clone();
    match name {
        "kvb" => spec.ttt_variant = Variant::Kvb,
        "kvb_simplified" => spec.ttt_variant = Variant::KvbSimplified,
        "e2e_all_layers_mh" => spec.ttt_variant = Variant::E2eAllLayersMh,
        "e2e" => {
            spec.ttt_variant = Variant::E2e;
            spec.fast_fraction = FastFraction::Quarter;
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown ladder variant {name:?}; expected one of {LADDER:?}"
            )))
        }
    }
    spec.validate()?;
    Ok(spec)
}
