use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{self, Band};
use super::tape::{NodeId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        ta: bool,
        tb: bool,
    },
    Add,
    Sub,
    Mul,
    /// `a + alpha * b`
    Axpy(f64),
    /// `scale * x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `x[r, c] * g[c]`
    MulRow,
    /// `x[r, c] * s[r]`
    MulCol,
    /// `[r, c] -> [c]`
    SumRows,
    /// `[r, c] -> [r]`
    RowSum,
    SumAll,
    /// `[c] -> [r, c]`
    ExpandRows,
    /// `[r] -> [r, c]`
    ExpandCols,
    /// `[] -> shape`
    ExpandAll,
    Sigmoid,
    Exp,
    Pow(f64),
    LogSoftmax,
    BandSoftmax(Band),
    BandQK(Band),
    BandPV(Band),
    BandScatter(Band),
    GatherRows(Rc<[usize]>),
    ScatterRows(Rc<[usize]>),
    PickCols(Rc<[usize]>),
    ScatterCols(Rc<[usize]>),
    SliceCols {
        start: usize,
    },
    PadCols {
        start: usize,
    },
    SliceRows {
        start: usize,
    },
    PadRows {
        start: usize,
    },
    ConcatCols,
    ConcatRows,
    Rope {
        pos0: usize,
        theta: f64,
        inverse: bool,
    },
    Reshape,
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

/// Operation kind and analytic FLOP count.
pub(crate) fn flops(op: &Op, ins: &[Vec<usize>], out: &[usize]) -> (&'static str, u64) {
    let n: u64 = out.iter().product::<usize>() as u64;
    match op {
        Op::Leaf | Op::Reshape => ("none", 0),
        Op::MatMul { ta, .. } => {
            let (r, c) = rc(&ins[0]);
            let k = if *ta { r } else { c };
            ("matmul", 2 * n * k as u64)
        }
        Op::Add | Op::Sub | Op::Mul | Op::MulRow | Op::MulCol => ("elementwise", n),
        Op::Axpy(_) | Op::Affine { .. } => ("elementwise", 2 * n),
        Op::SumRows | Op::RowSum | Op::SumAll => {
            ("reduce", ins[0].iter().product::<usize>() as u64)
        }
        Op::ExpandRows | Op::ExpandCols | Op::ExpandAll => ("none", 0),
        Op::Sigmoid | Op::Pow(_) => ("pointwise", 4 * n),
        Op::Exp => ("pointwise", 2 * n),
        Op::LogSoftmax => ("softmax", 5 * n),
        Op::BandSoftmax(b) => ("attention", 5 * b.valid_entries()),
        Op::BandQK(b) => ("attention", 2 * ins[0][1] as u64 * b.valid_entries()),
        Op::BandPV(b) | Op::BandScatter(b) => {
            ("attention", 2 * ins[1][1] as u64 * b.valid_entries())
        }
        Op::GatherRows(_)
        | Op::ScatterRows(_)
        | Op::PickCols(_)
        | Op::ScatterCols(_)
        | Op::SliceCols { .. }
        | Op::PadCols { .. }
        | Op::SliceRows { .. }
        | Op::PadRows { .. }
        | Op::ConcatCols
        | Op::ConcatRows => ("none", 0),
        Op::Rope { .. } => ("rope", 3 * n),
    }
}

pub(crate) fn forward(
    op: &Op,
    ins: &[Arc<Vec<f64>>],
    shapes: &[Vec<usize>],
    out: &[usize],
) -> Vec<f64> {
    let x = || ins[0].as_slice();
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { ta, tb } => {
            kernels::matmul(&ins[0], rc(&shapes[0]), *ta, &ins[1], rc(&shapes[1]), *tb).0
        }
        Op::Add => x().iter().zip(ins[1].iter()).map(|(a, b)| a + b).collect(),
        Op::Sub => x().iter().zip(ins[1].iter()).map(|(a, b)| a - b).collect(),
        Op::Mul => x().iter().zip(ins[1].iter()).map(|(a, b)| a * b).collect(),
        Op::Axpy(alpha) => x()
            .iter()
            .zip(ins[1].iter())
            .map(|(a, b)| a + alpha * b)
            .collect(),
        Op::Affine { scale, shift } => x().iter().map(|v| scale * v + shift).collect(),
        Op::MulRow => {
            let c = rc(&shapes[0]).1;
            x().chunks(c)
                .flat_map(|row| row.iter().zip(ins[1].iter()).map(|(a, g)| a * g))
                .collect()
        }
        Op::MulCol => {
            let c = rc(&shapes[0]).1;
            x().chunks(c)
                .zip(ins[1].iter())
                .flat_map(|(row, s)| row.iter().map(move |a| a * s))
                .collect()
        }
        Op::SumRows => {
            let c = rc(&shapes[0]).1;
            let mut acc = vec![0.0; c];
            for row in x().chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        }
        Op::RowSum => {
            let c = rc(&shapes[0]).1;
            x().chunks(c)
                .map(|row| {
                    let mut s = 0.0;
                    for v in row {
                        s += v;
                    }
                    s
                })
                .collect()
        }
        Op::SumAll => {
            let mut s = 0.0;
            for v in x() {
                s += v;
            }
            vec![s]
        }
        Op::ExpandRows => {
            let r = out[0];
            let mut o = Vec::with_capacity(r * x().len());
            for _ in 0..r {
                o.extend_from_slice(x());
            }
            o
        }
        Op::ExpandCols => {
            let c = out[1];
            x().iter()
                .flat_map(|&v| std::iter::repeat_n(v, c))
                .collect()
        }
        Op::ExpandAll => vec![x()[0]; out.iter().product()],
        Op::Sigmoid => x().iter().map(|&v| kernels::sigmoid(v)).collect(),
        Op::Exp => x().iter().map(|v| v.exp()).collect(),
        Op::Pow(p) => x().iter().map(|v| v.powf(*p)).collect(),
        Op::LogSoftmax => kernels::log_softmax_rows(x(), rc(&shapes[0]).1),
        Op::BandSoftmax(b) => kernels::band_softmax(x(), b),
        Op::BandQK(b) => kernels::band_qk(x(), &ins[1], shapes[0][1], b),
        Op::BandPV(b) => kernels::band_pv(x(), &ins[1], shapes[1][1], b),
        Op::BandScatter(b) => kernels::band_scatter(x(), &ins[1], shapes[1][1], b),
        Op::GatherRows(ids) => {
            let c = rc(&shapes[0]).1;
            let mut o = Vec::with_capacity(ids.len() * c);
            for &i in ids.iter() {
                o.extend_from_slice(&x()[i * c..(i + 1) * c]);
            }
            o
        }
        Op::ScatterRows(ids) => {
            let c = rc(&shapes[0]).1;
            let mut o = vec![0.0; out.iter().product()];
            for (r, &i) in ids.iter().enumerate() {
                for (a, v) in o[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&x()[r * c..(r + 1) * c])
                {
                    *a += v;
                }
            }
            o
        }
        Op::PickCols(ids) => {
            let c = rc(&shapes[0]).1;
            ids.iter()
                .enumerate()
                .map(|(r, &i)| x()[r * c + i])
                .collect()
        }
        Op::ScatterCols(ids) => {
            let c = out[1];
            let mut o = vec![0.0; out[0] * c];
            for (r, &i) in ids.iter().enumerate() {
                o[r * c + i] = x()[r];
            }
            o
        }
        Op::SliceCols { start } => {
            let c = rc(&shapes[0]).1;
            let len = out[1];
            x().chunks(c)
                .flat_map(|row| row[*start..start + len].iter().copied())
                .collect()
        }
        Op::PadCols { start } => {
            let len = rc(&shapes[0]).1;
            let total = out[1];
            let mut o = vec![0.0; out[0] * total];
            for (row, orow) in x().chunks(len).zip(o.chunks_mut(total)) {
                orow[*start..start + len].copy_from_slice(row);
            }
            o
        }
        Op::SliceRows { start } => {
            let c = rc(&shapes[0]).1;
            x()[start * c..(start + out[0]) * c].to_vec()
        }
        Op::PadRows { start } => {
            let c = rc(&shapes[0]).1;
            let mut o = vec![0.0; out.iter().product()];
            o[start * c..start * c + x().len()].copy_from_slice(x());
            o
        }
        Op::ConcatCols => {
            let rows = out[0];
            let mut o = Vec::with_capacity(out.iter().product());
            for r in 0..rows {
                for (v, s) in ins.iter().zip(shapes) {
                    let c = s[1];
                    o.extend_from_slice(&v[r * c..(r + 1) * c]);
                }
            }
            o
        }
        Op::ConcatRows => {
            let mut o = Vec::with_capacity(out.iter().product());
            for v in ins {
                o.extend_from_slice(v);
            }
            o
        }
        Op::Rope {
            pos0,
            theta,
            inverse,
        } => kernels::rope(x(), rc(&shapes[0]).1, *pos0, *theta, *inverse),
        Op::Reshape => x().to_vec(),
    }
}

/// Numeric vector-Jacobian product. Returns backward FLOPs and one optional
/// contribution per input (only for inputs flagged in `need`).
pub(crate) fn vjp_numeric(
    op: &Op,
    ins: &[Arc<Vec<f64>>],
    shapes: &[Vec<usize>],
    y: &[f64],
    out_shape: &[usize],
    dy: &[f64],
    need: &[bool],
) -> (u64, Vec<Option<Vec<f64>>>) {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; ins.len()];
    let mut fl: u64 = 0;
    let n = dy.len() as u64;
    match op {
        Op::Leaf => {}
        Op::MatMul { ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let sa = rc(&shapes[0]);
            let sb = rc(&shapes[1]);
            let so = rc(out_shape);
            let kdim = if ta { sa.0 } else { sa.1 };
            if need[0] {
                let (g, _, _) = if !ta {
                    kernels::matmul(dy, so, false, &ins[1], sb, !tb)
                } else {
                    kernels::matmul(&ins[1], sb, tb, dy, so, true)
                };
                fl += 2 * (so.0 * so.1 * kdim) as u64;
                res[0] = Some(g);
            }
            if need[1] {
                let (g, _, _) = if !tb {
                    kernels::matmul(&ins[0], sa, !ta, dy, so, false)
                } else {
                    kernels::matmul(dy, so, true, &ins[0], sa, ta)
                };
                fl += 2 * (so.0 * so.1 * kdim) as u64;
                res[1] = Some(g);
            }
        }
        Op::Add => {
            for (k, r) in res.iter_mut().enumerate() {
                if need[k] {
                    *r = Some(dy.to_vec());
                }
            }
        }
        Op::Sub => {
            if need[0] {
                res[0] = Some(dy.to_vec());
            }
            if need[1] {
                res[1] = Some(dy.iter().map(|v| -v).collect());
                fl += n;
            }
        }
        Op::Mul => {
            if need[0] {
                res[0] = Some(dy.iter().zip(ins[1].iter()).map(|(g, b)| g * b).collect());
                fl += n;
            }
            if need[1] {
                res[1] = Some(dy.iter().zip(ins[0].iter()).map(|(g, a)| g * a).collect());
                fl += n;
            }
        }
        Op::Axpy(alpha) => {
            if need[0] {
                res[0] = Some(dy.to_vec());
            }
            if need[1] {
                res[1] = Some(dy.iter().map(|g| alpha * g).collect());
                fl += n;
            }
        }
        Op::Affine { scale, .. } => {
            res[0] = Some(dy.iter().map(|g| scale * g).collect());
            fl += n;
        }
        Op::MulRow => {
            let c = rc(&shapes[0]).1;
            if need[0] {
                res[0] = Some(
                    dy.chunks(c)
                        .flat_map(|row| row.iter().zip(ins[1].iter()).map(|(a, g)| a * g))
                        .collect(),
                );
                fl += n;
            }
            if need[1] {
                let mut acc = vec![0.0; c];
                for (grow, xrow) in dy.chunks(c).zip(ins[0].chunks(c)) {
                    for ((a, g), x) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += g * x;
                    }
                }
                res[1] = Some(acc);
                fl += 2 * n;
            }
        }
        Op::MulCol => {
            let c = rc(&shapes[0]).1;
            if need[0] {
                res[0] = Some(
                    dy.chunks(c)
                        .zip(ins[1].iter())
                        .flat_map(|(row, s)| row.iter().map(move |a| a * s))
                        .collect(),
                );
                fl += n;
            }
            if need[1] {
                res[1] = Some(
                    dy.chunks(c)
                        .zip(ins[0].chunks(c))
                        .map(|(g, x)| {
                            let mut s = 0.0;
                            for (a, b) in g.iter().zip(x) {
                                s += a * b;
                            }
                            s
                        })
                        .collect(),
                );
                fl += 2 * n;
            }
        }
        Op::SumRows => {
            let r = rc(&shapes[0]).0;
            let mut o = Vec::with_capacity(r * dy.len());
            for _ in 0..r {
                o.extend_from_slice(dy);
            }
            res[0] = Some(o);
        }
        Op::RowSum => {
            let c = rc(&shapes[0]).1;
            res[0] = Some(
                dy.iter()
                    .flat_map(|&v| std::iter::repeat_n(v, c))
                    .collect(),
            );
        }
        Op::SumAll => {
            res[0] = Some(vec![dy[0]; shapes[0].iter().product()]);
        }
        Op::ExpandRows => {
            let c = out_shape[1];
            let mut acc = vec![0.0; c];
            for row in dy.chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            res[0] = Some(acc);
            fl += n;
        }
        Op::ExpandCols => {
            let c = out_shape[1];
            res[0] = Some(
                dy.chunks(c)
                    .map(|row| {
                        let mut s = 0.0;
                        for v in row {
                            s += v;
                        }
                        s
                    })
                    .collect(),
            );
            fl += n;
        }
        Op::ExpandAll => {
            let mut s = 0.0;
            for v in dy {
                s += v;
            }
            res[0] = Some(vec![s]);
            fl += n;
        }
        Op::Sigmoid => {
            res[0] = Some(dy.iter().zip(y).map(|(g, s)| g * (s * (1.0 - s))).collect());
            fl += 4 * n;
        }
        Op::Exp => {
            res[0] = Some(dy.iter().zip(y).map(|(g, e)| g * e).collect());
            fl += n;
        }
        Op::Pow(p) => {
            res[0] = Some(
                dy.iter()
                    .zip(ins[0].iter())
                    .map(|(g, x)| g * (p * x.powf(p - 1.0)))
                    .collect(),
            );
            fl += 6 * n;
        }
        Op::LogSoftmax => {
            let c = rc(out_shape).1;
            let mut o = Vec::with_capacity(dy.len());
            for (grow, yrow) in dy.chunks(c).zip(y.chunks(c)) {
                let mut s = 0.0;
                for v in grow {
                    s += v;
                }
                for (g, l) in grow.iter().zip(yrow) {
                    o.push(g - l.exp() * s);
                }
            }
            res[0] = Some(o);
            fl += 4 * n;
        }
        Op::BandSoftmax(_) => {
            let c = rc(out_shape).1;
            let mut o = Vec::with_capacity(dy.len());
            for (grow, yrow) in dy.chunks(c).zip(y.chunks(c)) {
                let mut s = 0.0;
                for (g, p) in grow.iter().zip(yrow) {
                    s += g * p;
                }
                for (g, p) in grow.iter().zip(yrow) {
                    o.push(p * (g - s));
                }
            }
            res[0] = Some(o);
            fl += 4 * n;
        }
        Op::BandQK(b) => {
            let dh = shapes[0][1];
            if need[0] {
                res[0] = Some(kernels::band_pv(dy, &ins[1], dh, b));
            }
            if need[1] {
                res[1] = Some(kernels::band_scatter(dy, &ins[0], dh, b));
            }
            fl += 2 * dh as u64 * b.valid_entries() * need.iter().filter(|&&x| x).count() as u64;
        }
        Op::BandPV(b) => {
            let dv = shapes[1][1];
            if need[0] {
                res[0] = Some(kernels::band_qk(dy, &ins[1], dv, b));
            }
            if need[1] {
                res[1] = Some(kernels::band_scatter(&ins[0], dy, dv, b));
            }
            fl += 2 * dv as u64 * b.valid_entries() * need.iter().filter(|&&x| x).count() as u64;
        }
        Op::BandScatter(b) => {
            let dx = shapes[1][1];
            if need[0] {
                res[0] = Some(kernels::band_qk(&ins[1], dy, dx, b));
            }
            if need[1] {
                res[1] = Some(kernels::band_pv(&ins[0], dy, dx, b));
            }
            fl += 2 * dx as u64 * b.valid_entries() * need.iter().filter(|&&x| x).count() as u64;
        }
        Op::GatherRows(ids) => {
            let c = rc(out_shape).1;
            let mut o = vec![0.0; shapes[0].iter().product()];
            for (r, &i) in ids.iter().enumerate() {
                for (a, v) in o[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&dy[r * c..(r + 1) * c])
                {
                    *a += v;
                }
            }
            res[0] = Some(o);
        }
        Op::ScatterRows(ids) => {
            let c = rc(out_shape).1;
            let mut o = Vec::with_capacity(ids.len() * c);
            for &i in ids.iter() {
                o.extend_from_slice(&dy[i * c..(i + 1) * c]);
            }
            res[0] = Some(o);
        }
        Op::PickCols(ids) => {
            let c = rc(&shapes[0]).1;
            let mut o = vec![0.0; shapes[0].iter().product()];
            for (r, &i) in ids.iter().enumerate() {
                o[r * c + i] = dy[r];
            }
            res[0] = Some(o);
        }
        Op::ScatterCols(ids) => {
            let c = out_shape[1];
            res[0] = Some(
                ids.iter()
                    .enumerate()
                    .map(|(r, &i)| dy[r * c + i])
                    .collect(),
            );
        }
        Op::SliceCols { start } => {
            let total = rc(&shapes[0]).1;
            let len = out_shape[1];
            let mut o = vec![0.0; shapes[0].iter().product()];
            for (row, orow) in dy.chunks(len).zip(o.chunks_mut(total)) {
                orow[*start..start + len].copy_from_slice(row);
            }
            res[0] = Some(o);
        }
        Op::PadCols { start } => {
            let len = rc(&shapes[0]).1;
            let total = out_shape[1];
            res[0] = Some(
                dy.chunks(total)
                    .flat_map(|row| row[*start..start + len].iter().copied())
                    .collect(),
            );
        }
        Op::SliceRows { start } => {
            let c = rc(&shapes[0]).1;
            let mut o = vec![0.0; shapes[0].iter().product()];
            o[start * c..start * c + dy.len()].copy_from_slice(dy);
            res[0] = Some(o);
        }
        Op::PadRows { start } => {
            let c = rc(&shapes[0]).1;
            let len = shapes[0].iter().product::<usize>();
            res[0] = Some(dy[start * c..start * c + len].to_vec());
        }
        Op::ConcatCols => {
            let total = out_shape[1];
            let mut off = 0;
            for (k, s) in shapes.iter().enumerate() {
                let w = s[1];
                if need[k] {
                    res[k] = Some(
                        dy.chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect(),
                    );
                }
                off += w;
            }
        }
        Op::ConcatRows => {
            let mut off = 0;
            for (k, s) in shapes.iter().enumerate() {
                let len: usize = s.iter().product();
                if need[k] {
                    res[k] = Some(dy[off..off + len].to_vec());
                }
                off += len;
            }
        }
        Op::Rope {
            pos0,
            theta,
            inverse,
        } => {
            res[0] = Some(kernels::rope(dy, rc(out_shape).1, *pos0, *theta, !inverse));
            fl += 3 * n;
        }
        Op::Reshape => {
            res[0] = Some(dy.to_vec());
        }
    }
    (fl, res)
}

/// Vector-Jacobian product recorded as tape operations, so the result is
/// itself differentiable.
pub(crate) fn vjp_symbolic<'t>(
    op: &Op,
    node: Var<'t>,
    inputs: &[NodeId],
    dy: Var<'t>,
    need: &[bool],
) -> Result<Vec<Option<Var<'t>>>> {
    let tape = node.tape;
    let inp = |k: usize| Var {
        tape,
        id: inputs[k],
    };
    let mut res: Vec<Option<Var<'t>>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul { ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let (a, b) = (inp(0), inp(1));
            if need[0] {
                res[0] = Some(if !ta {
                    dy.matmul_ex(b, false, !tb)?
                } else {
                    b.matmul_ex(dy, tb, true)?
                });
            }
            if need[1] {
                res[1] = Some(if !tb {
                    a.matmul_ex(dy, !ta, false)?
                } else {
                    dy.matmul_ex(a, true, ta)?
                });
            }
        }
        Op::Add => {
            for (k, r) in res.iter_mut().enumerate() {
                if need[k] {
                    *r = Some(dy);
                }
            }
        }
        Op::Sub => {
            if need[0] {
                res[0] = Some(dy);
            }
            if need[1] {
                res[1] = Some(dy.affine(-1.0, 0.0)?);
            }
        }
        Op::Mul => {
            if need[0] {
                res[0] = Some(dy.mul(inp(1))?);
            }
            if need[1] {
                res[1] = Some(dy.mul(inp(0))?);
            }
        }
        Op::Axpy(alpha) => {
            if need[0] {
                res[0] = Some(dy);
            }
            if need[1] {
                res[1] = Some(dy.affine(*alpha, 0.0)?);
            }
        }
        Op::Affine { scale, .. } => res[0] = Some(dy.affine(*scale, 0.0)?),
        Op::MulRow => {
            if need[0] {
                res[0] = Some(dy.mul_row(inp(1))?);
            }
            if need[1] {
                res[1] = Some(dy.mul(inp(0))?.sum_rows()?);
            }
        }
        Op::MulCol => {
            if need[0] {
                res[0] = Some(dy.mul_col(inp(1))?);
            }
            if need[1] {
                res[1] = Some(dy.mul(inp(0))?.row_sum()?);
            }
        }
        Op::SumRows => res[0] = Some(dy.expand_rows(rc(&inp(0).shape()).0)?),
        Op::RowSum => res[0] = Some(dy.expand_cols(rc(&inp(0).shape()).1)?),
        Op::SumAll => res[0] = Some(dy.expand_all(&inp(0).shape())?),
        Op::ExpandRows => res[0] = Some(dy.sum_rows()?),
        Op::ExpandCols => res[0] = Some(dy.row_sum()?),
        Op::ExpandAll => res[0] = Some(dy.sum()?),
        Op::Sigmoid => res[0] = Some(dy.mul(node.mul(node.affine(-1.0, 1.0)?)?)?),
        Op::Exp => res[0] = Some(dy.mul(node)?),
        Op::Pow(p) => res[0] = Some(dy.mul(inp(0).pow(p - 1.0)?.affine(*p, 0.0)?)?),
        Op::LogSoftmax => res[0] = Some(dy.sub(node.exp()?.mul_col(dy.row_sum()?)?)?),
        Op::BandSoftmax(_) => {
            let w = node.shape()[1];
            let s = dy.mul(node)?.row_sum()?.expand_cols(w)?;
            res[0] = Some(node.mul(dy.sub(s)?)?);
        }
        Op::BandQK(b) => {
            if need[0] {
                res[0] = Some(dy.band_pv(inp(1), *b)?);
            }
            if need[1] {
                res[1] = Some(dy.band_scatter(inp(0), *b)?);
            }
        }
        Op::BandPV(b) => {
            if need[0] {
                res[0] = Some(dy.band_qk(inp(1), *b)?);
            }
            if need[1] {
                res[1] = Some(inp(0).band_scatter(dy, *b)?);
            }
        }
        Op::BandScatter(b) => {
            if need[0] {
                res[0] = Some(inp(1).band_qk(dy, *b)?);
            }
            if need[1] {
                res[1] = Some(inp(0).band_pv(dy, *b)?);
            }
        }
        Op::GatherRows(ids) => {
            let rows = inp(0).shape()[0];
            res[0] = Some(dy.scatter_rows_rc(ids.clone(), rows)?);
        }
        Op::ScatterRows(ids) => res[0] = Some(dy.gather_rows_rc(ids.clone())?),
        Op::PickCols(ids) => {
            let cols = inp(0).shape()[1];
            res[0] = Some(dy.scatter_cols_rc(ids.clone(), cols)?);
        }
        Op::ScatterCols(ids) => res[0] = Some(dy.pick_cols_rc(ids.clone())?),
        Op::SliceCols { start } => {
            let total = inp(0).shape()[1];
            res[0] = Some(dy.pad_cols(*start, total)?);
        }
        Op::PadCols { start } => {
            let len = inp(0).shape()[1];
            res[0] = Some(dy.slice_cols(*start, len)?);
        }
        Op::SliceRows { start } => {
            let total = inp(0).shape()[0];
            res[0] = Some(dy.pad_rows(*start, total)?);
        }
        Op::PadRows { start } => {
            let len = inp(0).shape()[0];
            res[0] = Some(dy.slice_rows(*start, len)?);
        }
        Op::ConcatCols => {
            let mut off = 0;
            for k in 0..inputs.len() {
                let w = inp(k).shape()[1];
                if need[k] {
                    res[k] = Some(dy.slice_cols(off, w)?);
                }
                off += w;
            }
        }
        Op::ConcatRows => {
            let mut off = 0;
            for k in 0..inputs.len() {
                let s = inp(k).shape();
                let r = s[0];
                if need[k] {
                    res[k] = Some(dy.slice_rows(off, r)?);
                }
                off += r;
            }
        }
        Op::Rope {
            pos0,
            theta,
            inverse,
        } => res[0] = Some(dy.rope_ex(*pos0, *theta, !inverse)?),
        Op::Reshape => res[0] = Some(dy.reshape(&inp(0).shape())?),
    }
    Ok(res)
}

// ---- public operation surface ---------------------------------------------

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn same_shape(what: &str, a: &Var<'_>, b: &Var<'_>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_err(what, &sa, &sb));
    }
    Ok(sa)
}

fn matrix(what: &str, v: &Var<'_>) -> Result<(usize, usize)> {
    let s = v.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "{what}: expected a matrix, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn check_ids(what: &str, ids: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
        return Err(Error::Index(format!(
            "{what}: index {bad} out of range for extent {bound}"
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn un(&self, op: Op, shape: Vec<usize>) -> Var<'t> {
        self.tape.push(op, vec![self.id], shape)
    }

    fn bin(&self, other: Var<'t>, op: Op, shape: Vec<usize>) -> Var<'t> {
        self.tape.push(op, vec![self.id, other.id], shape)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, false)
    }

    /// Matrix product with optional transposes: `op(self) · op(other)`.
    pub fn matmul_ex(&self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        Ok(self.bin(other, Op::MatMul { ta, tb }, vec![m, n]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let s = same_shape("add", self, &other)?;
        Ok(self.bin(other, Op::Add, s))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let s = same_shape("sub", self, &other)?;
        Ok(self.bin(other, Op::Sub, s))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let s = same_shape("mul", self, &other)?;
        Ok(self.bin(other, Op::Mul, s))
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: Var<'t>) -> Result<Var<'t>> {
        let s = same_shape("axpy", self, &other)?;
        Ok(self.bin(other, Op::Axpy(alpha), s))
    }

    /// `scale * self + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>> {
        Ok(self.un(Op::Affine { scale, shift }, self.shape()))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.affine(c, 0.0)
    }

    /// Multiplies every row by the vector `g`.
    pub fn mul_row(&self, g: Var<'t>) -> Result<Var<'t>> {
        let (_, c) = matrix("mul_row", self)?;
        if g.shape() != [c] {
            return Err(shape_err("mul_row", &self.shape(), &g.shape()));
        }
        Ok(self.bin(g, Op::MulRow, self.shape()))
    }

    /// Multiplies row `r` by `s[r]`.
    pub fn mul_col(&self, s: Var<'t>) -> Result<Var<'t>> {
        let (r, _) = matrix("mul_col", self)?;
        if s.shape() != [r] {
            return Err(shape_err("mul_col", &self.shape(), &s.shape()));
        }
        Ok(self.bin(s, Op::MulCol, self.shape()))
    }

    /// Sum over rows: `[r, c] -> [c]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let (_, c) = matrix("sum_rows", self)?;
        Ok(self.un(Op::SumRows, vec![c]))
    }

    /// Sum within each row: `[r, c] -> [r]`.
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let (r, _) = matrix("row_sum", self)?;
        Ok(self.un(Op::RowSum, vec![r]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        Ok(self.un(Op::SumAll, Vec::new()))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn expand_rows(&self, rows: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!(
                "expand_rows: expected a vector, got {s:?}"
            )));
        }
        Ok(self.un(Op::ExpandRows, vec![rows, s[0]]))
    }

    pub fn expand_cols(&self, cols: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!(
                "expand_cols: expected a vector, got {s:?}"
            )));
        }
        Ok(self.un(Op::ExpandCols, vec![s[0], cols]))
    }

    pub fn expand_all(&self, shape: &[usize]) -> Result<Var<'t>> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "expand_all: expected a scalar, got {:?}",
                self.shape()
            )));
        }
        Ok(self.un(Op::ExpandAll, shape.to_vec()))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        Ok(self.un(Op::Sigmoid, self.shape()))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t>> {
        self.mul(self.sigmoid()?)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        Ok(self.un(Op::Exp, self.shape()))
    }

    /// Elementwise power; inputs must be positive unless `p` is an integer.
    pub fn pow(&self, p: f64) -> Result<Var<'t>> {
        Ok(self.un(Op::Pow(p), self.shape()))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        matrix("log_softmax", self)?;
        Ok(self.un(Op::LogSoftmax, self.shape()))
    }

    /// Row-wise RMS normalization `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rms_norm(&self, gain: Option<Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let (_, c) = matrix("rms_norm", self)?;
        let ms = self.mul(*self)?.row_sum()?.affine(1.0 / c as f64, eps)?;
        let y = self.mul_col(ms.pow(-0.5)?)?;
        match gain {
            Some(g) => y.mul_row(g),
            None => Ok(y),
        }
    }

    fn check_band(
        &self,
        what: &str,
        other: &Var<'t>,
        band: &Band,
        self_rows: usize,
        other_rows: usize,
    ) -> Result<()> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != self_rows || sb[0] != other_rows {
            return Err(Error::Shape(format!(
                "{what}: shapes {sa:?}, {sb:?} do not fit band {band:?}"
            )));
        }
        if band.width == 0 {
            return Err(Error::Shape(format!("{what}: zero band width")));
        }
        Ok(())
    }

    /// Banded scores `S[t, j] = q_t · k_{key(t, j)}` with `self` the queries.
    pub fn band_qk(&self, keys: Var<'t>, band: Band) -> Result<Var<'t>> {
        self.check_band("band_qk", &keys, &band, band.nq, band.nk)?;
        if self.shape()[1] != keys.shape()[1] {
            return Err(shape_err("band_qk", &self.shape(), &keys.shape()));
        }
        Ok(self.bin(keys, Op::BandQK(band), vec![band.nq, band.width]))
    }

    /// `O[t] = Σ_j P[t, j] · v_{key(t, j)}` with `self` the band weights.
    pub fn band_pv(&self, values: Var<'t>, band: Band) -> Result<Var<'t>> {
        self.check_band("band_pv", &values, &band, band.nq, band.nk)?;
        if self.shape()[1] != band.width {
            return Err(shape_err("band_pv", &self.shape(), &values.shape()));
        }
        let dv = values.shape()[1];
        Ok(self.bin(values, Op::BandPV(band), vec![band.nq, dv]))
    }

    /// `Y[r] = Σ_{(t, j) → r} A[t, j] · x_t` with `self` the band weights.
    pub fn band_scatter(&self, x: Var<'t>, band: Band) -> Result<Var<'t>> {
        self.check_band("band_scatter", &x, &band, band.nq, band.nq)?;
        if self.shape()[1] != band.width {
            return Err(shape_err("band_scatter", &self.shape(), &x.shape()));
        }
        let dx = x.shape()[1];
        Ok(self.bin(x, Op::BandScatter(band), vec![band.nk, dx]))
    }

    /// Softmax over the valid entries of each band row.
    pub fn band_softmax(&self, band: Band) -> Result<Var<'t>> {
        if self.shape() != [band.nq, band.width] {
            return Err(Error::Shape(format!(
                "band_softmax: shape {:?} does not fit {band:?}",
                self.shape()
            )));
        }
        Ok(self.un(Op::BandSoftmax(band), self.shape()))
    }

    /// Row lookup: `[V, d] -> [ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.gather_rows_rc(ids.into())
    }

    fn gather_rows_rc(&self, ids: Rc<[usize]>) -> Result<Var<'t>> {
        let (r, c) = matrix("gather_rows", self)?;
        check_ids("gather_rows", &ids, r)?;
        let n = ids.len();
        Ok(self.un(Op::GatherRows(ids), vec![n, c]))
    }

    fn scatter_rows_rc(&self, ids: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let (r, c) = matrix("scatter_rows", self)?;
        if r != ids.len() {
            return Err(Error::Shape(format!(
                "scatter_rows: {r} rows for {} ids",
                ids.len()
            )));
        }
        check_ids("scatter_rows", &ids, rows)?;
        Ok(self.un(Op::ScatterRows(ids), vec![rows, c]))
    }

    /// Picks `self[r, ids[r]]`: `[r, c] -> [r]`.
    pub fn pick_cols(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.pick_cols_rc(ids.into())
    }

    fn pick_cols_rc(&self, ids: Rc<[usize]>) -> Result<Var<'t>> {
        let (r, c) = matrix("pick_cols", self)?;
        if r != ids.len() {
            return Err(Error::Shape(format!(
                "pick_cols: {r} rows for {} ids",
                ids.len()
            )));
        }
        check_ids("pick_cols", &ids, c)?;
        Ok(self.un(Op::PickCols(ids), vec![r]))
    }

    fn scatter_cols_rc(&self, ids: Rc<[usize]>, cols: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 || s[0] != ids.len() {
            return Err(Error::Shape(format!(
                "scatter_cols: shape {s:?} for {} ids",
                ids.len()
            )));
        }
        check_ids("scatter_cols", &ids, cols)?;
        Ok(self.un(Op::ScatterCols(ids), vec![s[0], cols]))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (r, c) = matrix("slice_cols", self)?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) outside {c} columns",
                start + len
            )));
        }
        Ok(self.un(Op::SliceCols { start }, vec![r, len]))
    }

    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Var<'t>> {
        let (r, c) = matrix("pad_cols", self)?;
        if start + c > total {
            return Err(Error::Shape(format!(
                "pad_cols: {c} columns at {start} exceed {total}"
            )));
        }
        Ok(self.un(Op::PadCols { start }, vec![r, total]))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {}) outside shape {s:?}",
                start + len
            )));
        }
        let mut out = s.clone();
        out[0] = len;
        Ok(self.un(Op::SliceRows { start }, out))
    }

    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || start + s[0] > total {
            return Err(Error::Shape(format!(
                "pad_rows: shape {s:?} at {start} exceeds {total} rows"
            )));
        }
        let mut out = s.clone();
        out[0] = total;
        Ok(self.un(Op::PadRows { start }, out))
    }

    /// Rotary position embedding for rows at positions `pos0, pos0 + 1, ...`.
    pub fn rope(&self, pos0: usize, theta: f64) -> Result<Var<'t>> {
        self.rope_ex(pos0, theta, false)
    }

    fn rope_ex(&self, pos0: usize, theta: f64, inverse: bool) -> Result<Var<'t>> {
        let (_, c) = matrix("rope", self)?;
        if c % 2 != 0 {
            return Err(Error::Shape(format!(
                "rope: head dimension {c} must be even"
            )));
        }
        Ok(self.un(
            Op::Rope {
                pos0,
                theta,
                inverse,
            },
            self.shape(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err("reshape", &self.shape(), shape));
        }
        Ok(self.un(Op::Reshape, shape.to_vec()))
    }
}

impl Tape {
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let (r, _) = matrix("concat_cols", first)?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = matrix("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", &first.shape(), &p.shape()));
            }
            total += pc;
        }
        Ok(self.push(
            Op::ConcatCols,
            parts.iter().map(|p| p.id).collect(),
            vec![r, total],
        ))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let s0 = first.shape();
        if s0.is_empty() {
            return Err(Error::Shape("concat_rows: scalar input".into()));
        }
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s[1..] != s0[1..] {
                return Err(shape_err("concat_rows", &s0, &s));
            }
            rows += s[0];
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let mut out = s0.clone();
        out[0] = rows;
        Ok(self.push(Op::ConcatRows, parts.iter().map(|p| p.id).collect(), out))
    }

    /// Leaf holding `t`, differentiable when `grad` is set.
    pub fn tensor(&self, t: &Tensor, grad: bool) -> Var<'_> {
        if grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }
}
