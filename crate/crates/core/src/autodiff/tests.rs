use super::*;
use crate::error::Result;

fn det(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = ((i as u64 + 1) * 2654435761 + seed * 97) % 10007;
            (x as f64 / 10007.0) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'a;

fn hr<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn eval(f: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    f(&tape, &vars).unwrap().item()
}

/// Compares numeric and symbolic gradients against central differences.
fn check(f: &Build<'_>, inputs: &[Tensor]) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars).unwrap();
    let numeric = tape.backward(out, &vars).unwrap();
    let symbolic = tape.grad(out, &vars).unwrap();
    let h = 1e-5;
    for (k, x) in inputs.iter().enumerate() {
        let sym = symbolic.grads[k].value();
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            let an = numeric.grads[k].data()[i];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / scale < 1e-6,
                "input {k}[{i}]: fd {fd} vs backward {an}"
            );
            assert!(
                (sym.data()[i] - an).abs() <= 1e-12 * scale.max(1.0),
                "input {k}[{i}]: symbolic {} vs backward {an}",
                sym.data()[i]
            );
        }
    }
}

/// Checks the gradient of `Σ grad(f) · v` against differences of the
/// first-order gradient.
fn check_second(f: &Build<'_>, inputs: &[Tensor]) {
    let dirs: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| det(100 + k as u64, t.shape()))
        .collect();
    let gv = hr(move |tape, vars| {
        let out = f(tape, vars)?;
        let g = tape.grad(out, vars)?;
        let mut acc: Option<Var> = None;
        for (gk, d) in g.grads.iter().zip(&dirs) {
            let term = gk.mul(tape.constant(d))?.sum()?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok(acc.unwrap())
    });
    check(&gv, inputs);
}

#[test]
fn matmul_matches_triple_loop_and_counts_flops() {
    let a = det(1, &[2, 3]);
    let b = det(2, &[3, 4]);
    let tape = Tape::new();
    let c = tape.constant(&a).matmul(tape.constant(&b)).unwrap().value();
    for i in 0..2 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.data()[i * 3 + k] * b.data()[k * 4 + j];
            }
            assert!((c.data()[i * 4 + j] - s).abs() < 1e-15);
        }
    }
    assert_eq!(tape.flops().get("matmul"), 48);
    assert_eq!(tape.flops().total(), 48);
}

#[test]
fn transposed_matmul_variants_agree() {
    let a = det(3, &[3, 2]);
    let b = det(4, &[4, 3]);
    let tape = Tape::new();
    let (va, vb) = (tape.constant(&a), tape.constant(&b));
    let c1 = va.matmul_ex(vb, true, true).unwrap().value();
    let at = Tensor::new(&[2, 3], kernels::transpose(a.data(), 3, 2)).unwrap();
    let bt = Tensor::new(&[3, 4], kernels::transpose(b.data(), 4, 3)).unwrap();
    let c2 = tape
        .constant(&at)
        .matmul(tape.constant(&bt))
        .unwrap()
        .value();
    assert_eq!(c1, c2);
}

#[test]
fn square_has_gradient_six_and_curvature_two() {
    let tape = Tape::new();
    let w = tape.param(&Tensor::scalar(3.0));
    let y = w.mul(w).unwrap();
    let g = tape.grad(y, &[w]).unwrap().grads[0];
    assert_eq!(g.item(), 6.0);
    let gg = tape.grad(g, &[w]).unwrap().grads[0];
    assert_eq!(gg.item(), 2.0);
    assert_eq!(tape.backward(g, &[w]).unwrap().grads[0].item(), 2.0);
}

#[test]
fn unreachable_inputs_get_zero_and_are_reported() {
    let tape = Tape::new();
    let a = tape.param(&Tensor::scalar(1.0));
    let b = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
    let y = a.mul(a).unwrap();
    let g = tape.backward(y, &[a, b]).unwrap();
    assert_eq!(g.unreachable, vec![1]);
    assert_eq!(g.grads[1].data(), &[0.0, 0.0]);
    let s = tape.grad(y, &[a, b]).unwrap();
    assert_eq!(s.unreachable, vec![1]);
}

#[test]
fn non_scalar_output_is_rejected() {
    let tape = Tape::new();
    let a = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.backward(a, &[a]).is_err());
    assert!(tape.grad(a, &[a]).is_err());
}

#[test]
fn shape_errors_are_typed() {
    let tape = Tape::new();
    let a = tape.param(&det(1, &[2, 3]));
    let b = tape.param(&det(2, &[2, 3]));
    assert!(matches!(a.matmul(b), Err(crate::Error::Shape(_))));
    assert!(matches!(a.gather_rows(&[5]), Err(crate::Error::Index(_))));
    assert!(a.mul_row(a).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    let tape = Tape::new();
    let uniform = tape.constant(&Tensor::zeros(&[1, 256]));
    let ce = uniform
        .log_softmax()
        .unwrap()
        .pick_cols(&[7])
        .unwrap()
        .sum()
        .unwrap()
        .scale(-1.0)
        .unwrap();
    assert!((ce.item() - 256f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 4];
    logits[2] = 50.0;
    let peaked = tape.constant(&Tensor::matrix(1, 4, logits).unwrap());
    let ce = peaked
        .log_softmax()
        .unwrap()
        .pick_cols(&[2])
        .unwrap()
        .sum()
        .unwrap()
        .scale(-1.0)
        .unwrap();
    assert!(ce.item() < 1e-20);

    let three = tape.constant(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let ce = three
        .log_softmax()
        .unwrap()
        .pick_cols(&[0])
        .unwrap()
        .sum()
        .unwrap()
        .scale(-1.0)
        .unwrap();
    assert!((ce.item() - 2.407605964).abs() < 1e-8);
}

fn lin<'t>(tape: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    let _ = tape;
    v[0].matmul(v[1])?.sum()
}

#[test]
fn fd_matmul_all_transposes() {
    check(&lin, &[det(1, &[2, 3]), det(2, &[3, 2])]);
    for (ta, tb) in [(false, true), (true, false), (true, true)] {
        let f = hr(move |_, v| {
            let c = v[0].matmul_ex(v[1], ta, tb)?;
            c.mul(c)?.sum()
        });
        let sa = if ta { [3, 2] } else { [2, 3] };
        let sb = if tb { [4, 3] } else { [3, 4] };
        check(&f, &[det(1, &sa), det(2, &sb)]);
        check_second(&f, &[det(1, &sa), det(2, &sb)]);
    }
}

#[test]
fn fd_elementwise() {
    let f = hr(|_, v| {
        let a = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?;
        let b = a.axpy(-0.3, v[0])?.affine(1.7, 0.2)?;
        b.sigmoid()?.mul(v[1].exp()?)?.sum()
    });
    let inputs = [det(3, &[2, 3]), det(4, &[2, 3])];
    check(&f, &inputs);
    check_second(&f, &inputs);
}

#[test]
fn fd_pow_and_norm() {
    let f = hr(|_, v| {
        let y = v[0].rms_norm(Some(v[1]), 1e-6)?;
        y.mul(y)?.mul(v[0])?.sum()
    });
    let inputs = [det(5, &[3, 4]), det(6, &[4])];
    check(&f, &inputs);
    check_second(&f, &inputs);
}

#[test]
fn fd_broadcasts_and_reductions() {
    let f = hr(|_, v| {
        let a = v[0].mul_row(v[1])?.mul_col(v[2])?;
        let rows = a.sum_rows()?.expand_rows(2)?;
        let cols = a.row_sum()?.expand_cols(3)?;
        let all = a.sum()?.expand_all(&[2, 3])?;
        rows.mul(cols)?.add(all)?.silu()?.sum()
    });
    let inputs = [det(7, &[2, 3]), det(8, &[3]), det(9, &[2])];
    check(&f, &inputs);
    check_second(&f, &inputs);
}

#[test]
fn fd_log_softmax_and_pick() {
    let f = hr(|_, v| {
        let l = v[0].matmul(v[1])?.log_softmax()?;
        l.pick_cols(&[1, 0, 3])?.sum()
    });
    let inputs = [det(10, &[3, 2]), det(11, &[2, 4])];
    check(&f, &inputs);
    check_second(&f, &inputs);
}

#[test]
fn fd_gather_slice_concat() {
    let f = hr(|tape, v| {
        let g = v[0].gather_rows(&[2, 0, 2])?;
        let s = g.slice_cols(1, 2)?.pad_cols(0, 3)?;
        let r = tape
            .concat_rows(&[s.slice_rows(0, 2)?, v[1]])?
            .slice_rows(1, 2)?
            .pad_rows(1, 4)?;
        let c = tape.concat_cols(&[r, v[1].pad_rows(0, 4)?])?;
        c.mul(c)?.sum()
    });
    let inputs = [det(12, &[3, 3]), det(13, &[1, 3])];
    check(&f, &inputs);
    check_second(&f, &inputs);
}

#[test]
fn fd_rope() {
    let f = hr(|_, v| {
        let r = v[0].rope(3, 10_000.0)?;
        r.mul(v[1])?.sum()
    });
    let inputs = [det(14, &[3, 4]), det(15, &[3, 4])];
    check(&f, &inputs);
}

#[test]
fn fd_band_attention() {
    for width in [2usize, 4] {
        let band = Band {
            q0: 0,
            nq: 4,
            k0: 0,
            nk: 4,
            width,
        };
        let f = hr(move |_, v| {
            let s = v[0].band_qk(v[1], band)?.scale(0.7)?;
            let p = s.band_softmax(band)?;
            let o = p.band_pv(v[2], band)?;
            let back = p.band_scatter(o, band)?;
            o.mul(o)?.sum()?.add(back.mul(v[2])?.sum()?)
        });
        let inputs = [det(16, &[4, 2]), det(17, &[4, 2]), det(18, &[4, 3])];
        check(&f, &inputs);
        check_second(&f, &inputs);
    }
}

#[test]
fn fd_band_with_cache_offset() {
    let band = Band {
        q0: 3,
        nq: 2,
        k0: 1,
        nk: 4,
        width: 3,
    };
    let f = hr(move |_, v| {
        let p = v[0].band_qk(v[1], band)?.band_softmax(band)?;
        let o = p.band_pv(v[1], band)?;
        o.mul(o)?.sum()
    });
    check(&f, &[det(19, &[2, 2]), det(20, &[4, 2])]);
}

#[test]
fn sliding_window_attention_flops_are_linear() {
    let count = |t: usize| {
        let band = Band {
            q0: 0,
            nq: t,
            k0: 0,
            nk: t,
            width: 8,
        };
        let tape = Tape::new();
        let q = tape.constant(&det(1, &[t, 4]));
        let p = q.band_qk(q, band).unwrap().band_softmax(band).unwrap();
        p.band_pv(q, band).unwrap();
        tape.flops().get("attention")
    };
    let (a, b, c) = (count(64), count(128), count(256));
    assert_eq!(b - a, (c - b) / 2);
}

#[test]
fn checkpointing_preserves_values_and_gradients() {
    let build = |tape: &Tape, ckpt: bool| -> (f64, Vec<Tensor>, MemoryStats) {
        let w = tape.param(&det(1, &[4, 4]));
        let mut x = tape.param(&det(2, &[8, 4]));
        let x0 = x;
        for _ in 0..6 {
            let start = tape.mark();
            x = x
                .matmul(w)
                .unwrap()
                .silu()
                .unwrap()
                .rms_norm(None, 1e-6)
                .unwrap();
            if ckpt {
                tape.checkpoint_segment(start..tape.mark(), &[x.id()])
                    .unwrap();
            }
        }
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss, &[w, x0]).unwrap();
        (loss.item(), g.grads, tape.memory())
    };
    let (plain, plain_mem) = {
        let tape = Tape::new();
        let (l, g, m) = build(&tape, false);
        ((l, g), m)
    };
    let (ck, ck_mem) = {
        let tape = Tape::new();
        let (l, g, m) = build(&tape, true);
        let recompute = tape.flops().get("recompute");
        assert!(recompute > 0);
        ((l, g), m)
    };
    assert_eq!(plain.0.to_bits(), ck.0.to_bits());
    for (a, b) in plain.1.iter().zip(&ck.1) {
        assert_eq!(a, b);
    }
    assert!(ck_mem.peak < plain_mem.peak, "{ck_mem:?} vs {plain_mem:?}");
}

#[test]
fn overlapping_checkpoints_are_rejected() {
    let tape = Tape::new();
    let a = tape.param(&det(1, &[2, 2]));
    let s = tape.mark();
    let b = a.mul(a).unwrap();
    let c = b.mul(a).unwrap();
    tape.checkpoint_segment(s..tape.mark(), &[c.id()]).unwrap();
    assert!(matches!(
        tape.checkpoint_segment(s + 1..tape.mark(), &[]),
        Err(crate::Error::Checkpoint(_))
    ));
}

#[test]
fn symbolic_grad_through_checkpointed_segment() {
    let tape = Tape::new();
    let w = tape.param(&det(3, &[3, 3]));
    let x = tape.constant(&det(4, &[2, 3]));
    let s = tape.mark();
    let h = x.matmul(w).unwrap().sigmoid().unwrap();
    tape.checkpoint_segment(s..tape.mark(), &[h.id()]).unwrap();
    let loss = h.mul(h).unwrap().sum().unwrap();
    let g = tape.grad(loss, &[w]).unwrap().grads[0].value();
    let reference = {
        let t2 = Tape::new();
        let w2 = t2.param(&det(3, &[3, 3]));
        let h2 = t2
            .constant(&det(4, &[2, 3]))
            .matmul(w2)
            .unwrap()
            .sigmoid()
            .unwrap();
        let l2 = h2.mul(h2).unwrap().sum().unwrap();
        t2.backward(l2, &[w2]).unwrap().grads.remove(0)
    };
    assert_eq!(g, reference);
}
