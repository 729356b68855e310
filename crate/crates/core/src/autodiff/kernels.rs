//! Numeric kernels behind the tape operations.
//!
//! Every kernel accumulates each output element in a fixed order that does not
//! depend on how many rows are processed at once. Evaluating a sequence in
//! chunks therefore reproduces the full-sequence result bit for bit.

/// Geometry of a causal band of attention scores.
///
/// Row `t` holds queries at absolute position `q0 + t`. Column `j` of that row
/// refers to the key at absolute position `q0 + t - (width - 1) + j`. Key row
/// `r` of the key matrix sits at absolute position `k0 + r`. Entries whose key
/// position falls outside `[k0, k0 + nk)` are invalid and hold zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub q0: usize,
    pub nq: usize,
    pub k0: usize,
    pub nk: usize,
    pub width: usize,
}

impl Band {
    /// Range of valid columns `[lo, hi)` for query row `t`, with the key row
    /// index of column `lo`.
    #[inline]
    pub fn cols(&self, t: usize) -> (usize, usize, usize) {
        let qpos = (self.q0 + t) as isize;
        let first = qpos - (self.width as isize - 1);
        let kstart = self.k0 as isize;
        let kend = (self.k0 + self.nk) as isize;
        let lo_pos = first.max(kstart);
        let hi_pos = (qpos + 1).min(kend);
        if hi_pos <= lo_pos {
            return (0, 0, 0);
        }
        let lo = (lo_pos - first) as usize;
        let hi = (hi_pos - first) as usize;
        (lo, hi, (lo_pos - kstart) as usize)
    }

    pub fn valid_entries(&self) -> u64 {
        (0..self.nq)
            .map(|t| {
                let (lo, hi, _) = self.cols(t);
                (hi - lo) as u64
            })
            .sum()
    }
}

/// `C = op(A) · op(B)` with `op` an optional transpose.
pub fn matmul(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let (k2, n) = if tb { (b_shape.1, b_shape.0) } else { b_shape };
    debug_assert_eq!(k, k2);
    let b_owned;
    let b_nn: &[f64] = if tb {
        b_owned = transpose(b, b_shape.0, b_shape.1);
        &b_owned
    } else {
        b
    };
    let mut c = vec![0.0; m * n];
    if ta {
        // A is stored [k, m].
        for kk in 0..k {
            let brow = &b_nn[kk * n..(kk + 1) * n];
            let arow = &a[kk * m..(kk + 1) * m];
            for i in 0..m {
                let aik = arow[i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = arow[kk];
                let brow = &b_nn[kk * n..(kk + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }
    (c, m, n)
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `x - logsumexp(x)`.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Softmax over the valid entries of each band row; invalid entries are zero.
pub fn band_softmax(s: &[f64], band: &Band) -> Vec<f64> {
    let w = band.width;
    let mut out = vec![0.0; s.len()];
    for t in 0..band.nq {
        let (lo, hi, _) = band.cols(t);
        if lo == hi {
            continue;
        }
        let row = &s[t * w + lo..t * w + hi];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[t * w + lo..t * w + hi];
        let mut sum = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// `S[t, j] = q_t · k_{key(t, j)}` over valid band entries.
pub fn band_qk(q: &[f64], k: &[f64], dh: usize, band: &Band) -> Vec<f64> {
    let w = band.width;
    let mut out = vec![0.0; band.nq * w];
    for t in 0..band.nq {
        let (lo, hi, r0) = band.cols(t);
        let qrow = &q[t * dh..(t + 1) * dh];
        for (off, j) in (lo..hi).enumerate() {
            let krow = &k[(r0 + off) * dh..(r0 + off + 1) * dh];
            let mut acc = 0.0;
            for (a, b) in qrow.iter().zip(krow) {
                acc += a * b;
            }
            out[t * w + j] = acc;
        }
    }
    out
}

/// `O[t] = Σ_j P[t, j] · v_{key(t, j)}`.
pub fn band_pv(p: &[f64], v: &[f64], dv: usize, band: &Band) -> Vec<f64> {
    let w = band.width;
    let mut out = vec![0.0; band.nq * dv];
    for t in 0..band.nq {
        let (lo, hi, r0) = band.cols(t);
        let orow = &mut out[t * dv..(t + 1) * dv];
        for (off, j) in (lo..hi).enumerate() {
            let pj = p[t * w + j];
            let vrow = &v[(r0 + off) * dv..(r0 + off + 1) * dv];
            for (o, x) in orow.iter_mut().zip(vrow) {
                *o += pj * x;
            }
        }
    }
    out
}

/// `Y[r] = Σ_{(t, j) → r} A[t, j] · x_t`, the transpose of `band_pv` in `v`.
pub fn band_scatter(a: &[f64], x: &[f64], dx: usize, band: &Band) -> Vec<f64> {
    let w = band.width;
    let mut out = vec![0.0; band.nk * dx];
    for t in 0..band.nq {
        let (lo, hi, r0) = band.cols(t);
        let xrow = &x[t * dx..(t + 1) * dx];
        for (off, j) in (lo..hi).enumerate() {
            let aj = a[t * w + j];
            let orow = &mut out[(r0 + off) * dx..(r0 + off + 1) * dx];
            for (o, xv) in orow.iter_mut().zip(xrow) {
                *o += aj * xv;
            }
        }
    }
    out
}

/// Rotary position embedding applied to rows at absolute positions
/// `pos0, pos0 + 1, ...`. Pairs are `(2i, 2i + 1)` with angle
/// `p · theta^(-2i / d)`; `inverse` rotates by the negated angle.
pub fn rope(x: &[f64], cols: usize, pos0: usize, theta: f64, inverse: bool) -> Vec<f64> {
    let half = cols / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / cols as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = vec![0.0; x.len()];
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let p = (pos0 + r) as f64;
        for (i, f) in freqs.iter().enumerate() {
            let angle = p * f;
            let (s, c) = angle.sin_cos();
            let s = sign * s;
            let a = row[2 * i];
            let b = row[2 * i + 1];
            orow[2 * i] = a * c - b * s;
            orow[2 * i + 1] = a * s + b * c;
        }
    }
    out
}
