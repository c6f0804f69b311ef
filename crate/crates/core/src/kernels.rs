//! Raw compute kernels behind the tape ops.
//!
//! Kernels take validated inputs (the tape does shape checking) and promise
//! a fixed accumulation order per output element, which keeps results
//! bit-identical across runs regardless of call context.

use crate::scalar::{sum_sorted, Scalar};

// ---- matrix products ----

/// C[m,n] = A[m,k] * B[k,n]. Accumulates over k in ascending order.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T. Both operands walk contiguous rows.
pub fn matmul_abt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[m,n] = A[k,m]^T * B[k,n]. Accumulates over k in ascending order.
pub fn matmul_atb<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Like [`matmul`], but each output element sums its k products in a
/// value-sorted order, so the result is invariant to permutations of the
/// contraction axis. Attention uses this for the weights-times-values
/// product, where the contraction runs over tokens.
pub fn matmul_sorted<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    let mut terms = vec![S::zero(); k];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            for p in 0..k {
                terms[p] = arow[p] * b[p * n + j];
            }
            out[i * n + j] = sum_sorted(&mut terms);
        }
    }
    out
}

pub fn transpose2d<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

// ---- convolution ----

pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = h + 2 * pad;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Unrolls conv input patches into a (cin*kh*kw) x (hout*wout) matrix.
pub fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<S> {
    let mut col = vec![S::zero(); cin * kh * kw * hout * wout];
    let ow = hout * wout;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[(ci * kh * kw + ky * kw + kx) * ow..][..ow];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * wout + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Forward conv: X[cin,h,w] * W[cout,cin,kh,kw] -> [cout,hout,wout].
pub fn conv2d<S: Scalar>(
    x: &[S],
    wgt: &[S],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<S> {
    let col = im2col(x, cin, h, w, kh, kw, stride, pad, hout, wout);
    matmul(wgt, &col, cout, cin * kh * kw, hout * wout)
}

/// Weight gradient: dW = dOut[cout, hw'] * col[cinkk, hw']^T.
pub fn conv2d_grad_w<S: Scalar>(
    x: &[S],
    dout: &[S],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<S> {
    let col = im2col(x, cin, h, w, kh, kw, stride, pad, hout, wout);
    matmul_abt(dout, &col, cout, hout * wout, cin * kh * kw)
}

/// Input gradient: fold dcol = W^T * dOut back onto the input grid.
pub fn conv2d_grad_x<S: Scalar>(
    wgt: &[S],
    dout: &[S],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<S> {
    let dcol = matmul_atb(wgt, dout, cout, cin * kh * kw, hout * wout);
    let ow = hout * wout;
    let mut dx = vec![S::zero(); cin * h * w];
    for ci in 0..cin {
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &dcol[(ci * kh * kw + ky * kw + kx) * ow..][..ow];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dplane[base + ix as usize] += row[oy * wout + ox];
                    }
                }
            }
        }
    }
    dx
}

// ---- pooling / resampling ----

/// Max pool with square window `k` and stride `k`. Returns (values, argmax
/// flat indices into the input plane). Ties pick the first element in
/// row-major window order.
pub fn maxpool<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<S>, Vec<u32>) {
    debug_assert!(h % k == 0 && w % k == 0);
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![S::zero(); c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = plane[oy * k * w + ox * k];
                let mut best_idx = (oy * k * w + ox * k) as u32;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (oy * k + dy) * w + ox * k + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out[ci * ho * wo + oy * wo + ox] = best;
                arg[ci * ho * wo + oy * wo + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2x<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![S::zero(); c * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for y in 0..ho {
            let sy = y / 2;
            for x in 0..wo {
                oplane[y * wo + x] = plane[sy * w + x / 2];
            }
        }
    }
    out
}

// ---- row-wise softmax family ----

/// Row-wise softmax. The max subtraction makes it shift invariant; the
/// denominator uses sorted summation so the row result is a function of the
/// multiset of entries only.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    let mut exps = vec![S::zero(); cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        for (e, &v) in exps.iter_mut().zip(row.iter()) {
            *e = (v - mx).exp();
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        orow.copy_from_slice(&exps);
        let denom = sum_sorted(&mut exps);
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

/// Row-wise log-softmax: x - max - ln(sum exp(x - max)).
pub fn log_softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    let mut exps = vec![S::zero(); cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        for (e, &v) in exps.iter_mut().zip(row.iter()) {
            *e = (v - mx).exp();
        }
        let lse = sum_sorted(&mut exps).ln();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = v - mx - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracles below are deliberately written as direct transcriptions of the
    // definitions, with different loop structure than the kernels.

    fn oracle_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    fn oracle_conv(
        x: &[f64],
        wgt: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_out_extent(h, k, stride, pad).unwrap();
        let wo = conv_out_extent(w, k, stride, pad).unwrap();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[ci * h * w + iy as usize * w + ix as usize]
                                        * wgt[co * cin * k * k + ci * k * k + ky * k + kx];
                                }
                            }
                        }
                    }
                    out[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn fill(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "kernel-test");
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(c, vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = fill(1, 16);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert_eq!(matmul(&a, &eye, 4, 4, 4), a);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let (m, k, n) = (64, 64, 64);
        let a = fill(2, m * k);
        let b = fill(3, k * n);
        let got = matmul(&a, &b, m, k, n);
        let want = oracle_matmul(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_variants_match_explicit_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a = fill(4, m * k);
        let bt = fill(5, n * k); // B stored as [n,k]
        let b = transpose2d(&bt, n, k);
        assert_eq!(matmul_abt(&a, &bt, m, k, n), matmul(&a, &b, m, k, n));

        let at = fill(6, k * m); // A stored as [k,m]
        let a2 = transpose2d(&at, k, m);
        let b2 = fill(7, k * n);
        let got = matmul_atb(&at, &b2, k, m, n);
        let want = oracle_matmul(&a2, &b2, m, k, n);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_sorted_is_contraction_permutation_invariant() {
        let (m, k, n) = (3, 17, 4);
        let a = fill(8, m * k);
        let b = fill(9, k * n);
        let base = matmul_sorted(&a, &b, m, k, n);
        // Permute the contraction axis of both operands consistently.
        let perm: Vec<usize> = (0..k).map(|i| (i * 5 + 3) % k).collect();
        let mut ap = vec![0.0; m * k];
        let mut bp = vec![0.0; k * n];
        for i in 0..m {
            for (pnew, &pold) in perm.iter().enumerate() {
                ap[i * k + pnew] = a[i * k + pold];
            }
        }
        for (pnew, &pold) in perm.iter().enumerate() {
            bp[pnew * n..(pnew + 1) * n].copy_from_slice(&b[pold * n..(pold + 1) * n]);
        }
        let permuted = matmul_sorted(&ap, &bp, m, k, n);
        for (x, y) in base.iter().zip(permuted.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // And it agrees with the plain product to rounding.
        let plain = matmul(&a, &b, m, k, n);
        for (x, y) in base.iter().zip(plain.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_centered_delta_is_identity() {
        let x = fill(10, 2 * 6 * 6);
        // 2-channel depthwise-style delta: out_c sums channel c only.
        let mut wgt = vec![0.0; 2 * 2 * 3 * 3];
        wgt[0 * 18 + 0 * 9 + 4] = 1.0; // out 0 <- in 0, center tap
        wgt[1 * 18 + 1 * 9 + 4] = 1.0; // out 1 <- in 1, center tap
        let y = conv2d(&x, &wgt, 2, 6, 6, 2, 3, 3, 1, 1, 6, 6);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        for &(cin, h, w, cout, k, stride, pad) in &[
            (3usize, 8usize, 8usize, 5usize, 3usize, 1usize, 1usize),
            (2, 8, 6, 4, 3, 2, 1),
            (1, 5, 5, 2, 1, 1, 0),
            (4, 4, 4, 3, 3, 1, 0),
        ] {
            let x = fill(20 + k as u64, cin * h * w);
            let wgt = fill(30 + k as u64, cout * cin * k * k);
            let ho = conv_out_extent(h, k, stride, pad).unwrap();
            let wo = conv_out_extent(w, k, stride, pad).unwrap();
            let got = conv2d(&x, &wgt, cin, h, w, cout, k, k, stride, pad, ho, wo);
            let want = oracle_conv(&x, &wgt, cin, h, w, cout, k, stride, pad);
            for (g, v) in got.iter().zip(want.iter()) {
                assert!((g - v).abs() < 1e-10, "cfg {cin},{h},{w},{cout},{k},{stride},{pad}");
            }
        }
    }

    #[test]
    fn conv_stride_two_halves_even_extents() {
        let x = fill(40, 1 * 8 * 8);
        let wgt = fill(41, 1 * 1 * 3 * 3);
        let ho = conv_out_extent(8, 3, 2, 1).unwrap();
        assert_eq!(ho, 4);
        let y = conv2d(&x, &wgt, 1, 8, 8, 1, 3, 3, 2, 1, 4, 4);
        assert_eq!(y.len(), 16);
    }

    #[test]
    fn maxpool_picks_first_tie_row_major() {
        // 2x2 window of all equal values: argmax must be the first element.
        let x = vec![7.0f64, 7.0, 7.0, 7.0];
        let (v, a) = maxpool(&x, 1, 2, 2, 2);
        assert_eq!(v, vec![7.0]);
        assert_eq!(a, vec![0]);
    }

    #[test]
    fn maxpool_values() {
        let x = vec![
            1.0, 2.0, 5.0, 6.0, //
            3.0, 4.0, 8.0, 7.0, //
            0.0, -1.0, 1.0, 1.0, //
            -2.0, 9.0, 1.0, 1.0,
        ];
        let (v, a) = maxpool(&x, 1, 4, 4, 2);
        assert_eq!(v, vec![4.0, 8.0, 9.0, 1.0]);
        assert_eq!(a, vec![5, 6, 13, 10]);
    }

    #[test]
    fn upsample_repeats_blocks() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = upsample2x(&x, 1, 2, 2);
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn softmax_hand_value_and_shift_invariance() {
        // softmax(0, ln 3) = (0.25, 0.75)
        let y = softmax_rows(&[0.0, 3.0f64.ln()], 1, 2);
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);

        let x = fill(50, 12);
        let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        let a = softmax_rows(&x, 3, 4);
        let b = softmax_rows(&shifted, 3, 4);
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut x = fill(51, 40);
        for v in x.iter_mut() {
            *v *= 1e4;
        }
        let y = softmax_rows(&x, 4, 10);
        for r in 0..4 {
            let s: f64 = y[r * 10..(r + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = fill(52, 20);
        let a = log_softmax_rows(&x, 4, 5);
        let b = softmax_rows(&x, 4, 5);
        for (l, p) in a.iter().zip(b.iter()) {
            assert!((l - p.ln()).abs() < 1e-12);
        }
    }
}
