//! Raw numeric kernels behind the tape operations.
//!
//! Convolution and transposed convolution are lowered to im2col/col2im plus a
//! single accumulating matmul. Loop order keeps the innermost loop running
//! over contiguous slices so the compiler can vectorize it; the summation
//! order is fixed, which keeps results bit-reproducible run to run.

/// Dot product with a fixed 8-lane accumulation order; vectorizes while
/// staying bit-reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ai = &a[i * 8..i * 8 + 8];
        let bi = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] = ai[l].mul_add(bi[l], acc[l]);
        }
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// c[m,n] += a[m,k] * b[k,n]
///
/// Two regimes: for wide outputs the inner loop runs along contiguous rows
/// of b (axpy form); for narrow outputs, where that loop would be too short
/// to vectorize, b is transposed once and each c entry becomes a long dot
/// product instead.
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n < 32 && k >= 32 {
        let b_t = transposed(b, k, n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv += dot(a_row, &b_t[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = a_ip.mul_add(bv, *cv);
            }
        }
    }
}

/// c[m,n] += a[m,k] * bt[n,k]^T: both operands row-contiguous, every
/// output entry one long dot product. Preferred when n is small.
pub(crate) fn mm_nt_acc(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &bt[j * k..(j + 1) * k]);
        }
    }
}

/// out[n,m] = in[m,n]
pub(crate) fn transpose_into(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(src.len(), m * n);
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..m {
        let row = &src[i * n..(i + 1) * n];
        for (j, &v) in row.iter().enumerate() {
            dst[j * m + i] = v;
        }
    }
}

pub(crate) fn transposed(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut dst = vec![0.0; m * n];
    transpose_into(src, &mut dst, m, n);
    dst
}

/// Effective weight-normalized kernel g[o] * v[o] / ||v[o]|| per axis-0
/// slice. Returns the offending slice index when a direction has zero norm.
pub(crate) fn weight_norm_forward(
    v: &[f64],
    g: &[f64],
    slices: usize,
) -> std::result::Result<Vec<f64>, usize> {
    let len = v.len() / slices;
    let mut out = vec![0.0; v.len()];
    for o in 0..slices {
        let vs = &v[o * len..(o + 1) * len];
        let norm = vs.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(o);
        }
        let scale = g[o] / norm;
        for (dst, &src) in out[o * len..(o + 1) * len].iter_mut().zip(vs) {
            *dst = scale * src;
        }
    }
    Ok(out)
}

/// Output length of a strided convolution along one axis.
pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub(crate) fn convt_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    let grown = (input - 1) * stride + kernel + out_pad;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Gathers kernel windows of `img` (channels, ih, iw) into a matrix of shape
/// [channels*kh*kw, ph*pw], where position (oh, ow) reads
/// img[c, oh*sh - ph_pad + i, ow*sw - pw_pad + j] (zero outside the image).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    img: &[f64],
    channels: usize,
    ih: usize,
    iw: usize,
    ph: usize,
    pw: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let positions = ph * pw;
    let mut col = vec![0.0; channels * kh * kw * positions];
    for c in 0..channels {
        let img_c = &img[c * ih * iw..(c + 1) * ih * iw];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * positions
                    ..((c * kh + i) * kw + j + 1) * positions];
                for oh in 0..ph {
                    let y = (oh * sh + i) as isize - pad.0 as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let img_row = &img_c[y as usize * iw..(y as usize + 1) * iw];
                    let out_row = &mut row[oh * pw..(oh + 1) * pw];
                    for (ow, slot) in out_row.iter_mut().enumerate() {
                        let x = (ow * sw + j) as isize - pad.1 as isize;
                        if x >= 0 && x < iw as isize {
                            *slot = img_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Inverse of [`im2col`]: scatter-adds matrix entries back onto the image.
/// The production paths use the position-major variant; this one anchors the
/// adjoint test.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    col: &[f64],
    img: &mut [f64],
    channels: usize,
    ih: usize,
    iw: usize,
    ph: usize,
    pw: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let positions = ph * pw;
    for c in 0..channels {
        let img_c = &mut img[c * ih * iw..(c + 1) * ih * iw];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * positions
                    ..((c * kh + i) * kw + j + 1) * positions];
                for oh in 0..ph {
                    let y = (oh * sh + i) as isize - pad.0 as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let img_row = &mut img_c[y as usize * iw..(y as usize + 1) * iw];
                    let in_row = &row[oh * pw..(oh + 1) * pw];
                    for (ow, &v) in in_row.iter().enumerate() {
                        let x = (ow * sw + j) as isize - pad.1 as isize;
                        if x >= 0 && x < iw as isize {
                            img_row[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Position-major variant of [`im2col`]: returns [ph*pw, channels*kh*kw].
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_t(
    img: &[f64],
    channels: usize,
    ih: usize,
    iw: usize,
    ph: usize,
    pw: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let ckk = channels * kh * kw;
    let mut col = vec![0.0; ph * pw * ckk];
    for oh in 0..ph {
        for ow in 0..pw {
            let row = &mut col[(oh * pw + ow) * ckk..(oh * pw + ow + 1) * ckk];
            for c in 0..channels {
                let img_c = &img[c * ih * iw..(c + 1) * ih * iw];
                for i in 0..kh {
                    let y = (oh * sh + i) as isize - pad.0 as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let img_row = &img_c[y as usize * iw..(y as usize + 1) * iw];
                    let out = &mut row[(c * kh + i) * kw..(c * kh + i + 1) * kw];
                    for (j, slot) in out.iter_mut().enumerate() {
                        let x = (ow * sw + j) as isize - pad.1 as isize;
                        if x >= 0 && x < iw as isize {
                            *slot = img_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a position-major column matrix back onto the image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_t_acc(
    col_t: &[f64],
    img: &mut [f64],
    channels: usize,
    ih: usize,
    iw: usize,
    ph: usize,
    pw: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let ckk = channels * kh * kw;
    for oh in 0..ph {
        for ow in 0..pw {
            let row = &col_t[(oh * pw + ow) * ckk..(oh * pw + ow + 1) * ckk];
            for c in 0..channels {
                let img_c = &mut img[c * ih * iw..(c + 1) * ih * iw];
                for i in 0..kh {
                    let y = (oh * sh + i) as isize - pad.0 as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let img_row = &mut img_c[y as usize * iw..(y as usize + 1) * iw];
                    let vals = &row[(c * kh + i) * kw..(c * kh + i + 1) * kw];
                    for (j, &v) in vals.iter().enumerate() {
                        let x = (ow * sw + j) as isize - pad.1 as isize;
                        if x >= 0 && x < iw as isize {
                            img_row[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// y[o, oh, ow] = bias[o] + sum_{c,i,j} x[c, oh*sh-ph+i, ow*sw-pw+j] * w[o,c,i,j]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    in_ch: usize,
    ih: usize,
    iw: usize,
    w: &[f64],
    out_ch: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    bias: &[f64],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ckk = in_ch * kernel.0 * kernel.1;
    let positions = oh * ow;
    let mut y = vec![0.0; out_ch * positions];
    for (o, row) in y.chunks_exact_mut(positions).enumerate() {
        row.fill(bias[o]);
    }
    if positions < 32 && ckk >= 32 {
        let col_t = im2col_t(x, in_ch, ih, iw, oh, ow, kernel, stride, pad);
        mm_nt_acc(w, &col_t, &mut y, out_ch, ckk, positions);
    } else {
        let col = im2col(x, in_ch, ih, iw, oh, ow, kernel, stride, pad);
        mm_nn_acc(w, &col, &mut y, out_ch, ckk, positions);
    }
    y
}

/// Transposed convolution with weight layout [in_ch, out_ch, kh, kw]:
/// y[o, ih*sh-ph+i, iw*sw-pw+j] += x[c, ih, iw] * w[c, o, i, j]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    in_ch: usize,
    ih: usize,
    iw: usize,
    w: &[f64],
    out_ch: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    bias: &[f64],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let okk = out_ch * kernel.0 * kernel.1;
    let positions = ih * iw;
    // z[(o,i,j), p] = sum_c w[c,(o,i,j)] * x[c,p], built position-major so
    // only the small activation matrix gets rearranged, not the weight
    let x_t = transposed(x, in_ch, positions);
    let mut z_t = vec![0.0; positions * okk];
    mm_nn_acc(&x_t, w, &mut z_t, positions, in_ch, okk);
    let mut y = vec![0.0; out_ch * oh * ow];
    col2im_t_acc(&z_t, &mut y, out_ch, oh, ow, ih, iw, kernel, stride, pad);
    for (o, row) in y.chunks_exact_mut(oh * ow).enumerate() {
        for v in row {
            *v += bias[o];
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn mm_matches_naive() {
        let mut rng = Rng::new(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (7, 2, 9), (5, 8, 1)] {
            let a = rng.normal_vec(m * k, 1.0);
            let b = rng.normal_vec(k * n, 1.0);
            let mut c = vec![0.0; m * n];
            mm_nn_acc(&a, &b, &mut c, m, k, n);
            let want = naive_matmul(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(2);
        let a = rng.normal_vec(12, 1.0);
        let t = transposed(&a, 3, 4);
        let back = transposed(&t, 4, 3);
        assert_eq!(a, back);
    }

    #[test]
    fn conv_shapes() {
        assert_eq!(conv_out_len(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_len(8, 4, 2, 1), Some(4));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(convt_out_len(4, 4, 2, 1, 0), Some(8));
        assert_eq!(convt_out_len(1, 3, 1, 0, 0), Some(3));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), z> == <x, col2im(z)> for random x, z.
        let mut rng = Rng::new(3);
        let (c, ih, iw) = (2, 5, 4);
        let kernel = (3, 2);
        let stride = (2, 1);
        let pad = (1, 0);
        let oh = conv_out_len(ih, kernel.0, stride.0, pad.0).unwrap();
        let ow = conv_out_len(iw, kernel.1, stride.1, pad.1).unwrap();
        let x = rng.normal_vec(c * ih * iw, 1.0);
        let z = rng.normal_vec(c * kernel.0 * kernel.1 * oh * ow, 1.0);
        let col = im2col(&x, c, ih, iw, oh, ow, kernel, stride, pad);
        let lhs: f64 = col.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * ih * iw];
        col2im_acc(&z, &mut back, c, ih, iw, oh, ow, kernel, stride, pad);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_identity_kernel() {
        // 3x3 delta kernel with stride 1, pad 1 reproduces the input.
        let mut rng = Rng::new(4);
        let x = rng.normal_vec(16, 1.0);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d_forward(&x, 1, 4, 4, &w, 1, (3, 3), (1, 1), (1, 1), &[0.0], 4, 4);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn transposed_conv_is_conv_input_gradient() {
        // With weights transposed between layouts, conv_transpose(x) equals
        // the dx of a conv that received x as output gradient.
        let mut rng = Rng::new(5);
        let (conv_in, conv_out) = (3, 2);
        let kernel = (4, 4);
        let stride = (2, 2);
        let pad = (1, 1);
        let (ih, iw) = (6, 8);
        let oh = conv_out_len(ih, kernel.0, stride.0, pad.0).unwrap();
        let ow = conv_out_len(iw, kernel.1, stride.1, pad.1).unwrap();
        let w = rng.normal_vec(conv_out * conv_in * 16, 1.0);
        let dy = rng.normal_vec(conv_out * oh * ow, 1.0);
        // input gradient of the conv: dcol = w^T dy, then scatter
        let ckk = conv_in * kernel.0 * kernel.1;
        let positions = oh * ow;
        let dy_t = transposed(&dy, conv_out, positions);
        let mut dcol_t = vec![0.0; positions * ckk];
        mm_nn_acc(&dy_t, &w, &mut dcol_t, positions, conv_out, ckk);
        let dcol = transposed(&dcol_t, positions, ckk);
        let mut dx = vec![0.0; conv_in * ih * iw];
        col2im_acc(&dcol, &mut dx, conv_in, ih, iw, oh, ow, kernel, stride, pad);
        let dx = Some(dx);
        // Same weight array reinterpreted as [in=conv_out, out=conv_in, kh, kw].
        let y = conv_transpose2d_forward(
            &dy,
            conv_out,
            oh,
            ow,
            &w,
            conv_in,
            kernel,
            stride,
            pad,
            &vec![0.0; conv_in],
            ih,
            iw,
        );
        for (a, b) in dx.unwrap().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
