//! Shared test oracles, independent of the library's compute paths.

/// Direct 6-nested-loop cross-correlation:
/// y[o,oh,ow] = b[o] + sum_{c,i,j} x[c, oh*sh-ph+i, ow*sw-pw+j] * w[o,c,i,j]
#[allow(dead_code, clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (c_in, ih, iw): (usize, usize, usize),
    w: &[f64],
    out_ch: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let oh = (ih + 2 * ph - kh) / sh + 1;
    let ow = (iw + 2 * pw - kw) / sw + 1;
    let mut y = vec![0.0; out_ch * oh * ow];
    for o in 0..out_ch {
        for yy in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for i in 0..kh {
                        for j in 0..kw {
                            let src_y = (yy * sh + i) as isize - ph as isize;
                            let src_x = (xx * sw + j) as isize - pw as isize;
                            if src_y >= 0
                                && src_y < ih as isize
                                && src_x >= 0
                                && src_x < iw as isize
                            {
                                acc += x[(c * ih + src_y as usize) * iw + src_x as usize]
                                    * w[((o * c_in + c) * kh + i) * kw + j];
                            }
                        }
                    }
                }
                y[(o * oh + yy) * ow + xx] = acc;
            }
        }
    }
    (y, oh, ow)
}

/// Direct transposed convolution with weight layout [in,out,kh,kw]:
/// y[o, ih*sh-ph+i, iw*sw-pw+j] += x[c,ih,iw] * w[c,o,i,j]
#[allow(dead_code, clippy::too_many_arguments)]
pub fn naive_conv_transpose2d(
    x: &[f64],
    (c_in, ih, iw): (usize, usize, usize),
    w: &[f64],
    out_ch: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oph, opw): (usize, usize),
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let oh = (ih - 1) * sh + kh + oph - 2 * ph;
    let ow = (iw - 1) * sw + kw + opw - 2 * pw;
    let mut y = vec![0.0; out_ch * oh * ow];
    for (o, row) in y.chunks_exact_mut(oh * ow).enumerate() {
        row.fill(bias[o]);
    }
    for c in 0..c_in {
        for yy in 0..ih {
            for xx in 0..iw {
                let v = x[(c * ih + yy) * iw + xx];
                for o in 0..out_ch {
                    for i in 0..kh {
                        for j in 0..kw {
                            let dst_y = (yy * sh + i) as isize - ph as isize;
                            let dst_x = (xx * sw + j) as isize - pw as isize;
                            if dst_y >= 0
                                && dst_y < oh as isize
                                && dst_x >= 0
                                && dst_x < ow as isize
                            {
                                y[(o * oh + dst_y as usize) * ow + dst_x as usize]
                                    += v * w[((c * out_ch + o) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, oh, ow)
}
