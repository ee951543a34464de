//! Raw convolution and layout kernels shared by the autodiff tape and the
//! serial decode path.
//!
//! Bit-exactness contract: for every output element, the multiply–add chain
//! runs in ascending (channel, ky, kx) order with a single accumulator and no
//! FMA contraction. [`conv2d_at`] evaluates one output position with exactly
//! the same chain, so a full-image convolution and a per-position serial
//! evaluation agree bit-for-bit. The coder's autoregressive decode loop
//! depends on this.

use super::Scalar;

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col: [C,H,W] -> cols[R][P] with R = C*k*k, P = Ho*Wo.
/// Out-of-bounds taps become +0.0.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let p = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * p);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// col2im: scatter-add cols[R][P] back into [C,H,W]. Iteration order is
/// (channel, ky, kx) rows ascending, positions ascending, which fixes the
/// accumulation order for every target element.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation): x [B,C,H,W], w [O,C,k,k] ->
/// y [B,O,Ho,Wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w_ext: usize,
    wgt: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w_ext, k, stride, pad);
    let p = ho * wo;
    let r = c * k * k;
    let mut y = vec![T::ZERO; b * o * p];
    let mut cols = vec![T::ZERO; r * p];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * w_ext..(bi + 1) * c * h * w_ext],
            c,
            h,
            w_ext,
            k,
            stride,
            pad,
            &mut cols,
        );
        let yb = &mut y[bi * o * p..(bi + 1) * o * p];
        for oi in 0..o {
            let wrow = &wgt[oi * r..(oi + 1) * r];
            let yrow = &mut yb[oi * p..(oi + 1) * p];
            for (ri, &a) in wrow.iter().enumerate() {
                let crow = &cols[ri * p..(ri + 1) * p];
                for (yv, cv) in yrow.iter_mut().zip(crow) {
                    *yv += a * *cv;
                }
            }
        }
    }
    y
}

/// One output element of [`conv2d_fwd`], evaluated serially. Bit-identical to
/// the full-image path (same accumulation chain).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_at<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w_ext: usize,
    wgt: &[T],
    oi: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oy: usize,
    ox: usize,
) -> T {
    let r = c * k * k;
    let wrow = &wgt[oi * r..(oi + 1) * r];
    let mut acc = T::ZERO;
    let mut ri = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w_ext..(ci + 1) * h * w_ext];
        for ky in 0..k {
            let iy = (oy * stride + ky) as isize - pad as isize;
            for kx in 0..k {
                let ix = (ox * stride + kx) as isize - pad as isize;
                let v = if iy < 0 || iy >= h as isize || ix < 0 || ix >= w_ext as isize {
                    T::ZERO
                } else {
                    plane[iy as usize * w_ext + ix as usize]
                };
                acc += wrow[ri] * v;
                ri += 1;
            }
        }
    }
    acc
}

/// Gradient of [`conv2d_fwd`] w.r.t. its input; also the forward pass of the
/// transposed convolution. g [B,O,Ho,Wo], w [O,C,k,k] -> dx [B,C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_dx<T: Scalar>(
    g: &[T],
    b: usize,
    o: usize,
    ho: usize,
    wo: usize,
    wgt: &[T],
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w_ext: usize,
) -> Vec<T> {
    debug_assert_eq!(conv_out_extent(h, k, stride, pad), ho);
    debug_assert_eq!(conv_out_extent(w_ext, k, stride, pad), wo);
    let p = ho * wo;
    let r = c * k * k;
    let mut dx = vec![T::ZERO; b * c * h * w_ext];
    let mut colsg = vec![T::ZERO; r * p];
    for bi in 0..b {
        for v in colsg.iter_mut() {
            *v = T::ZERO;
        }
        let gb = &g[bi * o * p..(bi + 1) * o * p];
        for oi in 0..o {
            let grow = &gb[oi * p..(oi + 1) * p];
            let wrow = &wgt[oi * r..(oi + 1) * r];
            for (ri, &a) in wrow.iter().enumerate() {
                let crow = &mut colsg[ri * p..(ri + 1) * p];
                for (cv, gv) in crow.iter_mut().zip(grow) {
                    *cv += a * *gv;
                }
            }
        }
        col2im(
            &colsg,
            c,
            h,
            w_ext,
            k,
            stride,
            pad,
            &mut dx[bi * c * h * w_ext..(bi + 1) * c * h * w_ext],
        );
    }
    dx
}

/// Gradient of [`conv2d_fwd`] w.r.t. the kernel. x [B,C,H,W], g [B,O,Ho,Wo]
/// -> dw [O,C,k,k].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_dw<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w_ext: usize,
    g: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w_ext, k, stride, pad);
    let p = ho * wo;
    let r = c * k * k;
    let mut dw = vec![T::ZERO; o * r];
    let mut cols = vec![T::ZERO; r * p];
    let mut colst = vec![T::ZERO; p * r];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * w_ext..(bi + 1) * c * h * w_ext],
            c,
            h,
            w_ext,
            k,
            stride,
            pad,
            &mut cols,
        );
        // transpose so the inner axpy runs over contiguous kernel taps
        for ri in 0..r {
            for pi in 0..p {
                colst[pi * r + ri] = cols[ri * p + pi];
            }
        }
        let gb = &g[bi * o * p..(bi + 1) * o * p];
        for oi in 0..o {
            let grow = &gb[oi * p..(oi + 1) * p];
            let dwrow = &mut dw[oi * r..(oi + 1) * r];
            for (pi, &gv) in grow.iter().enumerate() {
                let crow = &colst[pi * r..(pi + 1) * r];
                for (dv, cv) in dwrow.iter_mut().zip(crow) {
                    *dv += gv * *cv;
                }
            }
        }
    }
    dw
}

/// Space-to-depth: [B,C,H,W] -> [B,C*r*r,H/r,W/r]. Block (dy,dx) of pixel
/// groups becomes channel offset (dy*r+dx)*C + c.
pub fn space_to_depth<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    debug_assert!(h % r == 0 && w % r == 0);
    let ho = h / r;
    let wo = w / r;
    let co = c * r * r;
    let mut y = vec![T::ZERO; b * co * ho * wo];
    for bi in 0..b {
        for dy in 0..r {
            for dx in 0..r {
                for ci in 0..c {
                    let oc = (dy * r + dx) * c + ci;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            y[((bi * co + oc) * ho + oy) * wo + ox] =
                                x[((bi * c + ci) * h + oy * r + dy) * w + ox * r + dx];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(
    y: &[T],
    b: usize,
    co: usize,
    ho: usize,
    wo: usize,
    r: usize,
) -> Vec<T> {
    debug_assert!(co % (r * r) == 0);
    let c = co / (r * r);
    let h = ho * r;
    let w = wo * r;
    let mut x = vec![T::ZERO; b * c * h * w];
    for bi in 0..b {
        for dy in 0..r {
            for dx in 0..r {
                for ci in 0..c {
                    let oc = (dy * r + dx) * c + ci;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            x[((bi * c + ci) * h + oy * r + dy) * w + ox * r + dx] =
                                y[((bi * co + oc) * ho + oy) * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
