//! Forward and backward passes for the few layers the mask generator uses.
//! Tensors are flat `C x H x W` row-major slices.

/// Same-padded, stride-1 convolution with an odd square kernel.
pub(crate) fn conv2d(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(weight.len(), c_out * c_in * k * k);
    let pad = k / 2;
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, w);
                    let wv = weight[((o * c_in + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: accumulates into `dweight` and `dbias`, and
/// returns the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    c_out: usize,
    k: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let pad = k / 2;
    let plane = h * w;
    let mut dinput = want_input.then(|| vec![0.0; c_in * plane]);
    for o in 0..c_out {
        let g = &dout[o * plane..(o + 1) * plane];
        dbias[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, w);
                    let widx = ((o * c_in + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let gs = &g[y * w + x0..y * w + x1];
                        let lo = sy * w + x0 + kx - pad;
                        let s = &src[lo..lo + (x1 - x0)];
                        for (gv, sv) in gs.iter().zip(s) {
                            acc += gv * sv;
                        }
                        if let Some(din) = dinput.as_mut() {
                            let d = &mut din[i * plane + lo..i * plane + lo + (x1 - x0)];
                            for (dv, gv) in d.iter_mut().zip(gs) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
    dinput
}

/// Output rows `y` for which `y + tap - pad` lands inside `[0, n)`.
fn valid_range(tap: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (n + pad).saturating_sub(tap).min(n);
    (lo, hi.max(lo))
}

/// 2x2 average pooling with floor semantics for odd sizes.
pub(crate) fn avg_pool2(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let base = ch * h * w;
                let s = input[base + 2 * y * w + 2 * x]
                    + input[base + 2 * y * w + 2 * x + 1]
                    + input[base + (2 * y + 1) * w + 2 * x]
                    + input[base + (2 * y + 1) * w + 2 * x + 1];
                out[(ch * ho + y) * wo + x] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut din = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * dout[(ch * ho + y) * wo + x];
                let base = ch * h * w;
                din[base + 2 * y * w + 2 * x] += g;
                din[base + 2 * y * w + 2 * x + 1] += g;
                din[base + (2 * y + 1) * w + 2 * x] += g;
                din[base + (2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
    din
}

/// Sample positions of a half-pixel-centred bilinear resize from `n_in` to `n_out`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_resize(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let ty = taps(h, ho);
    let tx = taps(w, wo);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(ch * ho + y) * wo + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_resize_backward(
    dout: &[f64],
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let ty = taps(h, ho);
    let tx = taps(w, wo);
    let mut din = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut din[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dout[(ch * ho + y) * wo + x];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    din
}
