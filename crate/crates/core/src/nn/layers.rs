//! Kernels for the layer catalog. All functions operate on whole batches in
//! row-major `[batch, channels, height, width]` or `[batch, features]` layout.

/// Spatial geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Valid output range along one axis for kernel offset `k`:
    /// output index `o` reads input index `o + k - pad`.
    fn span(&self, k: usize, len: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad();
        let lo = (-shift).max(0) as usize;
        let hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Zero-padded, stride-1 "same" convolution.
pub(crate) fn conv_forward(g: ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let out_plane = &mut out[(b * g.out_ch + o) * plane..][..plane];
            out_plane.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..g.in_ch {
                let in_plane = &input[(b * g.in_ch + i) * plane..][..plane];
                for ky in 0..k {
                    let (y0, y1, sy) = g.span(ky, h);
                    for kx in 0..k {
                        let (x0, x1, sx) = g.span(kx, w);
                        let wv = weight[((o * g.in_ch + i) * k + ky) * k + kx];
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + sy) as usize;
                            let src = &in_plane[iy * w + (x0 as isize + sx) as usize..][..x1 - x0];
                            let dst = &mut out_plane[y * w + x0..][..x1 - x0];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and optionally the input gradient.
pub(crate) fn conv_backward(
    g: ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let go_plane = &grad_out[(b * g.out_ch + o) * plane..][..plane];
            grad_bias[o] += go_plane.iter().sum::<f64>();
            for i in 0..g.in_ch {
                let in_off = (b * g.in_ch + i) * plane;
                let in_plane = &input[in_off..][..plane];
                for ky in 0..k {
                    let (y0, y1, sy) = g.span(ky, h);
                    for kx in 0..k {
                        let (x0, x1, sx) = g.span(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((o * g.in_ch + i) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + sy) as usize;
                            let src_off = iy * w + (x0 as isize + sx) as usize;
                            let src = &in_plane[src_off..][..x1 - x0];
                            let go = &go_plane[y * w + x0..][..x1 - x0];
                            acc += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let dst = &mut gi[in_off + src_off..][..x1 - x0];
                                for (d, s) in dst.iter_mut().zip(go) {
                                    *d += wv * s;
                                }
                            }
                        }
                        grad_weight[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling; records the flat input index of each maximum.
pub(crate) fn maxpool_forward(
    planes: usize,
    height: usize,
    width: usize,
    size: usize,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / size, width / size);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * size * width + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * width + ox * size + dx;
                        // First maximum wins on ties.
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn dense_forward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    for b in 0..batch {
        let x = &input[b * inputs..][..inputs];
        for o in 0..outputs {
            let row = &weight[o * inputs..][..inputs];
            out[b * outputs + o] = bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    for b in 0..batch {
        let x = &input[b * inputs..][..inputs];
        for o in 0..outputs {
            let go = grad_out[b * outputs + o];
            grad_bias[o] += go;
            if go == 0.0 {
                continue;
            }
            let gw = &mut grad_weight[o * inputs..][..inputs];
            for (g, v) in gw.iter_mut().zip(x) {
                *g += go * v;
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                let row = &weight[o * inputs..][..inputs];
                for (g, w) in gi[b * inputs..][..inputs].iter_mut().zip(row) {
                    *g += go * w;
                }
            }
        }
    }
}
