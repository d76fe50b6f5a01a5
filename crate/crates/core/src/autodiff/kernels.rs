// Raw loops behind the tape ops. Everything here works on flat slices in
// NCHW order; shape checking happens in the callers.

/// C = alpha * op(A) * op(B) + beta * C with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose lengths cover the strided extents
    // m x k, k x n and m x n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one CHW image into a (C*k*k) x (out_h*out_w) column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into a CHW image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; returns outputs and the flat input index of each maximum.
pub(crate) fn maxpool_forward(x: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let out_len = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for plane in 0..g.planes {
        let base = plane * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        // strict comparison keeps the first maximum on ties
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward(x: &[f64], g: &PoolGeometry) -> Vec<f64> {
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for plane in 0..g.planes {
        let base = plane * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    acc += x[row..row + g.kernel].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(dy: &[f64], g: &PoolGeometry, dx: &mut [f64]) {
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    for plane in 0..g.planes {
        let base = plane * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = dy[(plane * g.out_h + oy) * g.out_w + ox] * norm;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for v in &mut dx[row..row + g.kernel] {
                        *v += d;
                    }
                }
            }
        }
    }
}
