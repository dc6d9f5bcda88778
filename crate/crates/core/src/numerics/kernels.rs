//! Raw forward/backward kernels over `[B, C, spatial...]` buffers.
//!
//! 2-D data is handled as 3-D with a unit depth axis so every kernel has a
//! single code path.

use crate::error::{Error, Result};

/// Spatial extents padded out to three axes (depth, height, width).
pub(crate) fn spatial3(spatial: &[usize]) -> Result<[usize; 3]> {
    match *spatial {
        [h, w] => Ok([1, h, w]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::invalid(
            "conv",
            format!("expected 2 or 3 spatial dims, got {}", spatial.len()),
        )),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        spatial: &[usize],
        kernel_spatial: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if spatial.len() != kernel_spatial.len() {
            return Err(Error::shape(
                "conv",
                "kernel rank",
                spatial.len(),
                kernel_spatial.len(),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv", "stride must be positive"));
        }
        let flat = spatial.len() == 2;
        let input = spatial3(spatial)?;
        let kernel = spatial3(kernel_spatial)?;
        let stride = if flat {
            [1, stride, stride]
        } else {
            [stride; 3]
        };
        let pad = if flat {
            [0, padding, padding]
        } else {
            [padding; 3]
        };
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                let axis = if flat { a - 1 } else { a };
                return Err(Error::shape(
                    "conv",
                    format!("spatial axis {axis} (padded extent smaller than kernel)"),
                    kernel[a],
                    padded,
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded input matrix.
    pub fn cols(&self) -> usize {
        self.cin * self.kernel_len()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Input coordinate along axis `a` for output index `o` and kernel tap `k`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }

    /// Unfolds one image `[cin, in...]` into `col` of shape `[cols, out_len]`.
    pub fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [_, ih, iw] = self.input;
        let in_len = self.in_len();
        let out_len = self.out_len();
        let mut row = 0;
        for c in 0..self.cin {
            let chan = &image[c * in_len..(c + 1) * in_len];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut col[row * out_len..(row + 1) * out_len];
                        for z in 0..od {
                            let sz = self.source(0, z, a);
                            for y in 0..oh {
                                let line = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                let (Some(sz), Some(sy)) = (sz, self.source(1, y, b)) else {
                                    line.fill(0.0);
                                    continue;
                                };
                                let src = &chan[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                for (x, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(2, x, e) {
                                        Some(sx) => src[sx],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: accumulates `col` back into `image`.
    pub fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [_, ih, iw] = self.input;
        let in_len = self.in_len();
        let out_len = self.out_len();
        let mut row = 0;
        for c in 0..self.cin {
            let chan = &mut image[c * in_len..(c + 1) * in_len];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &col[row * out_len..(row + 1) * out_len];
                        for z in 0..od {
                            let Some(sz) = self.source(0, z, a) else {
                                continue;
                            };
                            for y in 0..oh {
                                let Some(sy) = self.source(1, y, b) else {
                                    continue;
                                };
                                let line = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                let dst = &mut chan[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                for (x, v) in line.iter().enumerate() {
                                    if let Some(sx) = self.source(2, x, e) {
                                        dst[sx] += v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass buffers of at least m·k, k·n and m·n elements
    // laid out with the given strides; c is row-major m×n.
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
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (cols, out_len, in_len) = (g.cols(), g.out_len(), g.in_len());
    let mut col = vec![0.0; cols * out_len];
    let mut out = vec![0.0; batch * g.cout * out_len];
    for b in 0..batch {
        g.im2col(
            &input[b * g.cin * in_len..(b + 1) * g.cin * in_len],
            &mut col,
        );
        let dst = &mut out[b * g.cout * out_len..(b + 1) * g.cout * out_len];
        for (o, chunk) in dst.chunks_mut(out_len).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(
            g.cout,
            cols,
            out_len,
            weight,
            (cols as isize, 1),
            &col,
            (out_len as isize, 1),
            1.0,
            dst,
        );
    }
    out
}

/// Gradients of a convolution; any of the outputs may be skipped.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let (cols, out_len, in_len) = (g.cols(), g.out_len(), g.in_len());
    let mut col = vec![0.0; cols * out_len];
    let mut d_input = want[0].then(|| vec![0.0; batch * g.cin * in_len]);
    let mut d_weight = want[1].then(|| vec![0.0; g.cout * cols]);
    let mut d_bias = want[2].then(|| vec![0.0; g.cout]);
    for b in 0..batch {
        let dout = &grad_out[b * g.cout * out_len..(b + 1) * g.cout * out_len];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in dout.chunks(out_len).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            g.im2col(
                &input[b * g.cin * in_len..(b + 1) * g.cin * in_len],
                &mut col,
            );
            // dW += dOut · colᵀ
            gemm(
                g.cout,
                out_len,
                cols,
                dout,
                (out_len as isize, 1),
                &col,
                (1, out_len as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcol = Wᵀ · dOut
            gemm(
                cols,
                g.cout,
                out_len,
                weight,
                (1, cols as isize),
                dout,
                (out_len as isize, 1),
                0.0,
                &mut col,
            );
            g.col2im(&col, &mut dx[b * g.cin * in_len..(b + 1) * g.cin * in_len]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// 2×…×2 max pooling over `planes` independent `[d, h, w]` planes.
/// Returns the pooled values and, per output, the flat source index.
pub(crate) fn maxpool2_forward(
    planes: usize,
    dims: [usize; 3],
    flat: bool,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let [d, h, w] = dims;
    let fd = if flat { 1 } else { 2 };
    let (od, oh, ow) = (d / fd, h / 2, w / 2);
    let in_len = d * h * w;
    let out_len = od * oh * ow;
    let mut out = Vec::with_capacity(planes * out_len);
    let mut arg = Vec::with_capacity(planes * out_len);
    for p in 0..planes {
        let base = p * in_len;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for a in 0..fd {
                        for b in 0..2 {
                            for c in 0..2 {
                                let at = base + ((z * fd + a) * h + y * 2 + b) * w + x * 2 + c;
                                if best_at == usize::MAX || input[at] > best {
                                    best = input[at];
                                    best_at = at;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_at);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(
    planes: usize,
    dims: [usize; 3],
    flat: bool,
    input: &[f64],
) -> Vec<f64> {
    let [d, h, w] = dims;
    let fd = if flat { 1 } else { 2 };
    let (od, oh, ow) = (d * fd, h * 2, w * 2);
    let in_len = d * h * w;
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for p in 0..planes {
        let plane = &input[p * in_len..(p + 1) * in_len];
        for z in 0..od {
            for y in 0..oh {
                let row = &plane[((z / fd) * h + y / 2) * w..((z / fd) * h + y / 2 + 1) * w];
                for x in 0..ow {
                    out.push(row[x / 2]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(
    planes: usize,
    dims: [usize; 3],
    flat: bool,
    grad_out: &[f64],
) -> Vec<f64> {
    let [d, h, w] = dims;
    let fd = if flat { 1 } else { 2 };
    let (od, oh, ow) = (d * fd, h * 2, w * 2);
    let in_len = d * h * w;
    let out_len = od * oh * ow;
    let mut grad = vec![0.0; planes * in_len];
    for p in 0..planes {
        let src = &grad_out[p * out_len..(p + 1) * out_len];
        let dst = &mut grad[p * in_len..(p + 1) * in_len];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    dst[((z / fd) * h + y / 2) * w + x / 2] += src[(z * oh + y) * ow + x];
                }
            }
        }
    }
    grad
}
