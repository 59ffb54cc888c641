//! Dense kernels shared by the forward and backward passes.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are sized for the stated dimensions and strides
    // (checked above in debug builds), and `c` does not alias `a` or `b`.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub channels: usize,
    pub length: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_length: usize,
}

impl Conv1dGeom {
    pub fn new(channels: usize, length: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let padded = length + 2 * pad;
        if stride == 0 || kernel == 0 || padded < kernel {
            return None;
        }
        Some(Conv1dGeom {
            channels,
            length,
            kernel,
            stride,
            pad,
            out_length: (padded - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel
    }
}

/// Unfold `x` (`channels × length`) into `(channels·kernel) × out_length`
/// columns with zero padding.
pub(crate) fn im2col_1d(x: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let lout = g.out_length;
    let mut cols = vec![0.0; g.rows() * lout];
    for c in 0..g.channels {
        let xc = &x[c * g.length..(c + 1) * g.length];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * lout..(c * g.kernel + k + 1) * lout];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.length {
                    *slot = xc[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_1d`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im_1d(cols: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let lout = g.out_length;
    let mut x = vec![0.0; g.channels * g.length];
    for c in 0..g.channels {
        let xc = &mut x[c * g.length..(c + 1) * g.length];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * lout..(c * g.kernel + k + 1) * lout];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.length {
                    xc[pos as usize] += v;
                }
            }
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if stride == 0 || kernel_h == 0 || kernel_w == 0 || ph < kernel_h || pw < kernel_w {
            return None;
        }
        Some(Conv2dGeom {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_height: (ph - kernel_h) / stride + 1,
            out_width: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input coordinate hit by output `o` and kernel tap `k` along one axis.
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col_2d(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.rows() * p];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let r = (c * g.kernel_h + i) * g.kernel_w + j;
                let row = &mut cols[r * p..(r + 1) * p];
                for oh in 0..g.out_height {
                    let Some(h) = g.source(oh, i, g.height) else {
                        continue;
                    };
                    for ow in 0..g.out_width {
                        if let Some(w) = g.source(ow, j, g.width) {
                            row[oh * g.out_width + ow] = xc[h * g.width + w];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_2d(cols: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let p = g.positions();
    let plane = g.height * g.width;
    let mut x = vec![0.0; g.channels * plane];
    for c in 0..g.channels {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let r = (c * g.kernel_h + i) * g.kernel_w + j;
                let row = &cols[r * p..(r + 1) * p];
                for oh in 0..g.out_height {
                    let Some(h) = g.source(oh, i, g.height) else {
                        continue;
                    };
                    for ow in 0..g.out_width {
                        if let Some(w) = g.source(ow, j, g.width) {
                            xc[h * g.width + w] += row[oh * g.out_width + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) struct SoftmaxXent {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_target: Vec<f64>,
}

/// Soft-target cross-entropy and both partial gradients. With `a` the argmax
/// and `r = Σ_{k≠a} exp(l_k - l_a)`, `lse - l_k = (l_a - l_k) + ln(1 + r)` and
/// `1 - softmax_a = r / (1 + r)`, so no step subtracts nearly equal numbers.
pub(crate) fn softmax_xent(logits: &[f64], target: &[f64]) -> SoftmaxXent {
    let mut a = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[a] {
            a = k;
        }
    }
    let m = logits[a];
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let r: f64 = e.iter().enumerate().filter(|&(k, _)| k != a).map(|(_, v)| v).sum();
    let log_norm = r.ln_1p();
    let mass: f64 = target.iter().sum();
    let d_target: Vec<f64> = logits.iter().map(|l| (m - l) + log_norm).collect();
    let loss = target.iter().zip(&d_target).map(|(t, d)| t * d).sum();
    let d_logits = (0..logits.len())
        .map(|k| {
            if k == a {
                (mass - target[k]) - mass * r / (1.0 + r)
            } else {
                mass * e[k] / (1.0 + r) - target[k]
            }
        })
        .collect();
    SoftmaxXent {
        loss,
        d_logits,
        d_target,
    }
}
