//! Slice-level forward and backward kernels.
//!
//! Layouts: dense weights are `[in, out]` row-major, images are `[H, W, C]`,
//! conv kernels are `[k, k, C_in, C_out]`. Backward kernels accumulate into
//! their gradient outputs.

use super::LEAKY_SLOPE;

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut sum = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// `y[r] = x[r] · w + b` for each of the `rows` input rows.
pub fn dense_forward(x: &[f32], w: &[f32], b: &[f32], y: &mut [f32], rows: usize) {
    let in_dim = x.len() / rows;
    let out_dim = b.len();
    debug_assert_eq!(w.len(), in_dim * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        yr.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &w[i * out_dim..(i + 1) * out_dim], yr);
            }
        }
    }
}

pub fn dense_backward(
    x: &[f32],
    w: &[f32],
    grad_y: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
    rows: usize,
) {
    let in_dim = x.len() / rows;
    let out_dim = grad_b.len();
    for r in 0..rows {
        let gy = &grad_y[r * out_dim..(r + 1) * out_dim];
        axpy(1.0, gy, grad_b);
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, gy, &mut grad_w[i * out_dim..(i + 1) * out_dim]);
            }
        }
    }
    if let Some(gx) = grad_x {
        for r in 0..rows {
            let gy = &grad_y[r * out_dim..(r + 1) * out_dim];
            for i in 0..in_dim {
                gx[r * in_dim + i] += dot(&w[i * out_dim..(i + 1) * out_dim], gy);
            }
        }
    }
}

/// Geometry of one valid-padding convolution over an `[H, W, C]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h() * self.out_w() * self.out_c
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c * self.out_c
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f32], k: &[f32], b: &[f32], y: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let oc = g.out_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut y[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
            out.copy_from_slice(b);
            for ky in 0..g.kernel {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kernel {
                    let ix = ox * g.stride + kx;
                    let pix = &x[(iy * g.in_w + ix) * g.in_c..(iy * g.in_w + ix + 1) * g.in_c];
                    let kbase = (ky * g.kernel + kx) * g.in_c;
                    for (ci, &v) in pix.iter().enumerate() {
                        if v != 0.0 {
                            axpy(v, &k[(kbase + ci) * oc..(kbase + ci + 1) * oc], out);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    k: &[f32],
    grad_y: &[f32],
    mut grad_x: Option<&mut [f32]>,
    grad_k: &mut [f32],
    grad_b: &mut [f32],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let oc = g.out_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let gy = &grad_y[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
            axpy(1.0, gy, grad_b);
            for ky in 0..g.kernel {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kernel {
                    let ix = ox * g.stride + kx;
                    let pbase = (iy * g.in_w + ix) * g.in_c;
                    let kbase = (ky * g.kernel + kx) * g.in_c;
                    for ci in 0..g.in_c {
                        let krow = (kbase + ci) * oc..(kbase + ci + 1) * oc;
                        let v = x[pbase + ci];
                        if v != 0.0 {
                            axpy(v, gy, &mut grad_k[krow.clone()]);
                        }
                        if let Some(gx) = grad_x.as_deref_mut() {
                            gx[pbase + ci] += dot(&k[krow], gy);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn leaky_relu_forward(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Scales `grad` in place by the activation slope. `activated` may be either
/// the pre- or post-activation values: the sign is the same.
#[inline]
pub fn leaky_relu_backward(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Sum of masked squared errors (not yet divided by the mask count).
pub fn masked_squared_error(pred: &[f32], target: &[f32], mask: &[f32]) -> f64 {
    pred.iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((&p, &t), _)| {
            let d = f64::from(p - t);
            d * d
        })
        .sum()
}

/// Accumulates `d/dpred` of `Σ mask·(pred−target)² / count` into `grad`.
pub fn masked_mse_grad(pred: &[f32], target: &[f32], mask: &[f32], count: f32, grad: &mut [f32]) {
    if count == 0.0 {
        return;
    }
    let scale = 2.0 / count;
    for i in 0..pred.len() {
        if mask[i] != 0.0 {
            grad[i] += scale * (pred[i] - target[i]);
        }
    }
}
