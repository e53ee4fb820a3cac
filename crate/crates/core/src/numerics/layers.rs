use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (rows, in_dim) = match input.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        s => return Err(Error::shape(format!("dense input must be rank 1 or 2, got {s:?}"))),
    };
    let [w_in, w_out] = weights.shape() else {
        return Err(Error::shape(format!(
            "dense weights must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    if *w_in != in_dim {
        return Err(Error::shape(format!(
            "input width {in_dim} does not match weight rows {w_in}"
        )));
    }
    if bias.len() != *w_out {
        return Err(Error::shape(format!(
            "bias length {} does not match weight columns {w_out}",
            bias.len()
        )));
    }
    Ok((rows, in_dim, *w_out))
}

/// `input · weights + bias` for a rank-1 vector or a rank-2 batch.
pub fn dense_layer(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, _, out_dim) = dense_dims(input, weights, bias)?;
    let mut out = vec![0.0; rows * out_dim];
    kernels::dense_forward(input.values(), weights.values(), bias.values(), &mut out, rows);
    let shape = if input.rank() == 1 {
        vec![out_dim]
    } else {
        vec![rows, out_dim]
    };
    Tensor::new(shape, out)
}

/// Accumulates gradients of a dense layer into `input`, `weights` and `bias`.
pub fn dense_backward(
    input: &mut Tensor,
    weights: &mut Tensor,
    bias: &mut Tensor,
    grad_output: &[f32],
) -> Result<()> {
    let (rows, _, out_dim) = dense_dims(input, weights, bias)?;
    if grad_output.len() != rows * out_dim {
        return Err(Error::shape("upstream gradient length mismatch"));
    }
    let (w, gw) = weights.values_and_grad_mut();
    let (x, gx) = input.values_and_grad_mut();
    kernels::dense_backward(x, w, grad_output, Some(gx), gw, bias.grad_mut(), rows);
    Ok(())
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid_argument("stride must be positive"));
    }
    let [h, w, c] = input.shape() else {
        return Err(Error::shape(format!(
            "conv input must be [H, W, C], got {:?}",
            input.shape()
        )));
    };
    let [kh, kw, kc, oc] = kernels.shape() else {
        return Err(Error::shape(format!(
            "conv kernels must be [k, k, C_in, C_out], got {:?}",
            kernels.shape()
        )));
    };
    if kh != kw {
        return Err(Error::shape("only square kernels are supported"));
    }
    if kc != c {
        return Err(Error::shape(format!("kernel expects {kc} channels, input has {c}")));
    }
    if *kh > *h || *kw > *w || *kh == 0 {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    if bias.len() != *oc {
        return Err(Error::shape("conv bias length must equal output channels"));
    }
    Ok(ConvGeometry {
        in_h: *h,
        in_w: *w,
        in_c: *c,
        out_c: *oc,
        kernel: *kh,
        stride,
    })
}

/// Output spatial extent of a valid convolution.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel >= 1 && kernel <= input && stride >= 1).then(|| (input - kernel) / stride + 1)
}

/// Valid-padding cross-correlation of an `[H, W, C]` image.
pub fn conv2d_layer(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, stride)?;
    let mut out = vec![0.0; g.output_len()];
    kernels::conv2d_forward(&g, input.values(), kernels.values(), bias.values(), &mut out);
    Tensor::new(vec![g.out_h(), g.out_w(), g.out_c], out)
}

pub fn conv2d_backward(
    input: &mut Tensor,
    kernels: &mut Tensor,
    bias: &mut Tensor,
    stride: usize,
    grad_output: &[f32],
) -> Result<()> {
    let g = conv_geometry(input, kernels, bias, stride)?;
    if grad_output.len() != g.output_len() {
        return Err(Error::shape("upstream gradient length mismatch"));
    }
    let (k, gk) = kernels.values_and_grad_mut();
    let (x, gx) = input.values_and_grad_mut();
    kernels::conv2d_backward(&g, x, k, grad_output, Some(gx), gk, bias.grad_mut());
    Ok(())
}

/// Elementwise `max(x, 0.2x)`.
pub fn leaky_relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    kernels::leaky_relu_forward(out.values_mut());
    out
}

/// Accumulates `grad_output · slope(input)` into `input`'s gradient. The
/// slope at exactly zero is 1.
pub fn leaky_relu_backward(input: &mut Tensor, grad_output: &[f32]) -> Result<()> {
    if grad_output.len() != input.len() {
        return Err(Error::shape("upstream gradient length mismatch"));
    }
    let mut local = grad_output.to_vec();
    kernels::leaky_relu_backward(input.values(), &mut local);
    kernels::axpy(1.0, &local, input.grad_mut());
    Ok(())
}

fn check_loss_shapes(prediction: &Tensor, target: &Tensor, mask: &Tensor) -> Result<()> {
    if prediction.shape() != target.shape() || prediction.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "loss operands disagree: {:?} / {:?} / {:?}",
            prediction.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn mask_count(mask: &Tensor) -> usize {
    mask.values().iter().filter(|&&m| m != 0.0).count()
}

/// Mean of squared errors over the unmasked components; zero when the mask
/// is empty.
pub fn masked_mse_loss(prediction: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f32> {
    check_loss_shapes(prediction, target, mask)?;
    let count = mask_count(mask);
    if count == 0 {
        return Ok(0.0);
    }
    let sum = kernels::masked_squared_error(prediction.values(), target.values(), mask.values());
    Ok((sum / count as f64) as f32)
}

pub fn masked_mse_backward(prediction: &mut Tensor, target: &Tensor, mask: &Tensor) -> Result<()> {
    check_loss_shapes(prediction, target, mask)?;
    let count = mask_count(mask) as f32;
    let (p, g) = prediction.values_and_grad_mut();
    kernels::masked_mse_grad(p, target.values(), mask.values(), count, g);
    Ok(())
}
