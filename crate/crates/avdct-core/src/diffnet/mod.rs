//! Differentiable layer kit with explicit backward passes.
//!
//! Every layer is a pure function pair: a forward that validates shapes and a
//! backward that maps the output cotangent to input and parameter gradients.
//! Threshold parameters use a surrogate gradient (see [`hard_threshold_backward`]);
//! everything else is exact and checked against central finite differences.

mod adamw;
mod attention;
mod gradcheck;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use attention::{mha_backward, mha_forward, MhaCache, MhaGrads, MhaParams};
pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{CodecError, Result};
use crate::tensor::{sign, Tensor};

/// y = x W + b for a row vector x of length L and an L x L weight matrix.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = x.len();
    if x.shape().len() != 1 {
        return Err(CodecError::InvalidInput(
            "linear input must be rank 1".into(),
        ));
    }
    w.expect_shape(&[n, n], "linear weight")?;
    b.expect_shape(&[n], "linear bias")?;
    let mut out = b.data().to_vec();
    for (i, xi) in x.data().iter().enumerate() {
        let row = w.row(i);
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    Tensor::from_vec(&[n], out)
}

pub struct LinearGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

/// Gradients of `linear_forward`: grad_x = g W^T, grad_W = x^T g, grad_b = g.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let n = x.len();
    w.expect_shape(&[n, n], "linear weight")?;
    grad_out.expect_shape(&[n], "linear cotangent")?;
    let mut grad_x = vec![0.0; n];
    let mut grad_w = vec![0.0; n * n];
    for i in 0..n {
        let row = w.row(i);
        let xi = x.data()[i];
        let mut acc = 0.0;
        for (j, g) in grad_out.data().iter().enumerate() {
            acc += g * row[j];
            grad_w[i * n + j] = xi * g;
        }
        grad_x[i] = acc;
    }
    Ok(LinearGrads {
        grad_x: Tensor::from_vec(&[n], grad_x)?,
        grad_w: Tensor::from_vec(&[n, n], grad_w)?,
        grad_b: grad_out.clone(),
    })
}

fn threshold_shapes_compatible(x: &Tensor, t: &Tensor) -> Result<bool> {
    if x.shape() == t.shape() {
        return Ok(false);
    }
    // Broadcast form: x is [rows, cols], t is [rows] applied across columns.
    if x.shape().len() == 2 && t.shape().len() == 1 && t.len() == x.shape()[0] {
        return Ok(true);
    }
    Err(CodecError::InvalidInput(format!(
        "threshold shape {:?} incompatible with input shape {:?}",
        t.shape(),
        x.shape()
    )))
}

fn check_thresholds_nonnegative(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| *v < 0.0) {
        return Err(CodecError::InvalidParameter(
            "threshold values must be non-negative".into(),
        ));
    }
    Ok(())
}

/// Hard thresholding: out_j = x_j when |x_j| > t_j, else 0.
///
/// This is the soft-thresholding operator followed by adding back
/// `t * sign(.)`, which restores the magnitude of surviving coefficients
/// instead of shrinking them.
pub fn hard_threshold(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    let broadcast = threshold_shapes_compatible(x, t)?;
    check_thresholds_nonnegative(t)?;
    let mut out = x.clone();
    if broadcast {
        let cols = x.shape()[1];
        for (r, tv) in t.data().iter().enumerate() {
            for v in out.row_mut(r).iter_mut().take(cols) {
                if v.abs() <= *tv {
                    *v = 0.0;
                }
            }
        }
    } else {
        for (v, tv) in out.data_mut().iter_mut().zip(t.data()) {
            if v.abs() <= *tv {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub struct ThresholdGrads {
    pub grad_x: Tensor,
    pub grad_t: Tensor,
}

/// Surrogate backward for [`hard_threshold`].
///
/// The sign-restoring term is treated as constant during backpropagation, so
/// the gradients are the soft-thresholding ones:
/// d out/d x = 1[|x| > t], d out/d t = -sign(x) 1[|x| > t].
pub fn hard_threshold_backward(
    x: &Tensor,
    t: &Tensor,
    grad_out: &Tensor,
) -> Result<ThresholdGrads> {
    let broadcast = threshold_shapes_compatible(x, t)?;
    grad_out.expect_shape(x.shape(), "threshold cotangent")?;
    let mut grad_x = grad_out.clone();
    let mut grad_t = Tensor::zeros(t.shape());
    if broadcast {
        let cols = x.shape()[1];
        for r in 0..t.len() {
            let tv = t.data()[r];
            let mut acc = 0.0;
            for c in 0..cols {
                let xv = x.at(r, c);
                if xv.abs() > tv {
                    acc += -sign(xv) * grad_out.at(r, c);
                } else {
                    *grad_x.at_mut(r, c) = 0.0;
                }
            }
            grad_t.data_mut()[r] = acc;
        }
    } else {
        for i in 0..x.len() {
            let xv = x.data()[i];
            if xv.abs() > t.data()[i] {
                grad_t.data_mut()[i] = -sign(xv) * grad_out.data()[i];
            } else {
                grad_x.data_mut()[i] = 0.0;
            }
        }
    }
    Ok(ThresholdGrads { grad_x, grad_t })
}

/// Elementwise trainable scaling y = x . v.
pub fn scale(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    v.expect_shape(x.shape(), "scale vector")?;
    let data = x.data().iter().zip(v.data()).map(|(a, b)| a * b).collect();
    Tensor::from_vec(x.shape(), data)
}

pub struct ScaleGrads {
    pub grad_x: Tensor,
    pub grad_v: Tensor,
}

pub fn scale_backward(x: &Tensor, v: &Tensor, grad_out: &Tensor) -> Result<ScaleGrads> {
    v.expect_shape(x.shape(), "scale vector")?;
    grad_out.expect_shape(x.shape(), "scale cotangent")?;
    let gx = grad_out
        .data()
        .iter()
        .zip(v.data())
        .map(|(g, b)| g * b)
        .collect();
    let gv = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(g, a)| g * a)
        .collect();
    Ok(ScaleGrads {
        grad_x: Tensor::from_vec(x.shape(), gx)?,
        grad_v: Tensor::from_vec(x.shape(), gv)?,
    })
}

/// Fuse N stacked subband rows into one row: z_l = sum_n w_n y_{n,l}.
/// A 1x1 convolution with N input channels, one output channel and no bias.
pub fn conv1x1(stack: &Tensor, w: &Tensor) -> Result<Tensor> {
    if stack.shape().len() != 2 {
        return Err(CodecError::InvalidInput(
            "fusion input must be a stack of subband rows".into(),
        ));
    }
    let (n, l) = (stack.shape()[0], stack.shape()[1]);
    w.expect_shape(&[n], "fusion weight")?;
    let mut out = vec![0.0; l];
    for (wn, row) in w.data().iter().zip((0..n).map(|r| stack.row(r))) {
        for (o, y) in out.iter_mut().zip(row) {
            *o += wn * y;
        }
    }
    Tensor::from_vec(&[l], out)
}

pub struct Conv1x1Grads {
    pub grad_stack: Tensor,
    pub grad_w: Tensor,
}

pub fn conv1x1_backward(stack: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<Conv1x1Grads> {
    let (n, l) = (stack.shape()[0], stack.shape()[1]);
    w.expect_shape(&[n], "fusion weight")?;
    grad_out.expect_shape(&[l], "fusion cotangent")?;
    let mut grad_stack = Tensor::zeros(&[n, l]);
    let mut grad_w = vec![0.0; n];
    for row in 0..n {
        let wn = w.data()[row];
        let mut acc = 0.0;
        let src = stack.row(row);
        let dst = grad_stack.row_mut(row);
        for ((d, g), y) in dst.iter_mut().zip(grad_out.data()).zip(src) {
            *d = wn * g;
            acc += g * y;
        }
        grad_w[row] = acc;
    }
    Ok(Conv1x1Grads {
        grad_stack,
        grad_w: Tensor::from_vec(&[n], grad_w)?,
    })
}

/// Numerically stable softmax over a contiguous slice, in place.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax for one row: dx = (g - <g, y>) . y.
pub(crate) fn softmax_row_backward(y: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    for ((gi, yi), go) in grad_in.iter_mut().zip(y).zip(grad_out) {
        *gi = (go - dot) * yi;
    }
}
