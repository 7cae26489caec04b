//! Dense row-major tensors, the differentiable operation set used by the
//! model, and a finite-difference gradient checker.
//!
//! Everything the model computes goes through [`Tape`], which records a
//! Wengert list during the forward pass and replays it in reverse. The free
//! functions in this module ([`softmax`], [`layer_norm`], [`sigmoid`]) are the
//! reference kernels the tape ops share.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Activation, GradientRecord, NodeId, Tape};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Lower clamp applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax of a vector.
pub fn softmax_slice<F: Scalar>(x: &[F]) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(Error::domain("softmax over an empty axis"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out, None);
    Ok(out)
}

/// Softmax of `t` along `axis`.
pub fn softmax<F: Scalar>(t: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let extent = shape[axis];
    if extent == 0 {
        return Err(Error::domain("softmax over an empty axis"));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.data().to_vec();
    let mut lane = vec![F::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = out[base + j * inner];
            }
            softmax_in_place(&mut lane, None);
            for (j, v) in lane.iter().enumerate() {
                out[base + j * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// In-place masked softmax. Masked entries come out exactly zero. A row with
/// every entry masked is left all-zero.
pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = F::zero();
        }
    }
    let inv = sum.recip();
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` over one feature vector.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Result<Vec<F>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(format!(
            "layer_norm: x has {} features, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::domain("layer_norm over an empty vector"));
    }
    if eps < F::zero() {
        return Err(Error::domain("layer_norm eps must be non-negative"));
    }
    let mut out = vec![F::zero(); x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Returns `(mean, 1/sqrt(var + eps))` and writes the normalized row.
pub(crate) fn layer_norm_row<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
) -> (F, F) {
    let n = F::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = (var + eps).sqrt().recip();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = g * ((v - mean) * rstd) + b;
    }
    (mean, rstd)
}

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Natural log with the input clamped to `LOG_FLOOR`.
pub fn clamped_ln<F: Scalar>(x: F) -> F {
    x.max(F::lit(LOG_FLOOR)).ln()
}
