//! Differentiable tensor helpers built only from primitive candle ops, so
//! every one of them has a backward pass.

use candle_core::{Tensor, D};

use crate::Result;

pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let num = xs.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    Ok(num.broadcast_div(&den)?)
}

pub fn log_softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let diff = xs.broadcast_sub(&max)?;
    let lse = diff.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(diff.broadcast_sub(&lse)?)
}

/// Rows divided by their euclidean norm along the last axis.
pub fn l2_normalize_last(xs: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = xs.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(xs.broadcast_div(&norm.maximum(eps)?)?)
}

/// Layer normalization over the last axis with affine weight and bias.
pub fn layer_norm(xs: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// `xs @ weight^T (+ bias)` for inputs of rank 2 or 3.
pub fn linear(xs: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    // Folding leading axes into rows keeps this one GEMM instead of a batch
    // of tiny ones, forward and backward.
    let out = match xs.dims() {
        [_, _] => xs.matmul(&weight.t()?)?,
        [lead @ .., k] => {
            let rows: usize = lead.iter().product();
            let mut shape = lead.to_vec();
            shape.push(weight.dim(0)?);
            xs.reshape((rows, *k))?.matmul(&weight.t()?)?.reshape(shape)?
        }
        [] => return Err(crate::Error::Shape("linear needs at least a rank-1 input".into())),
    };
    Ok(match bias {
        Some(b) => out.broadcast_add(b)?,
        None => out,
    })
}
