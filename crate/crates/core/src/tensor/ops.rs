use super::kernels::{self, ConvGeom};
use super::{Matrix, Shape4, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn transpose(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.data.len()];
    kernels::transpose(&m.data, m.rows, m.cols, &mut out);
    Matrix::from_raw(m.cols, m.rows, out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} · {}x{}: inner dimensions differ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    kernels::gemm(
        a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out, false,
    );
    Ok(Matrix::from_raw(a.rows, b.cols, out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.data.clone();
    kernels::softmax_rows_inplace(&mut out, m.cols);
    Matrix::from_raw(m.rows, m.cols, out)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape, b.shape)));
    }
    Ok(())
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("elementwise_mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_raw(a.shape, data))
}

/// `w1·a + w2·b + w3·c`
pub fn weighted_sum3(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    w1: f64,
    w2: f64,
    w3: f64,
) -> Result<Tensor> {
    same_shape("weighted_sum3", a, b)?;
    same_shape("weighted_sum3", a, c)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&c.data)
        .map(|((x, y), z)| w1 * x + w2 * y + w3 * z)
        .collect();
    Ok(Tensor::from_raw(a.shape, data))
}

/// Per (batch, channel) maximum over all positions; shape `[n,1,1,k]`.
pub fn global_max_pool(t: &Tensor) -> Tensor {
    let (out, _) = kernels::global_max_pool(&t.data, t.shape);
    Tensor::from_raw(Shape4 { h: 1, w: 1, ..t.shape }, out)
}

/// Per (batch, channel) mean over all positions; shape `[n,1,1,k]`.
pub fn global_avg_pool(t: &Tensor) -> Tensor {
    let out = kernels::global_avg_pool(&t.data, t.shape);
    Tensor::from_raw(Shape4 { h: 1, w: 1, ..t.shape }, out)
}

/// Per-position channel mixing: `out = weightᵀ·x + bias` with a k_in×k_out weight.
pub fn conv1x1(t: &Tensor, weight: &Matrix, bias: &[f64]) -> Result<Tensor> {
    if t.shape.k != weight.rows {
        return Err(Error::shape(format!(
            "conv1x1: input has {} channels, weight expects {}",
            t.shape.k, weight.rows
        )));
    }
    if bias.len() != weight.cols {
        return Err(Error::shape(format!(
            "conv1x1: bias length {} != {} output channels",
            bias.len(),
            weight.cols
        )));
    }
    let rows = t.shape.n * t.shape.spatial();
    let mut out = vec![0.0; rows * weight.cols];
    kernels::gemm(
        rows,
        weight.rows,
        weight.cols,
        &t.data,
        false,
        &weight.data,
        false,
        &mut out,
        false,
    );
    kernels::add_row_bias(&mut out, bias);
    Ok(Tensor::from_raw(t.shape.with_k(weight.cols)?, out))
}

/// 3×3 cross-correlation with zero "same" padding. `weight` has shape
/// `[3,3,k_in,k_out]`; stride 2 gives `ceil(h/2) × ceil(w/2)` outputs.
pub fn conv3x3(t: &Tensor, weight: &Tensor, bias: &[f64], stride: usize) -> Result<Tensor> {
    let ws = weight.shape;
    if ws.n != 3 || ws.h != 3 {
        return Err(Error::shape(format!("conv3x3: weight shape {ws} is not [3,3,_,_]")));
    }
    if ws.w != t.shape.k {
        return Err(Error::shape(format!(
            "conv3x3: input has {} channels, weight expects {}",
            t.shape.k, ws.w
        )));
    }
    if bias.len() != ws.k {
        return Err(Error::shape(format!(
            "conv3x3: bias length {} != {} output channels",
            bias.len(),
            ws.k
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("conv3x3: stride must be 1 or 2, got {stride}")));
    }
    let g = ConvGeom::new(t.shape, stride);
    let col = kernels::im2col(&t.data, &g);
    let mut out = vec![0.0; g.rows() * ws.k];
    kernels::gemm(
        g.rows(),
        g.patch(),
        ws.k,
        &col,
        false,
        &weight.data,
        false,
        &mut out,
        false,
    );
    kernels::add_row_bias(&mut out, bias);
    Ok(Tensor::from_raw(Shape4::new(g.n, g.oh, g.ow, ws.k)?, out))
}

pub fn maxpool2x2(t: &Tensor) -> Result<Tensor> {
    if !t.shape.h.is_multiple_of(2) || !t.shape.w.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "maxpool2x2: spatial extents of {} must be even",
            t.shape
        )));
    }
    let (out, _) = kernels::maxpool2x2(&t.data, t.shape);
    Ok(Tensor::from_raw(
        Shape4::new(t.shape.n, t.shape.h / 2, t.shape.w / 2, t.shape.k)?,
        out,
    ))
}

/// Layer normalization over the channel axis at every (batch, h, w) position.
pub fn layer_norm(t: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    if gamma.len() != t.shape.k || beta.len() != t.shape.k {
        return Err(Error::shape(format!(
            "layer_norm: gamma/beta lengths {}/{} != {} channels",
            gamma.len(),
            beta.len(),
            t.shape.k
        )));
    }
    let out = kernels::layer_norm(&t.data, t.shape.k, t.shape.k, gamma, beta, eps);
    Ok(Tensor::from_raw(t.shape, out.y))
}

/// `x · sigmoid(x)`
pub fn swish(t: &Tensor) -> Tensor {
    let data = t.data.iter().map(|&x| x * kernels::sigmoid(x)).collect();
    Tensor::from_raw(t.shape, data)
}
