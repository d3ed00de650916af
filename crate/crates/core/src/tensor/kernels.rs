//! Slice-level numeric kernels shared by the value-level ops and the tape.
//!
//! Each output element is produced by a fixed reduction order, so results do
//! not depend on how callers split work.

use super::Shape4;

/// `c (m×n) = op(a) · op(b)`, plus the previous `c` when `accumulate`.
///
/// `a` is read as an m×k row-major matrix, or when `a_t` is set as a
/// row-major k×m matrix that is used transposed. Likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
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

/// Row-major transpose of a rows×cols block.
pub fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Global max pool; returns the pooled values and, per output, the flat
/// input index of the first maximum in row-major scan order.
pub fn global_max_pool(x: &[f64], s: Shape4) -> (Vec<f64>, Vec<usize>) {
    let (hw, k) = (s.spatial(), s.k());
    let mut out = Vec::with_capacity(s.n() * k);
    let mut arg = Vec::with_capacity(s.n() * k);
    for b in 0..s.n() {
        let base = b * hw * k;
        for c in 0..k {
            let mut best = base + c;
            for p in 1..hw {
                let i = base + p * k + c;
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

pub fn global_avg_pool(x: &[f64], s: Shape4) -> Vec<f64> {
    let (hw, k) = (s.spatial(), s.k());
    let inv = 1.0 / hw as f64;
    let mut out = vec![0.0; s.n() * k];
    for b in 0..s.n() {
        let acc = &mut out[b * k..(b + 1) * k];
        for p in 0..hw {
            let px = &x[(b * hw + p) * k..(b * hw + p + 1) * k];
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    out
}

/// 2×2 non-overlapping max pool; window scan order (0,0),(0,1),(1,0),(1,1),
/// first maximum wins.
pub fn maxpool2x2(x: &[f64], s: Shape4) -> (Vec<f64>, Vec<usize>) {
    let (h, w, k) = (s.h(), s.w(), s.k());
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(s.n() * oh * ow * k);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..s.n() {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..k {
                    let at = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * k + c;
                    let mut best = at(0, 0);
                    for idx in [at(0, 1), at(1, 0), at(1, 1)] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each consecutive block of `span` values (biased variance,
/// `eps` inside the square root), then applies the per-channel affine map.
/// `span == k` is the channel-axis norm; `span == h·w·k` normalizes whole samples.
pub fn layer_norm(x: &[f64], k: usize, span: usize, gamma: &[f64], beta: &[f64], eps: f64) -> LayerNormOut {
    debug_assert!(span.is_multiple_of(k) && x.len().is_multiple_of(span));
    let blocks = x.len() / span;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(blocks);
    let inv_n = 1.0 / span as f64;
    for r in 0..blocks {
        let xs = &x[r * span..(r + 1) * span];
        let mean = xs.iter().sum::<f64>() * inv_n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (i, &v) in xs.iter().enumerate() {
            let c = i % k;
            let xh = (v - mean) * is;
            xhat[r * span + i] = xh;
            y[r * span + i] = gamma[c] * xh + beta[c];
        }
    }
    LayerNormOut { y, xhat, inv_std }
}

/// Geometry of a 3×3 "same"-padded convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub k_in: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(s: Shape4, stride: usize) -> ConvGeom {
        let oh = s.h().div_ceil(stride);
        let ow = s.w().div_ceil(stride);
        let pad_h = ((oh - 1) * stride + 3).saturating_sub(s.h());
        let pad_w = ((ow - 1) * stride + 3).saturating_sub(s.w());
        ConvGeom {
            n: s.n(),
            h: s.h(),
            w: s.w(),
            k_in: s.k(),
            oh,
            ow,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        9 * self.k_in
    }

    /// Input pixel read by tap (ky, kx) at output (oy, ox), if inside the image.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds 3×3 patches into a `rows × 9·k_in` matrix with column order
/// (ky, kx, c_in), matching a `[3,3,k_in,k_out]` weight read as 9·k_in × k_out.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let kin = g.k_in;
    let mut col = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = ((b * g.h + iy) * g.w + ix) * kin;
                            let dst = row * patch + (ky * 3 + kx) * kin;
                            col[dst..dst + kin].copy_from_slice(&x[src..src + kin]);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(dcol: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let kin = g.k_in;
    let mut dx = vec![0.0; g.n * g.h * g.w * kin];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = ((b * g.h + iy) * g.w + ix) * kin;
                            let src = row * patch + (ky * 3 + kx) * kin;
                            for c in 0..kin {
                                dx[dst + c] += dcol[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adds `bias` to every length-`bias.len()` row of `y`.
pub fn add_row_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of a row-major matrix with `cols` columns.
pub fn col_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
