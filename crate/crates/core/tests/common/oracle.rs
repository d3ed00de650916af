//! Straight-line reference implementations written with explicit loops over
//! plain `f64` arrays. They share no code with the library beyond reading
//! parameter values.

#![allow(dead_code, clippy::needless_range_loop)]

use gsnet_core::autodiff::{ParamTree, Parameter};
use gsnet_core::gsam::{CamParams, ConvBlockParams, GsamParams, SamParams};
use gsnet_core::rng;
use gsnet_core::{Shape4, Tensor};
use rand::RngExt;

pub const EPS: f64 = 1e-5;

/// One image as `rows[position][channel]`, positions in row-major `(y, x)` order.
pub type Grid = Vec<Vec<f64>>;

pub fn grid_of(t: &Tensor, item: usize) -> Grid {
    let s = t.shape();
    let mut out = Vec::new();
    for y in 0..s.h() {
        for x in 0..s.w() {
            out.push((0..s.k()).map(|c| t.get(item, y, x, c)).collect());
        }
    }
    out
}

pub fn tensor_of(g: &Grid, h: usize, w: usize) -> Tensor {
    let k = g[0].len();
    Tensor::from_fn(Shape4::new(1, h, w, k).unwrap(), |_, y, x, c| g[y * w + x][c])
}

pub struct Block {
    /// `w[i][j]`: input channel `i` to output channel `j`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Block {
    pub fn of(p: &ConvBlockParams) -> Block {
        let s = p.weight.value().shape();
        let (kin, kout) = (s.w(), s.k());
        let d = p.weight.value().data();
        Block {
            w: (0..kin).map(|i| (0..kout).map(|j| d[i * kout + j]).collect()).collect(),
            b: p.bias.value().data().to_vec(),
            gamma: p.ln_gamma.value().data().to_vec(),
            beta: p.ln_beta.value().data().to_vec(),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

/// Linear map, then per-position normalization, then swish.
pub fn block(x: &Grid, p: &Block) -> Grid {
    let kout = p.b.len();
    let mut out = Vec::new();
    for row in x {
        let mut y = vec![0.0; kout];
        for j in 0..kout {
            let mut acc = p.b[j];
            for i in 0..row.len() {
                acc += row[i] * p.w[i][j];
            }
            y[j] = acc;
        }
        let mean = y.iter().sum::<f64>() / kout as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kout as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        for j in 0..kout {
            y[j] = swish((y[j] - mean) * inv * p.gamma[j] + p.beta[j]);
        }
        out.push(y);
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct AttentionResult {
    pub features: Grid,
    pub attention: Vec<Vec<f64>>,
}

pub fn cam(x: &Grid, p: &CamParams) -> AttentionResult {
    let k = x[0].len();
    let hw = x.len();
    let mut max = vec![f64::NEG_INFINITY; k];
    let mut avg = vec![0.0; k];
    for row in x {
        for c in 0..k {
            max[c] = max[c].max(row[c]);
            avg[c] += row[c] / hw as f64;
        }
    }
    let query = &block(&vec![max], &Block::of(&p.query))[0];
    let key = &block(&vec![avg], &Block::of(&p.key))[0];
    // key is a column, query a row: their product is the K×K outer product.
    let mut attention = Vec::new();
    for i in 0..k {
        let scores: Vec<f64> = (0..k).map(|j| key[i] * query[j]).collect();
        attention.push(softmax(&scores));
    }
    let value = block(x, &Block::of(&p.value));
    let mut features = Vec::new();
    for pos in 0..hw {
        let mut out = vec![0.0; k];
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..k {
                acc += value[pos][i] * attention[i][j];
            }
            out[j] = acc * x[pos][j];
        }
        features.push(out);
    }
    AttentionResult { features, attention }
}

pub fn sam(x: &Grid, p: &SamParams) -> AttentionResult {
    let hw = x.len();
    let query = block(x, &Block::of(&p.query));
    let key = block(x, &Block::of(&p.key));
    let value = block(x, &Block::of(&p.value));
    let half = query[0].len();
    let mut attention = Vec::new();
    for a in 0..hw {
        let scores: Vec<f64> = (0..hw)
            .map(|b| (0..half).map(|c| query[a][c] * key[b][c]).sum())
            .collect();
        attention.push(softmax(&scores));
    }
    let mut mixed = Vec::new();
    for a in 0..hw {
        let mut row = vec![0.0; half];
        for b in 0..hw {
            for c in 0..half {
                row[c] += attention[a][b] * value[b][c];
            }
        }
        mixed.push(row);
    }
    let projected = block(&mixed, &Block::of(&p.out));
    let features = (0..hw)
        .map(|a| (0..x[a].len()).map(|c| projected[a][c] * x[a][c]).collect())
        .collect();
    AttentionResult { features, attention }
}

pub fn gsam(x: &Grid, p: &GsamParams) -> Grid {
    let [w1, w2, w3] = p.fusion.values();
    let ch = cam(x, &p.cam).features;
    let sp = sam(x, &p.sam).features;
    (0..x.len())
        .map(|a| {
            (0..x[a].len())
                .map(|c| w1 * ch[a][c] + w2 * sp[a][c] + w3 * x[a][c])
                .collect()
        })
        .collect()
}

/// 3×3 convolution, stride 1, one pixel of zero padding; weight `[3,3,kin,kout]`.
pub fn conv3x3(x: &Grid, h: usize, w: usize, weight: &Tensor, bias: &[f64]) -> Grid {
    let s = weight.shape();
    let (kin, kout) = (s.w(), s.k());
    let mut out = Vec::new();
    for y in 0..h {
        for xx in 0..w {
            let mut row = bias.to_vec();
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = &x[sy as usize * w + sx as usize];
                    for i in 0..kin {
                        for j in 0..kout {
                            row[j] += src[i] * weight.get(dy, dx, i, j);
                        }
                    }
                }
            }
            out.push(row);
        }
    }
    out
}

/// Normalizes the whole grid with one mean and variance, then applies the
/// per-channel affine map.
pub fn sample_norm(x: &Grid, gamma: &[f64], beta: &[f64]) -> Grid {
    let count = (x.len() * x[0].len()) as f64;
    let mean = x.iter().flatten().sum::<f64>() / count;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let denom = (var + EPS).sqrt();
    x.iter()
        .map(|r| r.iter().enumerate().map(|(c, v)| gamma[c] * (v - mean) / denom + beta[c]).collect())
        .collect()
}

pub fn maxpool2(x: &Grid, h: usize, w: usize) -> Grid {
    let k = x[0].len();
    let mut out = Vec::new();
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            let mut row = vec![f64::NEG_INFINITY; k];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                for c in 0..k {
                    row[c] = row[c].max(x[(2 * y + dy) * w + 2 * xx + dx][c]);
                }
            }
            out.push(row);
        }
    }
    out
}

pub fn mean_over_positions(x: &Grid) -> Vec<f64> {
    let k = x[0].len();
    (0..k).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect()
}

pub fn random_tensor(shape: Shape4, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 1000);
    Tensor::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
}

/// Overwrites every parameter with uniform(-scale, scale) draws.
pub fn randomize<T: ParamTree + ?Sized>(params: &mut T, seed: u64, scale: f64) {
    let mut r = rng::seeded(seed, 2000);
    params.visit_mut(&mut |p: &mut Parameter| {
        for v in p.value_mut().data_mut() {
            *v = r.random_range(-scale..scale);
        }
    });
}

pub fn max_grid_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
