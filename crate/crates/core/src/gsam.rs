//! Global self-attention module.
//!
//! Two attention branches run in parallel over a backbone feature map
//! `F_I` (`[n,H,W,K]`) and are fused with it through three learnable scalars:
//!
//! ```text
//! CAM:  Q = conv(GMP(F_I)) as 1×K      K = conv(GAP(F_I)) as K×1
//!       A_ch = softmax_rows(K·Q)  (K×K)
//!       V = conv(F_I) as HW×K          F_ch = (V·A_ch as H×W×K) ⊙ F_I
//! SAM:  Q, V = conv_{K→K/2}(F_I) as HW×K/2,  Kᵀ = conv_{K→K/2}(F_I) as K/2×HW
//!       A_sp = softmax_rows(Q·Kᵀ)  (HW×HW)
//!       F_sp = conv_{K/2→K}(A_sp·V as H×W×K/2) ⊙ F_I
//! out:  w1·F_ch + w2·F_sp + w3·F_I
//! ```
//!
//! Every `conv` above is a 1×1 convolution followed by channel layer
//! normalization and swish. Softmax is taken along rows.

use std::path::Path;

use rand::RngExt;

use crate::autodiff::{Graph, ParamTree, Parameter, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{write_t4b, Matrix, Shape4, Tensor, LAYER_NORM_EPS};

/// Uniform(±√(6/(fan_in+fan_out))) initialization.
pub(crate) fn glorot(rng: &mut Rng, shape: Shape4, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-limit..=limit))
}

/// 1×1 conv → layer norm → swish.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub weight: Parameter,
    pub bias: Parameter,
    pub ln_gamma: Parameter,
    pub ln_beta: Parameter,
}

impl ConvBlockParams {
    pub fn init(prefix: &str, k_in: usize, k_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = glorot(rng, Shape4::new(1, 1, k_in, k_out)?, k_in, k_out);
        let vec_shape = Shape4::new(1, 1, 1, k_out)?;
        Ok(ConvBlockParams {
            weight: Parameter::new(format!("{prefix}.weight"), weight),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(vec_shape)),
            ln_gamma: Parameter::new(format!("{prefix}.ln_gamma"), Tensor::full(vec_shape, 1.0)),
            ln_beta: Parameter::new(format!("{prefix}.ln_beta"), Tensor::zeros(vec_shape)),
        })
    }

    /// Builds a block from explicit values; `weight` is k_in×k_out.
    pub fn from_parts(
        prefix: &str,
        weight: &Matrix,
        bias: &[f64],
        ln_gamma: &[f64],
        ln_beta: &[f64],
    ) -> Result<Self> {
        let k_out = weight.cols();
        if bias.len() != k_out || ln_gamma.len() != k_out || ln_beta.len() != k_out {
            return Err(Error::shape(format!(
                "conv block {prefix}: vectors must have {k_out} entries"
            )));
        }
        Ok(ConvBlockParams {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                weight.to_tensor(Shape4::new(1, 1, weight.rows(), k_out)?)?,
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::vector(bias.to_vec())?),
            ln_gamma: Parameter::new(format!("{prefix}.ln_gamma"), Tensor::vector(ln_gamma.to_vec())?),
            ln_beta: Parameter::new(format!("{prefix}.ln_beta"), Tensor::vector(ln_beta.to_vec())?),
        })
    }

    pub fn k_in(&self) -> usize {
        self.weight.value().shape().w()
    }

    pub fn k_out(&self) -> usize {
        self.weight.value().shape().k()
    }
}

impl ParamTree for ConvBlockParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.ln_gamma);
        f(&self.ln_beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.ln_gamma);
        f(&mut self.ln_beta);
    }
}

/// Channel attention: three K→K blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CamParams {
    pub query: ConvBlockParams,
    pub key: ConvBlockParams,
    pub value: ConvBlockParams,
}

impl CamParams {
    pub fn channels(&self) -> usize {
        self.query.k_in()
    }
}

impl ParamTree for CamParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
    }
}

/// Spatial attention: three K→K/2 blocks and one K/2→K output block.
#[derive(Debug, Clone, PartialEq)]
pub struct SamParams {
    pub query: ConvBlockParams,
    pub key: ConvBlockParams,
    pub value: ConvBlockParams,
    pub out: ConvBlockParams,
}

impl SamParams {
    pub fn channels(&self) -> usize {
        self.query.k_in()
    }
}

impl ParamTree for SamParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub w1: Parameter,
    pub w2: Parameter,
    pub w3: Parameter,
}

impl FusionWeights {
    pub fn new(prefix: &str, w1: f64, w2: f64, w3: f64) -> Self {
        FusionWeights {
            w1: Parameter::new(format!("{prefix}.w1"), Tensor::scalar(w1)),
            w2: Parameter::new(format!("{prefix}.w2"), Tensor::scalar(w2)),
            w3: Parameter::new(format!("{prefix}.w3"), Tensor::scalar(w3)),
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [
            self.w1.value().data()[0],
            self.w2.value().data()[0],
            self.w3.value().data()[0],
        ]
    }
}

impl ParamTree for FusionWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w1);
        f(&self.w2);
        f(&self.w3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w1);
        f(&mut self.w2);
        f(&mut self.w3);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsamParams {
    pub cam: CamParams,
    pub sam: SamParams,
    pub fusion: FusionWeights,
}

impl GsamParams {
    pub fn channels(&self) -> usize {
        self.cam.channels()
    }

    /// Runs the module on a tensor outside of any training tape.
    pub fn forward(&self, f_i: &Tensor) -> Result<GsamOutput> {
        let mut g = Graph::new();
        let x = g.input(f_i.clone());
        let out = gsam_forward(&mut g, x, self, Branches::ALL)?;
        Ok(GsamOutput {
            output: g.value(out.output).clone(),
            channel_attention: g.value(out.channel_attention).clone(),
            spatial_attention: g.value(out.spatial_attention).clone(),
        })
    }
}

impl ParamTree for GsamParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.cam.visit(f);
        self.sam.visit(f);
        self.fusion.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.cam.visit_mut(f);
        self.sam.visit_mut(f);
        self.fusion.visit_mut(f);
    }
}

/// Fresh module for `k` channels: Glorot-uniform conv weights, zero biases,
/// unit LN gain, zero LN shift, fusion `(0, 0, 1)`.
pub fn gsam_init(k: usize, seed: u64) -> Result<GsamParams> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "GSAM needs an even channel count >= 2 (K' = K/2), got {k}"
        )));
    }
    let half = k / 2;
    let mut rng = rng::seeded(seed, rng::stream::GSAM_INIT);
    let cam = CamParams {
        query: ConvBlockParams::init("gsam.cam.query", k, k, &mut rng)?,
        key: ConvBlockParams::init("gsam.cam.key", k, k, &mut rng)?,
        value: ConvBlockParams::init("gsam.cam.value", k, k, &mut rng)?,
    };
    let sam = SamParams {
        query: ConvBlockParams::init("gsam.sam.query", k, half, &mut rng)?,
        key: ConvBlockParams::init("gsam.sam.key", k, half, &mut rng)?,
        value: ConvBlockParams::init("gsam.sam.value", k, half, &mut rng)?,
        out: ConvBlockParams::init("gsam.sam.out", half, k, &mut rng)?,
    };
    Ok(GsamParams {
        cam,
        sam,
        fusion: FusionWeights::new("gsam.fusion", 0.0, 0.0, 1.0),
    })
}

pub fn conv_block(g: &mut Graph, x: Var, p: &ConvBlockParams) -> Result<Var> {
    let k = g.value(x).shape().k();
    if k != p.k_in() {
        return Err(Error::shape(format!(
            "conv block {}: input has {k} channels, block expects {}",
            p.weight.id(),
            p.k_in()
        )));
    }
    let (w, b) = (g.param(&p.weight), g.param(&p.bias));
    let (gamma, beta) = (g.param(&p.ln_gamma), g.param(&p.ln_beta));
    let y = g.conv1x1(x, w, b)?;
    let y = g.layer_norm(y, gamma, beta, LAYER_NORM_EPS)?;
    g.swish(y)
}

/// Attended features and the attention matrix that produced them.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub features: Var,
    /// `[n,1,K,K]` for CAM, `[n,1,HW,HW]` for SAM.
    pub attention: Var,
}

pub fn cam_forward(g: &mut Graph, f_i: Var, p: &CamParams) -> Result<AttentionOutput> {
    let s = g.value(f_i).shape();
    let k = p.channels();
    if s.k() != k {
        return Err(Error::shape(format!("CAM expects {k} channels, input is {s}")));
    }
    let n = s.n();

    let pooled_max = g.global_max_pool(f_i)?;
    let q = conv_block(g, pooled_max, &p.query)?;
    let q = g.reshape(q, Shape4::new(n, 1, 1, k)?)?;

    let pooled_avg = g.global_avg_pool(f_i)?;
    let key = conv_block(g, pooled_avg, &p.key)?;
    let key = g.reshape(key, Shape4::new(n, 1, 1, k)?)?;
    let key = g.transpose(key)?;

    let scores = g.matmul(key, q)?;
    let attention = g.softmax_rows(scores)?;

    let v = conv_block(g, f_i, &p.value)?;
    let v = g.reshape(v, Shape4::new(n, 1, s.spatial(), k)?)?;
    let attended = g.matmul(v, attention)?;
    let attended = g.reshape(attended, s)?;

    let features = g.mul(attended, f_i)?;
    Ok(AttentionOutput {
        features,
        attention,
    })
}

pub fn sam_forward(g: &mut Graph, f_i: Var, p: &SamParams) -> Result<AttentionOutput> {
    let s = g.value(f_i).shape();
    if !s.k().is_multiple_of(2) {
        return Err(Error::shape(format!("SAM needs an even channel count, input is {s}")));
    }
    let k = p.channels();
    if s.k() != k {
        return Err(Error::shape(format!("SAM expects {k} channels, input is {s}")));
    }
    let (n, hw, half) = (s.n(), s.spatial(), k / 2);
    let as_rows = Shape4::new(n, 1, hw, half)?;

    let q = conv_block(g, f_i, &p.query)?;
    let q = g.reshape(q, as_rows)?;

    let key = conv_block(g, f_i, &p.key)?;
    let key = g.reshape(key, as_rows)?;
    let key = g.transpose(key)?;

    let scores = g.matmul(q, key)?;
    let attention = g.softmax_rows(scores)?;

    let v = conv_block(g, f_i, &p.value)?;
    let v = g.reshape(v, as_rows)?;
    let attended = g.matmul(attention, v)?;
    let attended = g.reshape(attended, s.with_k(half)?)?;
    let projected = conv_block(g, attended, &p.out)?;

    let features = g.mul(projected, f_i)?;
    Ok(AttentionOutput {
        features,
        attention,
    })
}

/// Which attention branches take part in the fusion. A disabled branch is
/// still computed but its fusion weight is replaced by a constant zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub channel: bool,
    pub spatial: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        channel: true,
        spatial: true,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct GsamGraphOutput {
    pub output: Var,
    pub channel_attention: Var,
    pub spatial_attention: Var,
}

pub fn gsam_forward(
    g: &mut Graph,
    f_i: Var,
    p: &GsamParams,
    branches: Branches,
) -> Result<GsamGraphOutput> {
    if p.cam.channels() != p.sam.channels() {
        return Err(Error::shape(format!(
            "CAM has {} channels but SAM has {}",
            p.cam.channels(),
            p.sam.channels()
        )));
    }
    let cam = cam_forward(g, f_i, &p.cam)?;
    let sam = sam_forward(g, f_i, &p.sam)?;
    let w1 = if branches.channel {
        g.param(&p.fusion.w1)
    } else {
        g.constant(0.0)
    };
    let w2 = if branches.spatial {
        g.param(&p.fusion.w2)
    } else {
        g.constant(0.0)
    };
    let w3 = g.param(&p.fusion.w3);
    let output = g.weighted_sum3([cam.features, sam.features, f_i], [w1, w2, w3])?;
    Ok(GsamGraphOutput {
        output,
        channel_attention: cam.attention,
        spatial_attention: sam.attention,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsamOutput {
    pub output: Tensor,
    pub channel_attention: Tensor,
    pub spatial_attention: Tensor,
}

impl GsamOutput {
    /// Writes `channel_attention.t4b` (`[n,1,K,K]`) and
    /// `spatial_attention.t4b` (`[n,1,HW,HW]`) into `dir`.
    pub fn write_diagnostics(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_t4b(dir.join("channel_attention.t4b"), &self.channel_attention)?;
        write_t4b(dir.join("spatial_attention.t4b"), &self.spatial_attention)
    }
}

/// CAM on a plain tensor; returns `(F_ch, attention)`.
pub fn cam_apply(f_i: &Tensor, p: &CamParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(f_i.clone());
    let out = cam_forward(&mut g, x, p)?;
    Ok((g.value(out.features).clone(), g.value(out.attention).clone()))
}

/// SAM on a plain tensor; returns `(F_sp, attention)`.
pub fn sam_apply(f_i: &Tensor, p: &SamParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(f_i.clone());
    let out = sam_forward(&mut g, x, p)?;
    Ok((g.value(out.features).clone(), g.value(out.attention).clone()))
}

/// Conv block on a plain tensor.
pub fn conv_block_apply(t: &Tensor, p: &ConvBlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = conv_block(&mut g, x, p)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv1x1, layer_norm, swish};

    fn shape(n: usize, h: usize, w: usize, k: usize) -> Shape4 {
        Shape4::new(n, h, w, k).unwrap()
    }

    fn random(s: Shape4, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed, 7);
        Tensor::from_fn(s, |_, _, _, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_block_outputs_zero() {
        let p = ConvBlockParams::from_parts("b", &Matrix::zeros(3, 3), &[0.0; 3], &[1.0; 3], &[0.0; 3])
            .unwrap();
        let out = conv_block_apply(&random(shape(2, 2, 2, 3), 1), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_composes_primitives_on_one_position() {
        let w = Matrix::from_rows(&[&[0.5, -1.0], &[0.25, 2.0]]).unwrap();
        let p = ConvBlockParams::from_parts("b", &w, &[0.1, -0.2], &[1.5, 0.5], &[0.3, -0.4]).unwrap();
        let x = Tensor::new(shape(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        // conv: (0.5·1 + 0.25·3 + 0.1, −1·1 + 2·3 − 0.2) = (1.35, 4.8)
        let (c0, c1) = (1.35f64, 4.8f64);
        let mean = (c0 + c1) / 2.0;
        let var = ((c0 - mean).powi(2) + (c1 - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let ln = [1.5 * (c0 - mean) * inv + 0.3, 0.5 * (c1 - mean) * inv - 0.4];
        let expect: Vec<f64> = ln.iter().map(|&v| v / (1.0 + (-v).exp())).collect();

        let out = conv_block_apply(&x, &p).unwrap();
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }

        let composed = swish(
            &layer_norm(&conv1x1(&x, &w, &[0.1, -0.2]).unwrap(), &[1.5, 0.5], &[0.3, -0.4], LAYER_NORM_EPS)
                .unwrap(),
        );
        assert_eq!(out, composed);
    }

    #[test]
    fn k_to_k_block_preserves_shape() {
        let mut r = rng::seeded(3, 0);
        let p = ConvBlockParams::init("b", 4, 4, &mut r).unwrap();
        let x = random(shape(2, 3, 5, 4), 2);
        assert_eq!(conv_block_apply(&x, &p).unwrap().shape(), x.shape());
        assert!(conv_block_apply(&random(shape(1, 1, 1, 3), 2), &p).is_err());
    }

    #[test]
    fn cam_with_one_channel_reduces_to_value_times_input() {
        let mut r = rng::seeded(4, 0);
        let p = CamParams {
            query: ConvBlockParams::init("q", 1, 1, &mut r).unwrap(),
            key: ConvBlockParams::init("k", 1, 1, &mut r).unwrap(),
            value: ConvBlockParams::init("v", 1, 1, &mut r).unwrap(),
        };
        let x = random(shape(1, 3, 3, 1), 5);
        let (f_ch, attn) = cam_apply(&x, &p).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        let v = conv_block_apply(&x, &p.value).unwrap();
        let expect = crate::tensor::elementwise_mul(&v, &x).unwrap();
        assert_eq!(f_ch, expect);
    }

    #[test]
    fn sam_with_one_position_projects_the_value() {
        let p = gsam_init(4, 11).unwrap();
        let x = random(shape(1, 1, 1, 4), 6);
        let (f_sp, attn) = sam_apply(&x, &p.sam).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        let v = conv_block_apply(&x, &p.sam.value).unwrap();
        let projected = conv_block_apply(&v, &p.sam.out).unwrap();
        let expect = crate::tensor::elementwise_mul(&projected, &x).unwrap();
        assert!(f_sp.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn attention_matrices_are_row_stochastic() {
        let p = gsam_init(6, 12).unwrap();
        let x = random(shape(2, 3, 2, 6), 7);
        let out = p.forward(&x).unwrap();
        assert_eq!(out.channel_attention.shape(), shape(2, 1, 6, 6));
        assert_eq!(out.spatial_attention.shape(), shape(2, 1, 6, 6));
        for attn in [&out.channel_attention, &out.spatial_attention] {
            for row in attn.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_identity_and_zero() {
        let mut p = gsam_init(4, 13).unwrap();
        let x = random(shape(2, 2, 3, 4), 8);
        assert_eq!(p.forward(&x).unwrap().output, x);

        p.fusion = FusionWeights::new("gsam.fusion", 0.0, 0.0, 0.0);
        let out = p.forward(&x).unwrap().output;
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_validates_k() {
        assert_eq!(gsam_init(8, 5).unwrap(), gsam_init(8, 5).unwrap());
        assert_ne!(gsam_init(8, 5).unwrap(), gsam_init(8, 6).unwrap());
        let p = gsam_init(8, 5).unwrap();
        assert_eq!(p.fusion.values(), [0.0, 0.0, 1.0]);
        assert_eq!(p.sam.query.k_out(), 4);
        assert_eq!(p.sam.out.k_out(), 8);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(p.cam.query.weight.value().data().iter().all(|v| v.abs() <= limit));
        assert!(gsam_init(3, 0).is_err());
        assert!(gsam_init(0, 0).is_err());
    }

    #[test]
    fn channel_mismatches_are_errors() {
        let p = gsam_init(4, 1).unwrap();
        assert!(p.forward(&random(shape(1, 2, 2, 6), 1)).is_err());
        assert!(sam_apply(&random(shape(1, 2, 2, 3), 1), &p.sam).is_err());
    }

    #[test]
    fn parameter_ids_are_unique() {
        let ids = gsam_init(4, 1).unwrap().parameter_ids();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert_eq!(ids.len(), 7 * 4 + 3);
    }

    #[test]
    fn diagnostics_round_trip() {
        let p = gsam_init(4, 1).unwrap();
        let out = p.forward(&random(shape(2, 2, 2, 4), 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_diagnostics(dir.path()).unwrap();
        let ch = crate::tensor::read_t4b(dir.path().join("channel_attention.t4b")).unwrap();
        assert_eq!(ch, out.channel_attention);
        let sp = crate::tensor::read_t4b(dir.path().join("spatial_attention.t4b")).unwrap();
        assert_eq!(sp.shape(), shape(2, 1, 4, 4));
    }
}
