//! Loss, Adam, augmentation and the epoch loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::RngExt;

use crate::autodiff::{Gradients, Graph, ParamTree};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::network::{gsnet_forward, predict, BackboneConfig, Checkpoint, NetworkParams, Variant, NUM_CLASSES};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub input_hw: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 0.005,
            batch_size: 16,
            seed: 0,
            augment: true,
            input_hw: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.input_hw == 0 {
            return Err(Error::invalid("input size must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("Adam needs betas in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    /// Default backbone resized to this config's input size.
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_hw: self.input_hw,
            ..BackboneConfig::default()
        }
    }
}

/// Mean `−log softmax(z)[label]` over `[n,1,1,c]` logits, via log-sum-exp.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.input(logits.clone());
    let loss = g.cross_entropy(z, labels)?;
    Ok(g.value(loss).data()[0])
}

/// First and second moment accumulators keyed by parameter id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new<T: ParamTree + ?Sized>(params: &T) -> Self {
        let mut moments = BTreeMap::new();
        params.visit(&mut |p| {
            let n = p.value().len();
            moments.insert(p.id().to_string(), (vec![0.0; n], vec![0.0; n]));
        });
        AdamState { t: 0, moments }
    }

    pub fn moments(&self, id: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` see a zero
/// gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: ParamTree + ?Sized>(
    params: &mut T,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {id}")));
        }
    }
    let mut mismatch = None;
    params.visit(&mut |p| {
        let shape_ok = grads.get(p.id()).is_none_or(|g| g.shape() == p.value().shape());
        let state_ok = state.moments.get(p.id()).is_none_or(|(m, _)| m.len() == p.value().len());
        if mismatch.is_none() && !(shape_ok && state_ok) {
            mismatch = Some(p.id().to_string());
        }
    });
    if let Some(id) = mismatch {
        return Err(Error::shape(format!("gradient or optimizer state shape mismatch for {id}")));
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let moments = &mut state.moments;
    params.visit_mut(&mut |p| {
        let n = p.value().len();
        let (m, v) = moments
            .entry(p.id().to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let g = grads.get(p.id()).map(Tensor::data);
        let w = p.value_mut().data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}

/// One draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        scale: 1.0,
        hflip: false,
        vflip: false,
    };

    pub const MAX_ANGLE_DEG: f64 = 15.0;
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

    pub fn sample(rng: &mut Rng) -> Self {
        AugmentParams {
            angle_deg: rng.random_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG),
            scale: rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
        }
    }
}

/// Rotation, then isotropic scaling about the centre, then the flips;
/// resampled by inverse mapping with nearest neighbour and zero fill.
pub fn augment_with(img: &Tensor, a: &AugmentParams) -> Tensor {
    let s = img.shape();
    let (h, w) = (s.h(), s.w());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = a.angle_deg.to_radians().sin_cos();
    Tensor::from_fn(s, |n, y, x, c| {
        let y = if a.vflip { h - 1 - y } else { y };
        let x = if a.hflip { w - 1 - x } else { x };
        let dy = (y as f64 - cy) / a.scale;
        let dx = (x as f64 - cx) / a.scale;
        // Inverse rotation.
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            0.0
        } else {
            img.get(n, ry as usize, rx as usize, c)
        }
    })
}

pub fn augment(img: &Tensor, rng: &mut Rng) -> Tensor {
    augment_with(img, &AugmentParams::sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    (1..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
}

/// One pass over `train` in a seeded shuffled order; returns the sample-
/// weighted mean loss and the accuracy of the pre-update predictions.
pub fn train_epoch(
    params: &mut NetworkParams,
    variant: Variant,
    train: &[Sample],
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let base = rng::stream::EPOCH_BASE + 2 * epoch as u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::seeded(cfg.seed, base));
    let mut aug_rng = rng::seeded(cfg.seed, base + 1);

    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let images: Vec<Tensor> = batch
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&train[i].image, &mut aug_rng)
                } else {
                    train[i].image.clone()
                }
            })
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();

        let mut g = Graph::new();
        let x = g.input(Tensor::stack(&images)?);
        let out = gsnet_forward(&mut g, x, params, variant)?;
        let loss = g.cross_entropy(out.logits, &labels)?;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        loss_sum += loss_value * batch.len() as f64;
        let logits = g.value(out.logits).data();
        correct += labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]) == l)
            .count();
        let grads = g.backward(loss)?;
        drop(g);
        adam_step(params, &grads, state, cfg)?;
    }
    Ok(EpochStats {
        loss: loss_sum / train.len() as f64,
        accuracy: correct as f64 / train.len() as f64,
    })
}

const EVAL_BATCH: usize = 32;

/// Softmax probabilities for every sample, in order.
pub fn predict_probs(params: &NetworkParams, variant: Variant, samples: &[Sample]) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let logits = params.logits(&Tensor::stack(&images)?, variant)?;
        for row in logits.data().chunks(NUM_CLASSES) {
            out.push(predict(row)?.probs);
        }
    }
    Ok(out)
}

pub fn accuracy_on(params: &NetworkParams, variant: Variant, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let probs = predict_probs(params, variant, samples)?;
    let correct = probs.iter().zip(samples).filter(|(p, s)| argmax(&p[..]) == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

pub fn evaluate(params: &NetworkParams, variant: Variant, samples: &[Sample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let probs = predict_probs(params, variant, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    EvalResult::from_predictions(&probs, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.train_acc, r.val_acc);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub best_val_acc: f64,
    pub log: TrainingLog,
}

/// Trains from the seeded default initialization for `variant`.
pub fn fit(cfg: &TrainConfig, data: &Dataset, variant: Variant) -> Result<FitResult> {
    let params = NetworkParams::for_variant(cfg.backbone(), variant, cfg.seed)?;
    fit_from(cfg, data, variant, params, |_| {})
}

/// Trains `params` for `cfg.epochs`, keeping the checkpoint with the best
/// validation accuracy (earliest epoch on ties). `on_epoch` sees each log row.
pub fn fit_from(
    cfg: &TrainConfig,
    data: &Dataset,
    variant: Variant,
    mut params: NetworkParams,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training and validation splits must be nonempty"));
    }
    if variant.uses_gsam() != params.gsam.is_some() {
        return Err(Error::invalid(format!("parameters do not match variant {variant}")));
    }
    let mut state = AdamState::new(&params);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(&mut params, variant, &data.train, cfg, &mut state, epoch)?;
        let val_acc = accuracy_on(&params, variant, &data.val)?;
        let row = EpochLog {
            epoch,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc,
        };
        on_epoch(&row);
        rows.push(row);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }
    let (best_val_acc, epoch, params) = best.expect("at least one epoch");
    Ok(FitResult {
        best: Checkpoint {
            variant,
            seed: cfg.seed,
            epoch,
            params,
        },
        best_val_acc,
        log: TrainingLog { rows },
    })
}

/// Images `[n,hw,hw,1]` stacked from samples, for callers that batch by hand.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}
