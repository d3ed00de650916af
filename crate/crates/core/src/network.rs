//! GS-Net assembly: backbone → (optional) GSAM → GAP → 3-way linear classifier,
//! plus the ablation variants and the checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, ParamTree, Parameter, Var};
use crate::error::{Error, Result};
use crate::gsam::{glorot, gsam_forward, gsam_init, Branches, GsamGraphOutput, GsamParams};
use crate::rng;
use crate::tensor::{read_t4b, write_t4b, Shape4, Tensor, LAYER_NORM_EPS};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of each conv3x3 → layer norm → swish → maxpool stage.
    /// The norm runs over the whole sample rather than per position: after a
    /// one-channel input a per-position channel norm maps every flat region
    /// to the same vector, whatever its intensity.
    pub stage_channels: Vec<usize>,
    pub input_hw: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 64],
            input_hw: 64,
            input_channels: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let Some(&last) = self.stage_channels.last() else {
            return Err(Error::invalid("backbone needs at least one stage"));
        };
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if last % 2 != 0 {
            return Err(Error::invalid(format!(
                "final backbone channel count must be even for GSAM, got {last}"
            )));
        }
        let stride = 1usize
            .checked_shl(self.stage_channels.len() as u32)
            .ok_or_else(|| Error::invalid("too many stages"))?;
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(stride) {
            return Err(Error::invalid(format!(
                "input size {} must be a positive multiple of {stride} for {} stages",
                self.input_hw,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial extent of the backbone feature map.
    pub fn feature_hw(&self) -> usize {
        self.input_hw >> self.stage_channels.len()
    }

    /// Channel count K of the backbone feature map.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    CamOnly,
    SamOnly,
    FullGsam,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::CamOnly,
        Variant::SamOnly,
        Variant::FullGsam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::CamOnly => "cam_only",
            Variant::SamOnly => "sam_only",
            Variant::FullGsam => "full_gsam",
        }
    }

    /// Row label for the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::CamOnly => "Baseline + CAM",
            Variant::SamOnly => "Baseline + SAM",
            Variant::FullGsam => "Baseline + GSAM",
        }
    }

    pub fn uses_gsam(self) -> bool {
        self != Variant::Baseline
    }

    fn branches(self) -> Branches {
        Branches {
            channel: matches!(self, Variant::CamOnly | Variant::FullGsam),
            spatial: matches!(self, Variant::SamOnly | Variant::FullGsam),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant '{s}' (expected baseline, cam_only, sam_only or full_gsam)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `[3,3,k_in,k_out]`
    pub conv_weight: Parameter,
    pub conv_bias: Parameter,
    pub norm_gamma: Parameter,
    pub norm_beta: Parameter,
}

impl ParamTree for StageParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.conv_weight);
        f(&self.conv_bias);
        f(&self.norm_gamma);
        f(&self.norm_beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.conv_weight);
        f(&mut self.conv_bias);
        f(&mut self.norm_gamma);
        f(&mut self.norm_beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `[1,1,K,3]`
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ParamTree for ClassifierParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: BackboneConfig,
    pub backbone: Vec<StageParams>,
    pub gsam: Option<GsamParams>,
    pub classifier: ClassifierParams,
}

impl ParamTree for NetworkParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.backbone.visit(f);
        self.gsam.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.backbone.visit_mut(f);
        self.gsam.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

impl NetworkParams {
    /// Seeded initialization. Backbone, GSAM and classifier draw from
    /// separate streams, so networks with and without GSAM built from the
    /// same seed share their backbone and classifier weights.
    pub fn init(config: BackboneConfig, with_gsam: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, rng::stream::BACKBONE_INIT);
        let mut backbone = Vec::with_capacity(config.stage_channels.len());
        let mut k_in = config.input_channels;
        for (i, &k_out) in config.stage_channels.iter().enumerate() {
            let prefix = format!("backbone.stage{i}");
            let vec_shape = Shape4::new(1, 1, 1, k_out)?;
            let w = glorot(&mut rng, Shape4::new(3, 3, k_in, k_out)?, 9 * k_in, 9 * k_out);
            backbone.push(StageParams {
                conv_weight: Parameter::new(format!("{prefix}.conv.weight"), w),
                conv_bias: Parameter::new(format!("{prefix}.conv.bias"), Tensor::zeros(vec_shape)),
                norm_gamma: Parameter::new(format!("{prefix}.norm.gamma"), Tensor::full(vec_shape, 1.0)),
                norm_beta: Parameter::new(format!("{prefix}.norm.beta"), Tensor::zeros(vec_shape)),
            });
            k_in = k_out;
        }
        let k = config.feature_channels();
        let gsam = if with_gsam { Some(gsam_init(k, seed)?) } else { None };
        let mut rng = rng::seeded(seed, rng::stream::CLASSIFIER_INIT);
        let classifier = ClassifierParams {
            weight: Parameter::new(
                "classifier.weight",
                glorot(&mut rng, Shape4::new(1, 1, k, NUM_CLASSES)?, k, NUM_CLASSES),
            ),
            bias: Parameter::new("classifier.bias", Tensor::zeros(Shape4::new(1, 1, 1, NUM_CLASSES)?)),
        };
        Ok(NetworkParams {
            config,
            backbone,
            gsam,
            classifier,
        })
    }

    pub fn for_variant(config: BackboneConfig, variant: Variant, seed: u64) -> Result<Self> {
        NetworkParams::init(config, variant.uses_gsam(), seed)
    }

    /// Copy with the attention module removed.
    pub fn without_gsam(&self) -> Self {
        NetworkParams {
            gsam: None,
            ..self.clone()
        }
    }

    /// Raw `[n,1,1,3]` logits for a batch of images.
    pub fn logits(&self, images: &Tensor, variant: Variant) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = gsnet_forward(&mut g, x, self, variant)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Feature map `F_I` from the last backbone stage.
pub fn backbone_forward(g: &mut Graph, img: Var, p: &NetworkParams) -> Result<Var> {
    let s = g.value(img).shape();
    let cfg = &p.config;
    if s.h() != cfg.input_hw || s.w() != cfg.input_hw || s.k() != cfg.input_channels {
        return Err(Error::shape(format!(
            "backbone expects [n,{hw},{hw},{c}] images, got {s}",
            hw = cfg.input_hw,
            c = cfg.input_channels
        )));
    }
    let mut x = img;
    for stage in &p.backbone {
        let (w, b) = (g.param(&stage.conv_weight), g.param(&stage.conv_bias));
        x = g.conv3x3(x, w, b, 1)?;
        let (gamma, beta) = (g.param(&stage.norm_gamma), g.param(&stage.norm_beta));
        x = g.sample_layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
        x = g.swish(x)?;
        x = g.maxpool2x2(x)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[n,1,1,3]`, pre-softmax.
    pub logits: Var,
    pub features: Var,
    pub gsam: Option<GsamGraphOutput>,
}

pub fn gsnet_forward(g: &mut Graph, img: Var, p: &NetworkParams, variant: Variant) -> Result<ForwardOutput> {
    let features = backbone_forward(g, img, p)?;
    let (attended, gsam_out) = if variant.uses_gsam() {
        let gp = p.gsam.as_ref().ok_or_else(|| {
            Error::invalid(format!("variant {variant} needs GSAM parameters"))
        })?;
        let out = gsam_forward(g, features, gp, variant.branches())?;
        (out.output, Some(out))
    } else {
        (features, None)
    };
    let pooled = g.global_avg_pool(attended)?;
    let (w, b) = (g.param(&p.classifier.weight), g.param(&p.classifier.bias));
    let logits = g.conv1x1(pooled, w, b)?;
    Ok(ForwardOutput {
        logits,
        features,
        gsam: gsam_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: [f64; NUM_CLASSES],
}

/// Softmax over three logits; ties go to the lowest class index.
pub fn predict(logits: &[f64]) -> Result<Prediction> {
    if logits.len() != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; NUM_CLASSES];
    for (p, z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
    }
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let mut class = 0;
    for c in 1..NUM_CLASSES {
        if logits[c] > logits[class] {
            class = c;
        }
    }
    Ok(Prediction { class, probs })
}

/// Trained network plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    pub params: NetworkParams,
}

const CHECKPOINT_MANIFEST: &str = "manifest.txt";

impl Checkpoint {
    /// Writes `manifest.txt` (key=value lines) and one `<param id>.t4b` per
    /// parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = &self.params.config;
        let channels: Vec<String> = cfg.stage_channels.iter().map(|c| c.to_string()).collect();
        let manifest = format!(
            "variant={}\nstage_channels={}\ninput_hw={}\ninput_channels={}\nk={}\nseed={}\nepoch={}\n",
            self.variant,
            channels.join(","),
            cfg.input_hw,
            cfg.input_channels,
            cfg.feature_channels(),
            self.seed,
            self.epoch
        );
        let path = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let mut result = Ok(());
        self.params.visit(&mut |p| {
            if result.is_ok() {
                result = write_t4b(dir.join(format!("{}.t4b", p.id())), p.value());
            }
        });
        result
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("malformed line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::format(&path, format!("missing key '{key}'")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::format(&path, format!("bad value for '{key}'")))
        };
        for key in kv.keys() {
            if !matches!(
                key.as_str(),
                "variant" | "stage_channels" | "input_hw" | "input_channels" | "k" | "seed" | "epoch"
            ) {
                return Err(Error::format(&path, format!("unknown key '{key}'")));
            }
        }
        let variant: Variant = get("variant")?.parse()?;
        let stage_channels = get("stage_channels")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(&path, "bad value for 'stage_channels'"))?;
        let config = BackboneConfig {
            stage_channels,
            input_hw: num("input_hw")?,
            input_channels: num("input_channels")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if num("k")? != config.feature_channels() {
            return Err(Error::format(&path, "k does not match the last stage width"));
        }
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::format(&path, "bad value for 'seed'"))?;
        let epoch = num("epoch")?;

        let mut params = NetworkParams::init(config, variant.uses_gsam(), seed)?;
        let mut result = Ok(());
        params.visit_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let file = dir.join(format!("{}.t4b", p.id()));
            result = read_t4b(&file).and_then(|t| {
                p.set_value(t)
                    .map_err(|e| Error::format(&file, format!("checkpoint/config mismatch: {e}")))
            });
        });
        result?;
        Ok(Checkpoint {
            variant,
            seed,
            epoch,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_images(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed, 0);
        Tensor::from_fn(Shape4::new(n, hw, hw, 1).unwrap(), |_, _, _, _| r.random_range(0.0..1.0))
    }

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![4, 8],
            input_hw: 8,
            input_channels: 1,
        }
    }

    #[test]
    fn backbone_shape_arithmetic() {
        let p = NetworkParams::init(BackboneConfig::default(), false, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_images(1, 64, 1));
        let f = backbone_forward(&mut g, x, &p).unwrap();
        assert_eq!(g.value(f).shape(), Shape4::new(1, 4, 4, 64).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let p = NetworkParams::init(small_config(), false, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape4::new(2, 8, 8, 1).unwrap()));
        let f = backbone_forward(&mut g, x, &p).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let imgs = random_images(3, 8, 3);
        let a = NetworkParams::init(small_config(), true, 4).unwrap();
        let b = NetworkParams::init(small_config(), true, 4).unwrap();
        assert_eq!(
            a.logits(&imgs, Variant::FullGsam).unwrap(),
            b.logits(&imgs, Variant::FullGsam).unwrap()
        );
    }

    #[test]
    fn all_variants_agree_at_init() {
        let imgs = random_images(3, 8, 5);
        let full = NetworkParams::init(small_config(), true, 6).unwrap();
        let base = full.without_gsam();
        let reference = base.logits(&imgs, Variant::Baseline).unwrap();
        assert_eq!(reference.shape(), Shape4::new(3, 1, 1, 3).unwrap());
        for v in [Variant::CamOnly, Variant::SamOnly, Variant::FullGsam] {
            assert_eq!(full.logits(&imgs, v).unwrap(), reference, "{v}");
        }
        assert_eq!(NetworkParams::init(small_config(), false, 6).unwrap(), base);
    }

    #[test]
    fn non_baseline_needs_gsam() {
        let p = NetworkParams::init(small_config(), false, 1).unwrap();
        assert!(p.logits(&random_images(1, 8, 1), Variant::CamOnly).is_err());
        assert!(p.logits(&random_images(1, 16, 1), Variant::Baseline).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.stage_channels = vec![4, 7];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.input_hw = 10;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
        assert_eq!(BackboneConfig::default().feature_hw(), 4);
    }

    #[test]
    fn predict_examples() {
        let p = predict(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.class, 0);
        assert!(p.probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let p = predict(&[10.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.class, 0);
        assert!(p.probs[0] > 0.99);

        let shifted = predict(&[10.0 + 123.0, 123.0, 123.0]).unwrap();
        for (a, b) in p.probs.iter().zip(shifted.probs) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(predict(&[0.0, 2.0, 2.0]).unwrap().class, 1);
        assert!(predict(&[f64::NAN, 0.0, 0.0]).is_err());
        assert!(predict(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            variant: Variant::SamOnly,
            seed: 9,
            epoch: 3,
            params: NetworkParams::init(small_config(), true, 9).unwrap(),
        };
        ckpt.save(dir.path()).unwrap();
        assert!(dir.path().join("gsam.fusion.w1.t4b").exists());
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ckpt);

        fs::remove_file(dir.path().join("classifier.bias.t4b")).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("classifier.bias.t4b"), "{err}");
    }

    #[test]
    fn checkpoint_detects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            variant: Variant::Baseline,
            seed: 1,
            epoch: 0,
            params: NetworkParams::init(small_config(), false, 1).unwrap(),
        };
        ckpt.save(dir.path()).unwrap();
        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("stage_channels=4,8", "stage_channels=6,8")).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{err}");
    }
}
