//! Run settings: library defaults, then a `key = value` config file, then
//! command-line flags, all funnelled through [`RunConfig::set`].

use std::fs;
use std::path::{Path, PathBuf};

use gsnet_core::data::{Split, SyntheticConfig};
use gsnet_core::network::Variant;
use gsnet_core::training::TrainConfig;

/// Error in what the user asked for; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const KEYS: &[&str] = &[
    "out",
    "data",
    "checkpoint",
    "seed",
    "per_class",
    "image_hw",
    "noise_std",
    "fractions",
    "variant",
    "epochs",
    "lr",
    "batch_size",
    "augment",
    "input_hw",
    "split",
    "tol",
    "samples",
    "seeds",
];

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.49, 0.21, 0.30];
pub const DEFAULT_SEEDS: [u64; 3] = [7, 8, 9];
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub per_class: usize,
    pub image_hw: usize,
    pub noise_std: f64,
    pub fractions: [f64; 3],
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub input_hw: usize,
    pub split: Split,
    pub tol: f64,
    /// Elements checked per parameter; 0 checks all of them.
    pub samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SyntheticConfig::default();
        RunConfig {
            out: None,
            data: None,
            checkpoint: None,
            seed: DEFAULT_SEED,
            per_class: synth.per_class,
            image_hw: synth.image_hw,
            noise_std: synth.noise_std,
            fractions: DEFAULT_FRACTIONS,
            variant: Variant::FullGsam,
            epochs: train.epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            augment: train.augment,
            input_hw: train.input_hw,
            split: Split::Test,
            tol: DEFAULT_TOL,
            samples: 0,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value '{value}' for '{key}'")))
}

fn positive(key: &str, value: &str) -> Result<usize, UsageError> {
    match parse::<usize>(key, value)? {
        0 => Err(UsageError(format!("'{key}' must be at least 1"))),
        n => Ok(n),
    }
}

fn positive_f64(key: &str, value: &str) -> Result<f64, UsageError> {
    let v: f64 = parse(key, value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(UsageError(format!("'{key}' must be a positive number, got {value}")))
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let value = value.trim();
        match key {
            "out" => self.out = Some(PathBuf::from(value)),
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "per_class" => self.per_class = positive(key, value)?,
            "image_hw" => self.image_hw = positive(key, value)?,
            "noise_std" => {
                let v: f64 = parse(key, value)?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(UsageError(format!("'{key}' must be nonnegative")));
                }
                self.noise_std = v;
            }
            "fractions" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_, _>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(UsageError(format!("'{key}' needs three comma-separated values")));
                };
                if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
                    return Err(UsageError(format!("'{key}' must be in [0,1] and sum to 1, got {value}")));
                }
                self.fractions = [a, b, c];
            }
            "variant" => self.variant = value.parse().map_err(|e| UsageError(format!("{e}")))?,
            "epochs" => self.epochs = positive(key, value)?,
            "lr" => self.lr = positive_f64(key, value)?,
            "batch_size" => self.batch_size = positive(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "input_hw" => self.input_hw = positive(key, value)?,
            "split" => self.split = value.parse().map_err(|e| UsageError(format!("{e}")))?,
            "tol" => self.tol = positive_f64(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "seeds" => {
                let seeds: Vec<u64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_, _>>()?;
                if seeds.is_empty() {
                    return Err(UsageError(format!("'{key}' needs at least one seed")));
                }
                self.seeds = seeds;
            }
            _ => {
                return Err(UsageError(format!(
                    "unknown setting '{key}' (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a config file: `key = value` lines, `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), UsageError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| UsageError(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, UsageError> {
        self.out
            .as_deref()
            .ok_or_else(|| UsageError("an output directory is required (--out)".into()))
    }

    /// The manifest file named by `data`, which may be the file itself or
    /// the dataset directory containing it.
    pub fn manifest_path(&self) -> Result<PathBuf, UsageError> {
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| UsageError("a dataset is required (--data)".into()))?;
        Ok(if data.is_dir() {
            data.join(gsnet_core::data::MANIFEST_FILE)
        } else {
            data.to_path_buf()
        })
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            image_hw: self.image_hw,
            per_class: self.per_class,
            noise_std: self.noise_std,
            seed: self.seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            augment: self.augment,
            input_hw: self.input_hw,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut c = RunConfig::default();
        c.apply_text("# experiment\nepochs = 3\nlr=0.01  # faster\n\nvariant = baseline\n").unwrap();
        assert_eq!((c.epochs, c.lr, c.variant), (3, 0.01, Variant::Baseline));
        c.set("epochs", "5").unwrap();
        assert_eq!(c.epochs, 5);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("epoch = 3\n").is_err());
        assert!(c.apply_text("epochs 3\n").is_err());
        assert!(c.set("per_class", "0").is_err());
        assert!(c.set("split", "bogus").is_err());
        assert!(c.set("variant", "bogus").is_err());
        assert!(c.set("fractions", "0.5,0.5,0.5").is_err());
        assert!(c.set("augment", "maybe").is_err());
        c.set("fractions", "0.6, 0.2, 0.2").unwrap();
        c.set("seeds", "1,2").unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("out", "o"),
            ("data", "d"),
            ("checkpoint", "c"),
            ("seed", "1"),
            ("per_class", "2"),
            ("image_hw", "32"),
            ("noise_std", "0.1"),
            ("fractions", "1,0,0"),
            ("variant", "sam_only"),
            ("epochs", "1"),
            ("lr", "0.1"),
            ("batch_size", "4"),
            ("augment", "false"),
            ("input_hw", "32"),
            ("split", "val"),
            ("tol", "1e-3"),
            ("samples", "8"),
            ("seeds", "3"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        let mut c = RunConfig::default();
        for (k, v) in samples {
            assert!(KEYS.contains(&k));
            c.set(k, v).unwrap();
        }
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.lr, c.batch_size), (50, 0.005, 16));
        assert_eq!(c.fractions, [0.49, 0.21, 0.30]);
    }
}
