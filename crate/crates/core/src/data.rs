//! Synthetic optic disc/cup images, the dataset manifest, stratified splits
//! and loading.
//!
//! Class is encoded by the cup-to-disc ratio: a filled disc with a
//! concentric brighter cup on a dark background, plus Gaussian noise.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::rng;
use crate::tensor::{read_t4b, write_t4b, Shape4, Tensor};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,label,split";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_hw: usize,
    pub per_class: usize,
    /// Cup-to-disc ratio range for normal, early and advanced.
    pub cdr_ranges: [(f64, f64); NUM_CLASSES],
    /// Disc radius as a fraction of the image size.
    pub disc_radius: (f64, f64),
    /// Maximum centre offset as a fraction of the image size.
    pub center_jitter: f64,
    pub noise_std: f64,
    pub background: f64,
    pub disc: f64,
    pub cup: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_hw: 64,
            per_class: 200,
            cdr_ranges: [(0.20, 0.40), (0.45, 0.60), (0.65, 0.85)],
            disc_radius: (0.15, 0.25),
            center_jitter: 0.10,
            noise_std: 0.05,
            background: 0.2,
            disc: 0.6,
            cup: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_hw == 0 || self.per_class == 0 {
            return Err(Error::invalid("image size and samples per class must be positive"));
        }
        for (i, &(lo, hi)) in self.cdr_ranges.iter().enumerate() {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return Err(Error::invalid(format!("CDR range {i} ({lo}, {hi}) must lie inside (0, 1)")));
            }
            if i > 0 && self.cdr_ranges[i - 1].1 >= lo {
                return Err(Error::invalid("CDR ranges must be disjoint and increasing"));
            }
        }
        let (r_lo, r_hi) = self.disc_radius;
        if !(0.0 < r_lo && r_lo <= r_hi && r_hi + self.center_jitter <= 0.5) {
            return Err(Error::invalid("disc radius range plus jitter must keep the disc inside the image"));
        }
        if !(self.center_jitter >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::invalid("jitter and noise must be nonnegative"));
        }
        for v in [self.background, self.disc, self.cup] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.per_class * NUM_CLASSES
    }
}

/// Ground-truth geometry of one rendered sample, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscGeometry {
    pub cdr: f64,
    pub disc_radius: f64,
    pub center: (f64, f64),
}

impl DiscGeometry {
    pub fn cup_radius(&self) -> f64 {
        self.cdr * self.disc_radius
    }
}

/// Samples are class-major: indices `c·per_class .. (c+1)·per_class` have label `c`.
pub fn sample_label(cfg: &SyntheticConfig, idx: usize) -> usize {
    idx / cfg.per_class
}

/// Renders sample `idx` as a `[1,hw,hw,1]` image. Pixel `(y, x)` belongs to a
/// circle when its centre `(y+½, x+½)` lies within the radius.
pub fn render_sample(cfg: &SyntheticConfig, idx: usize) -> Result<(Tensor, usize, DiscGeometry)> {
    let label = sample_label(cfg, idx);
    if label >= NUM_CLASSES {
        return Err(Error::invalid(format!("sample index {idx} out of range")));
    }
    let mut r = rng::seeded(cfg.seed, rng::stream::SAMPLE_BASE + idx as u64);
    let hw = cfg.image_hw as f64;
    let (lo, hi) = cfg.cdr_ranges[label];
    let cdr = r.random_range(lo..=hi);
    let disc_radius = r.random_range(cfg.disc_radius.0..=cfg.disc_radius.1) * hw;
    let j = cfg.center_jitter * hw;
    let cy = hw / 2.0 + r.random_range(-j..=j);
    let cx = hw / 2.0 + r.random_range(-j..=j);
    let geom = DiscGeometry {
        cdr,
        disc_radius,
        center: (cy, cx),
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let (d2, c2) = (disc_radius * disc_radius, geom.cup_radius().powi(2));
    let img = Tensor::from_fn(Shape4::new(1, cfg.image_hw, cfg.image_hw, 1)?, |_, y, x, _| {
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        let dist2 = dy * dy + dx * dx;
        let base = if dist2 <= c2 {
            cfg.cup
        } else if dist2 <= d2 {
            cfg.disc
        } else {
            cfg.background
        };
        (base + noise.sample(&mut r)).clamp(0.0, 1.0)
    });
    Ok((img, label, geom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split '{s}' (expected train, val or test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.path, r.label, r.split));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::format(origin, format!("expected header '{MANIFEST_HEADER}'")));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            let [path, label, split] = fields[..] else {
                return Err(Error::format(origin, format!("line {lineno}: expected 3 fields")));
            };
            let label: usize = label
                .parse()
                .ok()
                .filter(|&l| l < NUM_CLASSES)
                .ok_or_else(|| Error::format(origin, format!("line {lineno}: label '{label}' out of range")))?;
            let split: Split = split
                .parse()
                .map_err(|e: Error| Error::format(origin, format!("line {lineno}: {e}")))?;
            if !seen.insert(path.to_string()) {
                return Err(Error::format(origin, format!("line {lineno}: duplicate path '{path}'")));
            }
            rows.push(ManifestRow {
                path: path.to_string(),
                label,
                split,
            });
        }
        Ok(DatasetManifest { rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetManifest::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// `counts[split][label]`
    pub fn counts(&self) -> [[usize; NUM_CLASSES]; 3] {
        let mut c = [[0; NUM_CLASSES]; 3];
        for r in &self.rows {
            c[r.split as usize][r.label] += 1;
        }
        c
    }
}

/// Renders every sample into `out_dir/images/` and writes `out_dir/manifest.csv`
/// with every row in the train split; see [`split_manifest`].
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(cfg.total());
    for idx in 0..cfg.total() {
        let (img, label, _) = render_sample(cfg, idx)?;
        let rel = format!("images/s{idx:05}.t4b");
        write_t4b(out_dir.join(&rel), &img)?;
        rows.push(ManifestRow {
            path: rel,
            label,
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest { rows };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Split sizes for `n` items by largest-remainder rounding; remainder ties go
/// to the earlier split.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Stratified split: each class is shuffled with the seeded split stream and
/// cut into train/val/test by `fractions`.
pub fn split_manifest(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let used = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut out = manifest.clone();
    let mut r = rng::seeded(seed, rng::stream::SPLIT);
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..out.rows.len()).filter(|&i| out.rows[i].label == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < used {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, fewer than the {used} requested splits",
                members.len()
            )));
        }
        members.shuffle(&mut r);
        let sizes = split_sizes(members.len(), fractions);
        let mut it = members.into_iter();
        for (split, size) in Split::ALL.into_iter().zip(sizes) {
            for i in it.by_ref().take(size) {
                out.rows[i].split = split;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1,h,w,1]`, values in [0, 1].
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Nearest-neighbour resize of a `[1,h,w,c]` image to `[1,hw,hw,c]`.
pub fn resize_nearest(img: &Tensor, hw: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.h() == hw && s.w() == hw {
        return Ok(img.clone());
    }
    let target = Shape4::new(s.n(), hw, hw, s.k())?;
    Ok(Tensor::from_fn(target, |n, y, x, c| {
        img.get(n, y * s.h() / hw, x * s.w() / hw, c)
    }))
}

/// Loads every manifest row, resizing to `input_hw` if needed.
pub fn load_dataset(manifest_path: impl AsRef<Path>, input_hw: usize) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
    let mut ds = Dataset::default();
    for row in &manifest.rows {
        let path = base.join(&row.path);
        let img = read_t4b(&path)?;
        let s = img.shape();
        if s.n() != 1 || s.k() != 1 {
            return Err(Error::format(&path, format!("expected a [1,h,w,1] image, got {s}")));
        }
        let sample = Sample {
            image: resize_nearest(&img, input_hw)?,
            label: row.label,
        };
        match row.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}
