//! Synthetic classification tasks, out-of-distribution generators and the
//! dataset file format.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::io;
use crate::tensor::Tensor;

const DATASET_VERSION: u32 = 1;

/// Generator description; together with a seed it fully determines a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    TwoMoons {
        n: usize,
        noise_std: f64,
    },
    Blobs {
        n: usize,
        classes: usize,
        spread: f64,
    },
    /// Smooth oriented gratings and checkerboards, one texture family per class.
    PatternImages {
        n: usize,
        classes: usize,
        size: usize,
        #[serde(default = "one")]
        channels: usize,
    },
}

fn one() -> usize {
    1
}

impl DataSpec {
    pub fn n(&self) -> usize {
        match *self {
            DataSpec::TwoMoons { n, .. } | DataSpec::Blobs { n, .. } | DataSpec::PatternImages { n, .. } => n,
        }
    }

    pub fn with_n(&self, n: usize) -> DataSpec {
        let mut s = self.clone();
        match &mut s {
            DataSpec::TwoMoons { n: m, .. }
            | DataSpec::Blobs { n: m, .. }
            | DataSpec::PatternImages { n: m, .. } => *m = n,
        }
        s
    }

    pub fn classes(&self) -> usize {
        match *self {
            DataSpec::TwoMoons { .. } => 2,
            DataSpec::Blobs { classes, .. } | DataSpec::PatternImages { classes, .. } => classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            DataSpec::TwoMoons { .. } | DataSpec::Blobs { .. } => vec![2],
            DataSpec::PatternImages { size, channels, .. } => vec![channels, size, size],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DataSpec::PatternImages { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSpec::TwoMoons { .. } => "two_moons",
            DataSpec::Blobs { .. } => "blobs",
            DataSpec::PatternImages { .. } => "pattern_images",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 || self.n() < k {
            return Err(invalid!("need n ≥ K ≥ 2, got n = {}, K = {k}", self.n()));
        }
        match *self {
            DataSpec::TwoMoons { noise_std, .. } if !(noise_std >= 0.0 && noise_std.is_finite()) => {
                Err(invalid!("noise_std must be finite and non-negative"))
            }
            DataSpec::Blobs { spread, .. } if !(spread >= 0.0 && spread.is_finite()) => {
                Err(invalid!("spread must be finite and non-negative"))
            }
            DataSpec::PatternImages { classes, size, channels, .. } => {
                if classes > PATTERN_FAMILIES {
                    Err(invalid!("pattern images support at most {PATTERN_FAMILIES} classes"))
                } else if size < 4 {
                    Err(invalid!("image size must be at least 4"))
                } else if channels != 1 && channels != 3 {
                    Err(invalid!("images have 1 or 3 channels, got {channels}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub spec: DataSpec,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, x: Tensor, y: Vec<usize>, classes: usize, spec: DataSpec, seed: u64) -> Result<Self> {
        if x.ndim() < 2 || x.shape()[0] != y.len() {
            return Err(shape_err!("{} labels for inputs {:?}", y.len(), x.shape()));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
            return Err(invalid!("label {bad} out of range for {classes} classes"));
        }
        Ok(DatasetSplit {
            name: name.into(),
            x,
            y,
            classes,
            spec,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    fn row_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// Inputs and labels of the given rows.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((select_rows(&self.x, idx)?, idx.iter().map(|&i| self.y[i]).collect()))
    }

    /// Per-coordinate valid range: `[0, 1]` for images, the observed
    /// bounding box otherwise.
    pub fn value_bounds(&self) -> Vec<(f64, f64)> {
        let d = self.row_len();
        if self.spec.is_image() {
            return vec![(0.0, 1.0); d];
        }
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for row in self.x.data().chunks(d) {
            for (bj, &v) in b.iter_mut().zip(row) {
                bj.0 = bj.0.min(v);
                bj.1 = bj.1.max(v);
            }
        }
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format_version": DATASET_VERSION,
            "name": self.name,
            "shape": self.x.shape(),
            "classes": self.classes,
            "spec": self.spec,
            "seed": self.seed,
        });
        let mut payload = Vec::with_capacity(self.x.len() * 8 + self.y.len() * 4);
        io::push_f64s(&mut payload, self.x.data());
        for &y in &self.y {
            let y = i32::try_from(y).map_err(|_| invalid!("label {y} does not fit in i32"))?;
            payload.extend_from_slice(&y.to_le_bytes());
        }
        io::write_atomic(path, &io::encode(io::DATASET_MAGIC, &header, &payload)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let (header, mut payload) = io::decode(io::DATASET_MAGIC, &bytes)?;
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            name: String,
            shape: Vec<usize>,
            classes: usize,
            spec: DataSpec,
            seed: u64,
        }
        let h: Header = serde_json::from_value(header)?;
        if h.format_version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} is not supported",
                h.format_version
            )));
        }
        let len: usize = h.shape.iter().product();
        let x = Tensor::new(h.shape.clone(), io::take_f64s(&mut payload, len)?)?;
        let y = io::take_i32s(&mut payload, h.shape[0])?
            .into_iter()
            .map(|v| usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}"))))
            .collect::<Result<Vec<_>>>()?;
        if !payload.is_empty() {
            return Err(Error::Format("trailing bytes after labels".into()));
        }
        DatasetSplit::new(h.name, x, y, h.classes, h.spec, h.seed)
    }
}

pub fn select_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if idx.is_empty() {
        return Err(invalid!("cannot select zero rows"));
    }
    let n = x.shape()[0];
    let d = x.len() / n;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= n {
            return Err(invalid!("row {i} out of range for {n} rows"));
        }
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Balanced labels (`i mod K`) in shuffled order.
fn balanced_labels(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| i % k).collect();
    y.shuffle(rng);
    y
}

pub fn generate(spec: &DataSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n();
    let y = balanced_labels(n, spec.classes(), &mut rng);
    let mut shape = vec![n];
    shape.extend(spec.input_shape());
    let x = match *spec {
        DataSpec::TwoMoons { noise_std, .. } => {
            let noise = Normal::new(0.0, noise_std).map_err(|e| invalid!("{e}"))?;
            let mut data = Vec::with_capacity(2 * n);
            for &label in &y {
                let t = rng.random_range(0.0..=PI);
                let (px, py) = moon_point(label, t);
                let (ex, ey) = if noise_std > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                data.push(px + ex);
                data.push(py + ey);
            }
            Tensor::new(shape, data)?
        }
        DataSpec::Blobs { classes, spread, .. } => {
            let mut data = Vec::with_capacity(2 * n);
            for &label in &y {
                let (cx, cy) = blob_center(label, classes);
                let r = spread * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                data.push(cx + r * th.cos());
                data.push(cy + r * th.sin());
            }
            Tensor::new(shape, data)?
        }
        DataSpec::PatternImages { size, channels, .. } => {
            let mut data = Vec::with_capacity(shape.iter().product());
            for &label in &y {
                data.extend(pattern_image(label, size, channels, &mut rng));
            }
            Tensor::new(shape, data)?
        }
    };
    DatasetSplit::new(spec.name(), x, y, spec.classes(), spec.clone(), seed)
}

pub fn make_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<DatasetSplit> {
    generate(&DataSpec::TwoMoons { n, noise_std }, seed)
}

pub fn make_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<DatasetSplit> {
    generate(&DataSpec::Blobs { n, classes, spread }, seed)
}

pub fn make_pattern_images(n: usize, classes: usize, size: usize, seed: u64) -> Result<DatasetSplit> {
    generate(
        &DataSpec::PatternImages {
            n,
            classes,
            size,
            channels: 1,
        },
        seed,
    )
}

/// Upper moon: unit half-circle; lower moon: shifted and flipped copy.
pub fn moon_point(label: usize, t: f64) -> (f64, f64) {
    if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

pub const BLOB_RADIUS: f64 = 3.0;

/// Blob centres sit evenly on a circle of radius [`BLOB_RADIUS`].
pub fn blob_center(label: usize, classes: usize) -> (f64, f64) {
    let a = 2.0 * PI * label as f64 / classes as f64;
    (BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin())
}

pub const PATTERN_FAMILIES: usize = 6;

fn pattern_image(label: usize, size: usize, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let period = s * rng.random_range(1.0..2.0);
    let k = 2.0 * PI / period;
    let kd = k / 2f64.sqrt();
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let amp = rng.random_range(0.3..0.4);
    let offset = 0.5 + rng.random_range(-0.05..0.05);
    let tints: Vec<f64> = (0..channels)
        .map(|_| if channels == 1 { 1.0 } else { rng.random_range(0.7..1.0) })
        .collect();
    let mut out = Vec::with_capacity(channels * size * size);
    for &tint in &tints {
        for v in 0..size {
            for u in 0..size {
                let (u, v) = (u as f64, v as f64);
                let pattern = match label {
                    0 => (k * v + p1).sin(),
                    1 => (k * u + p1).sin(),
                    2 => (kd * (u + v) + p1).sin(),
                    3 => (kd * (u - v) + p1).sin(),
                    4 => (k * u + p1).sin() * (k * v + p2).sin(),
                    _ => (kd * (u + v) + p1).sin() * (kd * (u - v) + p2).sin(),
                };
                out.push((offset + amp * tint * pattern).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Training inputs with bounded uniform contamination.
    UniformNoise,
    /// Inputs outside the training support: displaced point clouds, or ring
    /// textures for images.
    OutOfSupport,
    /// Pure uniform noise over the valid range.
    NoiseImages,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSpec {
    pub kind: OodKind,
    pub delta_m: f64,
    pub seed: u64,
    /// Number of samples; defaults to the size of the base split.
    pub n: Option<usize>,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            kind: OodKind::UniformNoise,
            delta_m: 0.031,
            seed: 0,
            n: None,
        }
    }
}

impl OodSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == OodKind::UniformNoise && !(self.delta_m > 0.0 && self.delta_m.is_finite()) {
            return Err(invalid!("uniform noise needs delta_m > 0, got {}", self.delta_m));
        }
        if self.n == Some(0) {
            return Err(invalid!("OOD sample count must be positive"));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            OodKind::UniformNoise => "uniform_noise",
            OodKind::OutOfSupport => "out_of_support",
            OodKind::NoiseImages => "noise_images",
        }
    }
}

/// Out-of-distribution inputs derived from `base`; shape `[N_o, ...]`.
pub fn gen_ood(base: &DatasetSplit, spec: &OodSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_out = spec.n.unwrap_or(base.len());
    let d = base.row_len();
    let bounds = base.value_bounds();
    let mut shape = base.x.shape().to_vec();
    shape[0] = n_out;
    let mut data = Vec::with_capacity(n_out * d);
    match spec.kind {
        OodKind::UniformNoise => {
            let dm = spec.delta_m;
            for i in 0..n_out {
                let src = &base.x.data()[(i % base.len()) * d..][..d];
                for (&v, &(lo, hi)) in src.iter().zip(&bounds) {
                    let e = rng.random_range(-dm..=dm);
                    data.push((v + e).clamp(lo, hi));
                }
            }
        }
        OodKind::OutOfSupport if base.spec.is_image() => {
            let (channels, size) = (shape[1], shape[2]);
            for _ in 0..n_out {
                data.extend(ring_image(size, channels, &mut rng));
            }
        }
        OodKind::OutOfSupport => {
            let diag = bounds.iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt();
            for i in 0..n_out {
                let src = &base.x.data()[(i % base.len()) * d..][..d];
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let shift = diag * rng.random_range(1.5..2.5);
                for (s, u) in src.iter().zip(&dir) {
                    data.push(s + u / norm * shift);
                }
            }
        }
        OodKind::NoiseImages => {
            let wide: Vec<(f64, f64)> = if base.spec.is_image() {
                bounds.clone()
            } else {
                bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let (c, r) = (0.5 * (lo + hi), (hi - lo).max(1e-12));
                        (c - 1.5 * r, c + 1.5 * r)
                    })
                    .collect()
            };
            for _ in 0..n_out {
                for &(lo, hi) in &wide {
                    data.push(rng.random_range(lo..=hi));
                }
            }
        }
    }
    Tensor::new(shape, data)
}

fn ring_image(size: usize, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let period = s * rng.random_range(0.3..0.6);
    let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.3..0.4);
    let mut out = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        for v in 0..size {
            for u in 0..size {
                let r = ((u as f64 - cx).powi(2) + (v as f64 - cy).powi(2)).sqrt();
                out.push((0.5 + amp * (2.0 * PI * r / period + phase).sin()).clamp(0.0, 1.0));
            }
        }
    }
    out
}
