//! Synthetic paired-modality corpora, point sampling and the on-disk corpus
//! layout.
//!
//! Each identity owns a latent vector `z`. Its image is a superposition of
//! Gaussian blobs whose centres, widths and colours are fixed functions of
//! `z`; its cloud is a bumpy ellipsoid whose radii and bump field are fixed
//! functions of the same `z`; its attributes are a squashed affine map of `z`.
//! All three modalities therefore describe one underlying face.

mod io;

pub use io::{export_corpus, load_corpus};

use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{AttributeVector, Dims, ImageSample, PairedSample, PointCloudSample, ValidationError};
use crate::rng::{self, Rng};

/// Seed of the fixed latent-to-appearance maps; shared by every corpus.
const DESIGN_SEED: u64 = 0x5eed_f00d;
const BUMPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Additive Gaussian corruption applied at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub image_noise_sigma: f64,
    pub cloud_noise_sigma: f64,
    /// Splits the corruption applies to.
    pub splits: Vec<Split>,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { image_noise_sigma: 0.0, cloud_noise_sigma: 0.0, splits: Split::ALL.to_vec() }
    }
}

/// Generator settings; also the `[data]` table of the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub points_per_cloud: usize,
    pub attrs: usize,
    pub latent_dim: usize,
    /// Train / val / test fractions, applied per identity.
    pub split_fractions: [f64; 3],
    /// Per-sample jitter of blob centres (normalized image units).
    pub image_jitter: f64,
    /// Per-point surface jitter.
    pub cloud_jitter: f64,
    /// Std-dev of the attribute noise (truncated at 1.5 sigma).
    pub attr_noise_sigma: f64,
    pub corruption: CorruptionSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            per_identity: 20,
            height: 32,
            width: 32,
            channels: 3,
            points_per_cloud: 256,
            attrs: 40,
            latent_dim: 8,
            split_fractions: [0.5, 0.2, 0.3],
            image_jitter: 0.02,
            cloud_jitter: 0.01,
            attr_noise_sigma: 0.02,
            corruption: CorruptionSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            height: self.height,
            width: self.width,
            channels: self.channels,
            points: self.points_per_cloud,
            point_dim: 3,
            attrs: self.attrs,
            classes: self.identities,
        }
    }

    /// Train / val / test counts for one identity.
    pub fn split_counts(&self) -> Result<[usize; 3], CorpusError> {
        let [ft, fv, fs] = self.split_fractions;
        if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidConfig(format!(
                "split fractions must be in [0, 1] and sum to 1, got {:?}",
                self.split_fractions
            )));
        }
        let n = self.per_identity;
        let train = ((n as f64) * ft).round() as usize;
        let val = (((n as f64) * fv).round() as usize).min(n - train.min(n));
        let test = n.saturating_sub(train + val);
        if train == 0 {
            return Err(CorpusError::InvalidConfig(format!(
                "{n} samples per identity leave no training sample"
            )));
        }
        Ok([train, val, test])
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot sample zero points")]
    ZeroPoints,
    #[error("cannot sample from an empty cloud")]
    EmptySource,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("sample `{sample_id}`: missing {what} file {path}")]
    MissingFile { sample_id: String, what: &'static str, path: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("attrs.csv line {line}: {reason}")]
    MalformedAttributes { line: usize, reason: String },
    #[error("splits.csv line {line}: {reason}")]
    MalformedSplits { line: usize, reason: String },
    #[error("{path} line {line}: {reason}")]
    MalformedCloud { path: String, line: usize, reason: String },
    #[error("sample `{sample_id}`: image {reason}")]
    BadImage { sample_id: String, reason: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Provenance recorded alongside the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: Option<u64>,
    pub generator: Option<DataConfig>,
    pub corruption: CorruptionSpec,
    /// Clouds are already centred; ingestion leaves them untouched.
    pub centered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dims: Dims,
    /// Identity names; index = label.
    pub identities: Vec<String>,
    pub samples: Vec<PairedSample>,
    pub splits: Vec<Split>,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn samples_in(&self, split: Split) -> Vec<&PairedSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// SHA-256 over dims, labels, splits and the exact bits of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.dims).expect("dims serialize"));
        for (s, split) in self.samples.iter().zip(&self.splits) {
            h.update(s.id.as_bytes());
            h.update((s.label as u64).to_le_bytes());
            h.update(split.as_str().as_bytes());
            for v in s.image.pixels.iter().chain(&s.cloud.coords).chain(&s.attrs.0) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn normal(r: &mut Rng) -> f64 {
    r.sample(StandardNormal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fixed latent-to-appearance maps.
struct Design {
    blob_y: Vec<Vec<f64>>,
    blob_x: Vec<Vec<f64>>,
    blob_width: Vec<Vec<f64>>,
    blob_color: Vec<[Vec<f64>; 3]>,
    radii: [Vec<f64>; 3],
    bump_dir: Vec<[Vec<f64>; 3]>,
    bump_base: Vec<[f64; 3]>,
    bump_amp: Vec<Vec<f64>>,
    attr_w: Vec<Vec<f64>>,
    attr_b: Vec<f64>,
}

impl Design {
    fn new(latent: usize, attrs: usize) -> Self {
        let mut r = rng::stream(DESIGN_SEED, "design", &[latent as u64, attrs as u64]);
        let scale = 1.0 / (latent as f64).sqrt();
        let vecn = |r: &mut Rng| (0..latent).map(|_| normal(r) * scale).collect::<Vec<f64>>();
        let blob_y = (0..latent).map(|_| vecn(&mut r)).collect();
        let blob_x = (0..latent).map(|_| vecn(&mut r)).collect();
        let blob_width = (0..latent).map(|_| vecn(&mut r)).collect();
        let blob_color = (0..latent).map(|_| [vecn(&mut r), vecn(&mut r), vecn(&mut r)]).collect();
        let radii = [vecn(&mut r), vecn(&mut r), vecn(&mut r)];
        let bump_dir = (0..BUMPS).map(|_| [vecn(&mut r), vecn(&mut r), vecn(&mut r)]).collect();
        let bump_base = (0..BUMPS).map(|_| [normal(&mut r), normal(&mut r), normal(&mut r)]).collect();
        let bump_amp = (0..BUMPS).map(|_| vecn(&mut r)).collect();
        let attr_w = (0..attrs).map(|_| vecn(&mut r)).collect();
        let attr_b = (0..attrs).map(|_| 0.5 * normal(&mut r)).collect();
        Self { blob_y, blob_x, blob_width, blob_color, radii, bump_dir, bump_base, bump_amp, attr_w, attr_b }
    }
}

/// Per-identity latent; a pure function of `(seed, identity)`.
pub fn identity_latent(seed: u64, identity: usize, latent_dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "identity", &[identity as u64]);
    (0..latent_dim).map(|_| normal(&mut r)).collect()
}

fn render_image(d: &Design, z: &[f64], cfg: &DataConfig, r: &mut Rng) -> ImageSample {
    struct Blob {
        cy: f64,
        cx: f64,
        inv_two_var: f64,
        color: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..cfg.latent_dim)
        .map(|j| {
            let cy = 0.5 + 0.32 * dot(&d.blob_y[j], z).tanh() + cfg.image_jitter * normal(r);
            let cx = 0.5 + 0.32 * dot(&d.blob_x[j], z).tanh() + cfg.image_jitter * normal(r);
            let width = 0.07 + 0.06 * squash(dot(&d.blob_width[j], z));
            let amp = 1.0 + 0.05 * normal(r);
            let color = [0, 1, 2].map(|c| amp * 1.2 * squash(2.0 * dot(&d.blob_color[j][c], z)));
            Blob { cy, cx, inv_two_var: 1.0 / (2.0 * width * width), color }
        })
        .collect();
    let (h, w) = (cfg.height, cfg.width);
    let mut img = ImageSample::filled(h, w, cfg.channels, 0.0);
    for y in 0..h {
        let yn = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let xn = (x as f64 + 0.5) / w as f64;
            let mut acc = [0.1; 3];
            for b in &blobs {
                let g = (-((yn - b.cy).powi(2) + (xn - b.cx).powi(2)) * b.inv_two_var).exp();
                for c in 0..3 {
                    acc[c] += b.color[c] * g;
                }
            }
            if cfg.channels == 1 {
                let mean = (acc[0] + acc[1] + acc[2]) / 3.0;
                img.set(0, y, x, 1.0 - (-1.5 * mean).exp());
            } else {
                for (c, a) in acc.iter().enumerate() {
                    img.set(c, y, x, 1.0 - (-1.5 * a).exp());
                }
            }
        }
    }
    img
}

fn render_cloud(d: &Design, z: &[f64], cfg: &DataConfig, r: &mut Rng) -> PointCloudSample {
    let radii = [
        1.0 + 0.4 * dot(&d.radii[0], z).tanh(),
        0.85 + 0.3 * dot(&d.radii[1], z).tanh(),
        0.7 + 0.25 * dot(&d.radii[2], z).tanh(),
    ];
    let bumps: Vec<([f64; 3], f64)> = (0..BUMPS)
        .map(|m| {
            let mut dir = [0, 1, 2].map(|i| d.bump_base[m][i] + 0.6 * dot(&d.bump_dir[m][i], z));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            dir.iter_mut().for_each(|v| *v /= norm);
            (dir, 0.35 * dot(&d.bump_amp[m], z).tanh())
        })
        .collect();
    let dense = 4 * cfg.points_per_cloud;
    let mut coords = Vec::with_capacity(dense * 3);
    for _ in 0..dense {
        let mut u = [normal(r), normal(r), normal(r)];
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|v| *v /= norm);
        let radial = 1.0
            + bumps
                .iter()
                .map(|(dir, amp)| {
                    let d2: f64 = u.iter().zip(dir).map(|(a, b)| (a - b).powi(2)).sum();
                    amp * (-d2 / (2.0 * 0.35 * 0.35)).exp()
                })
                .sum::<f64>();
        for i in 0..3 {
            coords.push(radial * radii[i] * u[i] + cfg.cloud_jitter * normal(r));
        }
    }
    PointCloudSample::new(3, coords)
}

fn render_attrs(d: &Design, z: &[f64], cfg: &DataConfig, r: &mut Rng) -> AttributeVector {
    let bound = 1.5 * cfg.attr_noise_sigma;
    AttributeVector(
        d.attr_w
            .iter()
            .zip(&d.attr_b)
            .map(|(w, b)| {
                let mut e = cfg.attr_noise_sigma * normal(r);
                while e.abs() > bound {
                    e = cfg.attr_noise_sigma * normal(r);
                }
                (squash(1.5 * dot(w, z) + b) + e).clamp(0.0, 1.0)
            })
            .collect(),
    )
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn sample_id(identity: usize, k: usize) -> String {
    format!("{identity:03}_{k:03}")
}

/// Builds a full synthetic corpus. Deterministic in `(seed, cfg)`; each
/// identity draws from its own streams, so identities can be generated in
/// any order.
pub fn generate_corpus(seed: u64, cfg: &DataConfig) -> Result<Corpus, CorpusError> {
    if cfg.identities < 2 || cfg.per_identity < 2 {
        return Err(CorpusError::InvalidConfig(format!(
            "need at least 2 identities and 2 samples each, got {} x {}",
            cfg.identities, cfg.per_identity
        )));
    }
    if cfg.height < 8 || cfg.width < 8 || !(cfg.channels == 1 || cfg.channels == 3) {
        return Err(CorpusError::InvalidConfig("images must be at least 8x8 with 1 or 3 channels".into()));
    }
    if cfg.points_per_cloud == 0 {
        return Err(CorpusError::ZeroPoints);
    }
    if cfg.latent_dim == 0 {
        return Err(CorpusError::InvalidConfig("latent_dim must be positive".into()));
    }
    let c = &cfg.corruption;
    if !(c.image_noise_sigma >= 0.0 && c.cloud_noise_sigma >= 0.0) {
        return Err(CorpusError::InvalidConfig("corruption sigmas must be >= 0".into()));
    }
    let [n_train, n_val, _] = cfg.split_counts()?;
    let design = Design::new(cfg.latent_dim, cfg.attrs);
    let dims = cfg.dims();

    let mut samples = Vec::with_capacity(cfg.identities * cfg.per_identity);
    let mut splits = Vec::with_capacity(samples.capacity());
    for id in 0..cfg.identities {
        let z = identity_latent(seed, id, cfg.latent_dim);
        for k in 0..cfg.per_identity {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let tags = [id as u64, k as u64];
            let mut img = render_image(&design, &z, cfg, &mut rng::stream(seed, "image", &tags));
            let dense = render_cloud(&design, &z, cfg, &mut rng::stream(seed, "cloud", &tags));
            let mut cloud = sample_points(&dense, cfg.points_per_cloud, &mut rng::stream(seed, "subsample", &tags))?;
            let attrs = render_attrs(&design, &z, cfg, &mut rng::stream(seed, "attrs", &tags));

            let mut noise = rng::stream(seed, "corrupt", &tags);
            if c.splits.contains(&split) {
                if c.image_noise_sigma > 0.0 {
                    for v in img.pixels.iter_mut() {
                        *v += c.image_noise_sigma * normal(&mut noise);
                    }
                }
                if c.cloud_noise_sigma > 0.0 {
                    for v in cloud.coords.iter_mut() {
                        *v += c.cloud_noise_sigma * normal(&mut noise);
                    }
                }
            }
            img.pixels.iter_mut().for_each(|v| *v = quantize(*v));
            samples.push(PairedSample {
                id: sample_id(id, k),
                image: img,
                cloud: cloud.centered(),
                attrs,
                label: id,
            });
            splits.push(split);
        }
    }
    for s in &samples {
        crate::domain::validate_paired_sample(s, &dims)?;
    }
    Ok(Corpus {
        dims,
        identities: (0..cfg.identities).map(|i| format!("{i:03}")).collect(),
        samples,
        splits,
        meta: CorpusMeta {
            seed: Some(seed),
            generator: Some(cfg.clone()),
            corruption: cfg.corruption.clone(),
            centered: true,
        },
    })
}

/// Draws exactly `n` points: uniformly without replacement when the source
/// has at least `n` points, with replacement otherwise.
pub fn sample_points(src: &PointCloudSample, n: usize, rng: &mut Rng) -> Result<PointCloudSample, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroPoints);
    }
    if src.is_empty() {
        return Err(CorpusError::EmptySource);
    }
    let len = src.len();
    let picks: Vec<usize> = if len >= n {
        rand::seq::index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    };
    let coords = picks.iter().flat_map(|&i| src.point(i).iter().copied()).collect();
    Ok(PointCloudSample::new(src.dim, coords))
}
