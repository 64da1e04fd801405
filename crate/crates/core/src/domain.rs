//! Shared value types and sample validation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the two face modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Points,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Points,
            Modality::Points => Modality::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Points => "points",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "points" => Ok(Modality::Points),
            other => Err(format!("unknown modality `{other}` (expected `image` or `points`)")),
        }
    }
}

/// Every shape a corpus and a model must agree on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Points per cloud (`n`).
    pub points: usize,
    /// Per-point feature width (`F`).
    pub point_dim: usize,
    /// Attribute count (`a`).
    pub attrs: usize,
    /// Identity count (`K`).
    pub classes: usize,
}

/// Pixels normalized to `[0, 1]`, stored channel-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * channels, "image buffer size");
        Self { height, width, channels, pixels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }
}

/// `n x F` row-major point coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSample {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl PointCloudSample {
    pub fn new(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && coords.len().is_multiple_of(dim), "cloud buffer size");
        Self { dim, coords }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Self::new(3, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for p in self.coords.chunks(self.dim) {
            c.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let n = self.len().max(1) as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    /// Subtracts the centroid from every point.
    pub fn centered(mut self) -> Self {
        let c = self.centroid();
        for p in self.coords.chunks_mut(self.dim) {
            p.iter_mut().zip(&c).for_each(|(a, b)| *a -= b);
        }
        self
    }
}

/// Per-face attribute probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageSample,
    pub cloud: PointCloudSample,
    pub attrs: AttributeVector,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-batch (or per-epoch mean) record of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls_image: f64,
    pub cls_points: f64,
    pub aed: f64,
    pub recon: f64,
    pub rho: f64,
    pub delta: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn cls(&self, m: Modality) -> f64 {
        match m {
            Modality::Image => self.cls_image,
            Modality::Points => self.cls_points,
        }
    }

    /// The weighted objective rebuilt from this bundle's own members.
    pub fn recomputed_total(&self, lambda1: f64, lambda2: f64, missing: Modality) -> f64 {
        self.cls(missing.other()) + lambda1 * self.recon + lambda2 * self.aed
    }

    /// First non-finite member in declaration order, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cls_image", self.cls_image),
            ("cls_points", self.cls_points),
            ("aed", self.aed),
            ("recon", self.recon),
            ("rho", self.rho),
            ("delta", self.delta),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    /// Weighted mean of several bundles (weights are batch sizes).
    pub fn weighted_mean(items: &[(LossBundle, usize)]) -> LossBundle {
        let total_w: usize = items.iter().map(|(_, w)| w).sum();
        if total_w == 0 {
            return LossBundle::default();
        }
        let w = |f: fn(&LossBundle) -> f64| {
            items.iter().map(|(b, n)| f(b) * *n as f64).sum::<f64>() / total_w as f64
        };
        LossBundle {
            cls_image: w(|b| b.cls_image),
            cls_points: w(|b| b.cls_points),
            aed: w(|b| b.aed),
            recon: w(|b| b.recon),
            rho: w(|b| b.rho),
            delta: w(|b| b.delta),
            total: w(|b| b.total),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ValidationIssue {
    #[error("{field}: expected {expected}, found {found}")]
    DimensionMismatch { field: &'static str, expected: usize, found: usize },
    #[error("image: height and width must be at least 8, found {height}x{width}")]
    ImageTooSmall { height: usize, width: usize },
    #[error("image: channel count must be 1 or 3, found {0}")]
    BadChannelCount(usize),
    #[error("pixel {index}: value {value} outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("cloud: no points")]
    EmptyCloud,
    #[error("cloud coordinate {index}: non-finite value")]
    NonFiniteCoordinate { index: usize },
    #[error("attribute {index}: value {value} outside [0, 1]")]
    AttributeOutOfRange { index: usize, value: f64 },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("sample `{id}` is invalid: {}", .issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub id: String,
    pub issues: Vec<ValidationIssue>,
}

/// Checks every type invariant of `s` and that its shapes match `dims`.
pub fn validate_paired_sample(s: &PairedSample, dims: &Dims) -> Result<(), ValidationError> {
    use ValidationIssue::*;
    let mut issues = Vec::new();
    let img = &s.image;
    if img.height < 8 || img.width < 8 {
        issues.push(ImageTooSmall { height: img.height, width: img.width });
    }
    if img.channels != 1 && img.channels != 3 {
        issues.push(BadChannelCount(img.channels));
    }
    for (field, expected, found) in [
        ("image.height", dims.height, img.height),
        ("image.width", dims.width, img.width),
        ("image.channels", dims.channels, img.channels),
        ("cloud.points", dims.points, s.cloud.len()),
        ("cloud.point_dim", dims.point_dim, s.cloud.dim),
        ("attrs.len", dims.attrs, s.attrs.0.len()),
    ] {
        if expected != found {
            issues.push(DimensionMismatch { field, expected, found });
        }
    }
    if img.pixels.len() != img.height * img.width * img.channels {
        issues.push(DimensionMismatch {
            field: "image.pixels",
            expected: img.height * img.width * img.channels,
            found: img.pixels.len(),
        });
    }
    if let Some((index, &value)) = img
        .pixels
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        issues.push(PixelOutOfRange { index, value });
    }
    if s.cloud.is_empty() {
        issues.push(EmptyCloud);
    }
    if let Some(index) = s.cloud.coords.iter().position(|v| !v.is_finite()) {
        issues.push(NonFiniteCoordinate { index });
    }
    if let Some((index, &value)) = s
        .attrs
        .0
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        issues.push(AttributeOutOfRange { index, value });
    }
    if s.label >= dims.classes {
        issues.push(LabelOutOfRange { label: s.label, classes: dims.classes });
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationError { id: s.id.clone(), issues })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims { height: 32, width: 32, channels: 3, points: 256, point_dim: 3, attrs: 40, classes: 10 }
    }

    fn sample() -> PairedSample {
        PairedSample {
            id: "000_000".into(),
            image: ImageSample::filled(32, 32, 3, 0.5),
            cloud: PointCloudSample::new(3, vec![0.1; 256 * 3]),
            attrs: AttributeVector(vec![0.5; 40]),
            label: 0,
        }
    }

    #[test]
    fn well_formed_sample_is_valid() {
        assert_eq!(validate_paired_sample(&sample(), &dims()), Ok(()));
    }

    #[test]
    fn pixel_out_of_range_is_named() {
        let mut s = sample();
        s.image.pixels[17] = 1.5;
        let err = validate_paired_sample(&s, &dims()).unwrap_err();
        assert_eq!(err.issues, vec![ValidationIssue::PixelOutOfRange { index: 17, value: 1.5 }]);
        assert!(err.to_string().contains("pixel 17"));
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let mut s = sample();
        s.label = 10;
        let err = validate_paired_sample(&s, &dims()).unwrap_err();
        assert_eq!(err.issues, vec![ValidationIssue::LabelOutOfRange { label: 10, classes: 10 }]);
    }

    #[test]
    fn dimension_mismatch_names_field() {
        let mut s = sample();
        s.attrs.0.pop();
        let err = validate_paired_sample(&s, &dims()).unwrap_err();
        assert!(err.to_string().contains("attrs.len: expected 40, found 39"));
    }

    #[test]
    fn validation_is_pure() {
        let mut s = sample();
        s.attrs.0[3] = -0.2;
        assert_eq!(validate_paired_sample(&s, &dims()), validate_paired_sample(&s, &dims()));
    }

    #[test]
    fn bundle_identity_and_nan_detection() {
        let b = LossBundle { cls_points: 2.0, recon: 3.0, aed: 5.0, total: 2.503, ..Default::default() };
        assert!((b.recomputed_total(0.001, 0.1, Modality::Image) - b.total).abs() < 1e-12);
        let bad = LossBundle { aed: f64::NAN, total: f64::NAN, ..b };
        assert_eq!(bad.first_non_finite(), Some("aed"));
    }
}
