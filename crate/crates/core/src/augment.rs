//! Training-time augmentation: crop/rotate/noise for images, random rigid
//! rotation for clouds.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{ImageSample, PointCloudSample};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams2D {
    /// Crop side as a fraction of the full side, drawn uniformly per axis.
    pub crop_fraction: [f64; 2],
    /// Additive Gaussian noise, in normalized pixel units.
    pub gaussian_noise_sigma: f64,
    /// Rotation drawn uniformly from `[-r, r]` degrees.
    pub rotation_degrees: f64,
}

impl Default for AugmentParams2D {
    fn default() -> Self {
        Self { crop_fraction: [0.8, 1.0], gaussian_noise_sigma: 0.02, rotation_degrees: 15.0 }
    }
}

impl AugmentParams2D {
    pub fn identity() -> Self {
        Self { crop_fraction: [1.0, 1.0], gaussian_noise_sigma: 0.0, rotation_degrees: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.crop_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("augment2d.crop_fraction must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if !(self.gaussian_noise_sigma >= 0.0) {
            return Err("augment2d.gaussian_noise_sigma must be >= 0".into());
        }
        if !self.rotation_degrees.is_finite() {
            return Err("augment2d.rotation_degrees must be finite".into());
        }
        Ok(())
    }
}

/// Symmetric angle ranges, in degrees, for the three rotation axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams3D {
    pub roll_degrees: f64,
    pub pitch_degrees: f64,
    pub yaw_degrees: f64,
}

impl Default for AugmentParams3D {
    fn default() -> Self {
        Self { roll_degrees: 30.0, pitch_degrees: 30.0, yaw_degrees: 30.0 }
    }
}

impl AugmentParams3D {
    pub fn identity() -> Self {
        Self { roll_degrees: 0.0, pitch_degrees: 0.0, yaw_degrees: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.roll_degrees, self.pitch_degrees, self.yaw_degrees].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err("augment3d ranges must be finite".into())
        }
    }
}

fn bilinear(img: &ImageSample, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height as f64, img.width as f64);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    img.get(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
        + img.get(c, y0, x1) * (1.0 - fy) * fx
        + img.get(c, y1, x0) * fy * (1.0 - fx)
        + img.get(c, y1, x1) * fy * fx
}

/// Random crop (resized back to the input size), rotation about the image
/// centre with edge replication, then additive Gaussian noise; values are
/// clamped to `[0, 1]`.
pub fn augment_image(img: &ImageSample, p: &AugmentParams2D, rng: &mut Rng) -> ImageSample {
    let [lo, hi] = p.crop_fraction;
    let frac_h = lo + (hi - lo) * rng.random::<f64>();
    let frac_w = lo + (hi - lo) * rng.random::<f64>();
    let off_y: f64 = rng.random();
    let off_x: f64 = rng.random();
    let angle = (2.0 * rng.random::<f64>() - 1.0) * p.rotation_degrees.to_radians();

    let (h, w) = (img.height as f64, img.width as f64);
    let (crop_h, crop_w) = (frac_h * h, frac_w * w);
    let (top, left) = (off_y * (h - crop_h), off_x * (w - crop_w));
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();

    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation of the output coordinate
            let ry = cos * dy - sin * dx + cy;
            let rx = sin * dy + cos * dx + cx;
            let sy = top + (ry + 0.5) * (crop_h / h) - 0.5;
            let sx = left + (rx + 0.5) * (crop_w / w) - 0.5;
            for c in 0..img.channels {
                out.set(c, y, x, bilinear(img, c, sy, sx));
            }
        }
    }
    if p.gaussian_noise_sigma > 0.0 {
        for v in out.pixels.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += p.gaussian_noise_sigma * z;
        }
    }
    for v in out.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Right-handed rotation `R = R_z(yaw) * R_y(pitch) * R_x(roll)`; roll about
/// x, pitch about y, yaw about z, all in degrees.
pub fn rotation_matrix(roll: f64, pitch: f64, yaw: f64) -> [[f64; 3]; 3] {
    let (sr, cr) = roll.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sy, cy) = yaw.to_radians().sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotates every point by one sampled rotation: output `P * R^T`.
pub fn augment_cloud(pc: &PointCloudSample, p: &AugmentParams3D, rng: &mut Rng) -> PointCloudSample {
    assert_eq!(pc.dim, 3, "cloud rotation needs xyz points");
    let roll = (2.0 * rng.random::<f64>() - 1.0) * p.roll_degrees;
    let pitch = (2.0 * rng.random::<f64>() - 1.0) * p.pitch_degrees;
    let yaw = (2.0 * rng.random::<f64>() - 1.0) * p.yaw_degrees;
    let r = rotation_matrix(roll, pitch, yaw);
    let coords = pc
        .coords
        .chunks(3)
        .flat_map(|q| (0..3).map(move |i| r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2]))
        .collect();
    PointCloudSample::new(3, coords)
}
