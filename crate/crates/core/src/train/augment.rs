//! Geometric augmentation: horizontal flip, rotation, zoom and translation,
//! resampled bilinearly with edge replication.

use rand::Rng as _;

use crate::imaging::sample_bilinear;
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Rotations are drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Shifts are drawn uniformly from `±translate` of each side length.
    pub translate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            rotation_deg: 15.0,
            zoom_min: 0.9,
            zoom_max: 1.1,
            translate: 0.1,
        }
    }
}

/// One concrete draw of the transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub zoom: f64,
    /// Shift as a fraction of width and height.
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
        zoom: 1.0,
        shift: (0.0, 0.0),
    };

    pub fn draw(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let mut sym = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let angle_deg = sym(cfg.rotation_deg);
        let shift = (sym(cfg.translate), sym(cfg.translate));
        let zoom = if cfg.zoom_max > cfg.zoom_min {
            rng.random_range(cfg.zoom_min..=cfg.zoom_max)
        } else {
            cfg.zoom_min
        };
        AugmentParams {
            flip,
            angle_deg,
            zoom,
            shift,
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.zoom == 1.0 && self.shift == (0.0, 0.0)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let s = img.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = img.clone();
        if self.flip {
            for row in out.data_mut().chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.is_rigid_identity() {
            return out;
        }
        let src = out.clone();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (ty, tx) = (self.shift.1 * h as f64, self.shift.0 * w as f64);
        for (plane_out, plane_in) in out.data_mut().chunks_exact_mut(h * w).zip(src.data().chunks_exact(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    // Inverse map: undo the shift, the rotation, then the zoom.
                    let (u, v) = (x as f64 - cx - tx, y as f64 - cy - ty);
                    let sx = (cos * u + sin * v) / self.zoom + cx;
                    let sy = (-sin * u + cos * v) / self.zoom + cy;
                    plane_out[y * w + x] = sample_bilinear(plane_in, h, w, sy, sx);
                }
            }
        }
        out
    }
}

/// Augments `img` with a transform drawn from `seed`; returns it unchanged
/// when augmentation is disabled.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, seed: u64) -> Tensor<f32> {
    if !cfg.enabled {
        return img.clone();
    }
    AugmentParams::draw(cfg, seed).apply(img)
}
