//! Spatial resize, crop and rotation applied identically to every frame and
//! to both modalities of a clip.

use rand::Rng;

use crate::clip::VideoClip;
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

use super::synth::RgbdClip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Side the frames are resized to before cropping.
    pub resize: usize,
    pub crop: usize,
    pub max_rotation_deg: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(param_err!("crop {} must lie in 1..={}", self.crop, self.resize));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(param_err!("rotation bound {} outside [0, 180]", self.max_rotation_deg));
        }
        Ok(())
    }
}

/// Crop offset and rotation, shared by all frames of a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub angle_deg: f64,
}

impl Transform {
    pub fn center(cfg: &AugmentConfig) -> Self {
        let off = (cfg.resize - cfg.crop) / 2;
        Transform {
            top: off,
            left: off,
            angle_deg: 0.0,
        }
    }

    pub fn random<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let span = cfg.resize - cfg.crop;
        Transform {
            top: rng.gen_range(0..=span),
            left: rng.gen_range(0..=span),
            angle_deg: if cfg.max_rotation_deg > 0.0 {
                rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            },
        }
    }
}

/// Bilinear resize of one `h×w` plane, sampling at pixel centres.
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    let (sy, sx) = (h as f32 / oh as f32, w as f32 / ow as f32);
    for i in 0..oh {
        let y = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..ow {
            let x = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Crop `crop×crop` at the transform's offset, rotated about the crop centre
/// with nearest-neighbour sampling; samples outside the frame read as zero.
fn crop_plane(src: &[f32], side: usize, crop: usize, tf: &Transform) -> Vec<f32> {
    let (s, c) = tf.angle_deg.to_radians().sin_cos();
    let mid = (crop as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(crop * crop);
    for i in 0..crop {
        for j in 0..crop {
            let (dy, dx) = (i as f64 - mid, j as f64 - mid);
            let y = (c * dy - s * dx + mid).round() + tf.top as f64;
            let x = (s * dy + c * dx + mid).round() + tf.left as f64;
            let inside = y >= 0.0 && x >= 0.0 && (y as usize) < side && (x as usize) < side;
            out.push(if inside { src[y as usize * side + x as usize] } else { 0.0 });
        }
    }
    out
}

pub fn transform_clip(clip: &VideoClip, cfg: &AugmentConfig, tf: &Transform) -> Result<VideoClip> {
    cfg.validate()?;
    let s = clip.frames.shape();
    let (t, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (r, k) = (cfg.resize, cfg.crop);
    let mut out = Vec::with_capacity(t * ch * k * k);
    for plane in clip.frames.data().chunks(h * w) {
        let resized = if h == r && w == r {
            plane.to_vec()
        } else {
            resize_plane(plane, h, w, r, r)
        };
        out.extend(crop_plane(&resized, r, k, tf));
    }
    VideoClip::new(Tensor::new(&[t, ch, k, k], out)?, clip.label, clip.modality)
}

pub fn transform_pair(clip: &RgbdClip, cfg: &AugmentConfig, tf: &Transform) -> Result<RgbdClip> {
    RgbdClip::new(transform_clip(&clip.rgb, cfg, tf)?, transform_clip(&clip.depth, cfg, tf)?)
}
