//! Procedural RGB-D clips: a bright bar moving over a noisy background, with
//! depth rendered as nearness. Every clip is a pure function of the spec and
//! its index.
//!
//! In motion tasks the scene light grows towards the right (red) and bottom
//! (green), and the depth scene is a plane tilted towards the camera at the
//! bottom-right, so the object's appearance in a single frame carries its
//! position.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clip::{Modality, VideoClip};
use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Grow,
    Shrink,
    Rotate,
    Blink,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::Right,
        Motion::Grow,
        Motion::Blink,
        Motion::Down,
        Motion::Left,
        Motion::Shrink,
        Motion::Up,
        Motion::Rotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Grow => "grow",
            Motion::Shrink => "shrink",
            Motion::Rotate => "rotate",
            Motion::Blink => "blink",
        }
    }
}

/// What distinguishes the classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    /// One motion pattern per class, visible in both modalities.
    Motion(Vec<Motion>),
    /// Four classes: RGB brightness rises or falls (invisible in depth) crossed
    /// with the object approaching or receding (invisible in RGB).
    Paired,
}

impl Task {
    /// The first `n` motion patterns.
    pub fn motions(n: usize) -> Result<Task> {
        if !(2..=Motion::ALL.len()).contains(&n) {
            return Err(param_err!("motion task supports 2..={} classes, got {n}", Motion::ALL.len()));
        }
        Ok(Task::Motion(Motion::ALL[..n].to_vec()))
    }

    pub fn classes(&self) -> usize {
        match self {
            Task::Motion(m) => m.len(),
            Task::Paired => 4,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Motion(_) => f.write_str("motion"),
            Task::Paired => f.write_str("paired"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    /// `motion` (all eight patterns) or `paired`.
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "motion" => Ok(Task::Motion(Motion::ALL.to_vec())),
            "paired" => Ok(Task::Paired),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub clips_per_class: usize,
    pub frames: usize,
    pub side: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(param_err!("side {} below 16", self.side));
        }
        if self.frames < 8 {
            return Err(param_err!("{} frames below 8", self.frames));
        }
        if self.clips_per_class == 0 {
            return Err(param_err!("need at least one clip per class"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(param_err!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.task.classes() * self.clips_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Co-registered RGB and depth renderings of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdClip {
    pub rgb: VideoClip,
    pub depth: VideoClip,
    pub label: usize,
}

impl RgbdClip {
    pub fn new(rgb: VideoClip, depth: VideoClip) -> Result<Self> {
        if rgb.label != depth.label || rgb.len() != depth.len() || rgb.height() != depth.height() || rgb.width() != depth.width() {
            return Err(param_err!("rgb and depth clips are not co-registered"));
        }
        let label = rgb.label;
        Ok(RgbdClip { rgb, depth, label })
    }

    pub fn get(&self, m: Modality) -> &VideoClip {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
        }
    }
}

/// Object state in one frame, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    half_len: f64,
    angle: f64,
    visible: bool,
    /// Multiplier on the RGB colour.
    brightness: f64,
    /// Nearness in `(0, 1]`; drawn as depth intensity.
    near: f64,
}

fn covers(p: &Pose, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - p.cx, y - p.cy);
    let (c, s) = (p.angle.cos(), p.angle.sin());
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= p.half_len && v.abs() <= p.half_len * 0.45
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + (b - a) * f
}

fn poses(task: &Task, label: usize, frames: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.06..0.06) * side;
    let (cx0, cy0) = (side / 2.0 + jitter(rng), side / 2.0 + jitter(rng));
    let base_len = side * rng.gen_range(0.2..0.28);
    let base_angle = rng.gen_range(-0.3..0.3);
    let near = rng.gen_range(0.55..0.8);
    let travel = side * 0.3;
    (0..frames)
        .map(|t| {
            let f = t as f64 / (frames - 1) as f64;
            let mut p = Pose {
                cx: cx0,
                cy: cy0,
                half_len: base_len,
                angle: base_angle,
                visible: true,
                brightness: 1.0,
                near,
            };
            match task {
                Task::Motion(ms) => match ms[label] {
                    Motion::Left => p.cx = lerp(cx0 + travel / 2.0, cx0 - travel / 2.0, f),
                    Motion::Right => p.cx = lerp(cx0 - travel / 2.0, cx0 + travel / 2.0, f),
                    Motion::Up => p.cy = lerp(cy0 + travel / 2.0, cy0 - travel / 2.0, f),
                    Motion::Down => p.cy = lerp(cy0 - travel / 2.0, cy0 + travel / 2.0, f),
                    Motion::Grow => p.half_len = lerp(base_len * 0.5, base_len * 1.5, f),
                    Motion::Shrink => p.half_len = lerp(base_len * 1.5, base_len * 0.5, f),
                    Motion::Rotate => p.angle = base_angle + f * PI / 2.0,
                    Motion::Blink => p.visible = (t / 2) % 2 == 0,
                },
                Task::Paired => {
                    let (brighten, approach) = (label / 2 == 0, label % 2 == 0);
                    p.brightness = if brighten { lerp(0.35, 1.0, f) } else { lerp(1.0, 0.35, f) };
                    p.near = if approach { lerp(0.3, 0.95, f) } else { lerp(0.95, 0.3, f) };
                }
            }
            p
        })
        .collect()
}

/// Renders clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SynthSpec, index: usize) -> Result<RgbdClip> {
    spec.validate()?;
    if index >= spec.len() {
        return Err(param_err!("clip index {index} outside dataset of {}", spec.len()));
    }
    let label = index / spec.clips_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (t, side) = (spec.frames, spec.side);
    let color: [f64; 3] = match spec.task {
        // fixed grey so brightness is the only RGB cue
        Task::Paired => [0.9; 3],
        Task::Motion(_) => [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)],
    };
    let background: [f64; 3] = [rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2)];
    let poses = poses(&spec.task, label, t, side as f64, &mut rng);
    let noise = spec.noise as f64;
    let lit = matches!(spec.task, Task::Motion(_));
    let sidef = side as f64;
    let mut rgb = vec![0.0f32; t * 3 * side * side];
    let mut depth = vec![0.0f32; t * side * side];
    let plane = side * side;
    for (f, p) in poses.iter().enumerate() {
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = ((x as f64 + 0.5) / sidef, (y as f64 + 0.5) / sidef);
                let on = p.visible && covers(p, fx * sidef, fy * sidef);
                let i = y * side + x;
                let (light, tilt) = if lit {
                    ([0.45 + 0.55 * fx, 0.45 + 0.55 * fy, 1.0], 0.3 * (fy - 0.5) + 0.15 * (fx - 0.5))
                } else {
                    ([1.0; 3], 0.0)
                };
                for c in 0..3 {
                    let base = if on { color[c] * p.brightness * light[c] } else { background[c] };
                    let v = base + noise * rng.gen_range(-1.0..1.0);
                    rgb[(f * 3 + c) * plane + i] = v.clamp(0.0, 1.0) as f32;
                }
                let d = if on { p.near + tilt } else { 0.0 } + noise * rng.gen_range(-1.0..1.0);
                depth[f * plane + i] = d.clamp(0.0, 1.0) as f32;
            }
        }
    }
    RgbdClip::new(
        VideoClip::new(Tensor::new(&[t, 3, side, side], rgb)?, label, Modality::Rgb)?,
        VideoClip::new(Tensor::new(&[t, 1, side, side], depth)?, label, Modality::Depth)?,
    )
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<RgbdClip>> {
    spec.validate()?;
    (0..spec.len()).map(|i| generate_clip(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> SynthSpec {
        SynthSpec {
            task,
            clips_per_class: 2,
            frames: 8,
            side: 24,
            noise: 0.05,
            seed: 11,
        }
    }

    fn centroid(frame: &[f32], side: usize, thresh: f32) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in frame.iter().enumerate() {
            if v > thresh {
                sx += (i % side) as f64;
                sy += (i / side) as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn deterministic_and_balanced() {
        let s = spec(Task::motions(8).unwrap());
        assert_eq!(generate_clip(&s, 5).unwrap(), generate_clip(&s, 5).unwrap());
        assert_ne!(generate_clip(&s, 4).unwrap().rgb, generate_clip(&s, 5).unwrap().rgb);
        let data = generate_dataset(&s).unwrap();
        for c in 0..8 {
            assert_eq!(data.iter().filter(|d| d.label == c).count(), 2);
        }
        assert!(data.iter().all(|d| d.rgb.frames.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn motions_move_as_named() {
        let s = SynthSpec {
            noise: 0.0,
            ..spec(Task::motions(8).unwrap())
        };
        let plane = 24 * 24;
        let ends = |idx: usize| {
            let d = generate_clip(&s, idx).unwrap().depth;
            let data = d.frames.data();
            (centroid(&data[..plane], 24, 0.1), centroid(&data[7 * plane..], 24, 0.1))
        };
        let (a, b) = ends(0);
        assert!(b.0 > a.0 + 3.0, "right");
        let (a, b) = ends(2 * 3);
        assert!(b.1 > a.1 + 3.0, "down");
        // blink: frames 0 and 4 are on, same centroid
        let d = generate_clip(&s, 2 * 2).unwrap().depth;
        let data = d.frames.data();
        assert_eq!(centroid(&data[..plane], 24, 0.1), centroid(&data[4 * plane..5 * plane], 24, 0.1));
        assert!(data[2 * plane..3 * plane].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paired_cues_are_modality_specific() {
        let s = SynthSpec {
            noise: 0.0,
            ..spec(Task::Paired)
        };
        let plane = 24 * 24;
        // class 0 brightens and approaches; class 1 brightens and recedes
        let c0 = generate_clip(&s, 0).unwrap();
        let c1 = generate_clip(&s, 2).unwrap();
        let peak = |v: &[f32]| v.iter().cloned().fold(0.0f32, f32::max);
        let rgb_gain = |c: &RgbdClip| peak(&c.rgb.frames.data()[7 * 3 * plane..]) - peak(&c.rgb.frames.data()[..plane]);
        let depth_gain = |c: &RgbdClip| peak(&c.depth.frames.data()[7 * plane..]) - peak(&c.depth.frames.data()[..plane]);
        assert!(rgb_gain(&c0) > 0.3 && rgb_gain(&c1) > 0.3);
        assert!(depth_gain(&c0) > 0.3 && depth_gain(&c1) < -0.3);
        let c2 = generate_clip(&s, 4).unwrap();
        assert!(rgb_gain(&c2) < -0.3 && depth_gain(&c2) > 0.3);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(Task::Paired);
        s.side = 8;
        assert!(generate_dataset(&s).is_err());
        let s = spec(Task::Paired);
        assert!(generate_clip(&s, 8).is_err());
        assert!(Task::motions(9).is_err());
    }
}
