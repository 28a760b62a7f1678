use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            other => Err(Error::Config(format!("unknown modality {other}"))),
        }
    }
}

/// One modality of a clip: `T×C×H×W` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub modality: Modality,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, label: usize, modality: Modality) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != modality.channels() {
            return Err(dim_err!("{} clip needs T×{}×H×W frames, got {:?}", modality, modality.channels(), s));
        }
        Ok(VideoClip {
            frames,
            label,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Per-frame channel mean, each `H×W`.
    pub fn intensity(&self) -> Vec<Tensor<f32>> {
        let s = self.frames.shape();
        let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.frames.data();
        (0..t)
            .map(|f| {
                let mut m = vec![0.0f32; hw];
                for ch in 0..c {
                    let base = (f * c + ch) * hw;
                    for (o, &v) in m.iter_mut().zip(&d[base..base + hw]) {
                        *o += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= c as f32);
                Tensor::new(&[s[2], s[3]], m).expect("frame shape")
            })
            .collect()
    }

    /// Frames rearranged channel-first: `C×T×H×W`.
    pub fn channel_first(&self) -> Tensor<f32> {
        let s = self.frames.shape();
        let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.frames.data();
        let mut out = vec![0.0f32; d.len()];
        for f in 0..t {
            for ch in 0..c {
                let src = (f * c + ch) * hw;
                let dst = (ch * t + f) * hw;
                out[dst..dst + hw].copy_from_slice(&d[src..src + hw]);
            }
        }
        Tensor::new(&[c, t, s[2], s[3]], out).expect("same element count")
    }
}
