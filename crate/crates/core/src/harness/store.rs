//! On-disk clips: one directory per clip holding `rgb_{t}.ppm`,
//! `depth_{t}.pgm` and a `label` file. Samples are 8-bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::clip::{Modality, VideoClip};
use crate::error::{Error, Result};
use crate::frp::GuidanceStack;
use crate::tensor::Tensor;

use super::synth::RgbdClip;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PNM image (`P5` grey or `P6` colour) with interleaved samples.
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Parameter(format!("cannot write {c}-channel image"))),
    };
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(samples)?;
    Ok(())
}

/// Reads a binary PNM; returns `(width, height, channels, samples)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, channels, bytes[pos..pos + n].to_vec()))
}

fn frame_name(m: Modality, t: usize) -> String {
    match m {
        Modality::Rgb => format!("rgb_{t:03}.ppm"),
        Modality::Depth => format!("depth_{t:03}.pgm"),
    }
}

fn write_modality(dir: &Path, clip: &VideoClip) -> Result<()> {
    let (t, c, h, w) = (clip.len(), clip.modality.channels(), clip.height(), clip.width());
    let data = clip.frames.data();
    let plane = h * w;
    for f in 0..t {
        let mut px = vec![0u8; plane * c];
        for ch in 0..c {
            let src = &data[(f * c + ch) * plane..(f * c + ch + 1) * plane];
            for (i, &v) in src.iter().enumerate() {
                px[i * c + ch] = quantize(v);
            }
        }
        write_pnm(&dir.join(frame_name(clip.modality, f)), w, h, c, &px)?;
    }
    Ok(())
}

fn read_modality(dir: &Path, m: Modality, label: usize) -> Result<VideoClip> {
    let c = m.channels();
    let mut data = Vec::new();
    let mut dims = None;
    let mut t = 0;
    loop {
        let path = dir.join(frame_name(m, t));
        if !path.exists() {
            break;
        }
        let (w, h, ch, px) = read_pnm(&path)?;
        if ch != c || dims.is_some_and(|d| d != (w, h)) {
            return Err(Error::Format(format!("{}: inconsistent frame", path.display())));
        }
        dims = Some((w, h));
        for channel in 0..c {
            data.extend(px.iter().skip(channel).step_by(c).map(|&v| v as f32 / 255.0));
        }
        t += 1;
    }
    let (w, h) = dims.ok_or_else(|| Error::Format(format!("{}: no {m} frames", dir.display())))?;
    VideoClip::new(Tensor::new(&[t, c, h, w], data)?, label, m)
}

pub fn write_clip(dir: &Path, clip: &RgbdClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_modality(dir, &clip.rgb)?;
    write_modality(dir, &clip.depth)?;
    fs::write(dir.join("label"), format!("{}\n", clip.label))?;
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<RgbdClip> {
    let text = fs::read_to_string(dir.join("label"))?;
    let label = text
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad label {text:?}", dir.display())))?;
    RgbdClip::new(read_modality(dir, Modality::Rgb, label)?, read_modality(dir, Modality::Depth, label)?)
}

/// Writes `clip_00000`, `clip_00001`, ... under `root`.
pub fn write_dataset(root: &Path, clips: &[RgbdClip]) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        write_clip(&root.join(format!("clip_{i:05}")), c)?;
    }
    Ok(())
}

/// Reads every clip directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<RgbdClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|p| p.join("label").is_file());
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no clips found", root.display())));
    }
    dirs.iter().map(|d| read_clip(d)).collect()
}

/// Writes each map of each stack as `layer{l}_frame{t:03}.pgm`; returns the file count.
pub fn export_guidance(dir: &Path, stacks: &[GuidanceStack]) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut n = 0;
    for s in stacks {
        for (t, m) in s.maps.iter().enumerate() {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let px: Vec<u8> = m.data().iter().map(|&v| quantize(v)).collect();
            write_pnm(&dir.join(format!("layer{}_frame{t:03}.pgm", s.layer)), w, h, 1, &px)?;
            n += 1;
        }
    }
    Ok(n)
}
