//! Fast regional positioning: parameter-free guidance maps.
//!
//! For every sliding window the dynamic image of the window is turned into a
//! dynamic map (GELU, amplified), a static map (above-mean threshold followed by
//! grayscale opening), and their combination `(D + S) * S`. The combination is
//! max-pooled to each feature resolution, min-max normalised, and shifted so
//! that frame `t` carries the map of the window ending at `t`.

use crate::clip::VideoClip;
use crate::error::{dim_err, param_err, Result};
use crate::graph::nn::gelu;
use crate::tensor::Tensor;

pub type Map = Tensor<f32>;

pub const DEFAULT_LAMBDA: f32 = 2.0;
pub const DEFAULT_SPAN: usize = 10;
pub const DEFAULT_MORPH_SIZE: usize = 3;

/// Frames `start..=end` (1-based); `end > start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlidingWindow {
    pub start: usize,
    pub end: usize,
}

impl SlidingWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || end <= start {
            return Err(param_err!("window [{start}, {end}] needs 1 <= start < end"));
        }
        Ok(SlidingWindow { start, end })
    }

    pub fn span(&self) -> usize {
        self.end - self.start
    }

    /// All windows of a `frames`-long clip, in order.
    pub fn all(frames: usize, span: usize) -> Result<Vec<SlidingWindow>> {
        if span == 0 || span >= frames {
            return Err(param_err!("window span {span} needs 1 <= span < {frames}"));
        }
        (1..=frames - span).map(|n| SlidingWindow::new(n, n + span)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrpConfig {
    pub span: usize,
    pub morph_size: usize,
    pub lambda: f32,
}

impl Default for FrpConfig {
    fn default() -> Self {
        FrpConfig {
            span: DEFAULT_SPAN,
            morph_size: DEFAULT_MORPH_SIZE,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Aligned per-frame guidance for one network layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceStack {
    pub maps: Vec<Map>,
    pub layer: usize,
    pub fill_count: usize,
}

impl GuidanceStack {
    /// Maps stacked as `1×T×H×W`, ready to broadcast over channels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.maps[0].shape()[0], self.maps[0].shape()[1]);
        let data: Vec<f32> = self.maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        Tensor::new(&[1, self.maps.len(), h, w], data).expect("uniform map sizes")
    }
}

fn same_shape(maps: &[&Map]) -> Result<()> {
    let s = maps[0].shape();
    if let Some(m) = maps.iter().find(|m| m.shape() != s) {
        return Err(dim_err!("map shapes {:?} and {:?} differ", s, m.shape()));
    }
    Ok(())
}

fn zip_map(a: &Map, b: &Map, f: impl Fn(f32, f32) -> f32) -> Map {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Rank-pooling dynamic image of a whole window: `sum_t (2t - L - 1) I_t`.
pub fn dynamic_image_base(frames: &[Map]) -> Result<Map> {
    let l = frames.len();
    if l < 2 {
        return Err(param_err!("dynamic image needs at least 2 frames, got {l}"));
    }
    same_shape(&frames.iter().collect::<Vec<_>>())?;
    let mut out = vec![0.0f32; frames[0].len()];
    for (t, f) in frames.iter().enumerate() {
        let alpha = (2 * (t + 1)) as f32 - l as f32 - 1.0;
        for (o, &v) in out.iter_mut().zip(f.data()) {
            *o += alpha * v;
        }
    }
    Tensor::new(frames[0].shape(), out)
}

/// Slides the dynamic image one frame forward:
/// `prev + span*(I_{n-1} + I_m) - 2*sum_{l=n}^{m-1} I_l`.
pub fn dynamic_image_update(prev: &Map, leaving: &Map, entering: &Map, window_sum: &Map, span: usize) -> Result<Map> {
    if span == 0 {
        return Err(param_err!("window span must be at least 1"));
    }
    same_shape(&[prev, leaving, entering, window_sum])?;
    let s = span as f32;
    let data = prev
        .data()
        .iter()
        .zip(leaving.data())
        .zip(entering.data())
        .zip(window_sum.data())
        .map(|(((&p, &a), &b), &w)| p + s * (a + b) - 2.0 * w)
        .collect();
    Tensor::new(prev.shape(), data)
}

pub fn dynamic_guidance(di: &Map, lambda: f32) -> Map {
    let data = di.data().iter().map(|&v| gelu(v) * lambda).collect();
    Tensor::new(di.shape(), data).expect("same shape")
}

#[derive(Clone, Copy)]
enum Morph {
    Erode,
    Dilate,
}

/// Flat `k×k` grayscale erosion/dilation; cells outside the map read as zero.
fn morph(map: &Map, k: usize, op: Morph) -> Map {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let r = k / 2;
    let pick = |a: f32, b: f32| match op {
        Morph::Erode => a.min(b),
        Morph::Dilate => a.max(b),
    };
    let src = map.data();
    // separable: horizontal pass then vertical pass, both zero-padded
    let mut rows = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = src[i * w + j];
            for dj in 0..k {
                let jj = j + dj;
                let v = if jj < r || jj - r >= w { 0.0 } else { src[i * w + jj - r] };
                acc = pick(acc, v);
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = rows[i * w + j];
            for di in 0..k {
                let ii = i + di;
                let v = if ii < r || ii - r >= h { 0.0 } else { rows[(ii - r) * w + j] };
                acc = pick(acc, v);
            }
            out[i * w + j] = acc;
        }
    }
    Tensor::new(map.shape(), out).expect("same shape")
}

pub fn erode(map: &Map, k: usize) -> Map {
    morph(map, k, Morph::Erode)
}

pub fn dilate(map: &Map, k: usize) -> Map {
    morph(map, k, Morph::Dilate)
}

/// Keeps entries at or above the map mean, zeroes the rest.
pub fn above_mean(d: &Map) -> Map {
    let mean = d.data().iter().sum::<f32>() / d.len() as f32;
    let data = d.data().iter().map(|&v| if v >= mean { v } else { 0.0 }).collect();
    Tensor::new(d.shape(), data).expect("same shape")
}

/// Above-mean threshold followed by an opening (erode, then dilate).
pub fn static_guidance(d: &Map, k: usize) -> Result<Map> {
    if k == 0 || k % 2 == 0 {
        return Err(param_err!("structuring size must be odd and positive, got {k}"));
    }
    Ok(dilate(&erode(&above_mean(d), k), k))
}

/// Adaptive max pooling of an `H×W` map to `out_h×out_w`.
pub fn adaptive_max_pool(map: &Map, out_h: usize, out_w: usize) -> Result<Map> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(dim_err!("cannot pool {h}×{w} down to {out_h}×{out_w}"));
    }
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1) = (i * h / out_h, ((i + 1) * h).div_ceil(out_h));
        for j in 0..out_w {
            let (c0, c1) = (j * w / out_w, ((j + 1) * w).div_ceil(out_w));
            let mut m = f32::NEG_INFINITY;
            for r in r0..r1 {
                for c in c0..c1 {
                    m = m.max(src[r * w + c]);
                }
            }
            out.push(m);
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// `Maxpool((D + S) * S)` at the requested feature resolution.
pub fn visual_guidance(d: &Map, s: &Map, pool_to: (usize, usize)) -> Result<Map> {
    same_shape(&[d, s])?;
    let combined = zip_map(d, s, |dv, sv| (dv + sv) * sv);
    adaptive_max_pool(&combined, pool_to.0, pool_to.1)
}

/// Min-max rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_guidance(g: &Map) -> Map {
    let (mn, mx) = g
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = mx - mn;
    let data = if range > 0.0 {
        g.data().iter().map(|&v| ((v - mn) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; g.len()]
    };
    Tensor::new(g.shape(), data).expect("same shape")
}

/// Shifts per-frame maps `span` steps later in time, zero-filling the front.
pub fn align_guidance(maps: &[Map], span: usize, layer: usize) -> Result<GuidanceStack> {
    let t = maps.len();
    if span >= t {
        return Err(param_err!("alignment span {span} must be below sequence length {t}"));
    }
    let zero = Tensor::zeros(maps[0].shape());
    let aligned = (0..t)
        .map(|i| if i < span { zero.clone() } else { maps[i - span].clone() })
        .collect();
    Ok(GuidanceStack {
        maps: aligned,
        layer,
        fill_count: span,
    })
}

/// Dynamic guidance `D_m` and static guidance `S_m` for every window of the clip.
pub fn window_guidance(frames: &[Map], cfg: &FrpConfig) -> Result<Vec<(Map, Map)>> {
    let windows = SlidingWindow::all(frames.len(), cfg.span)?;
    let span = cfg.span;
    let mut out = Vec::with_capacity(windows.len());
    let mut di = dynamic_image_base(&frames[..=span])?;
    // frames n..m-1 (0-based) of the current window
    let mut window_sum = Tensor::zeros(frames[0].shape());
    for f in &frames[..span] {
        window_sum = zip_map(&window_sum, f, |a, b| a + b);
    }
    for w in &windows {
        let (n, m) = (w.start - 1, w.end - 1);
        if n > 0 {
            window_sum = zip_map(&window_sum, &frames[m - 1], |a, b| a + b);
            window_sum = zip_map(&window_sum, &frames[n - 1], |a, b| a - b);
            di = dynamic_image_update(&di, &frames[n - 1], &frames[m], &window_sum, span)?;
        }
        let d = dynamic_guidance(&di, cfg.lambda);
        let s = static_guidance(&d, cfg.morph_size)?;
        out.push((d, s));
    }
    Ok(out)
}

/// Guidance stacks for each feature resolution in `layer_sizes`.
pub fn clip_guidance(clip: &VideoClip, cfg: &FrpConfig, layer_sizes: &[(usize, usize)]) -> Result<Vec<GuidanceStack>> {
    let frames = clip.intensity();
    let t = frames.len();
    let per_window = window_guidance(&frames, cfg)?;
    layer_sizes
        .iter()
        .enumerate()
        .map(|(l, &size)| {
            let mut maps = per_window
                .iter()
                .map(|(d, s)| Ok(normalize_guidance(&visual_guidance(d, s, size)?)))
                .collect::<Result<Vec<_>>>()?;
            maps.resize(t, Tensor::zeros(&[size.0, size.1]));
            align_guidance(&maps, cfg.span, l + 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f32]) -> Map {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    fn scalar_frames(v: &[f32]) -> Vec<Map> {
        v.iter().map(|&x| map(1, 1, &[x])).collect()
    }

    #[test]
    fn base_coefficients() {
        let frames = scalar_frames(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dynamic_image_base(&frames).unwrap().data(), &[10.0]);
        let two = scalar_frames(&[0.25, 1.0]);
        assert_eq!(dynamic_image_base(&two).unwrap().data(), &[0.75]);
        let flat = scalar_frames(&[0.4; 5]);
        assert!(dynamic_image_base(&flat).unwrap().data()[0].abs() < 1e-6);
        assert!(dynamic_image_base(&scalar_frames(&[1.0])).is_err());
    }

    #[test]
    fn update_hand_evaluation() {
        let z = map(1, 1, &[0.0]);
        let out = dynamic_image_update(&z, &map(1, 1, &[1.0]), &map(1, 1, &[5.0]), &map(1, 1, &[2.0]), 1).unwrap();
        assert_eq!(out.data(), &[2.0]);
        let c = map(1, 1, &[0.3]);
        let still = dynamic_image_update(&z, &c, &c, &map(1, 1, &[0.9]), 3).unwrap();
        assert!(still.data()[0].abs() < 1e-6);
        assert!(dynamic_image_update(&z, &c, &map(1, 2, &[0.0, 0.0]), &c, 1).is_err());
    }

    #[test]
    fn recursion_matches_recomputed_base() {
        let v = [0.1, 0.7, 0.2, 0.9, 0.4, 0.6];
        let frames = scalar_frames(&v);
        for span in 1..5 {
            let cfg = FrpConfig {
                span,
                morph_size: 1,
                lambda: 1.0,
            };
            let windows = SlidingWindow::all(6, span).unwrap();
            let mut di = dynamic_image_base(&frames[..=span]).unwrap();
            let mut sum: f32 = v[1..=span].iter().sum();
            for w in windows.iter().skip(1) {
                let (n, m) = (w.start - 1, w.end - 1);
                di = dynamic_image_update(&di, &frames[n - 1], &frames[m], &map(1, 1, &[sum]), span).unwrap();
                let oracle = dynamic_image_base(&frames[n..=m]).unwrap();
                assert!((di.data()[0] - oracle.data()[0]).abs() < 1e-5, "span {span} window {w:?}");
                sum += v[m] - v[n];
            }
            let per_window = window_guidance(&frames, &cfg).unwrap();
            assert_eq!(per_window.len(), 6 - span);
            for (w, (d, _)) in windows.iter().zip(&per_window) {
                let base = dynamic_image_base(&frames[w.start - 1..w.end]).unwrap();
                let expected = dynamic_guidance(&base, 1.0);
                assert!((d.data()[0] - expected.data()[0]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dynamic_guidance_values() {
        let d = dynamic_guidance(&map(1, 3, &[0.0, 20.0, -20.0]), DEFAULT_LAMBDA);
        assert_eq!(d.data()[0], 0.0);
        assert!((d.data()[1] - 40.0).abs() < 1e-4);
        assert!(d.data()[2].abs() < 1e-4);
    }

    #[test]
    fn static_guidance_threshold_and_opening() {
        let d = map(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(above_mean(&d).data(), &[0.0, 0.0, 3.0, 6.0]);
        let zero = Tensor::zeros(&[4, 4]);
        assert_eq!(static_guidance(&zero, 3).unwrap().data(), zero.data());
        let mut spot = vec![0.0; 25];
        spot[12] = 1.0;
        let s = static_guidance(&map(5, 5, &spot), 3).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(static_guidance(&zero, 2).is_err());
    }

    #[test]
    fn visual_guidance_cases() {
        let d = map(2, 2, &[5.0, -1.0, 3.0, 2.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert!(visual_guidance(&d, &z, (2, 2)).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = Tensor::full(&[2, 2], 1.0);
        assert_eq!(visual_guidance(&ones, &ones, (1, 1)).unwrap().data(), &[2.0]);
        assert!(visual_guidance(&ones, &ones, (3, 3)).is_err());
    }

    #[test]
    fn normalization() {
        let g = normalize_guidance(&map(2, 2, &[1.0, 3.0, 5.0, 9.0]));
        assert_eq!(g.data(), &[0.0, 0.25, 0.5, 1.0]);
        let c = normalize_guidance(&Tensor::full(&[2, 2], 7.0));
        assert_eq!(c.data(), &[0.0; 4]);
    }

    #[test]
    fn alignment_shifts_and_fills() {
        let maps: Vec<Map> = (1..=8).map(|i| map(1, 1, &[i as f32])).collect();
        let id = align_guidance(&maps, 0, 1).unwrap();
        assert_eq!(id.maps, maps);
        let st = align_guidance(&maps, 4, 1).unwrap();
        assert_eq!(st.fill_count, 4);
        assert!(st.maps[..4].iter().all(|m| m.data() == [0.0]));
        assert_eq!(st.maps[4].data(), &[1.0]);
        let twice = align_guidance(&align_guidance(&maps, 2, 1).unwrap().maps, 3, 1).unwrap();
        assert_eq!(twice.maps, align_guidance(&maps, 5, 1).unwrap().maps);
        assert!(align_guidance(&maps, 8, 1).is_err());
    }

    fn brute_morph(m: &Map, k: usize, erode: bool) -> Vec<f32> {
        let (h, w) = (m.shape()[0] as isize, m.shape()[1] as isize);
        let r = (k / 2) as isize;
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let mut acc = if erode { f32::INFINITY } else { f32::NEG_INFINITY };
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, x) = (i + di, j + dj);
                        let v = if y < 0 || x < 0 || y >= h || x >= w { 0.0 } else { m.data()[(y * w + x) as usize] };
                        acc = if erode { acc.min(v) } else { acc.max(v) };
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn morphology_matches_brute_force() {
        let vals: Vec<f32> = (0..42).map(|i| ((i * 37 % 11) as f32 - 3.0) * 0.5).collect();
        let m = map(6, 7, &vals);
        for k in [1, 3, 5] {
            assert_eq!(erode(&m, k).data(), brute_morph(&m, k, true).as_slice());
            assert_eq!(dilate(&m, k).data(), brute_morph(&m, k, false).as_slice());
        }
    }

    #[test]
    fn clip_guidance_shapes() {
        use crate::clip::{Modality, VideoClip};
        let data: Vec<f32> = (0..12 * 3 * 8 * 8).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        let clip = VideoClip::new(Tensor::new(&[12, 3, 8, 8], data).unwrap(), 0, Modality::Rgb).unwrap();
        let cfg = FrpConfig {
            span: 4,
            ..FrpConfig::default()
        };
        let stacks = clip_guidance(&clip, &cfg, &[(4, 4), (2, 2)]).unwrap();
        assert_eq!(stacks.len(), 2);
        for (l, st) in stacks.iter().enumerate() {
            assert_eq!(st.layer, l + 1);
            assert_eq!(st.maps.len(), 12);
            assert!(st.maps[..4].iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
            assert!(st.maps.iter().flat_map(|m| m.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(stacks[1].to_tensor().shape(), &[1, 12, 2, 2]);
    }
}
