//! Decoupled spatial network: stacked space-centric inception layers, each
//! followed by guidance fusion, reduced to one feature vector per frame.

use crate::error::{dim_err, param_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Real;

pub const DEFAULT_LAYERS: usize = 6;
pub const BASE_CHANNELS: [usize; 5] = [16, 32, 64, 64, 128];

/// One space-centric inception layer with its guidance fusion kernel.
#[derive(Clone, Debug)]
pub struct SmsLayer {
    pub branches: [Conv; 3],
    pub pool_branch: Conv,
    pub fuse: ParamId,
    pub input: usize,
    pub output: usize,
}

impl SmsLayer {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize) -> Result<Self> {
        if output == 0 || output % 4 != 0 {
            return Err(param_err!("layer width {output} must be a positive multiple of 4"));
        }
        let per = output / 4;
        b.scoped(name, |b| {
            Ok(SmsLayer {
                branches: [
                    Conv::new(b, "branch0", input, per, [1, 1, 1])?,
                    Conv::new(b, "branch1", input, per, [1, 3, 3])?,
                    Conv::new(b, "branch2", input, per, [1, 5, 5])?,
                ],
                pool_branch: Conv::new(b, "branch3", input, per, [1, 1, 1])?,
                fuse: b.uniform("fuse", &[output, output, 1, 1, 1], output)?,
                input,
                output,
            })
        })
    }
}

/// Layer widths: the base plan scaled by `width`, with the last layer set to `d`.
pub fn channel_plan(layers: usize, width: f64, d: usize) -> Result<Vec<usize>> {
    if layers == 0 || width <= 0.0 {
        return Err(param_err!("need at least one layer and a positive width multiplier"));
    }
    let mut plan: Vec<usize> = (0..layers - 1)
        .map(|l| {
            let base = BASE_CHANNELS[l.min(BASE_CHANNELS.len() - 1)] as f64 * width;
            ((base / 4.0).round() as usize).max(1) * 4
        })
        .collect();
    plan.push(d);
    Ok(plan)
}

#[derive(Clone, Debug)]
pub struct Dsn {
    pub layers: Vec<SmsLayer>,
}

impl Dsn {
    /// `channels` lists each layer's output width; the last one is `d`.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, input: usize, channels: &[usize]) -> Result<Self> {
        b.scoped(name, |b| {
            let mut cin = input;
            let mut layers = Vec::with_capacity(channels.len());
            for (l, &c) in channels.iter().enumerate() {
                layers.push(SmsLayer::new(b, &format!("layer{}", l + 1), cin, c)?);
                cin = c;
            }
            Ok(Dsn { layers })
        })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    /// Feature-map size after each layer for an `h×w` input.
    pub fn guidance_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut size = (h, w);
        self.layers
            .iter()
            .map(|_| {
                size = (size.0 / 2, size.1 / 2);
                size
            })
            .collect()
    }
}

/// Inception branches, channel concatenation, then 2×2 spatial max pooling.
/// `x` is `C×T×H×W`.
pub fn sms_forward<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, x: Var, layer: &SmsLayer) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] != layer.input {
        return Err(dim_err!("layer expects {}×T×H×W input, got {:?}", layer.input, s));
    }
    if s[2] < 2 || s[3] < 2 {
        return Err(dim_err!("spatial extent {}×{} too small to pool", s[2], s[3]));
    }
    let mut outs = Vec::with_capacity(4);
    for conv in &layer.branches {
        let y = conv.forward(g, ps, x)?;
        outs.push(g.gelu(y));
    }
    let pooled = g.maxpool3d(x, [1, 3, 3], [1, 1, 1], [0, 1, 1])?;
    let y = layer.pool_branch.forward(g, ps, pooled)?;
    outs.push(g.gelu(y));
    let cat = g.concat(&outs, 0)?;
    g.maxpool3d(cat, [1, 2, 2], [1, 2, 2], [0, 0, 0])
}

/// `fuse(f ⊙ G) + f` with `G` (`1×T×h×w`) broadcast over channels.
pub fn fuse_guidance<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, f: Var, guidance: Var, fuse: ParamId) -> Result<Var> {
    let (fs, gs) = (g.shape(f).to_vec(), g.shape(guidance).to_vec());
    if gs.len() != 4 || gs[0] != 1 || gs[1..] != fs[1..] {
        return Err(dim_err!("guidance {:?} does not match features {:?}", gs, fs));
    }
    let masked = g.mul(f, guidance)?;
    let k = g.param(ps, fuse);
    let mixed = g.conv3d(masked, k, [0, 0, 0])?;
    g.add(mixed, f)
}

/// Runs the stack on a `C×T×H×W` clip and returns `T×d`. Without guidance
/// the fusion step is skipped.
pub fn dsn_forward<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    dsn: &Dsn,
    x: Var,
    guidance: Option<&[Var]>,
) -> Result<Var> {
    if let Some(gd) = guidance {
        if gd.len() != dsn.layers.len() {
            return Err(dim_err!("{} guidance stacks for {} layers", gd.len(), dsn.layers.len()));
        }
    }
    let mut h = x;
    for (l, layer) in dsn.layers.iter().enumerate() {
        h = sms_forward(g, ps, h, layer)?;
        if let Some(gd) = guidance {
            h = fuse_guidance(g, ps, h, gd[l], layer.fuse)?;
        }
    }
    let pooled = g.global_avg_pool(h, &[2, 3])?;
    let s = g.shape(pooled).to_vec();
    let flat = g.reshape(pooled, &[s[0], s[1]])?;
    g.transpose(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(input: usize, channels: &[usize]) -> (ParamStore, Dsn) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dsn = Dsn::new(&mut ParamBuilder::new(&mut ps, &mut rng), "dsn", input, channels).unwrap();
        (ps, dsn)
    }

    #[test]
    fn shapes_and_names() {
        let (ps, dsn) = build(3, &[8, 16]);
        assert!(ps.id("dsn.layer1.branch0.kernel").is_some());
        assert!(ps.id("dsn.layer2.fuse").is_some());
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 5, 9, 7], 1));
        let y = sms_forward(&mut g, &ps, x, &dsn.layers[0]).unwrap();
        assert_eq!(g.shape(y), &[8, 5, 4, 3]);
        assert_eq!(dsn.guidance_sizes(9, 7), vec![(4, 3), (2, 1)]);
        let tiny = g.constant(random(&[3, 2, 1, 4], 2));
        assert!(sms_forward(&mut g, &ps, tiny, &dsn.layers[0]).is_err());
    }

    #[test]
    fn concatenation_matches_branches() {
        let (ps, dsn) = build(2, &[8]);
        let layer = &dsn.layers[0];
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 6, 6], 4));
        let y = sms_forward(&mut g, &ps, x, layer).unwrap();
        let got = g.tensor(y);
        for (b, conv) in layer.branches.iter().enumerate() {
            let mut gb = Graph::new();
            let xb = gb.constant(random(&[2, 3, 6, 6], 4));
            let c = conv.forward(&mut gb, &ps, xb).unwrap();
            let a = gb.gelu(c);
            let p = gb.maxpool3d(a, [1, 2, 2], [1, 2, 2], [0, 0, 0]).unwrap();
            let want = gb.tensor(p);
            let n = want.len();
            assert_eq!(&got.data()[b * n..(b + 1) * n], want.data());
        }
    }

    #[test]
    fn fusion_identities() {
        let (mut ps, dsn) = build(4, &[4]);
        let fuse = dsn.layers[0].fuse;
        let f = random(&[4, 2, 3, 3], 5);
        let run = |ps: &ParamStore, gv: f32| {
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let gd = g.constant(Tensor::full(&[1, 2, 3, 3], gv));
            let o = fuse_guidance(&mut g, ps, fv, gd, fuse).unwrap();
            g.tensor(o)
        };
        assert_eq!(run(&ps, 0.0).data(), f.data());
        let eye: Vec<f32> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        ps.get_mut(fuse).data_mut().copy_from_slice(&eye);
        let doubled = run(&ps, 1.0);
        assert!(doubled.data().iter().zip(f.data()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-6));
        ps.get_mut(fuse).data_mut().fill(0.0);
        assert_eq!(run(&ps, 0.7).data(), f.data());
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(fuse_guidance(&mut g, &ps, fv, bad, fuse).is_err());
    }

    #[test]
    fn zero_guidance_is_plain_stack() {
        let (ps, dsn) = build(3, &[8, 12]);
        let x = random(&[3, 4, 8, 8], 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zeros: Vec<Var> = dsn
            .guidance_sizes(8, 8)
            .iter()
            .map(|&(h, w)| g.constant(Tensor::zeros(&[1, 4, h, w])))
            .collect();
        let guided = dsn_forward(&mut g, &ps, &dsn, xv, Some(&zeros)).unwrap();
        let plain = dsn_forward(&mut g, &ps, &dsn, xv, None).unwrap();
        assert_eq!(g.shape(guided), &[4, 12]);
        assert_eq!(g.value(guided), g.value(plain));
    }

    #[test]
    fn frames_stay_independent() {
        let (ps, dsn) = build(1, &[4, 8]);
        let a = random(&[1, 3, 8, 8], 7);
        let mut b = a.clone();
        for v in &mut b.data_mut()[128..] {
            *v += 0.5;
        }
        let out = |x: Tensor<f32>| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let gd: Vec<Var> = [(4, 4), (2, 2)].iter().map(|&(h, w)| g.constant(Tensor::full(&[1, 3, h, w], 0.5))).collect();
            let o = dsn_forward(&mut g, &ps, &dsn, xv, Some(&gd)).unwrap();
            g.tensor(o)
        };
        let (oa, ob) = (out(a), out(b));
        assert_eq!(oa.data()[..16], ob.data()[..16]);
        assert_ne!(oa.data()[16..], ob.data()[16..]);
    }

    #[test]
    fn plan() {
        assert_eq!(channel_plan(6, 1.0, 128).unwrap(), vec![16, 32, 64, 64, 128, 128]);
        assert_eq!(channel_plan(3, 0.5, 32).unwrap(), vec![8, 16, 32]);
        assert!(channel_plan(0, 1.0, 8).is_err());
    }
}
