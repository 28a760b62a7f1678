//! Recoupling module: frame-by-channel attention built from an intra-frame
//! path (X) and an inter-frame path (Y), plus the distillation loss that
//! teaches the Y path from the temporal network's class scores.

use crate::error::{dim_err, param_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Linear, Mlp};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Real;

pub const GESTURE_TEMPERATURE: f64 = 0.4;
pub const ACTION_TEMPERATURE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Rcm {
    pub proj: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub y_mlp: Mlp,
    pub head: Linear,
    pub frames: usize,
    pub width: usize,
}

impl Rcm {
    /// `width` is the spatial feature width `d`; attention runs at `d/2`.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, frames: usize, width: usize, classes: usize) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(param_err!("feature width {width} must be even"));
        }
        b.scoped(name, |b| {
            Ok(Rcm {
                proj: Linear::new(b, "proj", width, width / 2, true)?,
                w_q: b.uniform("w_q", &[frames, frames], frames)?,
                w_k: b.uniform("w_k", &[frames, frames], frames)?,
                y_mlp: Mlp::new(b, "y_mlp", &[frames, frames, frames, frames])?,
                head: Linear::new(b, "head", frames, classes, true)?,
                frames,
                width,
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RcmOutput {
    pub projected: Var,
    pub a_x: Var,
    pub a_y: Var,
    pub w_embed: Var,
    pub a_xy: Var,
    pub enhanced: Var,
}

/// `sigmoid(row-mean(Q Kᵀ / sqrt(d)))` with `Q = Ōᵀ W_Q`, `K = Ōᵀ W_K`; returns `1×(d/2)`.
pub fn x_attention<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, rcm: &Rcm, projected: Var) -> Result<Var> {
    let s = g.shape(projected).to_vec();
    if s.len() != 2 || s[0] != rcm.frames {
        return Err(dim_err!("expected {}×c features, got {:?}", rcm.frames, s));
    }
    let ot = g.transpose(projected)?;
    let wq = g.param(ps, rcm.w_q);
    let wk = g.param(ps, rcm.w_k);
    let q = g.matmul(ot, wq)?;
    let k = g.matmul(ot, wk)?;
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let scaled = g.scale(qk, F::of(1.0 / (rcm.width as f64).sqrt()));
    let rows = g.global_avg_pool(scaled, &[1])?;
    let flat = g.reshape(rows, &[1, s[1]])?;
    Ok(g.sigmoid(flat))
}

/// Per-frame channel means through the Y-path MLP; returns `(W_embed, A_Y)`, each `1×T`.
pub fn y_attention<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, rcm: &Rcm, projected: Var) -> Result<(Var, Var)> {
    let t = g.shape(projected)[0];
    let means = g.global_avg_pool(projected, &[1])?;
    let row = g.reshape(means, &[1, t])?;
    let w_embed = rcm.y_mlp.forward(g, ps, row)?;
    let a_y = g.sigmoid(w_embed);
    Ok((w_embed, a_y))
}

/// Outer product `A_Yᵀ A_X`: `T×(d/2)`, rank one.
pub fn combine_xy<F: Real>(g: &mut Graph<F>, a_x: Var, a_y: Var) -> Result<Var> {
    let col = g.transpose(a_y)?;
    g.matmul(col, a_x)
}

pub fn enhance<F: Real>(g: &mut Graph<F>, features: Var, a_xy: Var) -> Result<Var> {
    if g.shape(features) != g.shape(a_xy) {
        return Err(dim_err!("features {:?} vs attention {:?}", g.shape(features), g.shape(a_xy)));
    }
    g.mul(features, a_xy)
}

/// Full module on `T×d` spatial features.
pub fn rcm_forward<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, rcm: &Rcm, features: Var) -> Result<RcmOutput> {
    let projected = rcm.proj.forward(g, ps, features)?;
    let a_x = x_attention(g, ps, rcm, projected)?;
    let (w_embed, a_y) = y_attention(g, ps, rcm, projected)?;
    let a_xy = combine_xy(g, a_x, a_y)?;
    let enhanced = enhance(g, projected, a_xy)?;
    Ok(RcmOutput {
        projected,
        a_x,
        a_y,
        w_embed,
        a_xy,
        enhanced,
    })
}

/// `KL(softmax(teacher/T) ‖ softmax(head(W_embed)/T))`; the teacher is detached.
pub fn distill_loss<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    rcm: &Rcm,
    w_embed: Var,
    teacher: Var,
    temperature: f64,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(param_err!("distillation temperature must be positive, got {temperature}"));
    }
    let student = rcm.head.forward(g, ps, w_embed)?;
    if g.shape(student) != g.shape(teacher) {
        return Err(dim_err!("teacher {:?} vs student {:?}", g.shape(teacher), g.shape(student)));
    }
    let inv = F::of(1.0 / temperature);
    let fixed = g.detach(teacher);
    let t = g.scale(fixed, inv);
    let s = g.scale(student, inv);
    let p = g.softmax(t);
    let q = g.softmax(s);
    g.kl_div(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(frames: usize, width: usize) -> (ParamStore, Rcm) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rcm = Rcm::new(&mut ParamBuilder::new(&mut ps, &mut rng), "rcm", frames, width, 3).unwrap();
        (ps, rcm)
    }

    #[test]
    fn x_attention_matches_loops() {
        let (ps, rcm) = build(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = random(&[4, 6], &mut rng);
        let mut g = Graph::new();
        let ov = g.constant(o.clone());
        let ax = x_attention(&mut g, &ps, &rcm, ov).unwrap();
        let (wq, wk) = (ps.get(rcm.w_q).data(), ps.get(rcm.w_k).data());
        let (t, c) = (4, 6);
        let proj = |w: &[f32]| {
            let mut m = vec![vec![0.0f64; t]; c];
            for ci in 0..c {
                for j in 0..t {
                    for i in 0..t {
                        m[ci][j] += o.data()[i * c + ci] as f64 * w[i * t + j] as f64;
                    }
                }
            }
            m
        };
        let (q, k) = (proj(wq), proj(wk));
        for a in 0..c {
            let mut row = 0.0;
            for b in 0..c {
                row += (0..t).map(|j| q[a][j] * k[b][j]).sum::<f64>() / 12f64.sqrt();
            }
            let want = 1.0 / (1.0 + (-row / c as f64).exp());
            assert!((g.value(ax)[a] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_features_give_half() {
        let (mut ps, rcm) = build(5, 8);
        for l in &rcm.y_mlp.layers {
            ps.get_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[5, 4]));
        let ax = x_attention(&mut g, &ps, &rcm, z).unwrap();
        let (we, ay) = y_attention(&mut g, &ps, &rcm, z).unwrap();
        assert!(g.value(ax).iter().all(|&v| v == 0.5));
        assert!(g.value(we).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(ay), &[1, 5]);
        assert!(g.value(ay).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn outer_product_and_enhance() {
        let mut g: Graph<f32> = Graph::new();
        let ax = g.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let ay = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap());
        let a = combine_xy(&mut g, ax, ay).unwrap();
        assert_eq!(g.value(a), &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
        let f = g.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = enhance(&mut g, f, a).unwrap();
        assert_eq!(g.value(e), &[0.5, 1.0, 0.0, 0.0, 2.5, 3.0]);
        let ones = g.constant(Tensor::full(&[3, 2], 1.0));
        let same = enhance(&mut g, f, ones).unwrap();
        assert_eq!(g.value(same), g.value(f));
        let bad = g.constant(Tensor::full(&[2, 3], 1.0));
        assert!(enhance(&mut g, f, bad).is_err());
    }

    #[test]
    fn distillation_properties() {
        let (ps, rcm) = build(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut g = Graph::new();
            let we = g.variable(random(&[1, 4], &mut rng));
            let teacher = g.variable(random(&[1, 3], &mut rng));
            let l = distill_loss(&mut g, &ps, &rcm, we, teacher, GESTURE_TEMPERATURE).unwrap();
            assert!(g.scalar(l) >= -1e-7);
        }
        let mut g = Graph::new();
        let we = g.variable(random(&[1, 4], &mut rng));
        let student = rcm.head.forward(&mut g, &ps, we).unwrap();
        let teacher = g.variable(g.tensor(student));
        let l = distill_loss(&mut g, &ps, &rcm, we, teacher, ACTION_TEMPERATURE).unwrap();
        assert!(g.scalar(l).abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(teacher).data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let we = g.variable(random(&[1, 4], &mut rng));
        let t = g.variable(random(&[1, 3], &mut rng));
        assert!(distill_loss(&mut g, &ps, &rcm, we, t, 0.0).is_err());
    }

    #[test]
    fn attention_is_rank_one_in_unit_interval() {
        let (ps, rcm) = build(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let o = g.constant(random(&[6, 10], &mut rng));
        let out = rcm_forward(&mut g, &ps, &rcm, o).unwrap();
        let a = g.tensor(out.a_xy);
        assert_eq!(a.shape(), &[6, 5]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let d = a.data();
        for r in 1..6 {
            for c in 1..5 {
                let minor = d[c] * d[r * 5] - d[0] * d[r * 5 + c];
                assert!(minor.abs() < 1e-6);
            }
        }
    }
}
