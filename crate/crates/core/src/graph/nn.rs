use super::{grad_buf, Graph, Node, Op, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    SoftmaxLastDim,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is much cheaper than the libm call.
/// Saturates cleanly: `exp` overflow gives 1, underflow gives -1.
#[inline]
fn fast_tanh<F: Real>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / (F::one() + (two * u).exp())
}

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(SQRT_2_OVER_PI);
    let inner = c * (x + F::of(GELU_CUBIC) * x * x * x);
    F::of(0.5) * x * (F::one() + fast_tanh(inner))
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(SQRT_2_OVER_PI);
    let k = F::of(GELU_CUBIC);
    let th = fast_tanh(c * (x + k * x * x * x));
    let half = F::of(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * k * x * x)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax restricted to the `k` largest entries of each row; the
/// rest get exactly zero weight. Ties keep the lower index.
pub(crate) fn topk_softmax_rows<F: Real>(v: &[F], row: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); v.len()];
    let mut order: Vec<usize> = (0..row).collect();
    for (src, dst) in v.chunks(row).zip(out.chunks_mut(row)) {
        let keep: &[usize] = if k >= row {
            &order
        } else {
            order.sort_by(|&a, &b| src[b].partial_cmp(&src[a]).unwrap().then(a.cmp(&b)));
            &order[..k]
        };
        let mx = keep.iter().map(|&i| src[i]).fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for &i in keep {
            let e = (src[i] - mx).exp();
            dst[i] = e;
            z = z + e;
        }
        for &i in keep {
            dst[i] = dst[i] / z;
        }
        if k < row {
            order.sort_unstable();
        }
    }
    out
}

impl<F: Real> Graph<F> {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite activation input".into()));
        }
        Ok(match kind {
            Activation::Gelu => self.gelu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::SoftmaxLastDim => self.softmax(x),
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let row = *self.shape(a).last().unwrap();
        let out = topk_softmax_rows(self.value(a), row, row);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax { a })
    }

    /// Softmax over the `k` largest entries of each last-axis row.
    pub fn topk_softmax(&mut self, a: Var, k: usize) -> Result<Var> {
        let row = *self.shape(a).last().unwrap();
        if k == 0 || k > row {
            return Err(param_err!("top-k of {} out of range for rows of {}", k, row));
        }
        let out = topk_softmax_rows(self.value(a), row, k);
        let shape = self.shape(a).to_vec();
        // masked entries are constant zero, so the plain softmax backward applies
        Ok(self.push(shape, out, Op::Softmax { a }))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err!(
                "layer norm over {} with gain {:?} and bias {:?}",
                d,
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let dn = F::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.chunks(d) {
            let mean = r.iter().copied().sum::<F>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in r.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * gv[j] + bv[j]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }
}

pub(super) fn gelu_backward<F: Real>(nodes: &[Node<F>], a: Var, g: &[F], bufs: &mut [Option<Vec<F>>]) {
    let av = &nodes[a.0].value;
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av) {
            *d = *d + s * gelu_grad(x);
        }
    }
}

pub(super) fn sigmoid_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    y: &[F],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
            *d = *d + s * yv * (F::one() - yv);
        }
    }
}

pub(super) fn softmax_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    y: &[F],
    shape: &[usize],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let row = *shape.last().unwrap();
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for ((dr, yr), gr) in ga.chunks_mut(row).zip(y.chunks(row)).zip(g.chunks(row)) {
            let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d = *d + yv * (gv - dot);
            }
        }
    }
}

pub(super) fn layer_norm_backward<F: Real>(
    nodes: &[Node<F>],
    (x, gain, bias): (Var, Var, Var),
    xhat: &[F],
    inv_std: &[F],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let d = nodes[gain.0].value.len();
    let gv = &nodes[gain.0].value;
    if let Some(gx) = grad_buf(nodes, bufs, x) {
        let dn = F::from_usize(d).unwrap();
        for (r, &is) in inv_std.iter().enumerate() {
            let gr = &g[r * d..(r + 1) * d];
            let xr = &xhat[r * d..(r + 1) * d];
            let mut sum_dx = F::zero();
            let mut sum_dx_x = F::zero();
            for j in 0..d {
                let dxh = gr[j] * gv[j];
                sum_dx = sum_dx + dxh;
                sum_dx_x = sum_dx_x + dxh * xr[j];
            }
            for j in 0..d {
                let dxh = gr[j] * gv[j];
                let v = is / dn * (dn * dxh - sum_dx - xr[j] * sum_dx_x);
                gx[r * d + j] = gx[r * d + j] + v;
            }
        }
    }
    if let Some(gg) = grad_buf(nodes, bufs, gain) {
        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                gg[j] = gg[j] + gr[j] * xr[j];
            }
        }
    }
    if let Some(gb) = grad_buf(nodes, bufs, bias) {
        for gr in g.chunks(d) {
            for j in 0..d {
                gb[j] = gb[j] + gr[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4], 1.0));
        let s = g.activation(x, Activation::SoftmaxLastDim).unwrap();
        assert_eq!(g.value(s), &[0.25; 4]);
    }

    #[test]
    fn non_finite_input_is_detected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap());
        assert!(matches!(g.activation(x, Activation::Gelu), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap());
        let s = g.softmax(x);
        assert_eq!(g.value(s), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn topk_masks_weak_keys() {
        let v = [0.1f64, 3.0, 2.0, -1.0];
        let p = topk_softmax_rows(&v, 4, 2);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p[1] + p[2] - 1.0).abs() < 1e-12);
        // ties keep the lower index
        let p = topk_softmax_rows(&[1.0f64, 1.0, 1.0], 3, 1);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, 4.0, 4.0]).unwrap());
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }
}
