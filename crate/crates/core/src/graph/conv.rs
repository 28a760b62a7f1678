use super::{grad_buf, Graph, Node, Op, Var};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::Real;

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn out_range(d: usize, pad: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (input + pad).saturating_sub(d).min(output);
    (lo, hi.max(lo))
}

impl<F: Real> Graph<F> {
    /// Stride-1 3-D cross-correlation with zero padding.
    ///
    /// `x` is `C_in×T×H×W`, `kernels` is `C_out×C_in×kt×kh×kw`.
    pub fn conv3d(&mut self, x: Var, kernels: Var, pad: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 4 || ks.len() != 5 || xs[0] != ks[1] {
            return Err(dim_err!("conv3d input {:?} with kernels {:?}", xs, ks));
        }
        let (ci, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kt, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
        for (ext, (p, k)) in [t, h, w].iter().zip(pad.iter().zip([kt, kh, kw])) {
            if ext + 2 * p < k {
                return Err(dim_err!(
                    "kernel {:?} larger than padded input {:?} (pad {:?})",
                    &ks[2..],
                    &xs[1..],
                    pad
                ));
            }
        }
        let geom = Geom {
            t,
            h,
            w,
            to: t + 2 * pad[0] - kt + 1,
            ho: h + 2 * pad[1] - kh + 1,
            wo: w + 2 * pad[2] - kw + 1,
            pad,
        };
        let (to, ho, wo) = (geom.to, geom.ho, geom.wo);
        let plane = to * ho * wo;
        let xv = self.value(x);
        let kv = self.value(kernels);
        let mut out = vec![F::zero(); co * plane];
        let mut col = vec![F::zero(); plane];
        for c in 0..ci {
            let xb = &xv[c * t * h * w..(c + 1) * t * h * w];
            for (j, off) in offsets(kt, kh, kw).enumerate() {
                let src = geom.shifted(xb, off, &mut col);
                for o in 0..co {
                    let kval = kv[(o * ci + c) * kt * kh * kw + j];
                    if kval != F::zero() {
                        axpy(&mut out[o * plane..(o + 1) * plane], kval, src);
                    }
                }
            }
        }
        Ok(self.push(vec![co, to, ho, wo], out, Op::Conv3d { x, k: kernels, pad }))
    }

    /// Max pooling over the trailing three axes. Padded cells never win.
    /// Ties go to the lowest linear index.
    pub fn maxpool3d(
        &mut self,
        x: Var,
        window: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        if window.contains(&0) || stride.contains(&0) {
            return Err(param_err!("pool window {:?} / stride {:?} must be positive", window, stride));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(dim_err!("maxpool3d needs rank >= 3, got {:?}", xs));
        }
        let r = xs.len();
        let (t, h, w) = (xs[r - 3], xs[r - 2], xs[r - 1]);
        let lead: usize = xs[..r - 3].iter().product();
        let ext = [t, h, w];
        let mut outs = [0usize; 3];
        for a in 0..3 {
            if window[a] > ext[a] + 2 * pad[a] || pad[a] >= window[a] {
                return Err(dim_err!(
                    "pool window {:?} (pad {:?}) does not fit extent {:?}",
                    window,
                    pad,
                    ext
                ));
            }
            outs[a] = (ext[a] + 2 * pad[a] - window[a]) / stride[a] + 1;
        }
        // input range [lo, hi) covered by each output position, per axis
        let ranges = |a: usize| -> Vec<(usize, usize)> {
            (0..outs[a])
                .map(|o| {
                    let start = o * stride[a];
                    let lo = start.saturating_sub(pad[a]);
                    let hi = (start + window[a]).saturating_sub(pad[a]).min(ext[a]);
                    (lo, hi.max(lo))
                })
                .collect()
        };
        let (rt, rh, rw) = (ranges(0), ranges(1), ranges(2));
        let xv = self.value(x);
        let n_out: usize = lead * outs.iter().product::<usize>();
        let mut out = Vec::with_capacity(n_out);
        let mut argmax = Vec::with_capacity(n_out);
        for l in 0..lead {
            let base = l * t * h * w;
            for &(t0, t1) in &rt {
                for &(h0, h1) in &rh {
                    for &(w0, w1) in &rw {
                        // scanning in index order keeps the lowest index on ties
                        let mut best_i = base + (t0 * h + h0) * w + w0;
                        let mut best = xv[best_i];
                        for it in t0..t1 {
                            for ih in h0..h1 {
                                let row = base + (it * h + ih) * w;
                                for i in row + w0..row + w1 {
                                    if xv[i] > best {
                                        best = xv[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let mut shape = xs[..r - 3].to_vec();
        shape.extend_from_slice(&outs);
        Ok(self.push(shape, out, Op::MaxPool { x, argmax }))
    }
}

pub(super) fn conv3d_backward<F: Real>(
    nodes: &[Node<F>],
    x: Var,
    k: Var,
    pad: [usize; 3],
    out_shape: &[usize],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let xs = &nodes[x.0].shape;
    let ks = &nodes[k.0].shape;
    let (ci, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kt, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
    let geom = Geom {
        t,
        h,
        w,
        to: out_shape[1],
        ho: out_shape[2],
        wo: out_shape[3],
        pad,
    };
    let plane = geom.to * geom.ho * geom.wo;
    let ksize = kt * kh * kw;
    let xv = &nodes[x.0].value;
    let kv = &nodes[k.0].value;
    let mut col = vec![F::zero(); plane];

    if let Some(gx) = grad_buf(nodes, bufs, x) {
        for c in 0..ci {
            let gxb = &mut gx[c * t * h * w..(c + 1) * t * h * w];
            for (j, off) in offsets(kt, kh, kw).enumerate() {
                col.fill(F::zero());
                let mut any = false;
                for o in 0..co {
                    let kval = kv[(o * ci + c) * ksize + j];
                    if kval != F::zero() {
                        axpy(&mut col, kval, &g[o * plane..(o + 1) * plane]);
                        any = true;
                    }
                }
                if any {
                    geom.scatter_add(&col, off, gxb);
                }
            }
        }
    }
    if let Some(gk) = grad_buf(nodes, bufs, k) {
        for c in 0..ci {
            let xb = &xv[c * t * h * w..(c + 1) * t * h * w];
            for (j, off) in offsets(kt, kh, kw).enumerate() {
                let src = geom.shifted(xb, off, &mut col);
                for o in 0..co {
                    let idx = (o * ci + c) * ksize + j;
                    gk[idx] = gk[idx] + dot(&g[o * plane..(o + 1) * plane], src);
                }
            }
        }
    }
}

/// Input and output extents of one channel plane.
struct Geom {
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
    pad: [usize; 3],
}

impl Geom {
    fn is_identity(&self, (dt, dh, dw): (usize, usize, usize)) -> bool {
        (self.t, self.h, self.w) == (self.to, self.ho, self.wo) && [dt, dh, dw] == self.pad
    }

    /// The input plane as seen through kernel offset `off`, laid out like the
    /// output, with zeros where the window leaves the input.
    fn shifted<'a, F: Real>(&self, xb: &'a [F], off: (usize, usize, usize), col: &'a mut [F]) -> &'a [F] {
        if self.is_identity(off) {
            return xb;
        }
        let (dt, dh, dw) = off;
        let (t0, t1) = out_range(dt, self.pad[0], self.t, self.to);
        let (h0, h1) = out_range(dh, self.pad[1], self.h, self.ho);
        let (w0, w1) = out_range(dw, self.pad[2], self.w, self.wo);
        for ot in 0..self.to {
            for oh in 0..self.ho {
                let row = &mut col[(ot * self.ho + oh) * self.wo..][..self.wo];
                if !(t0..t1).contains(&ot) || !(h0..h1).contains(&oh) || w0 >= w1 {
                    row.fill(F::zero());
                    continue;
                }
                let (it, ih) = (ot + dt - self.pad[0], oh + dh - self.pad[1]);
                row[..w0].fill(F::zero());
                row[w1..].fill(F::zero());
                row[w0..w1].copy_from_slice(&xb[(it * self.h + ih) * self.w + w0 + dw - self.pad[2]..][..w1 - w0]);
            }
        }
        col
    }

    /// Adjoint of `shifted`: adds `col` back onto the input plane.
    fn scatter_add<F: Real>(&self, col: &[F], off: (usize, usize, usize), gxb: &mut [F]) {
        if self.is_identity(off) {
            axpy(gxb, F::one(), col);
            return;
        }
        let (dt, dh, dw) = off;
        let (t0, t1) = out_range(dt, self.pad[0], self.t, self.to);
        let (h0, h1) = out_range(dh, self.pad[1], self.h, self.ho);
        let (w0, w1) = out_range(dw, self.pad[2], self.w, self.wo);
        if w0 >= w1 {
            return;
        }
        for ot in t0..t1 {
            let it = ot + dt - self.pad[0];
            for oh in h0..h1 {
                let ih = oh + dh - self.pad[1];
                let dst = &mut gxb[(it * self.h + ih) * self.w + w0 + dw - self.pad[2]..][..w1 - w0];
                for (a, &b) in dst.iter_mut().zip(&col[(ot * self.ho + oh) * self.wo..][w0..w1]) {
                    *a = *a + b;
                }
            }
        }
    }
}

/// Kernel offsets in row-major kernel order.
fn offsets(kt: usize, kh: usize, kw: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..kt).flat_map(move |dt| (0..kh).flat_map(move |dh| (0..kw).map(move |dw| (dt, dh, dw))))
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(F::zero(), |s, (&x, &y)| s + x * y);
    let mut acc = [F::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(Tensor::new(&[1, 2, 3, 4], v.clone()).unwrap());
        let k = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let y = g.conv3d(x, k, [0, 0, 0]).unwrap();
        assert_eq!(g.value(y), v.as_slice());
    }

    #[test]
    fn box_kernel_on_constant_interior() {
        let c = 0.75;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 5, 5], c));
        let k = g.constant(Tensor::full(&[1, 1, 1, 3, 3], 1.0));
        let y = g.conv3d(x, k, [0, 1, 1]).unwrap();
        let out = g.tensor(y);
        assert_eq!(out.shape(), &[1, 2, 5, 5]);
        // direct summation over the 3x3 neighbourhood, zero outside
        for t in 0..2 {
            for i in 0..5i32 {
                for j in 0..5i32 {
                    let mut s = 0.0;
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            if (0..5).contains(&(i + di)) && (0..5).contains(&(j + dj)) {
                                s += c;
                            }
                        }
                    }
                    assert!((out.get(&[0, t, i as usize, j as usize]) - s).abs() < 1e-12);
                }
            }
        }
        assert!((out.get(&[0, 0, 2, 2]) - 9.0 * c).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (ci, co, t, h, w) = (2, 3, 3, 5, 4);
        let (kt, kh, kw, pad) = (3, 3, 1, [1, 0, 0]);
        let xv: Vec<f64> = (0..ci * t * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..co * ci * kt * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[ci, t, h, w], xv.clone()).unwrap());
        let k = g.constant(Tensor::new(&[co, ci, kt, kh, kw], kv.clone()).unwrap());
        let y = g.conv3d(x, k, pad).unwrap();
        let out = g.tensor(y);
        let (to, ho, wo) = (t, h - 2, w);
        assert_eq!(out.shape(), &[co, to, ho, wo]);
        for o in 0..co {
            for (ot, oh, ow) in (0..to).flat_map(|a| (0..ho).flat_map(move |b| (0..wo).map(move |c| (a, b, c)))) {
                let mut s = 0.0;
                for c in 0..ci {
                    for dt in 0..kt {
                        let it = ot as i64 + dt as i64 - pad[0] as i64;
                        if !(0..t as i64).contains(&it) {
                            continue;
                        }
                        for dh in 0..kh {
                            let ih = oh + dh;
                            s += kv[((o * ci + c) * kt + dt) * kh + dh] * xv[((c * t + it as usize) * h + ih) * w + ow];
                        }
                    }
                }
                assert!((out.get(&[o, ot, oh, ow]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 1, 5, 5]));
        assert!(matches!(g.conv3d(x, k, [0, 1, 1]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn maxpool_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.maxpool3d(x, [1, 2, 2], [1, 2, 2], [0, 0, 0]).unwrap();
        assert_eq!(g.value(p), &[4.0]);
        let id = g.maxpool3d(x, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(g.value(id), g.value(x));
        assert!(matches!(
            g.maxpool3d(x, [0, 1, 1], [1, 1, 1], [0, 0, 0]),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let shape = [2, 3, 5, 6];
        // coarse values so ties are common
        let v: Vec<f64> = (0..2 * 3 * 5 * 6).map(|_| rng.gen_range(0..4) as f64).collect();
        for (window, stride, pad) in [([1, 3, 3], [1, 1, 1], [0, 1, 1]), ([2, 2, 2], [2, 2, 2], [0, 0, 1]), ([3, 1, 2], [1, 1, 2], [1, 0, 0])] {
            let mut g = Graph::<f64>::new();
            let x = g.variable(Tensor::new(&shape, v.clone()).unwrap());
            let p = g.maxpool3d(x, window, stride, pad).unwrap();
            let out = g.tensor(p);
            let s = g.sum(p);
            let gx = g.backward(s).unwrap().get(x);
            let mut hits = vec![0.0; v.len()];
            let os: [usize; 4] = out.shape().try_into().unwrap();
            for l in 0..2 {
                for (ot, oh, ow) in (0..os[1]).flat_map(|a| (0..os[2]).flat_map(move |b| (0..os[3]).map(move |c| (a, b, c)))) {
                    let mut best: Option<(f64, usize)> = None;
                    for dt in 0..window[0] {
                        for dh in 0..window[1] {
                            for dw in 0..window[2] {
                                let it = (ot * stride[0] + dt) as i64 - pad[0] as i64;
                                let ih = (oh * stride[1] + dh) as i64 - pad[1] as i64;
                                let iw = (ow * stride[2] + dw) as i64 - pad[2] as i64;
                                if it < 0 || ih < 0 || iw < 0 || it >= 3 || ih >= 5 || iw >= 6 {
                                    continue;
                                }
                                let i = ((l * 3 + it as usize) * 5 + ih as usize) * 6 + iw as usize;
                                if best.is_none_or(|(b, bi)| v[i] > b || (v[i] == b && i < bi)) {
                                    best = Some((v[i], i));
                                }
                            }
                        }
                    }
                    let (b, bi) = best.unwrap();
                    assert_eq!(out.get(&[l, ot, oh, ow]), b);
                    hits[bi] += 1.0;
                }
            }
            assert_eq!(gx.data(), hits.as_slice());
        }
    }

    #[test]
    fn maxpool_tie_routes_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[1, 1, 2, 2], 5.0));
        let p = g.maxpool3d(x, [1, 2, 2], [1, 2, 2], [0, 0, 0]).unwrap();
        let s = g.scale(p, 3.0);
        let s = g.sum(s);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x);
        assert_eq!(gx.data(), &[3.0, 0.0, 0.0, 0.0]);
        assert_eq!(gx.data().iter().sum::<f64>(), 3.0);
    }
}
