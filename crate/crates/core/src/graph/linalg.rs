use super::{add_into, broadcast_map, grad_buf, Graph, Node, Op, Var};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::{numel, Real};

impl<F: Real> Graph<F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == F::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err!("transpose expects a matrix, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| param_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(dim_err!("concat of {:?} with {:?} on axis {}", base, s, axis));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) of {:?}", s));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { a, axis, start }))
    }

    /// Selects (and possibly repeats) slices along axis 0.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if rows.is_empty() {
            return Err(param_err!("gather of zero rows"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(dim_err!("row {} out of range for {:?}", r, s));
        }
        let inner: usize = s[1..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&av[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Sum of every entry, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    /// Mean over `axes`; reduced axes are kept with extent 1.
    pub fn global_avg_pool(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axes.is_empty() {
            return Err(param_err!("empty axis set for average pooling"));
        }
        if let Some(ax) = axes.iter().find(|&&ax| ax >= s.len()) {
            return Err(param_err!("axis {} invalid for shape {:?}", ax, s));
        }
        let mut out_shape = s.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let map = broadcast_map(&s, &out_shape)?;
        let count = numel(&s) / numel(&out_shape);
        let mut out = vec![F::zero(); numel(&out_shape)];
        for (&x, &o) in self.value(a).iter().zip(&map) {
            out[o] = out[o] + x;
        }
        let inv = F::one() / F::from_usize(count).unwrap();
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(out_shape, out, Op::Mean { a, map, count }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let m = self.global_avg_pool(a, &axes).expect("valid axes");
        self.reshape(m, &[1]).expect("single entry")
    }
}

pub(super) fn matmul_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    (m, k, n): (usize, usize, usize),
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let av = &nodes[a.0].value;
    let bv = &nodes[b.0].value;
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bv[p * n..(p + 1) * n];
                let dot: F = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                ga[i * k + p] = ga[i * k + p] + dot;
            }
        }
    }
    if let Some(gb) = grad_buf(nodes, bufs, b) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                for (d, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *d = *d + x * y;
                }
            }
        }
    }
}

pub(super) fn transpose_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for i in 0..r {
            for j in 0..c {
                ga[i * c + j] = ga[i * c + j] + g[j * r + i];
            }
        }
    }
}

pub(super) fn concat_backward<F: Real>(
    nodes: &[Node<F>],
    parts: &[Var],
    axis: usize,
    out_shape: &[usize],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let row = out_shape[axis] * inner;
    let mut offset = 0;
    for &p in parts {
        let chunk = nodes[p.0].shape[axis] * inner;
        if let Some(gp) = grad_buf(nodes, bufs, p) {
            for o in 0..outer {
                let src = &g[o * row + offset..o * row + offset + chunk];
                add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
            }
        }
        offset += chunk;
    }
}

pub(super) fn narrow_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let full = nodes[a.0].shape[axis];
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let len = out_shape[axis];
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            add_into(
                &mut ga[dst..dst + len * inner],
                &g[o * len * inner..(o + 1) * len * inner],
            );
        }
    }
}

pub(super) fn gather_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    rows: &[usize],
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let inner: usize = nodes[a.0].shape[1..].iter().product();
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for (i, &r) in rows.iter().enumerate() {
            add_into(
                &mut ga[r * inner..(r + 1) * inner],
                &g[i * inner..(i + 1) * inner],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p), &[3.0, 7.0]);
        assert_eq!(g.shape(p), &[2, 1]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = g.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn average_pooling() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.global_avg_pool(x, &[0]).unwrap();
        assert_eq!(g.value(m), &[2.5]);
        let c = g.constant(Tensor::full(&[2, 3, 2], 1.5));
        let m = g.global_avg_pool(c, &[1, 2]).unwrap();
        assert_eq!(g.shape(m), &[2, 1, 1]);
        assert_eq!(g.value(m), &[1.5, 1.5]);
        assert!(g.global_avg_pool(c, &[]).is_err());
        assert!(g.global_avg_pool(c, &[3]).is_err());
    }

    #[test]
    fn average_pooling_matches_loop_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 4, 5], &v));
        let m = g.global_avg_pool(x, &[1]).unwrap();
        for i in 0..3 {
            for k in 0..5 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += v[i * 20 + j * 5 + k];
                }
                assert!((g.value(m)[i * 5 + k] - s / 4.0).abs() < 1e-12);
            }
        }
    }
}
