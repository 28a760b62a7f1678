use super::{broadcast_map, grad_buf, Graph, Node, Op, Var};
use crate::error::Result;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
}

impl<F: Real> Graph<F> {
    /// Elementwise binary op; `b` may broadcast to `a` over singleton dimensions.
    pub fn ew_op(&mut self, a: Var, b: Var, kind: EwKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let bmap = if sa.as_slice() == sb {
            None
        } else {
            Some(broadcast_map(&sa, sb)?)
        };
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: F, y: F| match kind {
            EwKind::Add => x + y,
            EwKind::Sub => x - y,
            EwKind::Mul => x * y,
        };
        let out: Vec<F> = match &bmap {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let op = match kind {
            EwKind::Add => Op::Add { a, b, bmap },
            EwKind::Sub => Op::Sub { a, b, bmap },
            EwKind::Mul => Op::Mul { a, b, bmap },
        };
        Ok(self.push(sa, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, EwKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, EwKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, EwKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c })
    }
}

pub(super) fn add_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    bmap: &Option<Vec<usize>>,
    g: &[F],
    sign_b: F,
    bufs: &mut [Option<Vec<F>>],
) {
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        super::add_into(ga, g);
    }
    if let Some(gb) = grad_buf(nodes, bufs, b) {
        match bmap {
            None => gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + sign_b * s),
            Some(m) => m.iter().zip(g).for_each(|(&j, &s)| gb[j] = gb[j] + sign_b * s),
        }
    }
}

pub(super) fn mul_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    bmap: &Option<Vec<usize>>,
    g: &[F],
    bufs: &mut [Option<Vec<F>>],
) {
    let av = &nodes[a.0].value;
    let bv = &nodes[b.0].value;
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        match bmap {
            None => {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d = *d + s * y;
                }
            }
            Some(m) => {
                for ((d, &s), &j) in ga.iter_mut().zip(g).zip(m) {
                    *d = *d + s * bv[j];
                }
            }
        }
    }
    if let Some(gb) = grad_buf(nodes, bufs, b) {
        match bmap {
            None => {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d = *d + s * x;
                }
            }
            Some(m) => {
                for ((&j, &s), &x) in m.iter().zip(g).zip(av) {
                    gb[j] = gb[j] + s * x;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_annihilator() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let a = g.constant(t(&[2], &[2.0, 3.0]));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let p = g.mul(a, z).unwrap();
        assert_eq!(g.value(p), &[0.0, 0.0]);
    }

    #[test]
    fn row_scaling_matches_loop_oracle() {
        let m: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let s = [2.0, -1.0, 0.5];
        let mut g = Graph::new();
        let a = g.constant(t(&[3, 4], &m));
        let b = g.constant(t(&[3, 1], &s));
        let out = g.mul(a, b).unwrap();
        let mut oracle = vec![0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                oracle[r * 4 + c] = m[r * 4 + c] * s[r];
            }
        }
        assert_eq!(g.value(out), oracle.as_slice());
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axis() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.variable(t(&[2, 1], &[10.0, 20.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).data(), &[6.0, 15.0]);
        assert_eq!(grads.get(a).data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }
}
