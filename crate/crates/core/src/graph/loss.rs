use super::{grad_buf, Graph, Node, Op, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Bce,
    Mse,
    KlDiv,
}

/// What a loss compares its prediction against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Values(Var),
}

fn clamp_prob<F: Real>(p: F) -> F {
    let eps = F::epsilon();
    p.max(eps).min(F::one() - eps)
}

fn check_probs<F: Real>(v: &[F], what: &str) -> Result<()> {
    if v.iter().all(|&p| p >= F::zero() && p <= F::one()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} outside [0, 1]")))
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

impl<F: Real> Graph<F> {
    pub fn loss(&mut self, pred: Var, target: Target<'_>, kind: LossKind) -> Result<Var> {
        match (kind, target) {
            (LossKind::CrossEntropy, Target::Classes(c)) => self.cross_entropy(pred, c),
            (LossKind::Bce, Target::Values(t)) => self.bce(pred, t),
            (LossKind::Mse, Target::Values(t)) => self.mse(pred, t),
            (LossKind::KlDiv, Target::Values(t)) => self.kl_div(pred, t),
            (kind, _) => Err(Error::Parameter(format!("unsupported target for {kind:?}"))),
        }
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = rows_of(self.shape(logits));
        if targets.len() != b {
            return Err(dim_err!("{} targets for {} rows of logits", targets.len(), b));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(dim_err!("class {} out of range for {} logits", t, c));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = F::zero();
        for (row, &t) in lv.chunks(c).zip(targets) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + lse - row[t];
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let loss = total / F::from_usize(b).unwrap();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross entropy of probabilities `p` against targets `t`.
    pub fn bce(&mut self, p: Var, t: Var) -> Result<Var> {
        if self.shape(p) != self.shape(t) {
            return Err(dim_err!("bce of {:?} against {:?}", self.shape(p), self.shape(t)));
        }
        check_probs(self.value(p), "bce prediction")?;
        check_probs(self.value(t), "bce target")?;
        let n = F::from_usize(self.value(p).len()).unwrap();
        let total: F = self
            .value(p)
            .iter()
            .zip(self.value(t))
            .map(|(&p, &t)| {
                let p = clamp_prob(p);
                -(t * p.ln() + (F::one() - t) * (F::one() - p).ln())
            })
            .sum();
        Ok(self.push(vec![1], vec![(total / n).max(F::zero())], Op::Bce { p, t }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("mse of {:?} against {:?}", self.shape(a), self.shape(b)));
        }
        let n = F::from_usize(self.value(a).len()).unwrap();
        let total: F = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![total / n], Op::Mse { a, b }))
    }

    /// Batch-mean `KL(p || q)` over last-axis probability rows.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(dim_err!("kl of {:?} against {:?}", self.shape(p), self.shape(q)));
        }
        check_probs(self.value(p), "kl reference distribution")?;
        check_probs(self.value(q), "kl approximating distribution")?;
        let (b, _) = rows_of(self.shape(p));
        let total: F = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .filter(|(&p, _)| p > F::zero())
            .map(|(&p, &q)| p * (p.ln() - clamp_prob(q).ln()))
            .sum();
        Ok(self.push(vec![1], vec![total / F::from_usize(b).unwrap()], Op::KlDiv { p, q }))
    }
}

pub(super) fn cross_entropy_backward<F: Real>(
    nodes: &[Node<F>],
    logits: Var,
    targets: &[usize],
    probs: &[F],
    g: F,
    bufs: &mut [Option<Vec<F>>],
) {
    let b = targets.len();
    let c = probs.len() / b;
    let scale = g / F::from_usize(b).unwrap();
    if let Some(gl) = grad_buf(nodes, bufs, logits) {
        for (r, &t) in targets.iter().enumerate() {
            for j in 0..c {
                let onehot = if j == t { F::one() } else { F::zero() };
                gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
            }
        }
    }
}

pub(super) fn bce_backward<F: Real>(
    nodes: &[Node<F>],
    p: Var,
    t: Var,
    g: F,
    bufs: &mut [Option<Vec<F>>],
) {
    let pv = &nodes[p.0].value;
    let tv = &nodes[t.0].value;
    let scale = g / F::from_usize(pv.len()).unwrap();
    if let Some(gp) = grad_buf(nodes, bufs, p) {
        for ((d, &pr), &tr) in gp.iter_mut().zip(pv).zip(tv) {
            let pc = clamp_prob(pr);
            *d = *d + scale * (pc - tr) / (pc * (F::one() - pc));
        }
    }
    if let Some(gt) = grad_buf(nodes, bufs, t) {
        for (d, &pr) in gt.iter_mut().zip(pv) {
            let pc = clamp_prob(pr);
            *d = *d - scale * (pc.ln() - (F::one() - pc).ln());
        }
    }
}

pub(super) fn mse_backward<F: Real>(
    nodes: &[Node<F>],
    a: Var,
    b: Var,
    g: F,
    bufs: &mut [Option<Vec<F>>],
) {
    let av = &nodes[a.0].value;
    let bv = &nodes[b.0].value;
    let scale = F::of(2.0) * g / F::from_usize(av.len()).unwrap();
    if let Some(ga) = grad_buf(nodes, bufs, a) {
        for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
            *d = *d + scale * (x - y);
        }
    }
    if let Some(gb) = grad_buf(nodes, bufs, b) {
        for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
            *d = *d - scale * (x - y);
        }
    }
}

pub(super) fn kl_backward<F: Real>(
    nodes: &[Node<F>],
    p: Var,
    q: Var,
    g: F,
    bufs: &mut [Option<Vec<F>>],
) {
    let pv = &nodes[p.0].value;
    let qv = &nodes[q.0].value;
    let rows = pv.len() / nodes[p.0].shape.last().unwrap();
    let scale = g / F::from_usize(rows).unwrap();
    if let Some(gp) = grad_buf(nodes, bufs, p) {
        for ((d, &pr), &qr) in gp.iter_mut().zip(pv).zip(qv) {
            if pr > F::zero() {
                *d = *d + scale * (pr.ln() - clamp_prob(qr).ln() + F::one());
            }
        }
    }
    if let Some(gq) = grad_buf(nodes, bufs, q) {
        for ((d, &pr), &qr) in gq.iter_mut().zip(pv).zip(qv) {
            *d = *d - scale * pr / clamp_prob(qr);
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
    fn identities_are_zero() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 3], &[0.2, 0.3, 0.5]));
        let q = g.constant(t(&[1, 3], &[0.2, 0.3, 0.5]));
        let kl = g.kl_div(p, q).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
        let m = g.mse(p, q).unwrap();
        assert_eq!(g.scalar(m), 0.0);
    }

    #[test]
    fn cross_entropy_of_flat_logits_is_ln2() {
        let mut g = Graph::new();
        let l = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.loss(l, Target::Classes(&[0]), LossKind::CrossEntropy).unwrap();
        assert!((g.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_probabilities_are_domain_errors() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[0.5, 1.5]));
        let q = g.constant(t(&[2], &[0.5, 0.5]));
        assert!(matches!(g.bce(p, q), Err(Error::Domain(_))));
        assert!(matches!(g.kl_div(p, q), Err(Error::Domain(_))));
    }

    #[test]
    fn wrong_target_kind_is_rejected() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[0.5, 0.5]));
        assert!(g.loss(p, Target::Classes(&[0]), LossKind::Mse).is_err());
    }
}
