//! Central finite-difference verification of analytic gradients.
//!
//! Everything runs in `f64`. Functions with a max-pool tie at the evaluation
//! point are not differentiable there and must not be checked.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for
/// the scalar function `f` at `x`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    let analytic = g.backward(out)?.get(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check over every parameter value in `store`.
pub fn grad_check_params<Fun>(f: Fun, store: &ParamStore<f64>, h: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?.accumulate_into(&mut analytic)?;

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let mut g = Graph::new();
            let up = f(&mut g, &probe)?;
            let up = g.scalar(up);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let mut g = Graph::new();
            let down = f(&mut g, &probe)?;
            let down = g.scalar(down);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).grad().expect("tracked")[i];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, 3.0);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.sigmoid(x);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from the analytic pass but not from finite differences
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let d = g.detach(x);
                let y = g.mul(x, d)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
