//! Small learnable building blocks shared by the network modules.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", &[input, output], input)?;
            let bias = if bias {
                Some(b.constant("bias", &[output], 0.0)?)
            } else {
                None
            };
            Ok(Linear {
                weight,
                bias,
                input,
                output,
            })
        })
    }

    /// `x` is `rows × input`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, widths: &[usize]) -> Result<Self> {
        b.scoped(name, |b| {
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(b, &format!("fc{i}"), w[0], w[1], true))
                .collect::<Result<_>>()?;
            Ok(Mlp { layers })
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = l.forward(g, ps, h)?;
        }
        Ok(h)
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(LayerNorm {
                gain: b.constant("gain", &[d], 1.0)?,
                bias: b.constant("bias", &[d], 0.0)?,
            })
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias, F::of(Self::EPS))
    }
}

/// 3-D convolution with per-channel bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: [usize; 3],
}

impl Conv {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, size: [usize; 3]) -> Result<Self> {
        b.scoped(name, |b| {
            let fan_in = cin * size.iter().product::<usize>();
            Ok(Conv {
                kernel: b.he_uniform("kernel", &[cout, cin, size[0], size[1], size[2]], fan_in)?,
                bias: b.constant("bias", &[cout, 1, 1, 1], 0.0)?,
                size,
            })
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let k = g.param(ps, self.kernel);
        let pad = [self.size[0] / 2, self.size[1] / 2, self.size[2] / 2];
        let y = g.conv3d(x, k, pad)?;
        let b = g.param(ps, self.bias);
        g.add(y, b)
    }
}
