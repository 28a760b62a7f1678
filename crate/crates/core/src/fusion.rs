//! Cross-modal interaction, the CAPF encoder/decoder, prediction rules and
//! the named loss assemblies.

use std::fmt;

use crate::error::{dim_err, param_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Mlp};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_GAMMA: f64 = 0.5;

/// `LN(MLP([own ‖ other])) + raw`.
pub fn spatial_interact<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    mlp: &Mlp,
    norm: &LayerNorm,
    own: Var,
    other: Var,
    raw: Var,
) -> Result<Var> {
    if g.shape(own) != g.shape(other) {
        return Err(dim_err!("modal features {:?} vs {:?}", g.shape(own), g.shape(other)));
    }
    let joint = g.concat(&[own, other], 1)?;
    let mixed = mlp.forward(g, ps, joint)?;
    let normed = norm.forward(g, ps, mixed)?;
    g.add(normed, raw)
}

/// Joint temporal representation from both class aggregates.
pub fn temporal_interact<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, mlp: &Mlp, rgb: Var, depth: Var) -> Result<Var> {
    if g.shape(rgb) != g.shape(depth) {
        return Err(dim_err!("class aggregates {:?} vs {:?}", g.shape(rgb), g.shape(depth)));
    }
    let joint = g.concat(&[rgb, depth], 1)?;
    mlp.forward(g, ps, joint)
}

#[derive(Clone, Debug)]
pub struct Capf {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Capf {
    /// `width` is the joint temporal width; the code is half of it.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(param_err!("joint width {width} must be even"));
        }
        let code = width / 2;
        b.scoped(name, |b| {
            Ok(Capf {
                encoder: Mlp::new(b, "encoder", &[width, code, code])?,
                decoder: Mlp::new(b, "decoder", &[code, code, width])?,
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CapfOutput {
    pub encoded: Var,
    pub decoded: Var,
    /// Reconstruction error of the decoder against the detached input.
    pub recon: Var,
}

pub fn capf_forward<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, capf: &Capf, joint: Var) -> Result<CapfOutput> {
    let encoded = capf.encoder.forward(g, ps, joint)?;
    let decoded = capf.decoder.forward(g, ps, encoded)?;
    let target = g.detach(joint);
    let recon = g.mse(decoded, target)?;
    Ok(CapfOutput {
        encoded,
        decoded,
        recon,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sum_logits<F: Real>(parts: &[&[F]]) -> Vec<F> {
    let mut out = vec![F::zero(); parts[0].len()];
    for p in parts {
        for (o, &x) in out.iter_mut().zip(p.iter()) {
            *o = *o + x;
        }
    }
    out
}

pub fn softmax<F: Real>(v: &[F]) -> Vec<F> {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: F = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Final prediction from the two modal classifiers and the CAPF classifier.
pub fn classify<F: Real>(rgb: &[F], depth: &[F], capf: &[F]) -> usize {
    argmax(&sum_logits(&[rgb, depth, capf]))
}

/// Late fusion by summing the two modal logits.
pub fn fuse_addition<F: Real>(rgb: &[F], depth: &[F]) -> usize {
    argmax(&sum_logits(&[rgb, depth]))
}

/// Late fusion by multiplying the two modal class probabilities.
pub fn fuse_multiplication<F: Real>(rgb: &[F], depth: &[F]) -> usize {
    let (p, q) = (softmax(rgb), softmax(depth));
    let prod: Vec<F> = p.iter().zip(&q).map(|(&a, &b)| a * b).collect();
    argmax(&prod)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms of one forward pass and their weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.terms {
            write!(f, "{}={:.4} ", t.name, t.value)?;
        }
        write!(f, "total={:.4}", self.total)
    }
}

/// Accumulates weighted graph terms into one scalar plus a report.
struct Assembly<'g, F: Real> {
    g: &'g mut Graph<F>,
    total: Option<Var>,
    report: LossReport,
}

impl<'g, F: Real> Assembly<'g, F> {
    fn new(g: &'g mut Graph<F>) -> Self {
        Assembly {
            g,
            total: None,
            report: LossReport::default(),
        }
    }

    fn push(&mut self, name: &str, weight: f64, term: Var) -> Result<()> {
        let value = self.g.scalar(term).to_f64().unwrap_or(f64::NAN);
        self.report.terms.push(LossTerm {
            name: name.to_string(),
            weight,
            value,
        });
        let scaled = if weight == 1.0 { term } else { self.g.scale(term, F::of(weight)) };
        self.total = Some(match self.total {
            Some(t) => self.g.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    }

    fn finish(mut self) -> Result<(Var, LossReport)> {
        let total = self.total.ok_or_else(|| param_err!("no loss terms"))?;
        self.report.total = self.g.scalar(total).to_f64().unwrap_or(f64::NAN);
        Ok((total, self.report))
    }
}

/// `gamma * sum_k CE(S_k) + (1 - gamma) * CE(S_all) + distill`, with
/// `S_all = sum_k S_k`. Returns the total, its report and `S_all`.
pub fn unimodal_total_loss<F: Real>(
    g: &mut Graph<F>,
    branch_logits: &[Var],
    distill: Option<Var>,
    target: usize,
    gamma: f64,
) -> Result<(Var, LossReport, Var)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(param_err!("gamma must lie in [0, 1], got {gamma}"));
    }
    let (first, rest) = branch_logits.split_first().ok_or_else(|| param_err!("no branch logits"))?;
    let mut all = *first;
    for &s in rest {
        all = g.add(all, s)?;
    }
    let mut ce = Vec::with_capacity(branch_logits.len() + 1);
    for &s in branch_logits.iter().chain(std::iter::once(&all)) {
        ce.push(g.cross_entropy(s, &[target])?);
    }
    let mut asm = Assembly::new(g);
    for (k, &c) in ce[..branch_logits.len()].iter().enumerate() {
        asm.push(&format!("cls_s{}", k + 1), gamma, c)?;
    }
    asm.push("cls_all", 1.0 - gamma, ce[branch_logits.len()])?;
    if let Some(d) = distill {
        asm.push("distill", 1.0, d)?;
    }
    let (total, report) = asm.finish()?;
    Ok((total, report, all))
}

/// Graph pieces of one modality that enter the multimodal loss.
#[derive(Clone, Copy, Debug)]
pub struct ModalTerms<'a> {
    pub name: &'a str,
    pub logits: Var,
    pub distill: Option<Var>,
}

fn one_hot<F: Real>(g: &mut Graph<F>, classes: usize, target: usize) -> Result<Var> {
    if target >= classes {
        return Err(param_err!("target {target} outside {classes} classes"));
    }
    let mut t = Tensor::zeros(&[1, classes]);
    t.data_mut()[target] = F::one();
    Ok(g.constant(t))
}

/// Unit-weighted cross entropy, binary cross entropy and squared error per
/// modality, each modality's distillation, then the CAPF reconstruction and
/// classification terms.
pub fn multimodal_total_loss<F: Real>(
    g: &mut Graph<F>,
    modalities: &[ModalTerms<'_>],
    capf_recon: Var,
    capf_logits: Var,
    target: usize,
) -> Result<(Var, LossReport)> {
    let mut named = Vec::new();
    for m in modalities {
        named.push((format!("cls_{}", m.name), g.cross_entropy(m.logits, &[target])?));
    }
    for m in modalities {
        let classes = g.shape(m.logits)[1];
        let hot = one_hot(g, classes, target)?;
        let p = g.sigmoid(m.logits);
        named.push((format!("bce_{}", m.name), g.bce(p, hot)?));
    }
    for m in modalities {
        let classes = g.shape(m.logits)[1];
        let hot = one_hot(g, classes, target)?;
        let p = g.softmax(m.logits);
        named.push((format!("mse_{}", m.name), g.mse(p, hot)?));
    }
    for m in modalities {
        if let Some(d) = m.distill {
            named.push((format!("distill_{}", m.name), d));
        }
    }
    named.push(("capf_recon".to_string(), capf_recon));
    named.push(("capf_cls".to_string(), g.cross_entropy(capf_logits, &[target])?));
    let mut asm = Assembly::new(g);
    for (name, v) in named {
        asm.push(&name, 1.0, v)?;
    }
    asm.finish()
}
