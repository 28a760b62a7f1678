//! Decoupled temporal network: per-branch frame sub-sampling, a time-centric
//! inception layer, k-NN attention Transformer blocks and a class token.

use rand::Rng;

use crate::error::{dim_err, param_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, LayerNorm, Linear, Mlp};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Real;

pub const DEFAULT_DEPTH: usize = 6;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_MLP_RATIO: usize = 2;
const EMBED_INIT: f32 = 0.02;
pub const DEFAULT_BRANCH_FRAMES: [usize; 3] = [16, 32, 48];

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub frames: usize,
    pub depth: usize,
    pub heads: usize,
    /// Keys kept per query; `None` picks half the token count, rounded up.
    pub knn_k: Option<usize>,
    pub mlp_ratio: usize,
}

impl BranchConfig {
    pub fn new(frames: usize, depth: usize) -> Self {
        BranchConfig {
            frames,
            depth,
            heads: DEFAULT_HEADS,
            knn_k: None,
            mlp_ratio: DEFAULT_MLP_RATIO,
        }
    }

    /// Sequence length inside the blocks, class token included.
    pub fn tokens(&self) -> usize {
        self.frames / 2 + 1
    }

    pub fn keys_kept(&self) -> usize {
        self.knn_k.unwrap_or_else(|| self.tokens().div_ceil(2))
    }
}

/// 1-based frame indices `t = 1..T_n`, drawn from `[r*t - 1, r*t]` with
/// `r = ceil(T / T_n)` and clamped to `[1, T]`. Without an rng the upper end is used.
pub fn subsample_indices<R: Rng>(total: usize, frames: usize, rng: Option<&mut R>) -> Result<Vec<usize>> {
    if frames == 0 || frames > total {
        return Err(param_err!("cannot sample {frames} of {total} frames"));
    }
    let r = total.div_ceil(frames);
    let clamp = |i: usize| i.clamp(1, total);
    Ok(match rng {
        Some(rng) => (1..=frames).map(|t| clamp(r * t - rng.gen_range(0..=1))).collect(),
        None => (1..=frames).map(|t| clamp(r * t)).collect(),
    })
}

/// Selects rows of a `T×c` sequence by 1-based index.
pub fn subsample<F: Real>(g: &mut Graph<F>, x: Var, indices: &[usize]) -> Result<Var> {
    if indices.contains(&0) {
        return Err(param_err!("frame indices are 1-based"));
    }
    let rows: Vec<usize> = indices.iter().map(|i| i - 1).collect();
    g.gather_rows(x, &rows)
}

/// Time-centric inception layer: temporal kernels 1/3/5 plus a pooled path.
#[derive(Clone, Debug)]
pub struct Tms {
    pub branches: [Conv; 3],
    pub pool_branch: Conv,
    pub proj: Conv,
    pub width: usize,
}

impl Tms {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(param_err!("temporal width {width} must be a positive multiple of 4"));
        }
        let per = width / 4;
        b.scoped(name, |b| {
            Ok(Tms {
                branches: [
                    Conv::new(b, "branch0", width, per, [1, 1, 1])?,
                    Conv::new(b, "branch1", width, per, [3, 1, 1])?,
                    Conv::new(b, "branch2", width, per, [5, 1, 1])?,
                ],
                pool_branch: Conv::new(b, "branch3", width, per, [1, 1, 1])?,
                proj: Conv::new(b, "proj", width, width, [1, 1, 1])?,
                width,
            })
        })
    }
}

/// `T_n×c` in, `floor(T_n/2)×c` out.
pub fn tms_forward<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, tms: &Tms, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[1] != tms.width {
        return Err(dim_err!("expected T×{} tokens, got {:?}", tms.width, s));
    }
    if s[0] < 2 {
        return Err(dim_err!("temporal pooling needs at least 2 frames, got {}", s[0]));
    }
    let xt = g.transpose(x)?;
    let vol = g.reshape(xt, &[s[1], s[0], 1, 1])?;
    let mut outs = Vec::with_capacity(4);
    for conv in &tms.branches {
        outs.push(conv.forward(g, ps, vol)?);
    }
    let pooled = g.maxpool3d(vol, [3, 1, 1], [1, 1, 1], [1, 0, 0])?;
    outs.push(tms.pool_branch.forward(g, ps, pooled)?);
    let cat = g.concat(&outs, 0)?;
    let act = g.gelu(cat);
    let mixed = tms.proj.forward(g, ps, act)?;
    let down = g.maxpool3d(mixed, [2, 1, 1], [2, 1, 1], [0, 0, 0])?;
    let t = s[0] / 2;
    let flat = g.reshape(down, &[s[1], t])?;
    g.transpose(flat)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Attention {
                query: Linear::new(b, "query", width, width, true)?,
                key: Linear::new(b, "key", width, width, true)?,
                value: Linear::new(b, "value", width, width, true)?,
                out: Linear::new(b, "out", width, width, true)?,
            })
        })
    }
}

/// Multi-head attention where each query keeps only its `k` best-scoring keys.
pub fn knn_attention<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    attn: &Attention,
    x: Var,
    heads: usize,
    k: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (l, c) = (s[0], s[1]);
    if k == 0 || k > l {
        return Err(param_err!("k = {k} outside 1..={l}"));
    }
    if heads == 0 || c % heads != 0 {
        return Err(param_err!("width {c} not divisible into {heads} heads"));
    }
    let dh = c / heads;
    let q = attn.query.forward(g, ps, x)?;
    let kk = attn.key.forward(g, ps, x)?;
    let v = attn.value.forward(g, ps, x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(kk, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let weights = g.topk_softmax(scaled, k)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat(&outs, 1)?;
    attn.out.forward(g, ps, joined)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: Attention,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

/// `MLP(LN(attention(x))) + x`.
pub fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    block: &Block,
    x: Var,
    heads: usize,
    k: usize,
) -> Result<Var> {
    let a = knn_attention(g, ps, &block.attn, x, heads, k)?;
    let n = block.norm.forward(g, ps, a)?;
    let m = block.mlp.forward(g, ps, n)?;
    g.add(m, x)
}

#[derive(Clone, Debug)]
pub struct DtnBranch {
    pub config: BranchConfig,
    pub tms: Tms,
    pub cls_token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<Block>,
    pub head: Mlp,
}

impl DtnBranch {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize, config: BranchConfig) -> Result<Self> {
        if config.frames < 2 {
            return Err(param_err!("branch needs at least 2 frames"));
        }
        if config.heads == 0 || width % config.heads != 0 {
            return Err(param_err!("width {width} not divisible into {} heads", config.heads));
        }
        let tokens = config.tokens();
        if config.keys_kept() == 0 || config.keys_kept() > tokens {
            return Err(param_err!("knn_k {} outside 1..={tokens}", config.keys_kept()));
        }
        b.scoped(name, |b| {
            let tms = Tms::new(b, "tms", width)?;
            let cls_token = b.bounded("cls_token", &[1, width], EMBED_INIT)?;
            let position = b.bounded("position", &[tokens, width], EMBED_INIT)?;
            let blocks = (0..config.depth)
                .map(|i| {
                    b.scoped(&format!("block{i}"), |b| {
                        Ok(Block {
                            attn: Attention::new(b, "attn", width)?,
                            norm: LayerNorm::new(b, "norm", width)?,
                            mlp: Mlp::new(b, "mlp", &[width, width * config.mlp_ratio, width])?,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            let head = Mlp::new(b, "head", &[width, width, width])?;
            Ok(DtnBranch {
                config,
                tms,
                cls_token,
                position,
                blocks,
                head,
            })
        })
    }
}

/// One branch on already sub-sampled `T_n×c` tokens; returns the `1×c` class vector.
pub fn branch_forward<F: Real>(g: &mut Graph<F>, ps: &ParamStore<F>, branch: &DtnBranch, x: Var) -> Result<Var> {
    let local = tms_forward(g, ps, &branch.tms, x)?;
    let cls = g.param(ps, branch.cls_token);
    let seq = g.concat(&[cls, local], 0)?;
    let pos = g.param(ps, branch.position);
    let mut h = g.add(seq, pos)?;
    let (heads, k) = (branch.config.heads, branch.config.keys_kept());
    for block in &branch.blocks {
        h = transformer_block(g, ps, block, h, heads, k)?;
    }
    let token = g.narrow(h, 0, 0, 1)?;
    branch.head.forward(g, ps, token)
}

/// `sum_k z_k / tau`.
pub fn aggregate_branches<F: Real>(g: &mut Graph<F>, cls: &[Var], tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(param_err!("sharpness must be positive, got {tau}"));
    }
    let (first, rest) = cls.split_first().ok_or_else(|| param_err!("no branches to aggregate"))?;
    let mut acc = *first;
    for &z in rest {
        acc = g.add(acc, z)?;
    }
    Ok(g.scale(acc, F::of(1.0 / tau)))
}
