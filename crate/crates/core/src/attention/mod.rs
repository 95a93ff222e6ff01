//! Multi-head attention and pre-norm transformer layers.
//!
//! Activations are `[b, N, d]`. Head `h` of the `d × d` projections uses
//! columns `h·d_head .. (h+1)·d_head`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[cfg(test)]
mod tests;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
/// Added to masked scores; `exp` underflows to exactly zero.
const MASKED_SCORE: f64 = -1e300;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub d: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} is not divisible by {heads} heads")));
        }
        let mut proj = |s: &str| {
            (
                store.trunc_normal(format!("{prefix}.w{s}"), &[d, d], INIT_STD, rng),
                store.zeros(format!("{prefix}.b{s}"), &[d]),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Ok(Self { heads, d, wq, bq, wk, bk, wv, bv, wo, bo })
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_mlp: usize,
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_mlp: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = AttentionParams::init(store, &format!("{prefix}.attn"), d, heads, rng)?;
        Ok(Self {
            attn,
            ln1_g: store.ones(format!("{prefix}.ln1.g"), &[d]),
            ln1_b: store.zeros(format!("{prefix}.ln1.b"), &[d]),
            ln2_g: store.ones(format!("{prefix}.ln2.g"), &[d]),
            ln2_b: store.zeros(format!("{prefix}.ln2.b"), &[d]),
            w1: store.trunc_normal(format!("{prefix}.mlp.w1"), &[d, d_mlp], INIT_STD, rng),
            b1: store.zeros(format!("{prefix}.mlp.b1"), &[d_mlp]),
            w2: store.trunc_normal(format!("{prefix}.mlp.w2"), &[d_mlp, d], INIT_STD, rng),
            b2: store.zeros(format!("{prefix}.mlp.b2"), &[d]),
            d_mlp,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let a = &self.attn;
        vec![
            a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo, self.ln1_g, self.ln1_b, self.ln2_g,
            self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Attention probabilities of one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `[b, heads, |queries|, |keys|]`, rows sum to one.
    pub probs: Tensor,
    /// Token index of each query row.
    pub queries: Vec<usize>,
    /// Token index of each key column.
    pub keys: Vec<usize>,
    pub layer: usize,
    /// Order of application within the layer; equal stages run in parallel.
    pub stage: usize,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Head-averaged `|queries| × |keys|` matrix of sample `b`.
    pub fn mean_heads(&self, b: usize) -> Tensor {
        let s = self.probs.shape();
        let (h, nq, nk) = (s[1], s[2], s[3]);
        let block = &self.probs.data()[b * h * nq * nk..(b + 1) * h * nq * nk];
        let mut out = vec![0.0; nq * nk];
        for head in block.chunks_exact(nq * nk) {
            for (o, v) in out.iter_mut().zip(head) {
                *o += v / h as f64;
            }
        }
        Tensor::from_parts(vec![nq, nk], out)
    }

    /// Largest deviation of a row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        let nk = self.probs.shape()[3];
        self.probs
            .data()
            .chunks_exact(nk.max(1))
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Moves the record to global token indices.
    pub fn relabel(mut self, queries: Vec<usize>, keys: Vec<usize>, layer: usize, stage: usize) -> Self {
        debug_assert_eq!(queries.len(), self.queries.len());
        debug_assert_eq!(keys.len(), self.keys.len());
        self.queries = queries;
        self.keys = keys;
        self.layer = layer;
        self.stage = stage;
        self
    }
}

/// Per-call switches for a layer.
#[derive(Clone, Debug, Default)]
pub struct LayerOptions {
    /// Keep attention probabilities.
    pub record: bool,
    /// Key columns whose attention weight is forced to exactly zero; the
    /// remaining weights of each row renormalize.
    pub masked_keys: Vec<usize>,
    /// Per-sample residual-branch multipliers (stochastic depth).
    pub branch_scale: Option<Vec<f64>>,
}

fn check_tokens(g: &Graph, x: Var, d: usize, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [b, n, dd] if dd == d => Ok((b, n)),
        ref s => Err(Error::shape(op, s, &[0, 0, d])),
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn split_heads(g: &mut Graph, x: Var, b: usize, n: usize, h: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, n, h, dh])?;
    g.permute(x, &[0, 2, 1, 3])
}

fn attend(
    g: &mut Graph,
    vars: &Bound,
    p: &AttentionParams,
    xq: Var,
    xkv: Var,
    opts: &LayerOptions,
    op: &'static str,
) -> Result<(Var, Option<AttentionRecord>)> {
    let (b, nq) = check_tokens(g, xq, p.d, op)?;
    let (bk, nk) = check_tokens(g, xkv, p.d, op)?;
    if b != bk {
        return Err(Error::shape(op, g.shape(xq), g.shape(xkv)));
    }
    let (h, dh) = (p.heads, p.d_head());
    let q = affine(g, xq, vars[p.wq], vars[p.bq])?;
    let k = affine(g, xkv, vars[p.wk], vars[p.bk])?;
    let v = affine(g, xkv, vars[p.wv], vars[p.bv])?;
    let q = split_heads(g, q, b, nq, h, dh)?;
    let k = split_heads(g, k, b, nk, h, dh)?;
    let v = split_heads(g, v, b, nk, h, dh)?;
    let s = g.bmm(q, k, true)?;
    let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
    if !opts.masked_keys.is_empty() {
        let mut m = Tensor::zeros(&[b, h, nq, nk]);
        for row in m.data_mut().chunks_exact_mut(nk) {
            for &j in &opts.masked_keys {
                if j < nk {
                    row[j] = MASKED_SCORE;
                }
            }
        }
        let m = g.constant(m)?;
        s = g.add(s, m)?;
    }
    let a = g.softmax(s, 3)?;
    let record = opts.record.then(|| AttentionRecord {
        probs: g.value(a).clone(),
        queries: (0..nq).collect(),
        keys: (0..nk).collect(),
        layer: 0,
        stage: 0,
    });
    let o = g.bmm(a, v, false)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, nq, p.d])?;
    Ok((affine(g, o, vars[p.wo], vars[p.bo])?, record))
}

/// `Attention(W^Q x, W^K x, W^V x)` for `x` of shape `[b, N, d]`.
pub fn msa(
    g: &mut Graph,
    vars: &Bound,
    p: &AttentionParams,
    x: Var,
    opts: &LayerOptions,
) -> Result<(Var, Option<AttentionRecord>)> {
    attend(g, vars, p, x, x, opts, "msa")
}

/// `Attention(W^Q x, W^K y, W^V y)`.
pub fn mca(
    g: &mut Graph,
    vars: &Bound,
    p: &AttentionParams,
    x: Var,
    y: Var,
    opts: &LayerOptions,
) -> Result<(Var, Option<AttentionRecord>)> {
    attend(g, vars, p, x, y, opts, "mca")
}

fn residual(g: &mut Graph, x: Var, branch: Var, scale: Option<&[f64]>) -> Result<Var> {
    let branch = match scale {
        None => branch,
        Some(s) => {
            let shape = g.shape(branch).to_vec();
            let per = shape[1..].iter().product::<usize>();
            let m = Tensor::from_fn(&shape, |i| s[i / per.max(1)]);
            g.mul_const(branch, m)?
        }
    };
    g.add(x, branch)
}

fn mlp_block(g: &mut Graph, vars: &Bound, p: &LayerParams, y: Var, opts: &LayerOptions) -> Result<Var> {
    let n = g.layer_norm(y, vars[p.ln2_g], vars[p.ln2_b], LN_EPS)?;
    let hdn = affine(g, n, vars[p.w1], vars[p.b1])?;
    let hdn = g.gelu(hdn)?;
    let out = affine(g, hdn, vars[p.w2], vars[p.b2])?;
    residual(g, y, out, opts.branch_scale.as_deref())
}

/// `y = MSA(LN(z)) + z; z' = MLP(LN(y)) + y`.
pub fn transformer_layer(
    g: &mut Graph,
    vars: &Bound,
    p: &LayerParams,
    z: Var,
    opts: &LayerOptions,
) -> Result<(Var, Option<AttentionRecord>)> {
    check_branch_scale(g, z, opts)?;
    let n = g.layer_norm(z, vars[p.ln1_g], vars[p.ln1_b], LN_EPS)?;
    let (a, rec) = msa(g, vars, &p.attn, n, opts)?;
    let y = residual(g, z, a, opts.branch_scale.as_deref())?;
    Ok((mlp_block(g, vars, p, y, opts)?, rec))
}

/// `y = MCA(LN(z1), LN(z2)) + z1; z' = MLP(LN(y)) + y`.
pub fn cross_transformer_layer(
    g: &mut Graph,
    vars: &Bound,
    p: &LayerParams,
    z1: Var,
    z2: Var,
    opts: &LayerOptions,
) -> Result<(Var, Option<AttentionRecord>)> {
    check_branch_scale(g, z1, opts)?;
    let n1 = g.layer_norm(z1, vars[p.ln1_g], vars[p.ln1_b], LN_EPS)?;
    let n2 = g.layer_norm(z2, vars[p.ln1_g], vars[p.ln1_b], LN_EPS)?;
    let (a, rec) = mca(g, vars, &p.attn, n1, n2, opts)?;
    let y = residual(g, z1, a, opts.branch_scale.as_deref())?;
    Ok((mlp_block(g, vars, p, y, opts)?, rec))
}

fn check_branch_scale(g: &Graph, z: Var, opts: &LayerOptions) -> Result<()> {
    match (&opts.branch_scale, g.shape(z).first()) {
        (Some(s), Some(&b)) if s.len() != b => Err(Error::shape("drop_path", &[s.len()], &[b])),
        _ => Ok(()),
    }
}
