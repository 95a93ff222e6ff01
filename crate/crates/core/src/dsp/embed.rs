//! Linear patch embedding with CLS token and learned positions.

use rand::Rng;

use super::patches::{Modality, PatchSequence};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Projection `E`, CLS token and positional table for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// `patch_dim × d`.
    pub e: Tensor,
    /// `d`.
    pub cls: Tensor,
    /// `(n_max + 1) × d`.
    pub pos: Tensor,
}

impl EmbeddingParams {
    pub fn zeros(patch_dim: usize, d: usize, n_max: usize) -> Self {
        Self {
            e: Tensor::zeros(&[patch_dim, d]),
            cls: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[n_max + 1, d]),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        patch_dim: usize,
        d: usize,
        n_max: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            e: Tensor::trunc_normal(&[patch_dim, d], std, rng),
            cls: Tensor::randn(&[d], std, rng),
            pos: Tensor::randn(&[n_max + 1, d], std, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.cls.len()
    }
}

/// `(N + 1) × d` tokens, CLS first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[cls, x·E] + pos[..N+1]` for `x` of shape `[N, P]` or `[b, N, P]`.
pub fn embed(g: &mut Graph, x: Var, e: Var, cls: Var, pos: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let d = g.shape(e).get(1).copied().unwrap_or(0);
    if xs.len() < 2 || g.shape(e).len() != 2 || xs[xs.len() - 1] != g.shape(e)[0] {
        return Err(Error::shape("embed_tokens", &xs, g.shape(e)));
    }
    if g.shape(cls) != [d] {
        return Err(Error::shape("embed_tokens", g.shape(cls), &[d]));
    }
    let n = xs[xs.len() - 2];
    let table = g.shape(pos).to_vec();
    if table.len() != 2 || table[1] != d {
        return Err(Error::shape("embed_tokens", &table, &[n + 1, d]));
    }
    if table[0] < n + 1 {
        return Err(Error::invalid(
            "embed_tokens",
            format!("positional table has {} rows, {} tokens needed", table[0], n + 1),
        ));
    }
    let proj = g.matmul(x, e)?;
    let mut c = g.reshape(cls, &[1, d])?;
    for &lead in xs[..xs.len() - 2].iter().rev() {
        c = g.expand_leading(c, lead)?;
    }
    let axis = xs.len() - 2;
    let z = g.concat(&[c, proj], axis)?;
    let p = g.slice(pos, 0, 0, n + 1)?;
    g.add(z, p)
}

pub fn embed_tokens(patches: &PatchSequence, params: &EmbeddingParams) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let x = g.constant(patches.patches.clone())?;
    let e = g.constant(params.e.clone())?;
    let cls = g.constant(params.cls.clone())?;
    let pos = g.constant(params.pos.clone())?;
    let z = embed(&mut g, x, e, cls, pos)?;
    Ok(TokenSequence {
        tokens: g.value(z).clone(),
        modality: patches.modality,
    })
}
