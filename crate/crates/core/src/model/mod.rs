//! Two-stream transformer with layer-scheduled cross-modal fusion.
//!
//! Token layout for records and analysis is `[rgb CLS, rgb patches, fsn,
//! spec CLS, spec patches]`; the fsn block is empty without bottleneck fusion.

mod check;
mod config;

use std::ops::Range;

use rand::{Rng, RngCore};

pub use check::GroupCheck;
pub use config::{Head, Inputs, ModelConfig, Strategy, UpdateMode, CONFIG_VERSION};

use crate::attention::{
    cross_transformer_layer, transformer_layer, AttentionRecord, LayerOptions, LayerParams, INIT_STD,
    LN_EPS,
};
use crate::dsp::{embed, Modality};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIds {
    pub e: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
}

/// Embedding, transformer layers and final norm of one modality.
///
/// With shared weights both modalities hold the same layer and norm ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityParams {
    pub embed: EmbeddingIds,
    pub layers: Vec<LayerParams>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Mbt {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub rgb: Option<ModalityParams>,
    pub spec: Option<ModalityParams>,
    /// Initial bottleneck tokens, `B × d`.
    pub fsn: Option<ParamId>,
    pub heads: Vec<HeadParams>,
}

fn init_tower<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<(Vec<LayerParams>, ParamId, ParamId)> {
    let layers = (0..cfg.layers)
        .map(|l| LayerParams::init(store, &format!("{prefix}.layer{l}"), cfg.d, cfg.d_mlp, cfg.heads, rng))
        .collect::<Result<Vec<_>>>()?;
    let g = store.ones(format!("{prefix}.norm.g"), &[cfg.d]);
    let b = store.zeros(format!("{prefix}.norm.b"), &[cfg.d]);
    Ok((layers, g, b))
}

fn init_embedding<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    m: Modality,
    rng: &mut R,
) -> EmbeddingIds {
    let (pd, n) = (cfg.tokenizer.patch_dim(m), cfg.tokenizer.n_tokens(m));
    let name = m.name();
    EmbeddingIds {
        e: store.trunc_normal(format!("{name}.embed.e"), &[pd, cfg.d], INIT_STD, rng),
        cls: store.zeros(format!("{name}.embed.cls"), &[cfg.d]),
        pos: store.normal(format!("{name}.embed.pos"), &[n + 1, cfg.d], INIT_STD, rng),
    }
}

/// Fresh parameters: fsn and positions `N(0, 0.02²)`, projections truncated
/// normal with std 0.02, LayerNorm `(1, 0)`, biases, CLS and classifier zero.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Mbt> {
    config.validate()?;
    let mut store = ParamStore::new();
    let uses = |m| config.inputs.uses(m);
    let shared = if config.share_weights {
        Some(init_tower(config, &mut store, "shared", rng)?)
    } else {
        None
    };
    let tower = |m: Modality, store: &mut ParamStore, rng: &mut R| -> Result<ModalityParams> {
        let embed = init_embedding(config, store, m, rng);
        let (layers, norm_g, norm_b) = match &shared {
            Some(s) => s.clone(),
            None => init_tower(config, store, m.name(), rng)?,
        };
        Ok(ModalityParams { embed, layers, norm_g, norm_b })
    };
    let rgb = uses(Modality::Rgb).then(|| tower(Modality::Rgb, &mut store, rng)).transpose()?;
    let spec = uses(Modality::Spec).then(|| tower(Modality::Spec, &mut store, rng)).transpose()?;
    let fsn = config
        .has_bottleneck()
        .then(|| store.normal("fsn", &[config.bottleneck, config.d], INIT_STD, rng));
    let widths = config.head.widths();
    let heads = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let tag = if widths.len() == 1 { String::new() } else { i.to_string() };
            HeadParams {
                w: store.zeros(format!("head{tag}.w"), &[config.d, c]),
                b: store.zeros(format!("head{tag}.b"), &[c]),
            }
        })
        .collect();
    Ok(Mbt { config: config.clone(), store, rgb, spec, fsn, heads })
}

/// Patch tensors, `[b, N, patch_dim]` per present modality.
#[derive(Clone, Debug, Default)]
pub struct ModelInputs {
    pub rgb: Option<Tensor>,
    pub spec: Option<Tensor>,
}

impl ModelInputs {
    pub fn batch(&self) -> usize {
        self.rgb.as_ref().or(self.spec.as_ref()).map_or(0, |t| t.shape()[0])
    }
}

/// Token activations at a layer boundary, `[b, N, d]` each.
#[derive(Clone, Copy, Debug)]
pub struct TokenState {
    pub rgb: Option<Var>,
    pub fsn: Option<Var>,
    pub spec: Option<Var>,
}

/// Global token index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub rgb: Range<usize>,
    pub fsn: Range<usize>,
    pub spec: Range<usize>,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.spec.end
    }

    pub fn range(&self, m: Modality) -> Range<usize> {
        match m {
            Modality::Rgb => self.rgb.clone(),
            Modality::Spec => self.spec.clone(),
        }
    }
}

/// Per-sample drop-path draws for training.
pub struct DropPath<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub record: bool,
    /// Exclude bottleneck keys from every attention softmax.
    pub isolate_bottleneck: bool,
    pub drop_path: Option<DropPath<'a>>,
}

impl ForwardOptions<'_> {
    fn layer_options(&mut self, batch: usize, masked_keys: Vec<usize>) -> LayerOptions {
        let branch_scale = self.drop_path.as_mut().filter(|d| d.p > 0.0).map(|d| {
            (0..batch)
                .map(|_| {
                    if d.rng.random::<f64>() < d.p {
                        0.0
                    } else {
                        1.0 / (1.0 - d.p)
                    }
                })
                .collect()
        });
        LayerOptions { record: self.record, masked_keys, branch_scale }
    }
}

pub struct ForwardOutput {
    /// Pre-softmax logits per head, `[b, classes]`, averaged over modalities.
    pub logits: Vec<Var>,
    pub state: TokenState,
    pub layout: TokenLayout,
    pub records: Vec<AttentionRecord>,
}

fn push_record(
    records: &mut Vec<AttentionRecord>,
    rec: Option<AttentionRecord>,
    queries: Vec<usize>,
    keys: Vec<usize>,
    layer: usize,
    stage: usize,
) {
    if let Some(r) = rec {
        records.push(r.relabel(queries, keys, layer, stage));
    }
}

fn cat(ranges: &[&Range<usize>]) -> Vec<usize> {
    ranges.iter().flat_map(|r| (*r).clone()).collect()
}

impl Mbt {
    pub fn modality(&self, m: Modality) -> Option<&ModalityParams> {
        match m {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Spec => self.spec.as_ref(),
        }
    }

    fn tower(&self, m: Modality) -> Result<&ModalityParams> {
        self.modality(m)
            .ok_or_else(|| Error::invalid("forward_mbt", format!("model has no {} stream", m.name())))
    }

    fn tokens(g: &Graph, v: Option<Var>) -> usize {
        v.map_or(0, |v| g.shape(v)[1])
    }

    pub fn layout(&self, g: &Graph, state: &TokenState) -> TokenLayout {
        let nr = Self::tokens(g, state.rgb);
        let nf = Self::tokens(g, state.fsn);
        let ns = Self::tokens(g, state.spec);
        TokenLayout { rgb: 0..nr, fsn: nr..nr + nf, spec: nr + nf..nr + nf + ns }
    }

    /// Embeds the present modalities and attaches the initial bottleneck.
    pub fn embed(&self, g: &mut Graph, vars: &Bound, inputs: &ModelInputs) -> Result<TokenState> {
        let mut one = |m: Modality, x: &Option<Tensor>| -> Result<Option<Var>> {
            match (x, self.modality(m)) {
                (None, None) => Ok(None),
                (Some(x), Some(p)) => {
                    let xv = g.constant(x.clone())?;
                    let e = &p.embed;
                    embed(g, xv, vars[e.e], vars[e.cls], vars[e.pos]).map(Some)
                }
                (Some(_), None) => Err(Error::invalid(
                    "forward_mbt",
                    format!("model has no {} stream", m.name()),
                )),
                (None, Some(_)) => Err(Error::invalid(
                    "forward_mbt",
                    format!("{} input missing", m.name()),
                )),
            }
        };
        let rgb = one(Modality::Rgb, &inputs.rgb)?;
        let spec = one(Modality::Spec, &inputs.spec)?;
        let fsn = match self.fsn {
            Some(id) => Some(g.expand_leading(vars[id], inputs.batch())?),
            None => None,
        };
        Ok(TokenState { rgb, fsn, spec })
    }

    /// Layers `range` of modality `m` on its own tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_unimodal(
        &self,
        g: &mut Graph,
        vars: &Bound,
        m: Modality,
        mut z: Var,
        range: Range<usize>,
        opts: &mut ForwardOptions,
        records: &mut Vec<AttentionRecord>,
        layout: &TokenLayout,
    ) -> Result<Var> {
        let p = self.tower(m)?;
        let idx: Vec<usize> = layout.range(m).collect();
        for l in range {
            let lo = opts.layer_options(g.shape(z)[0], vec![]);
            let (out, rec) = transformer_layer(g, vars, &p.layers[l], z, &lo)?;
            push_record(records, rec, idx.clone(), idx.clone(), l, 0);
            z = out;
        }
        Ok(z)
    }

    /// One vanilla fusion layer over the concatenated sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_vanilla(
        &self,
        g: &mut Graph,
        vars: &Bound,
        l: usize,
        state: TokenState,
        opts: &mut ForwardOptions,
        records: &mut Vec<AttentionRecord>,
        layout: &TokenLayout,
    ) -> Result<TokenState> {
        let (zr, zs) = (state.rgb.unwrap(), state.spec.unwrap());
        let nr = g.shape(zr)[1];
        let b = g.shape(zr)[0];
        let all = g.concat(&[zr, zs], 1)?;
        let every = cat(&[&layout.rgb, &layout.spec]);
        match self.config.strategy {
            Strategy::VanillaShared => {
                let p = &self.tower(Modality::Rgb)?.layers[l];
                let lo = opts.layer_options(b, vec![]);
                let (out, rec) = transformer_layer(g, vars, p, all, &lo)?;
                push_record(records, rec, every.clone(), every, l, 0);
                let n = g.shape(out)[1];
                Ok(TokenState {
                    rgb: Some(g.slice(out, 1, 0, nr)?),
                    fsn: state.fsn,
                    spec: Some(g.slice(out, 1, nr, n)?),
                })
            }
            _ => {
                let mut outs = [zr; 2];
                for (i, (m, z)) in [(Modality::Rgb, zr), (Modality::Spec, zs)].into_iter().enumerate() {
                    let p = &self.tower(m)?.layers[l];
                    let lo = opts.layer_options(b, vec![]);
                    let (out, rec) = cross_transformer_layer(g, vars, p, z, all, &lo)?;
                    push_record(records, rec, layout.range(m).collect(), every.clone(), l, 0);
                    outs[i] = out;
                }
                Ok(TokenState { rgb: Some(outs[0]), fsn: state.fsn, spec: Some(outs[1]) })
            }
        }
    }

    /// One bottleneck fusion layer.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_bottleneck(
        &self,
        g: &mut Graph,
        vars: &Bound,
        l: usize,
        state: TokenState,
        opts: &mut ForwardOptions,
        records: &mut Vec<AttentionRecord>,
        layout: &TokenLayout,
    ) -> Result<TokenState> {
        let b = g.shape(state.rgb.unwrap())[0];
        let block = |g: &mut Graph,
                         m: Modality,
                         z: Var,
                         fsn: Option<Var>,
                         stage: usize,
                         opts: &mut ForwardOptions,
                         records: &mut Vec<AttentionRecord>|
         -> Result<(Var, Option<Var>)> {
            let p = &self.tower(m)?.layers[l];
            let n = g.shape(z)[1];
            let Some(f) = fsn else {
                let lo = opts.layer_options(b, vec![]);
                let (out, rec) = transformer_layer(g, vars, p, z, &lo)?;
                let idx: Vec<usize> = layout.range(m).collect();
                push_record(records, rec, idx.clone(), idx, l, stage);
                return Ok((out, None));
            };
            let nb = g.shape(f)[1];
            let masked = if opts.isolate_bottleneck { (n..n + nb).collect() } else { vec![] };
            let lo = opts.layer_options(b, masked);
            let joint = g.concat(&[z, f], 1)?;
            let (out, rec) = transformer_layer(g, vars, p, joint, &lo)?;
            let idx = cat(&[&layout.range(m), &layout.fsn]);
            push_record(records, rec, idx.clone(), idx, l, stage);
            Ok((g.slice(out, 1, 0, n)?, Some(g.slice(out, 1, n, n + nb)?)))
        };
        let (zr, zs) = (state.rgb.unwrap(), state.spec.unwrap());
        let (rgb, spec, fsn) = match self.config.update_mode {
            UpdateMode::Symmetric => {
                let (r, fr) = block(g, Modality::Rgb, zr, state.fsn, 0, opts, records)?;
                let (s, fs) = block(g, Modality::Spec, zs, state.fsn, 0, opts, records)?;
                let fsn = match (fr, fs) {
                    (Some(a), Some(c)) => {
                        let sum = g.add(a, c)?;
                        Some(g.scale(sum, 0.5)?)
                    }
                    _ => None,
                };
                (r, s, fsn)
            }
            UpdateMode::RgbFirst => {
                let (r, f) = block(g, Modality::Rgb, zr, state.fsn, 0, opts, records)?;
                let (s, f) = block(g, Modality::Spec, zs, f, 1, opts, records)?;
                (r, s, f)
            }
            UpdateMode::SpecFirst => {
                let (s, f) = block(g, Modality::Spec, zs, state.fsn, 0, opts, records)?;
                let (r, f) = block(g, Modality::Rgb, zr, f, 1, opts, records)?;
                (r, s, f)
            }
        };
        Ok(TokenState { rgb: Some(rgb), fsn, spec: Some(spec) })
    }

    /// Layers `range` under the configured schedule.
    pub fn run_layers(
        &self,
        g: &mut Graph,
        vars: &Bound,
        mut state: TokenState,
        range: Range<usize>,
        opts: &mut ForwardOptions,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<TokenState> {
        let layout = self.layout(g, &state);
        let lf = self.config.fusion_layer;
        let both = state.rgb.is_some() && state.spec.is_some();
        for l in range {
            if l < lf || !both {
                if let Some(z) = state.rgb {
                    state.rgb = Some(self.forward_unimodal(g, vars, Modality::Rgb, z, l..l + 1, opts, records, &layout)?);
                }
                if let Some(z) = state.spec {
                    state.spec = Some(self.forward_unimodal(g, vars, Modality::Spec, z, l..l + 1, opts, records, &layout)?);
                }
            } else if self.config.strategy == Strategy::Bottleneck {
                state = self.fuse_bottleneck(g, vars, l, state, opts, records, &layout)?;
            } else {
                state = self.fuse_vanilla(g, vars, l, state, opts, records, &layout)?;
            }
        }
        Ok(state)
    }

    /// Normalized CLS token of modality `m`, `[b, d]`.
    pub fn cls(&self, g: &mut Graph, vars: &Bound, m: Modality, z: Var) -> Result<Var> {
        let p = self.tower(m)?;
        let s = g.shape(z).to_vec();
        let c = g.slice(z, 1, 0, 1)?;
        let c = g.reshape(c, &[s[0], s[2]])?;
        g.layer_norm(c, vars[p.norm_g], vars[p.norm_b], LN_EPS)
    }

    /// Shared heads applied to each CLS token, logits averaged over modalities.
    pub fn classify(&self, g: &mut Graph, vars: &Bound, state: &TokenState) -> Result<Vec<Var>> {
        let mut cls = Vec::new();
        for (m, z) in [(Modality::Rgb, state.rgb), (Modality::Spec, state.spec)] {
            if let Some(z) = z {
                cls.push(self.cls(g, vars, m, z)?);
            }
        }
        let mut out = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let mut acc: Option<Var> = None;
            for &c in &cls {
                let y = g.matmul(c, vars[h.w])?;
                let y = g.add(y, vars[h.b])?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => g.add(a, y)?,
                });
            }
            let sum = acc.ok_or_else(|| Error::invalid("forward_mbt", "no input streams"))?;
            out.push(if cls.len() > 1 { g.scale(sum, 1.0 / cls.len() as f64)? } else { sum });
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &Bound,
        inputs: &ModelInputs,
        opts: &mut ForwardOptions,
    ) -> Result<ForwardOutput> {
        let state = self.embed(g, vars, inputs)?;
        let layout = self.layout(g, &state);
        let mut records = Vec::new();
        let state = self.run_layers(g, vars, state, 0..self.config.layers, opts, &mut records)?;
        let logits = self.classify(g, vars, &state)?;
        Ok(ForwardOutput { logits, state, layout, records })
    }

    /// Forward pass on fresh constants; returns logit values per head.
    pub fn predict(&self, inputs: &ModelInputs) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g)?;
        let out = self.forward(&mut g, &vars, inputs, &mut ForwardOptions::default())?;
        Ok(out.logits.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Parameters as non-differentiable graph constants.
    pub fn bind_constants(&self, g: &mut Graph) -> Result<Bound> {
        self.store
            .ids()
            .map(|id| g.constant(self.store.get(id).clone()))
            .collect::<Result<Vec<_>>>()
            .map(Bound::from_vars)
    }
}
