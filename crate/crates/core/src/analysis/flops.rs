//! Closed-form multiply-accumulate counts per fusion strategy.
//!
//! Convention: one multiply-accumulate is two FLOPs. Only matrix products
//! are counted; softmax, normalization, activations and additions are free.
//! An attention call with query set `Q` and key set `K` over width `d` costs
//! `|Q|·d²` (query projection) + `2·|K|·d²` (key and value projections)
//! + `|Q|·d²` (output projection) + `2·|Q|·|K|·d` (scores and weighted sum),
//! and its MLP costs `2·|Q|·d·d_mlp`.

use std::fmt::Write as _;

use crate::model::{Inputs, ModelConfig, Strategy};

/// Multiply-accumulate counts of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerFlops {
    pub attention: u64,
    pub projections: u64,
    pub mlp: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.projections + self.mlp
    }

    fn call(q: u64, k: u64, d: u64, d_mlp: u64) -> Self {
        Self { attention: 2 * q * k * d, projections: 2 * q * d * d + 2 * k * d * d, mlp: 2 * q * d * d_mlp }
    }

    fn add(self, o: Self) -> Self {
        Self {
            attention: self.attention + o.attention,
            projections: self.projections + o.projections,
            mlp: self.mlp + o.mlp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub strategy: Strategy,
    pub fusion_layer: usize,
    /// Patch counts; each non-empty stream adds a CLS token.
    pub n_visual: usize,
    pub n_audio: usize,
    pub bottleneck: usize,
    pub layers: Vec<LayerFlops>,
    pub embedding: u64,
    pub classifier: u64,
}

impl FlopReport {
    /// Multiply-accumulates per sample.
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerFlops::total).sum::<u64>() + self.embedding + self.classifier
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("layer,attention_macs,projection_macs,mlp_macs,total_macs\n");
        for (l, f) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "{l},{},{},{},{}", f.attention, f.projections, f.mlp, f.total());
        }
        let _ = writeln!(s, "embedding,0,{},0,{}", self.embedding, self.embedding);
        let _ = writeln!(s, "classifier,0,{},0,{}", self.classifier, self.classifier);
        let _ = writeln!(s, "total,,,,{}", self.total_macs());
        s
    }
}

/// Per-sample counts for `cfg` with `n_visual` and `n_audio` patches.
///
/// A stream with zero patches is treated as absent, as are streams the
/// config does not use.
pub fn count_flops(cfg: &ModelConfig, n_visual: usize, n_audio: usize) -> FlopReport {
    let use_rgb = n_visual > 0 && cfg.inputs.uses(crate::dsp::Modality::Rgb);
    let use_spec = n_audio > 0 && cfg.inputs.uses(crate::dsp::Modality::Spec);
    let nr = if use_rgb { n_visual as u64 + 1 } else { 0 };
    let ns = if use_spec { n_audio as u64 + 1 } else { 0 };
    let (d, dm) = (cfg.d as u64, cfg.d_mlp as u64);
    let both = use_rgb && use_spec && cfg.inputs == Inputs::Audiovisual;
    let b = if cfg.has_bottleneck() { cfg.bottleneck as u64 } else { 0 };
    let streams: Vec<u64> = [nr, ns].into_iter().filter(|&n| n > 0).collect();

    let layers = (0..cfg.layers)
        .map(|l| {
            let calls: Vec<(u64, u64)> = if l < cfg.fusion_layer || !both {
                streams.iter().map(|&n| (n, n)).collect()
            } else {
                match cfg.strategy {
                    Strategy::VanillaShared => vec![(nr + ns, nr + ns)],
                    Strategy::VanillaCross => vec![(nr, nr + ns), (ns, nr + ns)],
                    Strategy::Bottleneck => vec![(nr + b, nr + b), (ns + b, ns + b)],
                }
            };
            calls
                .into_iter()
                .fold(LayerFlops::default(), |acc, (q, k)| acc.add(LayerFlops::call(q, k, d, dm)))
        })
        .collect();

    let t = &cfg.tokenizer;
    let embedding = if use_rgb { n_visual as u64 * t.rgb_patch_dim() as u64 * d } else { 0 }
        + if use_spec { n_audio as u64 * t.spec_patch_dim() as u64 * d } else { 0 };
    let classes: u64 = cfg.head.widths().iter().map(|&c| c as u64).sum();
    let classifier = streams.len() as u64 * d * classes;
    FlopReport {
        strategy: cfg.strategy,
        fusion_layer: cfg.fusion_layer,
        n_visual,
        n_audio,
        bottleneck: b as usize,
        layers,
        embedding,
        classifier,
    }
}

/// One row per `(strategy, L_f)` for `L_f = 0..=L`.
pub fn fusion_sweep(cfg: &ModelConfig, n_visual: usize, n_audio: usize, strategies: &[Strategy]) -> Vec<FlopReport> {
    let mut out = Vec::new();
    for &s in strategies {
        for lf in 0..=cfg.layers {
            let c = ModelConfig { strategy: s, fusion_layer: lf, ..cfg.clone() };
            out.push(count_flops(&c, n_visual, n_audio));
        }
    }
    out
}

pub fn sweep_csv(reports: &[FlopReport]) -> String {
    let mut s = String::from("strategy,fusion_layer,n_visual,n_audio,bottleneck,total_macs,gflops\n");
    for r in reports {
        let name = match r.strategy {
            Strategy::VanillaShared => "vanilla-shared",
            Strategy::VanillaCross => "vanilla-cross",
            Strategy::Bottleneck => "bottleneck",
        };
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{:.3}",
            r.fusion_layer,
            r.n_visual,
            r.n_audio,
            r.bottleneck,
            r.total_macs(),
            r.total_flops() as f64 * 1e-9
        );
    }
    s
}
