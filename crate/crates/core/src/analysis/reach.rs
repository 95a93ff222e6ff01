//! Token-class influence graph and its Jacobian cross-check.

use std::fmt::Write as _;

use rand::Rng;

use crate::dsp::Modality;
use crate::error::Result;
use crate::model::{ForwardOptions, Mbt, ModelConfig, Strategy, TokenState, UpdateMode};
use crate::tensor::{readout, Graph, Tensor};

/// Token classes, in index order.
pub const CLASSES: [&str; 3] = ["rgb", "fsn", "spec"];
const RGB: usize = 0;
const FSN: usize = 1;
const SPEC: usize = 2;

/// `m[src][dst]`: the `src` tokens entering a step influence the `dst`
/// tokens leaving it.
pub type Flow = [[bool; 3]; 3];

fn compose(a: &Flow, b: &Flow) -> Flow {
    let mut c = [[false; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (k, out) in row.iter_mut().enumerate() {
            *out = (0..3).any(|j| a[i][j] && b[j][k]);
        }
    }
    c
}

fn identity(present: [bool; 3]) -> Flow {
    let mut m = [[false; 3]; 3];
    for c in 0..3 {
        m[c][c] = present[c];
    }
    m
}

fn present(cfg: &ModelConfig) -> [bool; 3] {
    [cfg.inputs.uses(Modality::Rgb), cfg.has_bottleneck(), cfg.inputs.uses(Modality::Spec)]
}

/// Flow of each sequential stage of layer `l`.
pub fn layer_stages(cfg: &ModelConfig, l: usize) -> Vec<Flow> {
    let p = present(cfg);
    let mut m = identity(p);
    let fused = l >= cfg.fusion_layer && p[RGB] && p[SPEC];
    if !fused {
        return vec![m];
    }
    let link = |m: &mut Flow, a: usize, b: usize| {
        m[a][b] = true;
        m[b][a] = true;
    };
    match cfg.strategy {
        Strategy::VanillaShared | Strategy::VanillaCross => {
            link(&mut m, RGB, SPEC);
            vec![m]
        }
        Strategy::Bottleneck if !p[FSN] => vec![m],
        Strategy::Bottleneck => match cfg.update_mode {
            UpdateMode::Symmetric => {
                link(&mut m, RGB, FSN);
                link(&mut m, SPEC, FSN);
                vec![m]
            }
            UpdateMode::RgbFirst | UpdateMode::SpecFirst => {
                let (first, second) =
                    if cfg.update_mode == UpdateMode::RgbFirst { (RGB, SPEC) } else { (SPEC, RGB) };
                let mut a = m;
                link(&mut a, first, FSN);
                let mut b = identity(p);
                link(&mut b, second, FSN);
                vec![a, b]
            }
        },
    }
}

pub fn layer_flow(cfg: &ModelConfig, l: usize) -> Flow {
    layer_stages(cfg, l).iter().fold(identity([true; 3]), |acc, s| compose(&acc, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReachabilityReport {
    pub layers: Vec<Flow>,
    /// Influence from the embedded inputs to the final tokens.
    pub end_to_end: Flow,
    /// Broken guarantees; empty when the topology is certified.
    pub violations: Vec<String>,
}

impl ReachabilityReport {
    /// Fewest consecutive layers carrying `from` into `to`.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<usize> {
        let n = self.layers.len();
        (1..=n).find(|&k| {
            (0..=n - k).any(|s| {
                let m = self.layers[s..s + k].iter().fold(identity([true; 3]), |a, b| compose(&a, b));
                m[from][to]
            })
        })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("layer,source,sink,edge\n");
        for (l, m) in self.layers.iter().enumerate() {
            for (i, row) in m.iter().enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    let _ = writeln!(s, "{l},{},{},{}", CLASSES[i], CLASSES[j], e as u8);
                }
            }
        }
        s
    }
}

/// Builds the influence graph of `cfg` and certifies that modalities are
/// separate below the fusion layer and that, under bottleneck fusion, every
/// cross-modal path runs through a bottleneck token.
pub fn cross_modal_reachability(cfg: &ModelConfig) -> ReachabilityReport {
    let layers: Vec<Flow> = (0..cfg.layers).map(|l| layer_flow(cfg, l)).collect();
    let end_to_end = layers.iter().fold(identity(present(cfg)), |a, b| compose(&a, b));
    let mut violations = Vec::new();
    for (l, m) in layers.iter().enumerate().take(cfg.fusion_layer) {
        if m[RGB][SPEC] || m[SPEC][RGB] {
            violations.push(format!("layer {l}: rgb and spec exchange information before fusion"));
        }
    }
    if cfg.strategy == Strategy::Bottleneck {
        // Remove the bottleneck nodes and look for a surviving cross path.
        let mut no_fsn = identity([true, false, true]);
        for l in 0..cfg.layers {
            for mut s in layer_stages(cfg, l) {
                for k in 0..3 {
                    s[FSN][k] = false;
                    s[k][FSN] = false;
                }
                no_fsn = compose(&no_fsn, &s);
            }
        }
        if no_fsn[RGB][SPEC] || no_fsn[SPEC][RGB] {
            violations.push("cross-modal path avoiding the bottleneck".into());
        }
    }
    ReachabilityReport { layers, end_to_end, violations }
}

/// Jacobian probe of layers `range`: an edge is reported when some entry of
/// the gradient of a random readout of the `dst` tokens with respect to the
/// `src` tokens exceeds `1e-12` in magnitude.
pub fn probe_flow<R: Rng + ?Sized>(model: &Mbt, range: std::ops::Range<usize>, rng: &mut R) -> Result<Flow> {
    let cfg = &model.config;
    let t = &cfg.tokenizer;
    let p = present(cfg);
    let counts = [t.n_rgb_tokens() + 1, cfg.bottleneck, t.n_spec_tokens() + 1];
    let inputs: Vec<Option<Tensor>> =
        (0..3).map(|c| p[c].then(|| Tensor::randn(&[1, counts[c], cfg.d], 1.0, rng))).collect();
    let seed: u64 = rng.random();
    let mut flow = [[false; 3]; 3];
    for dst in (0..3).filter(|&c| p[c]) {
        let mut g = Graph::new();
        let vars = model.bind_constants(&mut g)?;
        let leaves: Vec<Option<_>> =
            inputs.iter().map(|x| x.as_ref().map(|x| g.param(x.clone())).transpose()).collect::<Result<_>>()?;
        let state = TokenState { rgb: leaves[RGB], fsn: leaves[FSN], spec: leaves[SPEC] };
        let out = model.run_layers(&mut g, &vars, state, range.clone(), &mut ForwardOptions::default(), &mut Vec::new())?;
        let y = [out.rgb, out.fsn, out.spec][dst].expect("present class");
        let r = readout(&mut g, y, seed ^ dst as u64)?;
        let wrt: Vec<_> = leaves.iter().flatten().copied().collect();
        let mut grads = g.backward(r, &wrt)?;
        for src in 0..3 {
            if let Some(v) = leaves[src] {
                let big = grads.remove(v).is_some_and(|t| t.data().iter().any(|x| x.abs() > 1e-12));
                flow[src][dst] = big;
            }
        }
    }
    Ok(flow)
}

/// Per-layer and end-to-end probes compared with the graph.
pub fn probe_agrees<R: Rng + ?Sized>(model: &Mbt, report: &ReachabilityReport, rng: &mut R) -> Result<Vec<String>> {
    let mut mismatches = Vec::new();
    let mut check = |what: String, probed: Flow, graph: &Flow| {
        for i in 0..3 {
            for j in 0..3 {
                if probed[i][j] != graph[i][j] {
                    mismatches.push(format!(
                        "{what}: {} -> {} probe {} graph {}",
                        CLASSES[i], CLASSES[j], probed[i][j], graph[i][j]
                    ));
                }
            }
        }
    };
    for l in 0..model.config.layers {
        check(format!("layer {l}"), probe_flow(model, l..l + 1, rng)?, &report.layers[l]);
    }
    check("end to end".into(), probe_flow(model, 0..model.config.layers, rng)?, &report.end_to_end);
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed(cfg: &ModelConfig, seed: u64) -> Mbt {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut m = init_params(cfg, &mut r).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            let noise = Tensor::randn(m.store.get(id).shape(), 0.3, &mut r);
            m.store.get_mut(id).add_assign(&noise);
        }
        m
    }

    #[test]
    fn no_bottleneck_means_no_cross_path() {
        let cfg = ModelConfig { bottleneck: 0, fusion_layer: 0, ..ModelConfig::tiny() };
        let r = cross_modal_reachability(&cfg);
        assert!(!r.end_to_end[RGB][SPEC] && !r.end_to_end[SPEC][RGB]);
        assert!(r.violations.is_empty());
        let m = perturbed(&cfg, 0);
        let probe = probe_flow(&m, 0..cfg.layers, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!probe[RGB][SPEC] && !probe[SPEC][RGB]);
    }

    #[test]
    fn early_vanilla_cross_links_every_layer() {
        let cfg = ModelConfig { strategy: Strategy::VanillaCross, fusion_layer: 0, ..ModelConfig::tiny() };
        let r = cross_modal_reachability(&cfg);
        assert!(r.layers.iter().all(|m| m[RGB][SPEC] && m[SPEC][RGB]));
        assert_eq!(r.shortest_path(RGB, SPEC), Some(1));
    }

    #[test]
    fn paper_schedule_needs_two_layers() {
        let r = cross_modal_reachability(&ModelConfig::paper());
        assert!(r.violations.is_empty());
        assert_eq!(r.shortest_path(RGB, SPEC), Some(2));
        assert_eq!(r.shortest_path(RGB, FSN), Some(1));
        assert!(!r.layers[8][RGB][SPEC] && r.layers[8][RGB][FSN]);
        assert!((0..8).all(|l| !r.layers[l][RGB][FSN]));
    }

    #[test]
    fn sequential_updates_cross_within_a_layer() {
        let cfg = ModelConfig { update_mode: UpdateMode::RgbFirst, ..ModelConfig::paper() };
        let r = cross_modal_reachability(&cfg);
        assert_eq!(r.shortest_path(RGB, SPEC), Some(1));
        assert_eq!(r.shortest_path(SPEC, RGB), Some(2));
        assert!(r.violations.is_empty());
    }

    #[test]
    fn layerwise_probe_matches_the_graph() {
        for mode in [UpdateMode::Symmetric, UpdateMode::RgbFirst, UpdateMode::SpecFirst] {
            let cfg = ModelConfig { layers: 3, fusion_layer: 1, update_mode: mode, ..ModelConfig::tiny() };
            let m = perturbed(&cfg, 3);
            let r = cross_modal_reachability(&cfg);
            let bad = probe_agrees(&m, &r, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            assert!(bad.is_empty(), "{mode:?}: {bad:?}");
        }
    }

    #[test]
    fn csv_has_nine_rows_per_layer() {
        let r = cross_modal_reachability(&ModelConfig::tiny());
        assert_eq!(r.csv().lines().count(), 1 + 9 * 2);
    }
}
