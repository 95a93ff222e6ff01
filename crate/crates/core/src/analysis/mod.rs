//! Compute accounting, attention rollout and cross-modal reachability.

pub mod flops;
pub mod reach;
pub mod rollout;

pub use flops::{count_flops, fusion_sweep, sweep_csv, FlopReport, LayerFlops};
pub use reach::{cross_modal_reachability, layer_flow, probe_agrees, probe_flow, Flow, ReachabilityReport, CLASSES};
pub use rollout::{
    attention_rollout, rollout_by_layer, rollout_curve, rollout_curve_csv, rollout_matrix, row_stochastic_error,
    stage_matrices, stage_matrix, to_pgm, SaliencyMap,
};
