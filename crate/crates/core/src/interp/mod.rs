//! Measurements on a frozen model: activation patching, linear probes,
//! attention-head analyses and the parity/cluster decomposition.

mod heads;
mod patching;
mod pca;
mod probe;

pub use heads::{
    attention_graph, attention_graph_from, default_head_len, parity_head_score, parity_head_scores, score_table, Edge,
    GraphOptions, HeadScore, HeadScoreTable, CI_FACTOR, MIN_PREFIX,
};
pub use patching::{
    deletion_nld, log_diff, make_patch_pairs, nld, prefix_patch_grid, prefix_patch_variants, suffix_patch_grid,
    window_patch_grid, Content, GridMode, Metric, PairBaseline, PairRelation, ParityFilter, PatchPair, PrefixGrids,
    SignatureGrid, MIN_DENOMINATOR,
};
pub use pca::{decompose_means, pca_decomposition, Decomposition, StateCoords};
pub use probe::{
    collect_from_actions, collect_probe_data, fit_logistic, fit_probe, length_probe_matrix, probe_by_length,
    probe_curves, probe_curves_for, train_probe, LengthProbe, LengthSamples, PositionPolicy, Probe, ProbeCurves,
    ProbeData, ProbeResult, ProbeTarget, DEFAULT_L2, PROBE_TOL,
};

#[cfg(test)]
mod tests;
