//! Three PNA branches, gated fusion, per-node compression and regression head.

mod forward;
mod params;

pub use forward::{
    branch_outputs, degree_scalers, dropout_seed, fuse_and_regress, gated_fusion, model_forward,
    pna_branch_forward, predict, readout_and_regress, BranchMask, BranchVars, ForwardOptions,
    ForwardTrace, GateVars, GraphSet, HeadVars, LinearVars, ParamVars, PreparedGraph, ALL_BRANCHES,
    LAYERNORM_EPS,
};
pub use params::{
    Architecture, GateParams, HeadParams, Linear, ModelParams, PnaBranchParams, N_AGGREGATORS,
    N_SCALERS, PARAMS_VERSION,
};
