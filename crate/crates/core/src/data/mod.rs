//! Session traces, feature derivation, normalization, synthetic sessions and
//! train/test split protocols.

pub mod csv_io;
pub mod features;
pub mod split;
pub mod synth;
pub mod trace;

pub use csv_io::{load_trace_csv, load_traces_csv, load_traces_dir, save_trace_csv, write_traces_csv};
pub use features::{
    derive_features, FeatureMatrix, NormStats, RebufferTracker, FEATURE_COUNT, FEATURE_NAMES,
};
pub use split::{build_split_plan, PlanEntry, SplitPlan, SplitProtocol};
pub use synth::{generate_synthetic, oracle_qoe, SynthConfig};
pub use trace::{Sample, SessionTrace};
