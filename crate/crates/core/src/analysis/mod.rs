//! Structural analyses of fused nets: block exchange and groupings,
//! shortest information-flow paths, receptive fields and parameter counts.

mod exchange;
mod params;
mod paths;
mod receptive;
mod report;

pub use exchange::{apply_grouping, enumerate_groupings, exchange_blocks, grouping_bound, Grouping};
pub use params::{count_network_params, count_params, count_spec_params, SpecParams};
pub use paths::{path_metrics, PathMetrics};
pub use receptive::{chain_kinds, receptive_field, receptive_field_range, ReceptiveField};
pub use report::{analyze, describe, render_analysis, AnalysisReport, MemberSummary};
