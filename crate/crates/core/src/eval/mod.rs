//! Correlation metrics, the rank-error bound, and method comparison reports.

pub mod compare;
pub mod correlation;
pub mod sweep;

pub use compare::{compare_methods, method_label, Comparison, ComparisonRow, Denoisers, ImageScore};
pub use correlation::{average_ranks, plcc, rank_error_certificate, srocc, tau_closeness, RankErrorCertificate, TauCloseness};
