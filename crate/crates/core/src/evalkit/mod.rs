//! Metrics (Repeat@n, unigram F1, reward-judged win rate), reports, and the
//! verification harness that cross-checks the losses.

pub mod listing;
mod metrics;
mod oracle;
mod report;

pub use metrics::{evaluate_outputs, repeat_at_n, strip_specials, unigram_f1, win_rate, MetricReport, Output};
pub use oracle::{gradcheck_suite, oracle_suite, Check, Mutation, OracleReport};
pub use report::{bar_chart_svg, comparison_table, sort_rows, RunRow};
