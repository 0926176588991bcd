//! Error rates, evaluation reports and attention dumps.

pub mod align;
pub mod attention;
pub mod report;

pub use align::{
    levenshtein_align, ne_wer, relative_reduction, span_errors, utterance_errors, wer, AlignmentOp,
    ErrorCounts, OpKind,
};
pub use attention::{dump_attention, AttentionDump, FrameWeights};
pub use report::{
    compare, decode_utterance, evaluate, render_rates, render_table, Comparison, EntityRow,
    EvalOptions, EvalReport, SetReport, UttResult,
};
