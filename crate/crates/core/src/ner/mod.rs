//! Named-entity recognition: BIO tags, automatic annotation, windowed
//! tagging of long documents and span-level scoring.

pub mod annotate;
pub mod bio;
pub mod chunking;
pub mod data;
pub mod metrics;
pub mod model;

pub use annotate::{auto_annotate, parse_wordlists, Parties, WordList};
pub use bio::{bio_decode, bio_encode, EntityLabel, EntitySpan, LabelSet, Tag};
pub use chunking::{chunk_with_stride, merge_window_predictions, Window};
pub use data::{parse_conll, to_examples, write_conll, NerExample, WordExample};
pub use metrics::{evaluate_ner, MetricsReport, Scores};
pub use model::{finetune, FinetuneOptions, FinetuneOutcome, NerModel};
