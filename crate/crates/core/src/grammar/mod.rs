//! Vocabulary with the communication tokens, and the grammar of legal
//! communicative sequences.

mod insert;
mod machine;
mod sequence;
mod vocab;

use thiserror::Error;

pub use insert::{block_forms, insert_tokens, Span};
pub use machine::{scan, validate, Allowed, BoxStage, Form, GrammarError, GrammarState};
pub use sequence::{strip_special, CommSequence, Element, Slot};
pub use vocab::{CommToken, RawToken, TokenId, Vocab, COLORS, SHAPES, SYNTHETIC_WORDS};

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("malformed slot reference {0:?}")]
    BadSlot(String),
    #[error("span {0} is empty")]
    EmptySpan(usize),
    #[error("spans {0} and {1} overlap or are unsorted")]
    OverlappingSpans(usize, usize),
    #[error("span {span} ends at byte {end} beyond caption length {len}")]
    SpanOutOfBounds { span: usize, end: usize, len: usize },
    #[error("span {0} does not fall on token boundaries")]
    MisalignedSpan(usize),
    #[error("invalid sequence {0}")]
    Invalid(#[from] GrammarError),
}

impl std::error::Error for GrammarError {}
