use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::vocab::{CommToken, TokenId, Vocab};
use super::SequenceError;
use crate::geometry::BBox;

/// One element of a communicative sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    Word(TokenId),
    Comm(CommToken),
    /// Index into the sequence's slot table.
    Roi(usize),
}

/// Region referenced by a ROI slot. `bbox` is `None` while the slot awaits
/// detector output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommSequence {
    pub elements: Vec<Element>,
    pub slots: Vec<Slot>,
}

impl CommSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words(words: &[TokenId]) -> Self {
        Self { elements: words.iter().map(|&w| Element::Word(w)).collect(), slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_word(&mut self, id: TokenId) {
        self.elements.push(Element::Word(id));
    }

    pub fn push_comm(&mut self, t: CommToken) {
        self.elements.push(Element::Comm(t));
    }

    /// Appends a new ROI slot and returns its index.
    pub fn push_roi(&mut self, bbox: Option<BBox>) -> usize {
        self.slots.push(Slot { bbox });
        let k = self.slots.len() - 1;
        self.elements.push(Element::Roi(k));
        k
    }

    pub fn extend(&mut self, other: &CommSequence) {
        let base = self.slots.len();
        self.slots.extend_from_slice(&other.slots);
        self.elements.extend(other.elements.iter().map(|e| match *e {
            Element::Roi(k) => Element::Roi(base + k),
            e => e,
        }));
    }

    pub fn words(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.elements.iter().filter_map(|e| match e {
            Element::Word(w) => Some(*w),
            _ => None,
        })
    }

    pub fn count_comm(&self, t: CommToken) -> usize {
        self.elements.iter().filter(|e| **e == Element::Comm(t)).count()
    }

    /// Literal-token text form; ROI slots render as `[roi:k]`.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (i, e) in self.elements.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match e {
                Element::Word(w) => out.push_str(vocab.token(*w)),
                Element::Comm(t) => out.push_str(t.as_str()),
                Element::Roi(k) => write!(out, "[roi:{k}]").expect("string write"),
            }
        }
        out
    }

    /// Parses the text form. Slot boxes are left unresolved; the slot table is
    /// sized to the largest referenced index.
    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self, SequenceError> {
        let mut seq = CommSequence::new();
        for piece in text.split_whitespace() {
            if let Some(t) = CommToken::parse(piece) {
                seq.push_comm(t);
            } else if let Some(k) = piece.strip_prefix("[roi:").and_then(|r| r.strip_suffix(']')) {
                let k: usize = k.parse().map_err(|_| SequenceError::BadSlot(piece.to_string()))?;
                if seq.slots.len() <= k {
                    seq.slots.resize(k + 1, Slot { bbox: None });
                }
                seq.elements.push(Element::Roi(k));
            } else {
                for id in vocab.encode(piece)? {
                    seq.push_word(id);
                }
            }
        }
        Ok(seq)
    }
}

/// Word tokens only, order preserved.
pub fn strip_special(seq: &CommSequence) -> Vec<TokenId> {
    seq.words().collect()
}
