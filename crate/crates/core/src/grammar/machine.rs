//! State machine over communicative sequences.
//!
//! Accepted language: free text interleaved with
//! `<obj> w+ </obj> <visual> <box> roi+` and `<previsual> <prebox> roi+ <obj> w+ </obj>`.
//! Entity blocks do not nest.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::sequence::{CommSequence, Element};
use super::vocab::CommToken;

/// Which insertion form an entity block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Form {
    /// `<obj> expression </obj> <visual> <box> roi+`
    EntityFirst,
    /// `<previsual> <prebox> roi+ <obj> expression </obj>`
    Previsual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxStage {
    NeedVisual,
    NeedBox,
    NeedRoi,
    /// At least one ROI read; further ROIs or ordinary text may follow.
    Rois,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrammarState {
    Text,
    InEntity { form: Form, words: usize },
    AwaitBoxFeedback(BoxStage),
    PostPrevisual,
    AwaitPreboxFeedback { rois: usize },
}

/// First offending element of a rejected sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarError {
    pub position: usize,
    pub expected: String,
    pub found: String,
}

impl fmt::Display for GrammarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at element {}: expected {}, found {}", self.position, self.expected, self.found)
    }
}

/// What may legally come next from a state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allowed {
    pub words: bool,
    pub comm: Vec<CommToken>,
    pub roi: bool,
    pub end: bool,
}

fn describe(e: &Element) -> String {
    match e {
        Element::Word(w) => format!("word #{}", w.0),
        Element::Comm(t) => t.as_str().to_string(),
        Element::Roi(k) => format!("[roi:{k}]"),
    }
}

impl GrammarState {
    pub fn is_accepting(self) -> bool {
        matches!(self, GrammarState::Text | GrammarState::AwaitBoxFeedback(BoxStage::Rois))
    }

    pub fn allowed(self) -> Allowed {
        use CommToken::*;
        let text_like = Allowed { words: true, comm: vec![ObjOpen, Previsual], roi: false, end: true };
        match self {
            GrammarState::Text => text_like,
            GrammarState::AwaitBoxFeedback(BoxStage::Rois) => Allowed { roi: true, ..text_like },
            GrammarState::InEntity { words, .. } => {
                Allowed { words: true, comm: if words > 0 { vec![ObjClose] } else { vec![] }, roi: false, end: false }
            }
            GrammarState::AwaitBoxFeedback(BoxStage::NeedVisual) => {
                Allowed { words: false, comm: vec![Visual], roi: false, end: false }
            }
            GrammarState::AwaitBoxFeedback(BoxStage::NeedBox) => {
                Allowed { words: false, comm: vec![Box], roi: false, end: false }
            }
            GrammarState::AwaitBoxFeedback(BoxStage::NeedRoi) => {
                Allowed { words: false, comm: vec![], roi: true, end: false }
            }
            GrammarState::PostPrevisual => Allowed { words: false, comm: vec![Prebox], roi: false, end: false },
            GrammarState::AwaitPreboxFeedback { rois } => Allowed {
                words: false,
                comm: if rois > 0 { vec![ObjOpen] } else { vec![] },
                roi: true,
                end: false,
            },
        }
    }

    fn expected(self) -> String {
        let a = self.allowed();
        let mut parts = Vec::new();
        if a.words {
            parts.push("word".to_string());
        }
        parts.extend(a.comm.iter().map(|t| t.as_str().to_string()));
        if a.roi {
            parts.push("roi slot".to_string());
        }
        if a.end {
            parts.push("end".to_string());
        }
        parts.join(" | ")
    }

    /// Total transition function: a next state or the reason for rejection.
    pub fn step(self, e: &Element) -> Result<GrammarState, String> {
        use CommToken::*;
        use GrammarState as S;
        let next = match (self, e) {
            (S::Text | S::AwaitBoxFeedback(BoxStage::Rois), Element::Word(_)) => Some(S::Text),
            (S::Text | S::AwaitBoxFeedback(BoxStage::Rois), Element::Comm(ObjOpen)) => {
                Some(S::InEntity { form: Form::EntityFirst, words: 0 })
            }
            (S::Text | S::AwaitBoxFeedback(BoxStage::Rois), Element::Comm(Previsual)) => Some(S::PostPrevisual),
            (S::AwaitBoxFeedback(BoxStage::Rois), Element::Roi(_)) => Some(S::AwaitBoxFeedback(BoxStage::Rois)),
            (S::InEntity { form, words }, Element::Word(_)) => Some(S::InEntity { form, words: words + 1 }),
            (S::InEntity { form, words }, Element::Comm(ObjClose)) if words > 0 => Some(match form {
                Form::EntityFirst => S::AwaitBoxFeedback(BoxStage::NeedVisual),
                Form::Previsual => S::Text,
            }),
            (S::AwaitBoxFeedback(BoxStage::NeedVisual), Element::Comm(Visual)) => {
                Some(S::AwaitBoxFeedback(BoxStage::NeedBox))
            }
            (S::AwaitBoxFeedback(BoxStage::NeedBox), Element::Comm(Box)) => Some(S::AwaitBoxFeedback(BoxStage::NeedRoi)),
            (S::AwaitBoxFeedback(BoxStage::NeedRoi), Element::Roi(_)) => Some(S::AwaitBoxFeedback(BoxStage::Rois)),
            (S::PostPrevisual, Element::Comm(Prebox)) => Some(S::AwaitPreboxFeedback { rois: 0 }),
            (S::AwaitPreboxFeedback { rois }, Element::Roi(_)) => Some(S::AwaitPreboxFeedback { rois: rois + 1 }),
            (S::AwaitPreboxFeedback { rois }, Element::Comm(ObjOpen)) if rois > 0 => {
                Some(S::InEntity { form: Form::Previsual, words: 0 })
            }
            _ => None,
        };
        next.ok_or_else(|| self.expected())
    }
}

/// Runs the machine over a prefix, returning the state reached.
pub fn scan(seq: &CommSequence) -> Result<GrammarState, GrammarError> {
    let mut state = GrammarState::Text;
    for (i, e) in seq.elements.iter().enumerate() {
        if let Element::Roi(k) = e {
            if *k >= seq.slots.len() {
                return Err(GrammarError {
                    position: i,
                    expected: format!("slot index < {}", seq.slots.len()),
                    found: describe(e),
                });
            }
        }
        state = state
            .step(e)
            .map_err(|expected| GrammarError { position: i, expected, found: describe(e) })?;
    }
    Ok(state)
}

/// Validates a complete sequence.
pub fn validate(seq: &CommSequence) -> Result<(), GrammarError> {
    let end = scan(seq)?;
    if end.is_accepting() {
        Ok(())
    } else {
        Err(GrammarError { position: seq.elements.len(), expected: end.expected(), found: "end of sequence".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Vocab;

    fn parse(s: &str) -> CommSequence {
        CommSequence::parse(s, &Vocab::synthetic()).unwrap()
    }

    #[test]
    fn entity_first_block_is_valid() {
        assert_eq!(validate(&parse("<obj> red circle </obj> <visual> <box> [roi:0]")), Ok(()));
    }

    #[test]
    fn previsual_block_is_valid() {
        assert_eq!(validate(&parse("<previsual> <prebox> [roi:0] <obj> blue square </obj>")), Ok(()));
    }

    #[test]
    fn bare_visual_rejected_at_zero() {
        let err = validate(&parse("<visual>")).unwrap_err();
        assert_eq!(err.position, 0);
        assert_eq!(err.found, "<visual>");
    }

    #[test]
    fn nesting_rejected() {
        let err = validate(&parse("<obj> red <obj> circle </obj> </obj>")).unwrap_err();
        assert_eq!(err.position, 2);
    }

    #[test]
    fn empty_entity_rejected() {
        assert_eq!(validate(&parse("<obj> </obj>")).unwrap_err().position, 1);
    }

    #[test]
    fn box_needs_roi() {
        let err = validate(&parse("<obj> red </obj> <visual> <box> the")).unwrap_err();
        assert_eq!(err.position, 5);
        assert!(err.expected.contains("roi"));
    }

    #[test]
    fn truncated_block_rejected_at_end() {
        let err = validate(&parse("the <obj> red circle </obj> <visual>")).unwrap_err();
        assert_eq!(err.position, 6);
        assert!(scan(&parse("the <obj> red circle </obj> <visual>")).is_ok());
    }

    #[test]
    fn mixed_sentence_valid() {
        let s = "the <obj> red circle </obj> <visual> <box> [roi:0] [roi:1] is left of <previsual> <prebox> [roi:2] <obj> the blue square </obj> .";
        assert_eq!(validate(&parse(s)), Ok(()));
    }

    #[test]
    fn dangling_slot_index_rejected() {
        let mut seq = parse("<obj> red </obj> <visual> <box> [roi:0]");
        seq.slots.clear();
        assert!(validate(&seq).is_err());
    }
}
