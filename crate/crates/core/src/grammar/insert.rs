use std::ops::Range;

use rand::Rng;

use super::machine::Form;
use super::sequence::CommSequence;
use super::vocab::{CommToken, Vocab};
use super::SequenceError;
use crate::geometry::BBox;

/// A grounded expression: byte range in the caption plus its region.
#[derive(Clone, Debug, PartialEq)]
pub struct Span {
    pub range: Range<usize>,
    pub bbox: BBox,
}

/// Rewrites `caption` with communication tokens around each span.
///
/// The first span takes the entity-first form; every later span draws one of
/// the two forms with equal probability from `rng`. Each span contributes one
/// ROI slot holding its box.
pub fn insert_tokens<R: Rng + ?Sized>(
    caption: &str,
    spans: &[Span],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<CommSequence, SequenceError> {
    let tokens = Vocab::tokenize(caption);
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.range.is_empty() {
            return Err(SequenceError::EmptySpan(i));
        }
        if s.range.end > caption.len() {
            return Err(SequenceError::SpanOutOfBounds { span: i, end: s.range.end, len: caption.len() });
        }
        if i > 0 && s.range.start < prev_end {
            return Err(SequenceError::OverlappingSpans(i - 1, i));
        }
        prev_end = s.range.end;
    }

    // Token index range covered by each span; boundaries must coincide.
    let mut token_spans = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let first = tokens.iter().position(|t| t.range.start == s.range.start);
        let last = tokens.iter().position(|t| t.range.end == s.range.end);
        match (first, last) {
            (Some(a), Some(b)) if a <= b => token_spans.push(a..b + 1),
            _ => return Err(SequenceError::MisalignedSpan(i)),
        }
    }

    let ids = tokens.iter().map(|t| vocab.word_id(&t.text)).collect::<Result<Vec<_>, _>>()?;
    let mut seq = CommSequence::new();
    let mut cursor = 0;
    for (i, (tr, span)) in token_spans.iter().zip(spans).enumerate() {
        for &id in &ids[cursor..tr.start] {
            seq.push_word(id);
        }
        let form = if i == 0 || rng.random_bool(0.5) { Form::EntityFirst } else { Form::Previsual };
        match form {
            Form::EntityFirst => {
                seq.push_comm(CommToken::ObjOpen);
                for &id in &ids[tr.clone()] {
                    seq.push_word(id);
                }
                seq.push_comm(CommToken::ObjClose);
                seq.push_comm(CommToken::Visual);
                seq.push_comm(CommToken::Box);
                seq.push_roi(Some(span.bbox));
            }
            Form::Previsual => {
                seq.push_comm(CommToken::Previsual);
                seq.push_comm(CommToken::Prebox);
                seq.push_roi(Some(span.bbox));
                seq.push_comm(CommToken::ObjOpen);
                for &id in &ids[tr.clone()] {
                    seq.push_word(id);
                }
                seq.push_comm(CommToken::ObjClose);
            }
        }
        cursor = tr.end;
    }
    for &id in &ids[cursor..] {
        seq.push_word(id);
    }
    Ok(seq)
}

/// Forms of the entity blocks of a valid sequence, in order.
pub fn block_forms(seq: &CommSequence) -> Vec<Form> {
    let mut forms = Vec::new();
    let mut after_previsual = false;
    for e in &seq.elements {
        match e {
            super::Element::Comm(CommToken::Previsual) => after_previsual = true,
            super::Element::Comm(CommToken::ObjOpen) => {
                forms.push(if after_previsual { Form::Previsual } else { Form::EntityFirst });
                after_previsual = false;
            }
            _ => {}
        }
    }
    forms
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{strip_special, validate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn span(caption: &str, phrase: &str, bbox: BBox) -> Span {
        let start = caption.find(phrase).unwrap();
        Span { range: start..start + phrase.len(), bbox }
    }

    #[test]
    fn single_leading_span_is_entity_first() {
        let v = Vocab::synthetic();
        let cap = "red circle is left of the blue square";
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        for seed in 0..20 {
            let seq = insert_tokens(cap, &[span(cap, "red circle", b)], &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(
                seq.to_text(&v),
                "<obj> red circle </obj> <visual> <box> [roi:0] is left of the blue square"
            );
            assert_eq!(seq.slots[0].bbox, Some(b));
        }
    }

    #[test]
    fn second_span_form_follows_rng() {
        let v = Vocab::synthetic();
        let cap = "red circle left of blue square";
        let spans = [
            span(cap, "red circle", BBox::new(0.2, 0.5, 0.2, 0.2)),
            span(cap, "blue square", BBox::new(0.8, 0.5, 0.2, 0.2)),
        ];
        let mut seen = std::collections::HashSet::new();
        for seed in 0..64 {
            let seq = insert_tokens(cap, &spans, &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            validate(&seq).unwrap();
            let forms = block_forms(&seq);
            assert_eq!(forms[0], Form::EntityFirst);
            // Same seed reproduces the same choice.
            let again = insert_tokens(cap, &spans, &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(seq, again);
            seen.insert(forms[1]);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn no_spans_is_plain_text() {
        let v = Vocab::synthetic();
        let cap = "the red circle is above the green square";
        let seq = insert_tokens(cap, &[], &v, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(seq.to_text(&v), cap);
        assert_eq!(strip_special(&seq), v.encode(cap).unwrap());
    }

    #[test]
    fn overlapping_and_empty_spans_rejected() {
        let v = Vocab::synthetic();
        let cap = "the red circle";
        let b = BBox::WHOLE_IMAGE;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let overlap = [Span { range: 0..7, bbox: b }, Span { range: 4..14, bbox: b }];
        assert!(matches!(insert_tokens(cap, &overlap, &v, &mut rng), Err(SequenceError::OverlappingSpans(0, 1))));
        let empty = [Span { range: 4..4, bbox: b }];
        assert!(matches!(insert_tokens(cap, &empty, &v, &mut rng), Err(SequenceError::EmptySpan(0))));
        let partial = [Span { range: 5..14, bbox: b }];
        assert!(matches!(insert_tokens(cap, &partial, &v, &mut rng), Err(SequenceError::MisalignedSpan(0))));
    }
}
