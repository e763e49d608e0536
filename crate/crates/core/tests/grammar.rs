use covlm::grammar::{block_forms, insert_tokens, strip_special, validate, CommSequence, Element, Form, Span, Vocab};
use covlm::world::{caption_for, Color, Kind, Relation, Shape};
use covlm::BBox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_kind() -> impl Strategy<Value = Kind> {
    (0usize..4, 0usize..3).prop_map(|(c, s)| Kind { color: Color::ALL[c], shape: Shape::ALL[s] })
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.05f32..0.95, 0.05f32..0.95, 0.05f32..0.5, 0.05f32..0.5).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

/// Caption for the triple plus spans over "the <subject>" and "the <object>".
fn triple(subject: Kind, relation: Relation, object: Kind, boxes: [BBox; 2]) -> (String, Vec<Span>) {
    let caption = caption_for(subject, relation, object);
    let first = format!("the {}", subject.phrase());
    let second = format!("the {}", object.phrase());
    let at = caption.rfind(&second).unwrap();
    let spans = vec![
        Span { range: 0..first.len(), bbox: boxes[0] },
        Span { range: at..at + second.len(), bbox: boxes[1] },
    ];
    (caption, spans)
}

proptest! {
    #[test]
    fn inserted_sequences_validate_and_strip_back(
        s in arb_kind(), r in 0usize..5, o in arb_kind(), b0 in arb_box(), b1 in arb_box(), seed in any::<u64>(),
    ) {
        let v = Vocab::synthetic();
        let (caption, spans) = triple(s, Relation::ALL[r], o, [b0, b1]);
        let seq = insert_tokens(&caption, &spans, &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(validate(&seq).is_ok(), "{}", seq.to_text(&v));
        prop_assert_eq!(strip_special(&seq), v.encode(&caption).unwrap());
        let forms = block_forms(&seq);
        prop_assert_eq!(forms.len(), 2);
        prop_assert_eq!(forms[0], Form::EntityFirst);
        let slots: Vec<_> = seq.slots.iter().map(|sl| sl.bbox).collect();
        prop_assert_eq!(slots, vec![Some(b0), Some(b1)]);
    }

    #[test]
    fn text_form_round_trips(
        s in arb_kind(), r in 0usize..5, o in arb_kind(), seed in any::<u64>(),
    ) {
        let v = Vocab::synthetic();
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let (caption, spans) = triple(s, Relation::ALL[r], o, [b, b]);
        let seq = insert_tokens(&caption, &spans, &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = CommSequence::parse(&seq.to_text(&v), &v).unwrap();
        prop_assert_eq!(&back.elements, &seq.elements);
        prop_assert!(validate(&back).is_ok());
    }

    #[test]
    fn dropping_any_element_of_a_block_is_rejected(
        s in arb_kind(), o in arb_kind(), seed in any::<u64>(), pick in any::<prop::sample::Index>(),
    ) {
        let v = Vocab::synthetic();
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let (caption, spans) = triple(s, Relation::Above, o, [b, b]);
        let seq = insert_tokens(&caption, &spans, &v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let comm: Vec<usize> = (0..seq.len()).filter(|&i| matches!(seq.elements[i], Element::Comm(_) | Element::Roi(_))).collect();
        let mut broken = seq.clone();
        broken.elements.remove(comm[pick.index(comm.len())]);
        prop_assert!(validate(&broken).is_err(), "{}", broken.to_text(&v));
    }
}

#[test]
fn overlapping_spans_rejected() {
    let v = Vocab::synthetic();
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let cap = "the red circle is above the blue square";
    let spans = [Span { range: 0..14, bbox: b }, Span { range: 4..14, bbox: b }];
    assert!(insert_tokens(cap, &spans, &v, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
