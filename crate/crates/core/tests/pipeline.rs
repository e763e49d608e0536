mod common;

use common::{step1_box_report, step1_word_report};
use covlm::grammar::{strip_special, validate, Vocab};
use covlm::pipeline::{load_corpus, pair_boxes_words, read_jsonl, synthetic_corpus, write_corpus, CorpusRecord, PipelineConfig, PipelineError, Step1Thresholds};
use covlm::world::Split;

#[test]
fn boxes_at_the_threshold_are_dropped() {
    let kept = pair_boxes_words(&step1_box_report(&[0.349, 0.35, 0.351]), &Step1Thresholds::default());
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].sim, 0.351);
    assert_eq!(kept[0].words, vec![2]);
}

#[test]
fn words_at_the_threshold_are_not_linked() {
    let kept = pair_boxes_words(&step1_word_report(&[0.249, 0.25, 0.251]), &Step1Thresholds::default());
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].words, vec![0, 3]);
}

#[test]
fn synthetic_examples_are_valid_and_preserve_captions() {
    let v = Vocab::synthetic();
    let (scenes, examples, stats) = synthetic_corpus(300, 3, Split::Any, &PipelineConfig::default(), &v);
    assert_eq!(scenes.len(), 300);
    assert_eq!(stats.skipped, 0);
    for ex in &examples {
        validate(&ex.sequence).unwrap();
        assert_eq!(strip_special(&ex.sequence), v.encode(&ex.record.caption).unwrap());
        assert_eq!(ex.sequence.slots.len(), ex.record.spans.len());
    }
    let ratio = stats.previsual_ratio();
    assert!((0.4..=0.6).contains(&ratio), "{ratio}");
}

#[test]
fn corpus_round_trips_through_disk() {
    let v = Vocab::synthetic();
    let (scenes, examples, _) = synthetic_corpus(12, 5, Split::Any, &PipelineConfig::default(), &v);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &scenes, &examples).unwrap();
    let back = load_corpus(&dir.path().join("corpus.jsonl"), &v).unwrap();
    assert_eq!(back.len(), examples.len());
    for (a, b) in back.iter().zip(&examples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.sequence.elements, b.sequence.elements);
        let (sa, sb): (Vec<_>, Vec<_>) = (a.sequence.slots.iter().map(|s| s.bbox).collect(), b.sequence.slots.iter().map(|s| s.bbox).collect());
        assert_eq!(sa, sb);
    }
}

#[test]
fn missing_image_error_names_the_path() {
    let v = Vocab::synthetic();
    let (scenes, examples, _) = synthetic_corpus(2, 1, Split::Any, &PipelineConfig::default(), &v);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &scenes, &examples).unwrap();
    let missing = dir.path().join("images").join(format!("{}.ppm", scenes[0].id));
    std::fs::remove_file(&missing).unwrap();
    let err = load_corpus(&dir.path().join("corpus.jsonl"), &v).unwrap_err();
    assert!(matches!(err, PipelineError::Io { .. }));
    assert!(err.to_string().contains(&missing.display().to_string()), "{err}");
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\":\"a\",\"image\":\"x\",\"caption\":\"\",\"comm_text\":\"\",\"spans\":[]}\n{oops\n").unwrap();
    let err = read_jsonl::<CorpusRecord>(&path).unwrap_err();
    assert!(matches!(err, PipelineError::Json { line: 2, .. }), "{err}");
}
