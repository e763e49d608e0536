//! Grounding pipeline: turns (image, caption) pairs into communicative
//! training sequences.

pub mod grounder;
pub mod parse;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grounder::{
    pair_boxes_words, BlobGrounder, Candidate, Grounder, GrounderReport, GroundedBox, GroundingInput,
    OracleGrounder, Step1Thresholds,
};
pub use parse::{expand_spans, DepTree, ExpansionRules, OracleParser, Parser, TemplateParser};

use crate::geometry::BBox;
use crate::grammar::{block_forms, insert_tokens, validate, CommSequence, Form, SequenceError, Span, Vocab};
use crate::raster::{Image, RasterError};
use crate::world::{random_scene, Color, Shape, Split, SyntheticScene};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed dependency tree: {0}")]
    MalformedTree(String),
    #[error("parse failed: {0}")]
    Parse(String),
    #[error("grounding failed: {0}")]
    Grounding(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("image: {0}")]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

const BASE64_PREFIX: &str = "data:image/x-portable-pixmap;base64,";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    /// Byte range of the grounded expression in the caption.
    pub start: usize,
    pub end: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub sim: f32,
}

/// One line of a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    /// A PPM path (relative paths resolve against the corpus file) or an
    /// inline `data:image/x-portable-pixmap;base64,` string.
    pub image: String,
    pub caption: String,
    pub comm_text: String,
    pub spans: Vec<SpanRecord>,
}

pub fn inline_image(image: &Image) -> String {
    format!("{BASE64_PREFIX}{}", image.to_base64_ppm())
}

impl CorpusRecord {
    pub fn load_image(&self, base: &Path) -> Result<Image, PipelineError> {
        if let Some(b64) = self.image.strip_prefix(BASE64_PREFIX) {
            return Ok(Image::from_base64_ppm(b64)?);
        }
        let path = base.join(&self.image);
        Image::load_ppm(&path).map_err(|e| match e {
            RasterError::Io(source) => PipelineError::Io { path, source },
            e => PipelineError::Invalid(format!("{}: {e}", path.display())),
        })
    }

    /// The sequence with slot `k` holding the box of span `k`.
    pub fn sequence(&self, vocab: &Vocab) -> Result<CommSequence, PipelineError> {
        let mut seq = CommSequence::parse(&self.comm_text, vocab)?;
        if seq.slots.len() != self.spans.len() {
            return Err(PipelineError::Invalid(format!(
                "record {}: {} slots but {} spans",
                self.id,
                seq.slots.len(),
                self.spans.len()
            )));
        }
        for (slot, span) in seq.slots.iter_mut().zip(&self.spans) {
            slot.bbox = Some(span.bbox);
        }
        validate(&seq).map_err(SequenceError::from)?;
        Ok(seq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub thresholds: Step1Thresholds,
    pub rules: ExpansionRules,
    /// Chance that a scene also yields a question-answer record.
    pub qa_fraction: f64,
    /// Std of the oracle grounder's box noise.
    pub box_noise: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { thresholds: Step1Thresholds::default(), rules: ExpansionRules::default(), qa_fraction: 0.1, box_noise: 0.02 }
    }
}

/// Output of grounding a single caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounded {
    pub sequence: CommSequence,
    pub spans: Vec<SpanRecord>,
}

/// Grounds `caption`, expands each grounded word group through the parse,
/// and inserts communication tokens. Later spans overlapping an earlier one
/// are discarded.
pub fn ground_caption<R: Rng + ?Sized>(
    input: &GroundingInput,
    grounder: &dyn Grounder,
    parser: &dyn Parser,
    cfg: &PipelineConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Grounded, PipelineError> {
    let report = grounder.ground(input)?;
    let boxes = pair_boxes_words(&report, &cfg.thresholds);
    let mut pieces: Vec<(Range<usize>, &GroundedBox)> = Vec::new();
    if !boxes.is_empty() {
        let tree = parser.parse(input.tokens)?;
        let groups: Vec<Vec<usize>> = boxes.iter().map(|b| b.words.clone()).collect();
        let token_spans = expand_spans(&tree, &groups, &cfg.rules)?;
        for (tr, b) in token_spans.into_iter().zip(&boxes) {
            let bytes = input.tokens[tr.start].range.start..input.tokens[tr.end - 1].range.end;
            pieces.push((bytes, b));
        }
        pieces.sort_by_key(|(r, _)| (r.start, r.end));
        let mut end = 0;
        pieces.retain(|(r, _)| {
            let keep = r.start >= end;
            if keep {
                end = r.end;
            }
            keep
        });
    }
    let spans: Vec<Span> = pieces.iter().map(|(r, b)| Span { range: r.clone(), bbox: b.bbox }).collect();
    let sequence = insert_tokens(input.caption, &spans, vocab, rng)?;
    let spans = pieces
        .iter()
        .map(|(r, b)| SpanRecord { start: r.start, end: r.end, bbox: b.bbox, sim: b.sim })
        .collect();
    Ok(Grounded { sequence, spans })
}

/// Question-answer caption about one entity whose shape or color is unique
/// in the scene.
pub fn qa_caption<R: Rng + ?Sized>(scene: &SyntheticScene, rng: &mut R) -> Option<String> {
    let mut options = Vec::new();
    for e in &scene.entities {
        let (c, s) = (e.kind.color, e.kind.shape);
        if scene.entities.iter().filter(|o| o.kind.shape == s).count() == 1 {
            options.push(qa_color_question(s) + " " + c.word());
        }
        if scene.entities.iter().filter(|o| o.kind.color == c).count() == 1 {
            options.push(qa_shape_question(c) + " " + s.word());
        }
    }
    if options.is_empty() {
        return None;
    }
    let i = rng.random_range(0..options.len());
    Some(options.swap_remove(i))
}

pub fn qa_color_question(shape: Shape) -> String {
    format!("question : what color is the {} ? short answer :", shape.word())
}

pub fn qa_shape_question(color: Color) -> String {
    format!("question : what shape is the {} object ? short answer :", color.word())
}

/// Split of a QA caption into (question prompt, answer word).
pub fn split_qa(caption: &str) -> Option<(&str, &str)> {
    let i = caption.rfind(':')?;
    let answer = caption[i + 1..].trim();
    (caption.starts_with("question") && !answer.is_empty()).then(|| (&caption[..=i], answer))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub skipped: usize,
    pub qa_records: usize,
    pub spans: usize,
    /// Spans after the first of their record.
    pub later_spans: usize,
    /// Of those, how many use the box-first form.
    pub later_previsual: usize,
}

impl CorpusStats {
    pub fn previsual_ratio(&self) -> f64 {
        if self.later_spans == 0 {
            0.0
        } else {
            self.later_previsual as f64 / self.later_spans as f64
        }
    }

    fn count(&mut self, seq: &CommSequence) {
        let forms = block_forms(seq);
        self.records += 1;
        self.spans += forms.len();
        self.later_spans += forms.len().saturating_sub(1);
        self.later_previsual += forms.iter().skip(1).filter(|f| **f == Form::Previsual).count();
    }
}

/// One grounded training example held in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub record: CorpusRecord,
    pub image: Image,
    pub sequence: CommSequence,
}

/// RNG for item `index` of a run seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `n` scenes under `split`, grounds their captions with the
/// oracle backends, and mixes in question-answer records. Failing items are
/// logged and skipped.
pub fn synthetic_corpus(
    n: usize,
    seed: u64,
    split: Split,
    cfg: &PipelineConfig,
    vocab: &Vocab,
) -> (Vec<SyntheticScene>, Vec<Example>, CorpusStats) {
    let mut scenes = Vec::with_capacity(n);
    let mut examples = Vec::with_capacity(n + n / 8);
    let mut stats = CorpusStats::default();
    let grounder = OracleGrounder { noise: cfg.box_noise, seed };
    for i in 0..n {
        let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = random_scene(scene_seed, split);
        let image = scene.render().quantized();
        let mut rng = item_rng(seed, i as u64);
        let mut captions = vec![(scene.id.clone(), scene.caption.clone())];
        if rng.random_bool(cfg.qa_fraction) {
            if let Some(q) = qa_caption(&scene, &mut rng) {
                captions.push((format!("{}-qa", scene.id), q));
            }
        }
        for (id, caption) in captions {
            let tokens = Vocab::tokenize(&caption);
            let input = GroundingInput { image: &image, caption: &caption, tokens: &tokens, scene: Some(&scene) };
            let parser = OracleParser { scene: &scene };
            let parser: &dyn Parser = if caption == scene.caption { &parser } else { &TemplateParser };
            match ground_caption(&input, &grounder, parser, cfg, vocab, &mut rng) {
                Ok(g) => {
                    stats.count(&g.sequence);
                    if id.ends_with("-qa") {
                        stats.qa_records += 1;
                    }
                    let record = CorpusRecord {
                        id,
                        image: String::new(),
                        comm_text: g.sequence.to_text(vocab),
                        caption,
                        spans: g.spans,
                    };
                    examples.push(Example { record, image: image.clone(), sequence: g.sequence });
                }
                Err(e) => {
                    log::warn!("skipping {id}: {e}");
                    stats.skipped += 1;
                }
            }
        }
        scenes.push(scene);
    }
    (scenes, examples, stats)
}

/// Uncaptioned input for the grounding stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionedImage {
    pub id: String,
    pub image: String,
    pub caption: String,
}

/// Grounds arbitrary captioned images with the pixel grounder and the
/// template parser.
pub fn ground_records(
    inputs: &[CaptionedImage],
    base: &Path,
    seed: u64,
    cfg: &PipelineConfig,
    vocab: &Vocab,
) -> (Vec<CorpusRecord>, CorpusStats) {
    let mut out = Vec::new();
    let mut stats = CorpusStats::default();
    for (i, item) in inputs.iter().enumerate() {
        let result = (|| {
            let probe = CorpusRecord {
                id: item.id.clone(),
                image: item.image.clone(),
                caption: item.caption.clone(),
                comm_text: String::new(),
                spans: Vec::new(),
            };
            let image = probe.load_image(base)?;
            let tokens = Vocab::tokenize(&item.caption);
            let input = GroundingInput { image: &image, caption: &item.caption, tokens: &tokens, scene: None };
            let g = ground_caption(&input, &BlobGrounder, &TemplateParser, cfg, vocab, &mut item_rng(seed, i as u64))?;
            Ok::<_, PipelineError>(CorpusRecord { comm_text: g.sequence.to_text(vocab), spans: g.spans, ..probe })
                .map(|r| (r, g.sequence))
        })();
        match result {
            Ok((r, seq)) => {
                stats.count(&seq);
                out.push(r);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", item.id);
                stats.skipped += 1;
            }
        }
    }
    (out, stats)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| PipelineError::Json { path: path.into(), line: 0, source })?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    let r = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PipelineError::Json { path: path.into(), line: i + 1, source })?);
    }
    Ok(out)
}

/// Loads a corpus file into memory, resolving image paths against its directory.
pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Example>, PipelineError> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_jsonl::<CorpusRecord>(path)?
        .into_iter()
        .map(|record| {
            let image = record.load_image(base)?;
            let sequence = record.sequence(vocab)?;
            Ok(Example { record, image, sequence })
        })
        .collect()
}

/// Writes examples as `corpus.jsonl` plus one PPM per distinct image under
/// `images/`, and the scene ground truth as `scenes.jsonl`.
pub fn write_corpus(dir: &Path, scenes: &[SyntheticScene], examples: &[Example]) -> Result<(), PipelineError> {
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let scene_id = ex.record.id.trim_end_matches("-qa");
        let rel = format!("images/{scene_id}.ppm");
        let path = dir.join(&rel);
        if !path.exists() {
            ex.image.save_ppm(&path).map_err(|e| match e {
                RasterError::Io(source) => PipelineError::Io { path: path.clone(), source },
                e => PipelineError::Raster(e),
            })?;
        }
        records.push(CorpusRecord { image: rel, ..ex.record.clone() });
    }
    write_jsonl(&dir.join("corpus.jsonl"), &records)?;
    write_jsonl(&dir.join("scenes.jsonl"), scenes)
}
