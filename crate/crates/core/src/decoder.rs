//! Grammar-constrained greedy decoding that hands control to the detector at
//! `<visual>`/`<previsual>`, plus perplexity scoring.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::grammar::{scan, validate, CommSequence, CommToken, Element, GrammarState, TokenId, Vocab};
use crate::lm::log_softmax;
use crate::model::{Covlm, ModelError, Session};
use crate::raster::Image;
use crate::vision::{nms, top_m, BoxProposal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_tokens: usize,
    pub m_box: usize,
    pub m_prebox: usize,
    pub greedy: bool,
    pub temperature: f32,
    pub iou_threshold: f32,
    pub score_floor: f32,
    pub seed: u64,
    /// When false the detector is never called and communication tokens are
    /// never emitted.
    pub communicate: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            m_box: 1,
            m_prebox: 3,
            greedy: true,
            temperature: 1.0,
            iou_threshold: 0.5,
            score_floor: 0.05,
            seed: 0,
            communicate: true,
        }
    }
}

impl DecodeConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        if self.m_box == 0 || self.m_prebox == 0 {
            return Err(ModelError::Invalid("m_box and m_prebox must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) || !(0.0..=1.0).contains(&self.score_floor) {
            return Err(ModelError::Invalid("NMS thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One detector call and the slots it filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Element index of the `<visual>`/`<previsual>` token.
    pub position: usize,
    pub token: CommToken,
    pub slots: Vec<usize>,
    pub proposals: Vec<BoxProposal>,
    pub no_detection: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    #[serde(skip)]
    pub sequence: CommSequence,
    /// Sequence text with `[roi:k]` slot markers.
    pub comm_text: String,
    /// Word tokens only.
    pub text: String,
    pub detections: Vec<Detection>,
    /// Box behind every slot of the sequence.
    pub boxes: BTreeMap<usize, BoxProposal>,
    /// NLL of each token chosen by the language model (forced tokens excluded).
    pub per_token_nll: Vec<f32>,
    pub truncated: bool,
}

fn feedback_for(t: CommToken) -> CommToken {
    match t {
        CommToken::Visual => CommToken::Box,
        _ => CommToken::Prebox,
    }
}

struct Decoder<'s, 'm> {
    session: &'s mut Session<'m>,
    cfg: &'s DecodeConfig,
    detections: Vec<Detection>,
    boxes: BTreeMap<usize, BoxProposal>,
}

impl Decoder<'_, '_> {
    /// Runs the detector at the last element of `seq` (a `<visual>` or
    /// `<previsual>`) and appends the feedback token and its ROI slots.
    fn detect_and_extend(&mut self, seq: &mut CommSequence, token: CommToken) -> Result<(), ModelError> {
        let position = seq.len() - 1;
        let raw = self.session.detect_last(seq)?;
        let kept = nms(&raw, self.cfg.iou_threshold, self.cfg.score_floor);
        let m = if token == CommToken::Visual { self.cfg.m_box } else { self.cfg.m_prebox };
        let mut chosen = top_m(&kept, m);
        let no_detection = chosen.is_empty();
        if no_detection {
            chosen.push(BoxProposal::whole_image());
        }
        seq.push_comm(feedback_for(token));
        let mut slots = Vec::with_capacity(chosen.len());
        for p in &chosen {
            let k = seq.push_roi(Some(p.bbox));
            self.boxes.insert(k, *p);
            slots.push(k);
        }
        self.detections.push(Detection { position, token, slots, proposals: chosen, no_detection });
        Ok(())
    }

    /// Copies `seq`, filling ROI runs by detection. Runs whose boxes are all
    /// known are kept unless `redetect`; a trailing `<visual>`/`<previsual>`
    /// gets its feedback appended.
    fn resolve(&mut self, seq: &CommSequence, redetect: bool) -> Result<CommSequence, ModelError> {
        scan(seq)?;
        let mut out = CommSequence::new();
        let els = &seq.elements;
        let mut j = 0;
        while j < els.len() {
            let e = els[j];
            match e {
                Element::Comm(t @ (CommToken::Visual | CommToken::Previsual)) if self.cfg.communicate => {
                    out.push_comm(t);
                    let mut end = j + 1;
                    if end < els.len() && els[end] == Element::Comm(feedback_for(t)) {
                        end += 1;
                        while end < els.len() && matches!(els[end], Element::Roi(_)) {
                            end += 1;
                        }
                    }
                    let run: Vec<usize> = els[j + 1..end]
                        .iter()
                        .filter_map(|e| if let Element::Roi(k) = e { Some(*k) } else { None })
                        .collect();
                    let known = !run.is_empty() && run.iter().all(|&k| seq.slots[k].bbox.is_some());
                    if known && !redetect {
                        out.push_comm(feedback_for(t));
                        for &k in &run {
                            let b = seq.slots[k].bbox.expect("checked");
                            let nk = out.push_roi(Some(b));
                            self.boxes.insert(nk, BoxProposal { bbox: b, score: 1.0, cell: 0 });
                        }
                    } else {
                        self.detect_and_extend(&mut out, t)?;
                    }
                    j = end;
                    continue;
                }
                Element::Word(w) => out.push_word(w),
                Element::Comm(t) => out.push_comm(t),
                Element::Roi(k) => {
                    let b = seq.slots[k].bbox.ok_or(ModelError::UnresolvedSlot(k))?;
                    out.push_roi(Some(b));
                }
            }
            j += 1;
        }
        Ok(out)
    }
}

fn mask_allowed(state: GrammarState, vocab: &Vocab, communicate: bool) -> Vec<bool> {
    let a = state.allowed();
    let mut ok = vec![false; vocab.len()];
    if a.words {
        for id in vocab.word_ids() {
            ok[id.index()] = true;
        }
    }
    if communicate {
        for t in &a.comm {
            if !matches!(t, CommToken::Box | CommToken::Prebox) {
                ok[vocab.comm(*t).index()] = true;
            }
        }
    }
    if a.end {
        ok[Vocab::EOS_ID] = true;
    }
    ok
}

fn pick(logits: &[f32], allowed: &[bool], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Option<usize> {
    let cands: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
    if cands.is_empty() {
        return None;
    }
    if cfg.greedy || cfg.temperature <= 0.0 {
        // First maximum wins ties.
        let mut best = cands[0];
        for &i in &cands[1..] {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return Some(best);
    }
    let t = cfg.temperature as f64;
    let mx = cands.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = cands.iter().map(|&i| ((logits[i] as f64 - mx) / t).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (&i, wi) in cands.iter().zip(&w) {
        if u < *wi {
            return Some(i);
        }
        u -= wi;
    }
    cands.last().copied()
}

/// Continues `prompt` on `image` until end of sequence or `max_tokens`
/// generated tokens. Communication tokens trigger detection and feedback.
pub fn communicative_decode(
    model: &Covlm,
    image: &Image,
    prompt: &CommSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, ModelError> {
    cfg.check()?;
    let vocab = model.vocab();
    let mut session = model.session(image)?;
    let mut dec = Decoder { session: &mut session, cfg, detections: Vec::new(), boxes: BTreeMap::new() };
    let mut seq = dec.resolve(prompt, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nll = Vec::new();
    let mut last_ok = scan(&seq)?.is_accepting().then_some((seq.len(), 0, 0));
    let mut generated = 0;
    let mut finished = false;
    while generated < cfg.max_tokens {
        let state = scan(&seq)?;
        let next = if state == GrammarState::AwaitBoxFeedback(crate::grammar::BoxStage::NeedVisual) {
            // Only one continuation is legal.
            vocab.comm(CommToken::Visual).index()
        } else {
            let fv = dec.session.forward(&seq)?;
            let logits = fv.logits_after(seq.len().checked_sub(1));
            let allowed = mask_allowed(state, vocab, cfg.communicate);
            let Some(tok) = pick(logits, &allowed, cfg, &mut rng) else { break };
            nll.push(-log_softmax(logits)[tok]);
            tok
        };
        generated += 1;
        if next == Vocab::EOS_ID {
            finished = true;
            break;
        }
        let id = TokenId(next as u32);
        match vocab.comm_of(id) {
            Some(t @ (CommToken::Visual | CommToken::Previsual)) => {
                seq.push_comm(t);
                dec.detect_and_extend(&mut seq, t)?;
            }
            Some(t) => seq.push_comm(t),
            None => seq.push_word(id),
        }
        if scan(&seq)?.is_accepting() {
            last_ok = Some((seq.len(), nll.len(), dec.detections.len()));
        }
    }
    let truncated = !finished && !scan(&seq)?.is_accepting();
    if truncated {
        let (len, n_nll, n_det) = last_ok.unwrap_or((0, 0, 0));
        seq.elements.truncate(len);
        let live: usize = seq.elements.iter().filter(|e| matches!(e, Element::Roi(_))).count();
        seq.slots.truncate(live);
        nll.truncate(n_nll);
        dec.detections.truncate(n_det);
        dec.boxes.retain(|k, _| *k < live);
    }
    validate(&seq)?;
    let words: Vec<TokenId> = seq.words().collect();
    Ok(DecodeResult {
        comm_text: seq.to_text(vocab),
        text: vocab.decode(&words),
        detections: dec.detections,
        boxes: dec.boxes,
        per_token_nll: nll,
        truncated,
        sequence: seq,
    })
}

/// NLL of every word token of `seq` given the image, with ROI slots filled
/// per `redetect` (see [`Decoder::resolve`]). Returns per-word NLLs in order.
fn word_nlls(session: &mut Session, seq: &CommSequence, cfg: &DecodeConfig, redetect: bool) -> Result<Vec<f64>, ModelError> {
    let mut dec = Decoder { session, cfg, detections: Vec::new(), boxes: BTreeMap::new() };
    let full = dec.resolve(seq, redetect)?;
    let fv = dec.session.forward(&full)?;
    let mut out = Vec::new();
    for (j, e) in full.elements.iter().enumerate() {
        if let Element::Word(w) = e {
            let lp = log_softmax(fv.logits_after(j.checked_sub(1)));
            out.push(-lp[w.index()] as f64);
        }
    }
    Ok(out)
}

fn ppl(nlls: &[f64]) -> Result<f64, ModelError> {
    if nlls.is_empty() {
        return Err(ModelError::Invalid("no word tokens to score".into()));
    }
    Ok((nlls.iter().sum::<f64>() / nlls.len() as f64).exp())
}

/// Exponentiated mean word NLL. Communication tokens and slots are context
/// only; every ROI run is filled by the detector at its communication token.
pub fn perplexity(model: &Covlm, image: &Image, seq: &CommSequence, cfg: &DecodeConfig) -> Result<f64, ModelError> {
    cfg.check()?;
    validate(seq)?;
    let mut s = model.session(image)?;
    ppl(&word_nlls(&mut s, seq, cfg, true)?)
}

/// Perplexity within an existing session (saves re-encoding the image).
pub fn session_perplexity(session: &mut Session, seq: &CommSequence, cfg: &DecodeConfig) -> Result<f64, ModelError> {
    validate(seq)?;
    ppl(&word_nlls(session, seq, cfg, true)?)
}

/// Perplexity of `expression` in `<previsual> <prebox> [roi(bbox)] <obj> expression </obj>`.
pub fn score_box_candidate(
    session: &mut Session,
    expression: &[TokenId],
    bbox: BBox,
    cfg: &DecodeConfig,
) -> Result<f64, ModelError> {
    if !bbox.is_valid() {
        return Err(ModelError::Invalid(format!("invalid box {:?}", bbox.to_array())));
    }
    let mut seq = CommSequence::new();
    seq.push_comm(CommToken::Previsual);
    seq.push_comm(CommToken::Prebox);
    seq.push_roi(Some(bbox));
    seq.push_comm(CommToken::ObjOpen);
    for &w in expression {
        seq.push_word(w);
    }
    seq.push_comm(CommToken::ObjClose);
    validate(&seq)?;
    ppl(&word_nlls(session, &seq, cfg, false)?)
}

/// Mean NLL of `continuation` words appended to an already resolved `prefix`.
pub fn continuation_nll(
    session: &mut Session,
    prefix: &CommSequence,
    continuation: &[Element],
) -> Result<f64, ModelError> {
    let mut seq = prefix.clone();
    seq.elements.extend_from_slice(continuation);
    let fv = session.forward(&seq)?;
    let mut total = 0.0;
    let mut n = 0;
    for (off, e) in continuation.iter().enumerate() {
        if let Element::Word(w) = e {
            let j = prefix.len() + off;
            total += -log_softmax(fv.logits_after(j.checked_sub(1)))[w.index()] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::Invalid("continuation has no words".into()));
    }
    Ok(total / n as f64)
}

/// Resolves a prompt's ROI runs (detecting where boxes are missing) without
/// generating anything.
pub fn resolve_prompt(
    session: &mut Session,
    prompt: &CommSequence,
    cfg: &DecodeConfig,
) -> Result<(CommSequence, Vec<Detection>), ModelError> {
    let mut dec = Decoder { session, cfg, detections: Vec::new(), boxes: BTreeMap::new() };
    let seq = dec.resolve(prompt, false)?;
    Ok((seq, dec.detections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{generate_scene, Split};

    fn tiny() -> Covlm {
        let cfg = ModelConfig { image_size: 64, grid: 8, dim: 16, layers: 1, heads: 2, ffn: 32, max_len: 128 };
        Covlm::new(cfg, Vocab::synthetic(), 7).unwrap()
    }

    #[test]
    fn decode_output_validates_and_is_deterministic() {
        let m = tiny();
        let img = generate_scene(1, 3, Split::Any).render();
        let prompt = CommSequence::parse("<obj> the red circle </obj> <visual>", m.vocab()).unwrap();
        let cfg = DecodeConfig { max_tokens: 12, ..DecodeConfig::default() };
        let a = communicative_decode(&m, &img, &prompt, &cfg).unwrap();
        validate(&a.sequence).unwrap();
        assert!(!a.detections.is_empty());
        assert_eq!(a.detections[0].slots.len(), 1);
        assert_eq!(a, communicative_decode(&m, &img, &prompt, &cfg).unwrap());
    }

    #[test]
    fn no_comm_decoding_is_plain_text() {
        let m = tiny();
        let img = generate_scene(2, 2, Split::Any).render();
        let prompt = CommSequence::parse("the red", m.vocab()).unwrap();
        let cfg = DecodeConfig { max_tokens: 10, communicate: false, ..DecodeConfig::default() };
        let r = communicative_decode(&m, &img, &prompt, &cfg).unwrap();
        assert!(r.detections.is_empty() && r.boxes.is_empty());
        assert!(r.sequence.elements.iter().all(|e| matches!(e, Element::Word(_))));
    }

    #[test]
    fn untrained_perplexity_is_near_vocab_size() {
        let m = tiny();
        let img = generate_scene(3, 2, Split::Any).render();
        let seq = CommSequence::parse("the red circle is above the blue square", m.vocab()).unwrap();
        let p = perplexity(&m, &img, &seq, &DecodeConfig::default()).unwrap();
        let v = m.vocab().len() as f64;
        assert!((p / v - 1.0).abs() < 0.15, "perplexity {p} vs vocab {v}");
    }

    #[test]
    fn single_word_perplexity_is_inverse_probability() {
        let m = tiny();
        let img = generate_scene(3, 2, Split::Any).render();
        let seq = CommSequence::parse("red", m.vocab()).unwrap();
        let p = perplexity(&m, &img, &seq, &DecodeConfig::default()).unwrap();
        let mut s = m.session(&img).unwrap();
        let fv = s.forward(&seq).unwrap();
        let prob = log_softmax(fv.logits_after(None))[m.vocab().id("red").unwrap().index()].exp() as f64;
        assert!((p - 1.0 / prob).abs() / p < 1e-5);
    }

    #[test]
    fn empty_caption_has_no_perplexity() {
        let m = tiny();
        let img = generate_scene(3, 2, Split::Any).render();
        assert!(perplexity(&m, &img, &CommSequence::new(), &DecodeConfig::default()).is_err());
    }

    #[test]
    fn box_scores_are_deterministic_and_accept_whole_image() {
        let m = tiny();
        let img = generate_scene(4, 2, Split::Any).render();
        let expr = m.vocab().encode("the red circle").unwrap();
        let mut s = m.session(&img).unwrap();
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let cfg = DecodeConfig::default();
        assert_eq!(score_box_candidate(&mut s, &expr, b, &cfg).unwrap(), score_box_candidate(&mut s, &expr, b, &cfg).unwrap());
        assert!(score_box_candidate(&mut s, &expr, BBox::WHOLE_IMAGE, &cfg).is_ok());
        assert!(score_box_candidate(&mut s, &expr, BBox::new(3.0, 3.0, 0.1, 0.1), &cfg).is_err());
    }
}
