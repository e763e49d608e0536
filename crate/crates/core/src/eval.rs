//! Zero-shot evaluation protocols on synthetic analogs of ARO, Cola,
//! HICO-DET, RefExp and VQA.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decoder::{
    communicative_decode, continuation_nll, resolve_prompt, score_box_candidate, session_perplexity, DecodeConfig,
};
use crate::geometry::BBox;
use crate::grammar::{CommSequence, CommToken, Element, TokenId, Vocab};
use crate::model::{Covlm, ModelError};
use crate::pipeline::{item_rng, qa_caption, split_qa};
use crate::raster::Image;
use crate::vision::{nms, BoxProposal};
use crate::world::{caption_for, Entity, Kind, Relation, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub items: Vec<Value>,
}

impl MetricReport {
    /// Recomputes the aggregates from the per-item records.
    pub fn audit(&self) -> Result<BTreeMap<String, f64>, ModelError> {
        let field = |item: &Value, k: &str| {
            item.get(k).cloned().ok_or_else(|| ModelError::Invalid(format!("item lacks {k}: {item}")))
        };
        let mean = |k: &str| -> Result<f64, ModelError> {
            let mut s = 0.0;
            for it in &self.items {
                s += field(it, k)?.as_bool().unwrap_or(false) as u8 as f64;
            }
            Ok(if self.items.is_empty() { 0.0 } else { s / self.items.len() as f64 })
        };
        let mut m = BTreeMap::new();
        match self.task.as_str() {
            "aro" => {
                m.insert("top1".into(), mean("top1")?);
                m.insert("top5".into(), mean("top5")?);
            }
            "cola" | "vqa" => {
                let key = if self.task == "cola" { "pair_acc" } else { "accuracy" };
                m.insert(key.into(), mean("correct")?);
            }
            "refexp" => {
                m.insert("raw_acc".into(), mean("raw_hit")?);
                m.insert("rerank_acc".into(), mean("rerank_hit")?);
            }
            "hoi" => {
                let mut preds = Vec::new();
                let mut n_gt: BTreeMap<String, usize> = BTreeMap::new();
                for it in &self.items {
                    for g in field(it, "gt_categories")?.as_array().into_iter().flatten() {
                        *n_gt.entry(g.as_str().unwrap_or_default().to_string()).or_default() += 1;
                    }
                    for p in field(it, "predictions")?.as_array().into_iter().flatten() {
                        preds.push(HoiScored {
                            category: p["category"].as_str().unwrap_or_default().to_string(),
                            score: p["score"].as_f64().unwrap_or(f64::NEG_INFINITY),
                            tp: p["tp"].as_bool().unwrap_or(false),
                        });
                    }
                }
                let known = self.items.iter().any(|it| it.get("rare_categories").is_some());
                let rare: BTreeSet<String> = self
                    .items
                    .iter()
                    .flat_map(|it| it["rare_categories"].as_array().cloned().unwrap_or_default())
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect();
                m.extend(hoi_map(&preds, &n_gt, known.then_some(&rare)));
            }
            t => return Err(ModelError::Invalid(format!("unknown task {t}"))),
        }
        Ok(m)
    }
}

/// Evaluation settings shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub seed: u64,
    /// IoU needed for a localization to count.
    pub iou_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { decode: DecodeConfig::default(), seed: 0, iou_threshold: 0.5 }
    }
}

impl EvalConfig {
    fn communicate(&self) -> bool {
        self.decode.communicate
    }
}

fn word_ids(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>, ModelError> {
    Ok(vocab.encode(text)?)
}

fn push_words(seq: &mut CommSequence, ids: &[TokenId]) {
    for &w in ids {
        seq.push_word(w);
    }
}

/// `<visual> <box> [roi]` or `<previsual> <prebox> [roi]` with the slot
/// left for the detector.
fn push_detection(seq: &mut CommSequence, token: CommToken) {
    seq.push_comm(token);
    seq.push_comm(if token == CommToken::Visual { CommToken::Box } else { CommToken::Prebox });
    seq.push_roi(None);
}

/// `<obj> words </obj>` as elements.
fn entity_block(vocab: &Vocab, text: &str) -> Result<Vec<Element>, ModelError> {
    let mut out = vec![Element::Comm(CommToken::ObjOpen)];
    out.extend(word_ids(vocab, text)?.into_iter().map(Element::Word));
    out.push(Element::Comm(CommToken::ObjClose));
    Ok(out)
}

// ---------------------------------------------------------------- ARO

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AroItem {
    pub id: String,
    pub scene: SyntheticScene,
    pub subject: Kind,
    pub relation: Relation,
    pub object: Kind,
    pub candidates: Vec<Kind>,
}

impl AroItem {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let (subject, relation, object) = scene.tuple();
        Self { id: scene.id.clone(), scene: scene.clone(), subject, relation, object, candidates: Kind::all() }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if !self.candidates.contains(&self.object) {
            return Err(ModelError::Invalid(format!("{}: ground truth is not a candidate", self.id)));
        }
        let unique: BTreeSet<&Kind> = self.candidates.iter().collect();
        if unique.len() != self.candidates.len() {
            return Err(ModelError::Invalid(format!("{}: duplicate candidates", self.id)));
        }
        Ok(())
    }
}

/// Prompt `<obj> the A </obj> <visual> relation <previsual>` (detector fills
/// the feedback), or the plain `the A relation` without communication.
fn relation_prompt(vocab: &Vocab, subject: &str, relation: Relation, communicate: bool) -> Result<CommSequence, ModelError> {
    let mut seq = CommSequence::new();
    let subject = format!("the {subject}");
    if communicate {
        seq.elements.extend(entity_block(vocab, &subject)?);
        push_detection(&mut seq, CommToken::Visual);
        push_words(&mut seq, &word_ids(vocab, &format!("is {}", relation.phrase()))?);
        seq.push_comm(CommToken::Previsual);
    } else {
        push_words(&mut seq, &word_ids(vocab, &format!("{subject} is {}", relation.phrase()))?);
    }
    Ok(seq)
}

/// Candidate continuation: `<obj> the c s </obj>` or plain `the c s`.
fn object_continuation(vocab: &Vocab, object: &str, communicate: bool) -> Result<Vec<Element>, ModelError> {
    let text = format!("the {object}");
    if communicate {
        entity_block(vocab, &text)
    } else {
        Ok(word_ids(vocab, &text)?.into_iter().map(Element::Word).collect())
    }
}

/// Candidates ranked by mean NLL of their phrase as a continuation of the
/// relation prompt; ties keep kind order, so the ranking ignores list order.
pub fn eval_aro(model: &Covlm, items: &[AroItem], cfg: &EvalConfig) -> Result<MetricReport, ModelError> {
    let vocab = model.vocab();
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        item.check()?;
        let image = item.scene.render();
        let mut session = model.session(&image)?;
        let prompt = relation_prompt(vocab, &item.subject.phrase(), item.relation, cfg.communicate())?;
        let (prefix, _) = resolve_prompt(&mut session, &prompt, &cfg.decode)?;
        let mut scored = Vec::with_capacity(item.candidates.len());
        for &c in &item.candidates {
            let cont = object_continuation(vocab, &c.phrase(), cfg.communicate())?;
            scored.push((continuation_nll(&mut session, &prefix, &cont)?, c));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rank = scored.iter().position(|(_, c)| *c == item.object).expect("checked");
        let k5 = 5.min(scored.len());
        records.push(json!({
            "id": item.id,
            "prefix": prefix.to_text(vocab),
            "gt": item.object.phrase(),
            "ranking": scored.iter().map(|(n, c)| json!([c.phrase(), n])).collect::<Vec<_>>(),
            "rank": rank,
            "top1": rank == 0,
            "top5": rank < k5,
        }));
    }
    finish("aro", records)
}

fn finish(task: &str, items: Vec<Value>) -> Result<MetricReport, ModelError> {
    let mut r = MetricReport { task: task.into(), metrics: BTreeMap::new(), items };
    r.metrics = r.audit()?;
    Ok(r)
}

// --------------------------------------------------------------- Cola

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColaPair {
    pub id: String,
    pub scenes: [SyntheticScene; 2],
    /// Caption `i` describes scene `i`.
    pub captions: [String; 2],
}

/// The captioned pair with attribute colors (or shapes, when colors agree)
/// exchanged; `None` when the swap would duplicate a kind in the scene.
pub fn swapped_scene(scene: &SyntheticScene) -> Option<SyntheticScene> {
    let f = scene.fact();
    let (a, b) = (scene.entities[f.subject].kind, scene.entities[f.object].kind);
    let (a2, b2) = if a.color != b.color {
        (Kind { color: b.color, shape: a.shape }, Kind { color: a.color, shape: b.shape })
    } else {
        (Kind { color: a.color, shape: b.shape }, Kind { color: b.color, shape: a.shape })
    };
    if a2 == b2 || (a2 == a && b2 == b) {
        return None;
    }
    let mut entities: Vec<Entity> = scene.entities.clone();
    entities[f.subject].kind = a2;
    entities[f.object].kind = b2;
    let kinds: BTreeSet<Kind> = entities.iter().map(|e| e.kind).collect();
    if kinds.len() != entities.len() {
        return None;
    }
    Some(SyntheticScene {
        id: format!("{}-swap", scene.id),
        seed: scene.seed,
        caption: caption_for(a2, f.relation, b2),
        relations: scene.relations.clone(),
        entities,
    })
}

impl ColaPair {
    pub fn from_scene(scene: &SyntheticScene) -> Option<Self> {
        let other = swapped_scene(scene)?;
        Some(Self {
            id: scene.id.clone(),
            captions: [scene.caption.clone(), other.caption.clone()],
            scenes: [scene.clone(), other],
        })
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.captions[0] == self.captions[1] {
            return Err(ModelError::Invalid(format!("{}: captions coincide", self.id)));
        }
        Ok(())
    }
}

/// Caption as a scoring sequence: subject and object in the forms used by
/// the relation prompt, every slot left for the detector.
pub fn caption_sequence(vocab: &Vocab, caption: &str, communicate: bool) -> Result<CommSequence, ModelError> {
    if !communicate {
        return Ok(CommSequence::from_words(&word_ids(vocab, caption)?));
    }
    let parts: Vec<&str> = caption.split(" is ").collect();
    let (subject, rest) = match parts.as_slice() {
        [s, r] => (*s, *r),
        _ => return Ok(CommSequence::from_words(&word_ids(vocab, caption)?)),
    };
    let rel = Relation::ALL
        .into_iter()
        .find(|r| rest.starts_with(&format!("{} the ", r.phrase())))
        .ok_or_else(|| ModelError::Invalid(format!("no relation in caption {caption:?}")))?;
    let object = &rest[rel.phrase().len() + 1..];
    let mut seq = CommSequence::new();
    seq.elements.extend(entity_block(vocab, subject)?);
    push_detection(&mut seq, CommToken::Visual);
    push_words(&mut seq, &word_ids(vocab, &format!("is {}", rel.phrase()))?);
    push_detection(&mut seq, CommToken::Previsual);
    seq.elements.extend(entity_block(vocab, object)?);
    Ok(seq)
}

/// Both captions must pick their own image by lower perplexity; ties count
/// as failures.
pub fn eval_cola(model: &Covlm, pairs: &[ColaPair], cfg: &EvalConfig) -> Result<MetricReport, ModelError> {
    let vocab = model.vocab();
    let mut records = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.check()?;
        // ppl[image][caption]
        let mut ppl = [[0.0f64; 2]; 2];
        for (i, scene) in pair.scenes.iter().enumerate() {
            let image = scene.render();
            let mut session = model.session(&image)?;
            for (c, caption) in pair.captions.iter().enumerate() {
                let seq = caption_sequence(vocab, caption, cfg.communicate())?;
                ppl[i][c] = session_perplexity(&mut session, &seq, &cfg.decode)?;
            }
        }
        let matched = |c: usize| ppl[c][c] < ppl[1 - c][c];
        records.push(json!({
            "id": pair.id,
            "captions": pair.captions,
            "ppl": ppl,
            "correct": matched(0) && matched(1),
        }));
    }
    finish("cola", records)
}

// ---------------------------------------------------------------- HOI

/// Triplets with the captioned subject: `(subject box, verb, object kind, object box)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub subject_box: BBox,
    pub verb: Relation,
    pub object: Kind,
    pub object_box: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiItem {
    pub id: String,
    pub scene: SyntheticScene,
    pub subject: Kind,
    pub triplets: Vec<HoiTriplet>,
}

impl HoiItem {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let s = scene.fact().subject;
        let triplets = scene
            .all_facts()
            .into_iter()
            .filter(|f| f.subject == s)
            .map(|f| HoiTriplet {
                subject_box: scene.entities[s].bbox,
                verb: f.relation,
                object: scene.entities[f.object].kind,
                object_box: scene.entities[f.object].bbox,
            })
            .collect();
        Self { id: scene.id.clone(), scene: scene.clone(), subject: scene.entities[s].kind, triplets }
    }
}

pub fn hoi_category(verb: Relation, object: Kind) -> String {
    format!("{}|{}", verb.phrase(), object.phrase())
}

/// Number of training captions per (verb, object) category.
pub fn hoi_train_counts(train: &[SyntheticScene]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in train {
        let (_, r, o) = s.tuple();
        *m.entry(hoi_category(r, o)).or_default() += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoiScored {
    pub category: String,
    pub score: f64,
    pub tp: bool,
}

/// Average precision with all-points interpolation. Predictions are ranked
/// by score, ties broken by input order.
pub fn average_precision(scores: &[f64], tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut prec, mut rec) = (0usize, Vec::new(), Vec::new());
    for (k, &i) in order.iter().enumerate() {
        hits += tp[i] as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_rec = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_rec) * p;
        last_rec = *r;
    }
    ap
}

/// mAP over categories with ground truth, plus Rare/Non-Rare splits when the
/// rare set is known.
fn hoi_map(preds: &[HoiScored], n_gt: &BTreeMap<String, usize>, rare: Option<&BTreeSet<String>>) -> BTreeMap<String, f64> {
    let mut ap = BTreeMap::new();
    for (cat, &n) in n_gt {
        let mine: Vec<&HoiScored> = preds.iter().filter(|p| &p.category == cat).collect();
        let scores: Vec<f64> = mine.iter().map(|p| p.score).collect();
        let tp: Vec<bool> = mine.iter().map(|p| p.tp).collect();
        ap.insert(cat.clone(), average_precision(&scores, &tp, n));
    }
    let mean = |f: &dyn Fn(&str) -> bool| {
        let v: Vec<f64> = ap.iter().filter(|(c, _)| f(c)).map(|(_, a)| *a).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut m = BTreeMap::new();
    m.insert("map_full".into(), mean(&|_| true).unwrap_or(0.0));
    if let Some(rare) = rare {
        if let Some(v) = mean(&|c| rare.contains(c)) {
            m.insert("map_rare".into(), v);
        }
        if let Some(v) = mean(&|c| !rare.contains(c)) {
            m.insert("map_nonrare".into(), v);
        }
    }
    m
}

/// Verb detection by positive/negative phrase perplexity, then localization
/// by decoding the object after `<previsual>`.
pub fn eval_hoi(
    model: &Covlm,
    items: &[HoiItem],
    train_counts: Option<&BTreeMap<String, usize>>,
    cfg: &EvalConfig,
) -> Result<MetricReport, ModelError> {
    let vocab = model.vocab();
    let comm = cfg.communicate();
    let rare: Option<Vec<String>> = train_counts.map(|counts| {
        let mut all = BTreeSet::new();
        for it in items {
            for t in &it.triplets {
                let c = hoi_category(t.verb, t.object);
                if counts.get(&c).copied().unwrap_or(0) < 10 {
                    all.insert(c);
                }
            }
        }
        all.into_iter().collect()
    });
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let image = item.scene.render();
        let mut session = model.session(&image)?;
        let subject = format!("the {}", item.subject.phrase());
        let mut predictions = Vec::new();
        let mut matched = vec![false; item.triplets.len()];
        for verb in Relation::ALL {
            let phrase = |neg: bool| -> Result<CommSequence, ModelError> {
                let tail = format!("is {}{}", if neg { "not " } else { "" }, verb.phrase());
                let mut seq = CommSequence::new();
                if comm {
                    seq.elements.extend(entity_block(vocab, &subject)?);
                    push_detection(&mut seq, CommToken::Visual);
                } else {
                    push_words(&mut seq, &word_ids(vocab, &subject)?);
                }
                push_words(&mut seq, &word_ids(vocab, &tail)?);
                Ok(seq)
            };
            let pos = session_perplexity(&mut session, &phrase(false)?, &cfg.decode)?;
            let neg = session_perplexity(&mut session, &phrase(true)?, &cfg.decode)?;
            if !(pos < neg) {
                continue;
            }
            let score = neg.ln() - pos.ln();
            let prompt = relation_prompt(vocab, &item.subject.phrase(), verb, comm)?;
            let dcfg = DecodeConfig { max_tokens: 6, ..cfg.decode.clone() };
            let out = communicative_decode(model, &image, &prompt, &dcfg)?;
            let subject_box = out.detections.first().and_then(|d| d.proposals.first()).map(|p| p.bbox);
            let object_box = out.detections.get(1).and_then(|d| d.proposals.first()).map(|p| p.bbox);
            let object = generated_kind(vocab, &out.sequence, prompt.words().count());
            let mut tp = false;
            if let (Some(sb), Some(ob), Some(o)) = (subject_box, object_box, object) {
                for (g, t) in item.triplets.iter().enumerate() {
                    if !matched[g]
                        && t.verb == verb
                        && t.object == o
                        && sb.iou(&t.subject_box) >= cfg.iou_threshold
                        && ob.iou(&t.object_box) >= cfg.iou_threshold
                    {
                        matched[g] = true;
                        tp = true;
                        break;
                    }
                }
            }
            let category = object.map(|o| hoi_category(verb, o)).unwrap_or_else(|| format!("{}|?", verb.phrase()));
            predictions.push(json!({
                "verb": verb.phrase(),
                "category": category,
                "score": score,
                "tp": tp,
                "decoded": out.comm_text,
            }));
        }
        let mut rec = json!({
            "id": item.id,
            "gt_categories": item.triplets.iter().map(|t| hoi_category(t.verb, t.object)).collect::<Vec<_>>(),
            "predictions": predictions,
        });
        if let Some(r) = &rare {
            rec["rare_categories"] = json!(r);
        }
        records.push(rec);
    }
    finish("hoi", records)
}

/// First `color shape` pair among the words generated after the prompt.
fn generated_kind(vocab: &Vocab, seq: &CommSequence, prompt_words: usize) -> Option<Kind> {
    let words: Vec<&str> = seq.words().skip(prompt_words).map(|w| vocab.token(w)).collect();
    words.windows(2).find_map(|w| {
        let color = crate::world::Color::ALL.into_iter().find(|c| c.word() == w[0])?;
        let shape = crate::world::Shape::ALL.into_iter().find(|s| s.word() == w[1])?;
        Some(Kind { color, shape })
    })
}

// ------------------------------------------------------------- RefExp

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefExpItem {
    pub id: String,
    pub scene: SyntheticScene,
    pub expression: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl RefExpItem {
    /// One item per scene, referring to a random entity.
    pub fn from_scene<R: Rng + ?Sized>(scene: &SyntheticScene, rng: &mut R) -> Self {
        let e = scene.entities[rng.random_range(0..scene.entities.len())];
        Self { id: scene.id.clone(), scene: scene.clone(), expression: format!("the {}", e.kind.phrase()), bbox: e.bbox }
    }
}

/// Boxes eligible for reranking: the top box plus every box scoring at least
/// half of it.
pub fn refexp_candidates(proposals: &[BoxProposal]) -> Vec<BoxProposal> {
    let Some(top) = proposals.first() else { return vec![BoxProposal::whole_image()] };
    let mut out = vec![*top];
    out.extend(proposals[1..].iter().filter(|p| p.score >= 0.5 * top.score).copied());
    out
}

pub fn eval_refexp(model: &Covlm, items: &[RefExpItem], cfg: &EvalConfig) -> Result<MetricReport, ModelError> {
    let vocab = model.vocab();
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let image: Image = item.scene.render();
        let mut session = model.session(&image)?;
        let expr = word_ids(vocab, &item.expression)?;
        let mut seq = CommSequence::new();
        seq.elements.extend(entity_block(vocab, &item.expression)?);
        seq.push_comm(CommToken::Visual);
        let raw = session.detect_last(&seq)?;
        let kept = nms(&raw, cfg.decode.iou_threshold, cfg.decode.score_floor);
        let cands = refexp_candidates(&kept);
        let mut best = (f64::INFINITY, 0usize);
        let mut ppls = Vec::with_capacity(cands.len());
        for (i, c) in cands.iter().enumerate() {
            let p = score_box_candidate(&mut session, &expr, c.bbox, &cfg.decode)?;
            ppls.push(p);
            if p < best.0 {
                best = (p, i);
            }
        }
        let raw_iou = cands[0].bbox.iou(&item.bbox);
        let rerank_iou = cands[best.1].bbox.iou(&item.bbox);
        records.push(json!({
            "id": item.id,
            "expression": item.expression,
            "candidates": cands.iter().map(|c| json!({"box": c.bbox, "score": c.score})).collect::<Vec<_>>(),
            "ppl": ppls,
            "chosen": best.1,
            "raw_iou": raw_iou,
            "rerank_iou": rerank_iou,
            "raw_hit": raw_iou >= cfg.iou_threshold,
            "rerank_hit": rerank_iou >= cfg.iou_threshold,
        }));
    }
    finish("refexp", records)
}

// ---------------------------------------------------------------- VQA

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub id: String,
    pub scene: SyntheticScene,
    /// Prompt ending in `short answer :`.
    pub question: String,
    pub answer: String,
}

impl VqaItem {
    pub fn from_scene<R: Rng + ?Sized>(scene: &SyntheticScene, rng: &mut R) -> Option<Self> {
        let caption = qa_caption(scene, rng)?;
        let (q, a) = split_qa(&caption)?;
        Some(Self { id: scene.id.clone(), scene: scene.clone(), question: q.to_string(), answer: a.to_string() })
    }
}

pub fn answers_match(predicted: &str, answer: &str) -> bool {
    predicted.trim().to_lowercase() == answer.trim().to_lowercase()
}

pub fn eval_vqa(model: &Covlm, items: &[VqaItem], cfg: &EvalConfig) -> Result<MetricReport, ModelError> {
    let vocab = model.vocab();
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let image = item.scene.render();
        let prompt = CommSequence::from_words(&word_ids(vocab, &item.question)?);
        let dcfg = DecodeConfig { max_tokens: 8, ..cfg.decode.clone() };
        let out = communicative_decode(model, &image, &prompt, &dcfg)?;
        let predicted = out.sequence.words().skip(prompt.len()).map(|w| vocab.token(w).to_string()).next().unwrap_or_default();
        records.push(json!({
            "id": item.id,
            "question": item.question,
            "answer": item.answer,
            "predicted": predicted,
            "decoded": out.comm_text,
            "correct": answers_match(&predicted, &item.answer),
        }));
    }
    finish("vqa", records)
}

// -------------------------------------------------------------- items

/// Items of every task built deterministically from scene ground truth.
pub fn aro_items(scenes: &[SyntheticScene]) -> Vec<AroItem> {
    scenes.iter().map(AroItem::from_scene).collect()
}

pub fn cola_pairs(scenes: &[SyntheticScene]) -> Vec<ColaPair> {
    scenes.iter().filter_map(ColaPair::from_scene).collect()
}

pub fn hoi_items(scenes: &[SyntheticScene]) -> Vec<HoiItem> {
    scenes.iter().map(HoiItem::from_scene).collect()
}

pub fn refexp_items(scenes: &[SyntheticScene], seed: u64) -> Vec<RefExpItem> {
    scenes.iter().enumerate().map(|(i, s)| RefExpItem::from_scene(s, &mut item_rng(seed, i as u64))).collect()
}

pub fn vqa_items(scenes: &[SyntheticScene], seed: u64) -> Vec<VqaItem> {
    scenes.iter().enumerate().filter_map(|(i, s)| VqaItem::from_scene(s, &mut item_rng(seed, i as u64))).collect()
}

/// Random subset of `n` scenes (all when `n` exceeds the count).
pub fn subsample(scenes: &[SyntheticScene], n: usize, seed: u64) -> Vec<SyntheticScene> {
    let mut idx: Vec<usize> = (0..scenes.len()).collect();
    idx.shuffle(&mut item_rng(seed, u64::MAX));
    idx.truncate(n);
    idx.sort();
    idx.into_iter().map(|i| scenes[i].clone()).collect()
}
