//! The full model: patch encoder, detection head and language model sharing
//! one parameter store, plus single-example training losses and an inference
//! session.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geometry::BBox;
use crate::grammar::{CommSequence, CommToken, Element, GrammarError, SequenceError, Vocab};
use crate::lm::{lm_loss, lm_targets, LanguageModel, LmConfig, LmError, LmOutput};
use crate::numerics::{read_checkpoint, Checkpoint, NumericsError, ParamStore, Scalar, Tape, Var};
use crate::raster::{Image, RasterError};
use crate::vision::{
    detection_loss, proposals_from_raw, roi_cells, BoxProposal, DetectionContext, Detector, PatchEncoder, PatchGrid,
    VisionConfig, VisionError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("invalid sequence {0}")]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("slot {0} has no box")]
    UnresolvedSlot(usize),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub grid: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { image_size: 64, grid: 8, dim: 64, layers: 4, heads: 4, ffn: 256, max_len: 256 }
    }
}

impl ModelConfig {
    pub fn vision(&self) -> VisionConfig {
        VisionConfig { image_size: self.image_size, grid: self.grid, dim: self.dim }
    }

    pub fn lm(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
        }
    }
}

/// Parameter layout of the model; holds ids, not values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub encoder: PatchEncoder,
    pub detector: Detector,
    pub lm: LanguageModel,
}

/// Graph handles of one teacher-forced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SequenceForward {
    pub grid: Var,
    pub out: LmOutput,
    /// Stream index of the first sequence element.
    pub body: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub lm: Var,
    pub det: Option<Var>,
}

/// For each `<visual>`/`<previsual>` element, the boxes of the ROI run that
/// answers it.
pub fn detection_targets(seq: &CommSequence) -> Vec<(usize, Vec<BBox>)> {
    let mut out = Vec::new();
    for (j, e) in seq.elements.iter().enumerate() {
        if !matches!(e, Element::Comm(CommToken::Visual | CommToken::Previsual)) {
            continue;
        }
        let boxes = seq.elements[j + 1..]
            .iter()
            .skip_while(|e| matches!(e, Element::Comm(CommToken::Box | CommToken::Prebox)))
            .map_while(|e| match e {
                Element::Roi(k) => Some(seq.slots[*k].bbox),
                _ => None,
            })
            .flatten()
            .collect();
        out.push((j, boxes));
    }
    out
}

impl Architecture {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: ModelConfig,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vcfg = cfg.vision();
        let encoder = PatchEncoder::new(store, vcfg, &mut rng)?;
        let detector = Detector::new(store, vcfg, &mut rng)?;
        let lm = LanguageModel::new(store, cfg.lm(vocab.len()), vcfg.dim, &mut rng)?;
        if lm.cfg.dim != detector.cfg.dim {
            return Err(ModelError::Invalid("language model and detector dimensions differ".into()));
        }
        Ok(Self { cfg, vocab, encoder, detector, lm })
    }

    pub fn n_patches(&self) -> usize {
        self.cfg.grid * self.cfg.grid
    }

    /// Pooled features `[slots, D]` for a sequence whose slots all carry boxes.
    pub fn roi_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        grid: Var,
        seq: &CommSequence,
    ) -> Result<Option<Var>, ModelError> {
        if seq.slots.is_empty() {
            return Ok(None);
        }
        let groups = seq
            .slots
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let b = s.bbox.ok_or(ModelError::UnresolvedSlot(k))?;
                Ok(roi_cells(&b, self.cfg.grid)?)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Some(tape.gather_mean(grid, groups)?))
    }

    pub fn forward_with_grid<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        grid: Var,
        seq: &CommSequence,
    ) -> Result<SequenceForward, ModelError> {
        let rois = self.roi_features(tape, grid, seq)?;
        let stream = self.lm.embed(tape, params, seq, grid, rois)?;
        let out = self.lm.forward(tape, params, stream)?;
        Ok(SequenceForward { grid, out, body: 1 + self.n_patches() })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: &Image,
        seq: &CommSequence,
    ) -> Result<SequenceForward, ModelError> {
        let grid = self.encoder.forward(tape, params, image)?;
        self.forward_with_grid(tape, params, grid, seq)
    }

    /// Raw detector output for the hidden state at sequence element `j`.
    pub fn detect_at<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        ctx: DetectionContext,
        fwd: &SequenceForward,
        j: usize,
    ) -> Result<Var, ModelError> {
        let pos = fwd.body + j;
        let h = tape.slice_rows(fwd.out.hidden, pos, pos + 1)?;
        Ok(self.detector.forward(tape, params, ctx, h)?)
    }

    /// Teacher-forced loss for one example: token NLL plus `lambda` times the
    /// mean detection loss over communication positions.
    pub fn example_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: &Image,
        seq: &CommSequence,
        lambda: f64,
    ) -> Result<LossParts, ModelError> {
        let fwd = self.forward(tape, params, image, seq)?;
        let lm = lm_loss(tape, &fwd.out, lm_targets(self.n_patches(), seq, true))?;
        let targets = detection_targets(seq);
        if targets.is_empty() {
            return Ok(LossParts { total: lm, lm, det: None });
        }
        let ctx = self.detector.context(tape, params, fwd.grid)?;
        let mut terms = Vec::with_capacity(targets.len());
        for (j, boxes) in &targets {
            let raw = self.detect_at(tape, params, ctx, &fwd, *j)?;
            terms.push(detection_loss(tape, raw, boxes, self.cfg.grid)?);
        }
        let det = tape.concat_cols(&terms)?;
        let det = tape.mean(det)?;
        let weighted = tape.scale(det, T::from_f64(lambda))?;
        let total = tape.add(lm, weighted)?;
        Ok(LossParts { total, lm, det: Some(det) })
    }
}

/// Trained (or freshly initialized) model with its parameter values.
#[derive(Clone, Debug)]
pub struct Covlm {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Covlm {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let arch = Architecture::new(&mut params, cfg, vocab, seed)?;
        Ok(Self { arch, params })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.arch.vocab
    }

    /// Checkpoint metadata needed to rebuild the architecture.
    pub fn meta(&self) -> serde_json::Value {
        json!({ "model": self.arch.cfg, "vocab": self.arch.vocab })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let bad = |reason: String| ModelError::Checkpoint { path: String::new(), reason };
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| bad(format!("model config: {e}")))?;
        let vocab: Vocab =
            serde_json::from_value(ck.meta["vocab"].clone()).map_err(|e| bad(format!("vocabulary: {e}")))?;
        let mut m = Self::new(cfg, vocab, 0)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let wrap = |reason: String| ModelError::Checkpoint { path: path.display().to_string(), reason };
        let ck = read_checkpoint(path).map_err(|e| wrap(e.to_string()))?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            ModelError::Checkpoint { reason, .. } => wrap(reason),
            other => wrap(other.to_string()),
        })
    }

    pub fn session(&self, image: &Image) -> Result<Session<'_>, ModelError> {
        Session::new(self, image)
    }
}

/// Inference over one image: parameters are bound and the image encoded once;
/// every forward pass appends to the same tape.
pub struct Session<'m> {
    pub model: &'m Covlm,
    tape: Tape<f32>,
    params: Vec<Var>,
    grid: Var,
    ctx: Option<DetectionContext>,
}

/// Values of one inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub body: usize,
    pub vocab: usize,
    pub dim: usize,
    pub logits: Vec<f32>,
    pub hidden: Vec<f32>,
}

impl ForwardValues {
    pub fn logits_at(&self, stream_pos: usize) -> &[f32] {
        &self.logits[stream_pos * self.vocab..(stream_pos + 1) * self.vocab]
    }

    /// Logits predicting the element after sequence element `j`
    /// (`None` for the first element).
    pub fn logits_after(&self, j: Option<usize>) -> &[f32] {
        self.logits_at(j.map_or(self.body - 1, |j| self.body + j))
    }
}

impl<'m> Session<'m> {
    fn new(model: &'m Covlm, image: &Image) -> Result<Self, ModelError> {
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape);
        let grid = model.arch.encoder.forward(&mut tape, &params, image)?;
        Ok(Self { model, tape, params, grid, ctx: None })
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid { n: self.model.arch.cfg.grid, d: self.model.arch.cfg.dim, features: self.tape.value(self.grid).to_vec() }
    }

    fn run(&mut self, seq: &CommSequence) -> Result<SequenceForward, ModelError> {
        self.model.arch.forward_with_grid(&mut self.tape, &self.params, self.grid, seq)
    }

    pub fn forward(&mut self, seq: &CommSequence) -> Result<ForwardValues, ModelError> {
        let fwd = self.run(seq)?;
        let out = ForwardValues {
            body: fwd.body,
            vocab: self.model.vocab().len(),
            dim: self.model.arch.cfg.dim,
            logits: self.tape.value(fwd.out.logits).to_vec(),
            hidden: self.tape.value(fwd.out.hidden).to_vec(),
        };
        Ok(out)
    }

    /// All `N^2` proposals from the hidden state at the last element of `seq`.
    pub fn detect_last(&mut self, seq: &CommSequence) -> Result<Vec<BoxProposal>, ModelError> {
        let j = seq.len().checked_sub(1).ok_or_else(|| ModelError::Invalid("detection on an empty sequence".into()))?;
        let fwd = self.run(seq)?;
        let ctx = match self.ctx {
            Some(c) => c,
            None => {
                let c = self.model.arch.detector.context(&mut self.tape, &self.params, self.grid)?;
                self.ctx = Some(c);
                c
            }
        };
        let raw = self.model.arch.detect_at(&mut self.tape, &self.params, ctx, &fwd, j)?;
        Ok(proposals_from_raw(self.tape.value(raw), self.model.arch.cfg.grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, Split};

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { image_size: 64, grid: 8, dim: 16, layers: 1, heads: 2, ffn: 32, max_len: 128 }
    }

    #[test]
    fn detection_targets_follow_roi_runs() {
        let v = Vocab::synthetic();
        let mut seq = CommSequence::parse(
            "<obj> red </obj> <visual> <box> [roi:0] is left of <previsual> <prebox> [roi:1] [roi:2] <obj> blue </obj>",
            &v,
        )
        .unwrap();
        let boxes: Vec<BBox> = (0..3).map(|i| BBox::new(0.2 + 0.1 * i as f32, 0.5, 0.1, 0.1)).collect();
        for (s, b) in seq.slots.iter_mut().zip(&boxes) {
            s.bbox = Some(*b);
        }
        let t = detection_targets(&seq);
        assert_eq!(t, vec![(3, vec![boxes[0]]), (9, vec![boxes[1], boxes[2]])]);
    }

    #[test]
    fn session_forward_matches_training_graph() {
        let m = Covlm::new(tiny(), Vocab::synthetic(), 1).unwrap();
        let scene = generate_scene(3, 2, Split::Any);
        let img = scene.render();
        let seq = CommSequence::parse("the red circle", m.vocab()).unwrap();
        let mut s = m.session(&img).unwrap();
        let a = s.forward(&seq).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let f = m.arch.forward(&mut tape, &p, &img, &seq).unwrap();
        assert_eq!(a.logits, tape.value(f.out.logits));
    }

    #[test]
    fn unresolved_slot_is_reported() {
        let m = Covlm::new(tiny(), Vocab::synthetic(), 1).unwrap();
        let img = generate_scene(3, 2, Split::Any).render();
        let seq = CommSequence::parse("<obj> red </obj> <visual> <box> [roi:0]", m.vocab()).unwrap();
        assert!(matches!(m.session(&img).unwrap().forward(&seq), Err(ModelError::UnresolvedSlot(0))));
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_model() {
        let m = Covlm::new(tiny(), Vocab::synthetic(), 4).unwrap();
        let mut ck = Checkpoint::from_params(&m.params, json!({}));
        ck.meta = m.meta();
        let back = Covlm::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.arch.vocab, m.arch.vocab);
    }
}
