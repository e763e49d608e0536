//! Python bindings: boxes and NMS, the communicative grammar, synthetic
//! scenes, training, decoding and evaluation.

use std::path::PathBuf;

use covlm::decoder::{communicative_decode, perplexity, DecodeConfig};
use covlm::eval::{self, caption_sequence, EvalConfig};
use covlm::grammar::{validate, CommSequence, Vocab};
use covlm::model::{Covlm, ModelConfig};
use covlm::pipeline::{synthetic_corpus, PipelineConfig};
use covlm::raster::Image;
use covlm::trainer::{train_items, TrainConfig, Trainer};
use covlm::vision::{self, BoxProposal};
use covlm::world::{random_scene, Split, SyntheticScene};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(invalid)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(invalid),
        None => Ok(T::default()),
    }
}

/// Axis-aligned box in normalized `(cx, cy, w, h)` coordinates.
#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(covlm::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self(covlm::BBox::new(cx, cy, w, h))
    }

    #[getter]
    fn cx(&self) -> f32 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f32 {
        self.0.cy
    }

    #[getter]
    fn w(&self) -> f32 {
        self.0.w
    }

    #[getter]
    fn h(&self) -> f32 {
        self.0.h
    }

    fn area(&self) -> f32 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f32 {
        self.0.iou(&other.0)
    }

    fn corners(&self) -> (f32, f32, f32, f32) {
        (self.0.x0(), self.0.y0(), self.0.x1(), self.0.y1())
    }

    fn __repr__(&self) -> String {
        format!("BBox(cx={}, cy={}, w={}, h={})", self.0.cx, self.0.cy, self.0.w, self.0.h)
    }
}

/// Greedy non-maximum suppression over `(box, score)` pairs. Returns the
/// indices of the survivors in decreasing score order.
#[pyfunction]
#[pyo3(signature = (proposals, iou_threshold=0.5, score_floor=0.0))]
fn nms(proposals: Vec<(PyBBox, f32)>, iou_threshold: f32, score_floor: f32) -> Vec<usize> {
    let props: Vec<BoxProposal> =
        proposals.iter().enumerate().map(|(cell, (b, score))| BoxProposal { bbox: b.0, score: *score, cell }).collect();
    vision::nms(&props, iou_threshold, score_floor).into_iter().map(|p| p.cell).collect()
}

/// Vocabulary of the synthetic world plus the communication tokens.
#[pyclass(name = "Vocab", frozen)]
struct PyVocab(Vocab);

#[pymethods]
impl PyVocab {
    #[new]
    fn new() -> Self {
        Self(Vocab::synthetic())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        Ok(self.0.encode(text).map_err(invalid)?.into_iter().map(|t| t.0).collect())
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        let ids: Vec<_> = ids.into_iter().map(covlm::grammar::TokenId).collect();
        self.0.decode(&ids)
    }

    /// Parses a communicative sequence such as
    /// `"<obj> the red circle </obj> <visual> <box> [roi:0]"` and checks it
    /// against the grammar. Returns the canonical text.
    fn validate(&self, text: &str) -> PyResult<String> {
        let seq = CommSequence::parse(text, &self.0).map_err(invalid)?;
        validate(&seq).map_err(invalid)?;
        Ok(seq.to_text(&self.0))
    }
}

/// A generated scene: entities, relation facts and a caption.
#[pyclass(name = "Scene", frozen)]
struct PyScene(SyntheticScene);

#[pymethods]
impl PyScene {
    /// Random scene from `seed` over every tuple.
    #[staticmethod]
    fn generate(seed: u64) -> Self {
        Self(random_scene(seed, Split::Any))
    }

    #[getter]
    fn caption(&self) -> &str {
        &self.0.caption
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    /// Entities as `(phrase, BBox)` pairs.
    fn entities(&self) -> Vec<(String, PyBBox)> {
        self.0.entities.iter().map(|e| (e.kind.phrase(), PyBBox(e.bbox))).collect()
    }

    /// Rendered image as binary PPM bytes.
    fn render_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.render().to_ppm())
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0)
    }
}

fn image_of(image: &Bound<'_, PyAny>) -> PyResult<Image> {
    if let Ok(scene) = image.cast::<PyScene>() {
        return Ok(scene.get().0.render());
    }
    if let Ok(bytes) = image.extract::<&[u8]>() {
        return Image::from_ppm(bytes).map_err(invalid);
    }
    let path: PathBuf = image.extract()?;
    Image::load_ppm(&path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Image-conditioned language model with a detection head.
#[pyclass(name = "Model")]
struct PyModel(Covlm);

#[pymethods]
impl PyModel {
    /// Freshly initialized model. `config` is a JSON model config; missing
    /// fields take their defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config)?;
        Ok(Self(Covlm::new(cfg, Vocab::synthetic(), seed).map_err(invalid)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Covlm::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?))
    }

    fn num_params(&self) -> usize {
        self.0.params.iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Continues `prompt` on `image` (a Scene, PPM bytes or a PPM path).
    /// Returns the decoded text, the sequence with slot markers, detections
    /// and per-token NLL as a dict.
    #[pyo3(signature = (image, prompt="", max_tokens=32, communicate=true, config=None))]
    fn decode(
        &self,
        py: Python<'_>,
        image: &Bound<'_, PyAny>,
        prompt: &str,
        max_tokens: usize,
        communicate: bool,
        config: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let img = image_of(image)?;
        let mut cfg: DecodeConfig = from_json(config)?;
        cfg.max_tokens = max_tokens;
        cfg.communicate = communicate;
        let prompt = CommSequence::parse(prompt, self.0.vocab()).map_err(invalid)?;
        let result = py.detach(|| communicative_decode(&self.0, &img, &prompt, &cfg)).map_err(invalid)?;
        to_py(py, &result)
    }

    /// Perplexity of a relation caption on `image`, scored with detector
    /// feedback at every entity when `communicate` is set.
    #[pyo3(signature = (image, caption, communicate=true))]
    fn perplexity(&self, py: Python<'_>, image: &Bound<'_, PyAny>, caption: &str, communicate: bool) -> PyResult<f64> {
        let img = image_of(image)?;
        let seq = caption_sequence(self.0.vocab(), caption, communicate).map_err(invalid)?;
        let cfg = DecodeConfig { communicate, ..DecodeConfig::default() };
        py.detach(|| perplexity(&self.0, &img, &seq, &cfg)).map_err(invalid)
    }

    /// Runs one zero-shot task (`aro`, `cola`, `hoi`, `refexp` or `vqa`) on
    /// `n` random scenes. Returns `(metrics, per-item records)`.
    #[pyo3(signature = (task, n=50, seed=0, communicate=true))]
    fn evaluate(&self, py: Python<'_>, task: &str, n: usize, seed: u64, communicate: bool) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
        let scenes: Vec<SyntheticScene> = (0..n as u64).map(|i| random_scene(seed.wrapping_mul(1_000_003).wrapping_add(i), Split::Any)).collect();
        let cfg = EvalConfig { decode: DecodeConfig { communicate, ..DecodeConfig::default() }, seed, ..EvalConfig::default() };
        let model = &self.0;
        let report = py
            .detach(|| match task {
                "aro" => eval::eval_aro(model, &eval::aro_items(&scenes), &cfg),
                "cola" => eval::eval_cola(model, &eval::cola_pairs(&scenes), &cfg),
                "hoi" => eval::eval_hoi(model, &eval::hoi_items(&scenes), None, &cfg),
                "refexp" => eval::eval_refexp(model, &eval::refexp_items(&scenes, seed), &cfg),
                "vqa" => eval::eval_vqa(model, &eval::vqa_items(&scenes, seed), &cfg),
                other => Err(covlm::model::ModelError::Invalid(format!("unknown task {other:?}"))),
            })
            .map_err(invalid)?;
        Ok((to_py(py, &report.metrics)?, to_py(py, &report.items)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        covlm::numerics::save_checkpoint(&self.0.params, self.0.meta(), &path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Trains on a freshly generated synthetic corpus.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    trainer: Trainer,
    items: Vec<covlm::trainer::TrainItem>,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON training config; the corpus holds `n_scenes`
    /// scenes generated from the config's seed.
    #[new]
    #[pyo3(signature = (n_scenes, config=None))]
    fn new(n_scenes: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg: TrainConfig = from_json(config)?;
        let vocab = Vocab::synthetic();
        let (_, examples, _) = synthetic_corpus(n_scenes, cfg.seed, Split::Any, &PipelineConfig::default(), &vocab);
        let items = train_items(&examples, cfg.no_comm);
        let trainer = Trainer::new(cfg, vocab).map_err(invalid)?;
        Ok(Self { trainer, items })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.trainer.step()
    }

    /// Runs `n` optimizer steps and returns their log records.
    fn train(&mut self, py: Python<'_>, n: u64) -> PyResult<Py<PyAny>> {
        let (trainer, items) = (&mut self.trainer, &self.items);
        let logs = py
            .detach(|| (0..n).map(|_| trainer.train_step(items)).collect::<Result<Vec<_>, _>>())
            .map_err(invalid)?;
        to_py(py, &logs)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Copy of the current model.
    fn model(&self) -> PyModel {
        PyModel(self.trainer.model.clone())
    }
}

#[pymodule]
fn covlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    Ok(())
}
