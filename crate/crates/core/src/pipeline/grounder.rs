//! Grounder backends and Step-1 box/word pairing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::BBox;
use crate::grammar::{RawToken, Vocab};
use crate::raster::Image;
use crate::world::{Color, Shape, SyntheticScene};

/// One candidate box with a similarity in `[0, 1]` to every caption token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub word_scores: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrounderReport {
    pub candidates: Vec<Candidate>,
}

pub struct GroundingInput<'a> {
    pub image: &'a Image,
    pub caption: &'a str,
    pub tokens: &'a [RawToken],
    /// Ground truth, when the caption comes from a generated scene.
    pub scene: Option<&'a SyntheticScene>,
}

pub trait Grounder {
    fn ground(&self, input: &GroundingInput) -> Result<GrounderReport, PipelineError>;
}

/// Token index pairs `(color, shape)` where a caption mentions `color shape`.
fn mentions(tokens: &[RawToken]) -> Vec<(usize, usize, Color, Shape)> {
    let mut out = Vec::new();
    for i in 0..tokens.len().saturating_sub(1) {
        let c = Color::ALL.into_iter().find(|c| c.word() == tokens[i].text);
        let s = Shape::ALL.into_iter().find(|s| s.word() == tokens[i + 1].text);
        if let (Some(c), Some(s)) = (c, s) {
            out.push((i, i + 1, c, s));
        }
    }
    out
}

/// Reads boxes from scene ground truth with Gaussian coordinate noise.
/// Mention words of an entity score 1; every other pair draws from U(0, 0.2).
#[derive(Clone, Debug)]
pub struct OracleGrounder {
    pub noise: f32,
    pub seed: u64,
}

impl Default for OracleGrounder {
    fn default() -> Self {
        Self { noise: 0.02, seed: 0 }
    }
}

impl Grounder for OracleGrounder {
    fn ground(&self, input: &GroundingInput) -> Result<GrounderReport, PipelineError> {
        let scene = input.scene.ok_or_else(|| PipelineError::Grounding("oracle grounder needs scene ground truth".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let normal = Normal::new(0.0, self.noise as f64).map_err(|e| PipelineError::Grounding(e.to_string()))?;
        let ments = mentions(input.tokens);
        let mut candidates = Vec::new();
        for e in &scene.entities {
            let mut jitter = || normal.sample(&mut rng) as f32;
            let b = e.bbox;
            let noisy = BBox::new(
                (b.cx + jitter()).clamp(0.0, 1.0),
                (b.cy + jitter()).clamp(0.0, 1.0),
                (b.w + jitter()).clamp(0.01, 1.0),
                (b.h + jitter()).clamp(0.01, 1.0),
            );
            let mut scores: Vec<f32> = (0..input.tokens.len()).map(|_| rng.random_range(0.0..0.2)).collect();
            for &(ci, si, c, s) in &ments {
                if c == e.kind.color && s == e.kind.shape {
                    scores[ci] = 1.0;
                    scores[si] = 1.0;
                }
            }
            candidates.push(Candidate { bbox: noisy, word_scores: scores });
        }
        Ok(GrounderReport { candidates })
    }
}

/// Pixel-level grounder: connected components of each palette color, with
/// the shape guessed from how much of its bounding box a component fills.
#[derive(Clone, Debug, Default)]
pub struct BlobGrounder;

impl BlobGrounder {
    pub fn classify_fill(fill: f32) -> Shape {
        // Ideal fills: square 1.0, circle pi/4, triangle 0.5.
        if fill > 0.9 {
            Shape::Square
        } else if fill > 0.64 {
            Shape::Circle
        } else {
            Shape::Triangle
        }
    }

    /// `(color, box, fill ratio)` for every blob of at least 9 pixels.
    pub fn blobs(image: &Image) -> Vec<(Color, BBox, f32)> {
        let (w, h) = (image.width, image.height);
        let mut out = Vec::new();
        for color in Color::ALL {
            let target = color.rgb();
            let close = |x: usize, y: usize| {
                let p = image.get(x, y);
                p.iter().zip(&target).all(|(a, b)| (a - b).abs() < 0.1)
            };
            let mut seen = vec![false; w * h];
            for sy in 0..h {
                for sx in 0..w {
                    if seen[sy * w + sx] || !close(sx, sy) {
                        continue;
                    }
                    let (mut x0, mut y0, mut x1, mut y1, mut count) = (sx, sy, sx, sy, 0usize);
                    let mut stack = vec![(sx, sy)];
                    seen[sy * w + sx] = true;
                    while let Some((x, y)) = stack.pop() {
                        count += 1;
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        let mut visit = |nx: usize, ny: usize| {
                            if !seen[ny * w + nx] && close(nx, ny) {
                                seen[ny * w + nx] = true;
                                stack.push((nx, ny));
                            }
                        };
                        if x > 0 {
                            visit(x - 1, y);
                        }
                        if x + 1 < w {
                            visit(x + 1, y);
                        }
                        if y > 0 {
                            visit(x, y - 1);
                        }
                        if y + 1 < h {
                            visit(x, y + 1);
                        }
                    }
                    if count < 9 {
                        continue;
                    }
                    let (bw, bh) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
                    let b = BBox::from_corners(
                        x0 as f32 / w as f32,
                        y0 as f32 / h as f32,
                        (x1 + 1) as f32 / w as f32,
                        (y1 + 1) as f32 / h as f32,
                    );
                    out.push((color, b, count as f32 / (bw * bh)));
                }
            }
        }
        out
    }
}

impl Grounder for BlobGrounder {
    fn ground(&self, input: &GroundingInput) -> Result<GrounderReport, PipelineError> {
        let ments = mentions(input.tokens);
        let candidates = Self::blobs(input.image)
            .into_iter()
            .map(|(color, bbox, fill)| {
                let shape = Self::classify_fill(fill);
                let mut scores = vec![0.05; input.tokens.len()];
                for &(ci, si, c, s) in &ments {
                    if c == color {
                        scores[ci] = if s == shape { 0.9 } else { 0.3 };
                        scores[si] = if s == shape { 0.9 } else { 0.1 };
                    }
                }
                Candidate { bbox, word_scores: scores }
            })
            .collect();
        Ok(GrounderReport { candidates })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Thresholds {
    /// A box survives when its best word similarity is strictly above this.
    pub box_threshold: f32,
    /// A word links to a box when its similarity is strictly above this.
    pub word_threshold: f32,
    /// Boxes linked to the same word overlapping more than this are suppressed.
    pub nms_iou: f32,
}

impl Default for Step1Thresholds {
    fn default() -> Self {
        Self { box_threshold: 0.35, word_threshold: 0.25, nms_iou: 0.5 }
    }
}

/// A kept box with its linked token indices and best similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub words: Vec<usize>,
    pub sim: f32,
}

/// Step 1: threshold boxes and words, then suppress overlapping boxes linked
/// to the same word (the lower-similarity link is removed). Boxes left with
/// no words are dropped.
pub fn pair_boxes_words(report: &GrounderReport, th: &Step1Thresholds) -> Vec<GroundedBox> {
    let mut kept: Vec<GroundedBox> = report
        .candidates
        .iter()
        .filter_map(|c| {
            let best = c.word_scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if !(best > th.box_threshold) {
                return None;
            }
            let words = (0..c.word_scores.len()).filter(|&i| c.word_scores[i] > th.word_threshold).collect();
            Some(GroundedBox { bbox: c.bbox, words, sim: best })
        })
        .collect();
    let scores: Vec<&Vec<f32>> = report
        .candidates
        .iter()
        .filter(|c| c.word_scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) > th.box_threshold)
        .map(|c| &c.word_scores)
        .collect();
    let n_words = scores.iter().map(|s| s.len()).max().unwrap_or(0);
    for w in 0..n_words {
        let mut linked: Vec<usize> = (0..kept.len()).filter(|&b| kept[b].words.contains(&w)).collect();
        linked.sort_by(|&a, &b| scores[b][w].total_cmp(&scores[a][w]).then(a.cmp(&b)));
        let mut winners: Vec<usize> = Vec::new();
        for b in linked {
            if winners.iter().any(|&k| kept[k].bbox.iou(&kept[b].bbox) > th.nms_iou) {
                kept[b].words.retain(|&x| x != w);
            } else {
                winners.push(b);
            }
        }
    }
    kept.retain(|g| !g.words.is_empty());
    kept
}

/// Convenience for captions: tokens of `caption`.
pub fn caption_tokens(caption: &str) -> Vec<RawToken> {
    Vocab::tokenize(caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{random_scene, Split};

    fn report(cands: Vec<(BBox, Vec<f32>)>) -> GrounderReport {
        GrounderReport { candidates: cands.into_iter().map(|(bbox, word_scores)| Candidate { bbox, word_scores }).collect() }
    }

    #[test]
    fn weak_box_dropped() {
        let r = report(vec![(BBox::new(0.5, 0.5, 0.2, 0.2), vec![0.30, 0.1])]);
        assert!(pair_boxes_words(&r, &Step1Thresholds::default()).is_empty());
    }

    #[test]
    fn word_links_above_threshold() {
        // tokens: red circle square
        let r = report(vec![(BBox::new(0.5, 0.5, 0.2, 0.2), vec![0.4, 0.27, 0.1])]);
        let out = pair_boxes_words(&r, &Step1Thresholds::default());
        assert_eq!(out[0].words, vec![0, 1]);
    }

    #[test]
    fn overlapping_boxes_on_same_word_suppressed() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        let b = BBox::new(0.505, 0.5, 0.2, 0.2);
        assert!(a.iou(&b) > 0.9);
        let r = report(vec![(a, vec![0.6]), (b, vec![0.9])]);
        let out = pair_boxes_words(&r, &Step1Thresholds::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, b);
    }

    #[test]
    fn oracle_grounds_every_mention() {
        for seed in 0..100 {
            let scene = random_scene(seed, Split::Any);
            let image = scene.render();
            let tokens = caption_tokens(&scene.caption);
            let input = GroundingInput { image: &image, caption: &scene.caption, tokens: &tokens, scene: Some(&scene) };
            let out = pair_boxes_words(&OracleGrounder::default().ground(&input).unwrap(), &Step1Thresholds::default());
            assert_eq!(out.len(), 2, "seed {seed}");
        }
    }

    #[test]
    fn blob_grounder_finds_entities() {
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..50 {
            let scene = random_scene(seed, Split::Any);
            let blobs = BlobGrounder::blobs(&scene.render());
            for e in &scene.entities {
                total += 1;
                let found = blobs.iter().any(|(c, b, fill)| {
                    *c == e.kind.color && b.iou(&e.bbox) > 0.5 && BlobGrounder::classify_fill(*fill) == e.kind.shape
                });
                hits += found as usize;
            }
        }
        assert!(hits as f32 / total as f32 > 0.8, "{hits}/{total}");
    }
}
