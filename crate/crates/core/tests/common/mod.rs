//! Reference implementations used by the integration tests. They are written
//! from the definitions, without calling the code they check.
#![allow(dead_code)]

use covlm::grammar::Vocab;
use covlm::lm::{lm_loss, lm_targets};
use covlm::model::{Architecture, ModelConfig};
use covlm::numerics::{ParamId, ParamStore, Tape, Var};
use covlm::pipeline::{synthetic_corpus, Candidate, GrounderReport, PipelineConfig};
use covlm::vision::{detection_loss, BoxProposal, Detector, PatchGrid, VisionConfig};
use covlm::world::Split;
use covlm::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_H: f64 = 1e-4;

fn corners(b: &BBox) -> [f64; 4] {
    let (cx, cy, w, h) = (b.cx as f64, b.cy as f64, b.w as f64, b.h as f64);
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let inter = overlap(ca, cb);
    let union = (ca[2] - ca[0]) * (ca[3] - ca[1]) + (cb[2] - cb[0]) * (cb[3] - cb[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly take the best remaining candidate and discard everything that
/// overlaps it too much.
pub fn brute_force_nms(props: &[BoxProposal], iou_threshold: f32, floor: f32) -> Vec<BoxProposal> {
    let mut pool: Vec<BoxProposal> = props.iter().copied().filter(|p| p.score >= floor).collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            if a.score > b.score || (a.score == b.score && a.cell < b.cell) {
                best = i;
            }
        }
        let winner = pool.swap_remove(best);
        pool.retain(|p| iou(&p.bbox, &winner.bbox) <= iou_threshold as f64);
        kept.push(winner);
    }
    kept
}

/// Average of the features of every patch whose center the box covers; when
/// it covers none, the patch sharing the largest area with it.
pub fn coverage_pool(grid: &PatchGrid, bbox: &BBox) -> Option<Vec<f64>> {
    let n = grid.n;
    let c = corners(bbox);
    let mut sum = vec![0.0f64; grid.d];
    let mut count = 0usize;
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 + 0.5) / n as f64;
            let y = (row as f64 + 0.5) / n as f64;
            if x >= c[0] && x <= c[2] && y >= c[1] && y <= c[3] {
                for (s, &f) in sum.iter_mut().zip(grid.cell(row * n + col)) {
                    *s += f as f64;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        let mut best: Option<(usize, f64)> = None;
        for row in 0..n {
            for col in 0..n {
                let patch = [col as f64 / n as f64, row as f64 / n as f64, (col + 1) as f64 / n as f64, (row + 1) as f64 / n as f64];
                let a = overlap(c, patch);
                // Areas equal up to rounding count as ties, won by the lower index.
                if a > 0.0 && best.is_none_or(|(_, b)| a > b * (1.0 + 1e-5)) {
                    best = Some((row * n + col, a));
                }
            }
        }
        let (cell, _) = best?;
        return Some(grid.cell(cell).iter().map(|&f| f as f64).collect());
    }
    Some(sum.into_iter().map(|s| s / count as f64).collect())
}

/// `|a - n|` relative to the larger magnitude, with magnitudes below `1e-2`
/// compared on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Largest relative error between backprop and central differences over
/// the chosen `(parameter, element)` coordinates.
pub fn check_coords(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = s.bind(&mut t);
        let l = f(&mut t, &v);
        t.value(l)[0]
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(id, k) in coords {
        let analytic = grads.get(vars[id.0]).map_or(0.0, |g| g[k]);
        let orig = probe.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + FD_H;
        let up = eval(&probe);
        probe.get_mut(id).data_mut()[k] = orig - FD_H;
        let down = eval(&probe);
        probe.get_mut(id).data_mut()[k] = orig;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_H)));
    }
    worst
}

/// `count` random coordinates among parameters whose name passes `keep`.
pub fn sample_coords(store: &ParamStore<f64>, keep: impl Fn(&str) -> bool, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.iter().filter(|(_, name, _)| keep(name)).map(|(id, _, _)| id).collect();
    assert!(!ids.is_empty());
    (0..count)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Every coordinate of the named parameters.
pub fn all_coords(store: &ParamStore<f64>, names: &[&str]) -> Vec<(ParamId, usize)> {
    names
        .iter()
        .flat_map(|n| {
            let id = store.id(n).expect("param");
            (0..store.get(id).numel()).map(move |k| (id, k))
        })
        .collect()
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    BBox::new(
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.02..0.8),
        rng.random_range(0.02..0.8),
    )
}

/// Normal-approximation 95% interval of a binomial proportion `p` over `n` trials.
pub fn binomial_ci(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).unwrap();
    for name in store.names().to_vec() {
        let id = store.id(&name).unwrap();
        for v in store.get_mut(id).data_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// Small image-conditioned language model: 2 layers over a 4x4 patch grid.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { image_size: 64, grid: 4, dim: 8, layers: 2, heads: 2, ffn: 16, max_len: 64 }
}

/// Token loss of a perturbed tiny model on one grounded synthetic example;
/// returns the worst error over `coords_per_case` language-model and encoder
/// coordinates.
pub fn lm_gradcheck_case(seed: u64, coords_per_case: usize) -> f64 {
    let vocab = Vocab::synthetic();
    let (_, examples, _) = synthetic_corpus(1, seed, Split::Any, &PipelineConfig::default(), &vocab);
    let ex = &examples[0];
    let mut store = ParamStore::<f64>::new();
    let arch = Architecture::new(&mut store, tiny_model_config(), vocab, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    jitter(&mut store, 0.2, &mut rng);
    let coords = sample_coords(&store, |n| n.starts_with("lm.") || n.starts_with("encoder."), coords_per_case, &mut rng);
    let targets = lm_targets(arch.n_patches(), &ex.sequence, true);
    check_coords(&store, &coords, |tape, p| {
        let fwd = arch.forward(tape, p, &ex.image, &ex.sequence).unwrap();
        lm_loss(tape, &fwd.out, targets.clone()).unwrap()
    })
}

/// A random linear read-out of the detection head for a random grid and
/// hidden state.
pub fn detector_gradcheck_case(seed: u64, coords_per_case: usize) -> f64 {
    let (grid, dim) = (4, 6);
    let cfg = VisionConfig { image_size: 16, grid, dim };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(&mut store, cfg, &mut rng).unwrap();
    jitter(&mut store, 0.3, &mut rng);
    let features = store.normal("input.grid", vec![grid * grid, dim], 1.0, &mut rng);
    let hidden = store.normal("input.hidden", vec![1, dim], 1.0, &mut rng);
    let weights: Vec<f64> = (0..grid * grid * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coords = sample_coords(&store, |_| true, coords_per_case, &mut rng);
    check_coords(&store, &coords, |tape, p| {
        let ctx = det.context(tape, p, p[features.0]).unwrap();
        let raw = det.forward(tape, p, ctx, p[hidden.0]).unwrap();
        let w = tape.constant(vec![grid * grid, 5], weights.clone()).unwrap();
        let y = tape.mul(raw, w).unwrap();
        tape.sum(y).unwrap()
    })
}

/// Detection loss of random head outputs against one to three random boxes,
/// checked at every output coordinate.
pub fn detection_loss_gradcheck_case(seed: u64) -> f64 {
    let grid = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let raw = store.normal("raw", vec![grid * grid, 5], 1.5, &mut rng);
    let gt: Vec<BBox> = (0..rng.random_range(1..=3)).map(|_| random_box(&mut rng)).collect();
    let coords = all_coords(&store, &["raw"]);
    check_coords(&store, &coords, |tape, p| detection_loss(tape, p[raw.0], &gt, grid).unwrap())
}

/// Grounder output with one box per similarity, each scoring only its own
/// word, plus a word-level probe on a single confident box.
pub fn step1_box_report(sims: &[f32]) -> GrounderReport {
    let n = sims.len();
    GrounderReport {
        candidates: sims
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut word_scores = vec![0.0; n];
                word_scores[i] = s;
                Candidate { bbox: BBox::new(0.1 + 0.8 * i as f32 / n as f32, 0.5, 0.05, 0.05), word_scores }
            })
            .collect(),
    }
}

pub fn step1_word_report(word_sims: &[f32]) -> GrounderReport {
    let mut word_scores = vec![0.9];
    word_scores.extend_from_slice(word_sims);
    GrounderReport { candidates: vec![Candidate { bbox: BBox::new(0.5, 0.5, 0.2, 0.2), word_scores }] }
}
