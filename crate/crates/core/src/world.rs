//! Synthetic micro-world: colored shapes with spatial relations, rendered to
//! small RGB images with template captions.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::raster::Image;

pub const IMAGE_SIZE: usize = 64;
pub const MIN_SIDE_PX: usize = 12;
pub const MAX_SIDE_PX: usize = 24;
/// Minimum gap between boxes for the directional relations, in image units.
pub const MIN_GAP: f32 = 0.05;
pub const MAX_PAIR_IOU: f32 = 0.1;
const MAX_RETRIES: usize = 100;
const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.08];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    On,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.15],
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 5] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below, Relation::On];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::On => "on",
        }
    }

    pub fn from_phrase(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.phrase() == s)
    }

    /// Whether `subject` stands in this relation to `object`.
    pub fn holds(self, subject: &BBox, object: &BBox) -> bool {
        match self {
            Relation::LeftOf => subject.x1() + MIN_GAP <= object.x0() + 1e-6,
            Relation::RightOf => Relation::LeftOf.holds(object, subject),
            Relation::Above => subject.y1() + MIN_GAP <= object.y0() + 1e-6,
            Relation::Below => Relation::Above.holds(object, subject),
            Relation::On => {
                let abut = (subject.y1() - object.y0()).abs() <= 1.5 / IMAGE_SIZE as f32;
                let overlap = subject.x1().min(object.x1()) - subject.x0().max(object.x0());
                abut && overlap >= 0.5 * subject.w.min(object.w)
            }
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

/// A color-shape category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Kind {
    pub color: Color,
    pub shape: Shape,
}

impl Kind {
    pub fn all() -> Vec<Kind> {
        Color::ALL.iter().flat_map(|&color| Shape::ALL.iter().map(move |&shape| Kind { color, shape })).collect()
    }

    pub fn phrase(self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: Kind,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFact {
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
}

/// `(subject kind, relation, object kind)`: the unit of compositional holdout.
pub type Tuple = (Kind, Relation, Kind);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationFact>,
    pub caption: String,
}

impl SyntheticScene {
    /// The captioned relation.
    pub fn fact(&self) -> RelationFact {
        self.relations[0]
    }

    pub fn tuple(&self) -> Tuple {
        let f = self.fact();
        (self.entities[f.subject].kind, f.relation, self.entities[f.object].kind)
    }

    pub fn render(&self) -> Image {
        render(&self.entities)
    }

    /// Every relation that geometrically holds between two distinct entities.
    pub fn all_facts(&self) -> Vec<RelationFact> {
        let mut out = Vec::new();
        for (s, es) in self.entities.iter().enumerate() {
            for (o, eo) in self.entities.iter().enumerate() {
                if s == o {
                    continue;
                }
                for r in Relation::ALL {
                    if r.holds(&es.bbox, &eo.bbox) {
                        out.push(RelationFact { subject: s, relation: r, object: o });
                    }
                }
            }
        }
        out
    }

    pub fn find(&self, kind: Kind) -> Option<usize> {
        self.entities.iter().position(|e| e.kind == kind)
    }
}

pub fn caption_for(subject: Kind, relation: Relation, object: Kind) -> String {
    format!("the {} is {} the {}", subject.phrase(), relation.phrase(), object.phrase())
}

pub fn render(entities: &[Entity]) -> Image {
    let n = IMAGE_SIZE;
    let mut img = Image::filled(n, n, BACKGROUND);
    for e in entities {
        let b = e.bbox;
        let to_px = |v: f32| (v * n as f32).round() as isize;
        let (x0, x1, y0, y1) = (to_px(b.x0()), to_px(b.x1()), to_px(b.y0()), to_px(b.y1()));
        let (w, h) = ((x1 - x0) as f32, (y1 - y0) as f32);
        for y in y0.max(0)..y1.min(n as isize) {
            for x in x0.max(0)..x1.min(n as isize) {
                // Pixel center relative to the box, in [0, 1].
                let u = (x - x0) as f32 + 0.5;
                let v = (y - y0) as f32 + 0.5;
                let inside = match e.kind.shape {
                    Shape::Square => true,
                    Shape::Circle => {
                        let (dx, dy) = (u / w - 0.5, v / h - 0.5);
                        dx * dx + dy * dy <= 0.25
                    }
                    Shape::Triangle => (u / w - 0.5).abs() <= 0.5 * v / h,
                };
                if inside {
                    img.set(x as usize, y as usize, e.kind.color.rgb());
                }
            }
        }
    }
    img
}

/// Deterministic set of held-out `(subject, relation, object)` tuples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub tuples: BTreeSet<Tuple>,
}

impl Holdout {
    pub fn none() -> Self {
        Self { tuples: BTreeSet::new() }
    }

    /// Draws `count` distinct tuples from all subject/object pairs of
    /// different kinds under every relation.
    pub fn sample(count: usize, seed: u64) -> Self {
        let kinds = Kind::all();
        let mut all: Vec<Tuple> = Vec::new();
        for &s in &kinds {
            for r in Relation::ALL {
                for &o in &kinds {
                    if s != o {
                        all.push((s, r, o));
                    }
                }
            }
        }
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { tuples: all.into_iter().take(count).collect() }
    }

    pub fn contains(&self, t: &Tuple) -> bool {
        self.tuples.contains(t)
    }
}

/// Which tuples a generated scene may caption.
#[derive(Clone, Copy, Debug)]
pub enum Split<'a> {
    /// Anything outside the holdout.
    Train(&'a Holdout),
    /// Only held-out tuples.
    Test(&'a Holdout),
    Any,
}

fn random_tuple(rng: &mut ChaCha8Rng, split: Split) -> Tuple {
    if let Split::Test(h) = split {
        let v: Vec<&Tuple> = h.tuples.iter().collect();
        return *v[rng.random_range(0..v.len())];
    }
    loop {
        let kinds = Kind::all();
        let s = kinds[rng.random_range(0..kinds.len())];
        let o = kinds[rng.random_range(0..kinds.len())];
        let r = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
        if s == o {
            continue;
        }
        if let Split::Train(h) = split {
            if h.contains(&(s, r, o)) {
                continue;
            }
        }
        return (s, r, o);
    }
}

fn px_box(x0: usize, y0: usize, side: usize) -> BBox {
    let n = IMAGE_SIZE as f32;
    BBox::from_corners(x0 as f32 / n, y0 as f32 / n, (x0 + side) as f32 / n, (y0 + side) as f32 / n)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let side = rng.random_range(MIN_SIDE_PX..=MAX_SIDE_PX);
    px_box(rng.random_range(0..=IMAGE_SIZE - side), rng.random_range(0..=IMAGE_SIZE - side), side)
}

/// Places a subject box relative to `object` so that `relation` holds.
fn place_subject(rng: &mut ChaCha8Rng, relation: Relation, object: &BBox) -> Option<BBox> {
    let n = IMAGE_SIZE;
    let side = rng.random_range(MIN_SIDE_PX..=MAX_SIDE_PX);
    let to_px = |v: f32| (v * n as f32).round() as usize;
    let gap = (MIN_GAP * n as f32).ceil() as usize;
    let any = |rng: &mut ChaCha8Rng| rng.random_range(0..=n - side);
    let (x0, y0) = match relation {
        Relation::LeftOf => {
            let max_x = to_px(object.x0()).checked_sub(gap + side)?;
            (rng.random_range(0..=max_x), any(rng))
        }
        Relation::RightOf => {
            let min_x = to_px(object.x1()) + gap;
            if min_x + side > n {
                return None;
            }
            (rng.random_range(min_x..=n - side), any(rng))
        }
        Relation::Above => {
            let max_y = to_px(object.y0()).checked_sub(gap + side)?;
            (any(rng), rng.random_range(0..=max_y))
        }
        Relation::Below => {
            let min_y = to_px(object.y1()) + gap;
            if min_y + side > n {
                return None;
            }
            (any(rng), rng.random_range(min_y..=n - side))
        }
        Relation::On => {
            let y0 = to_px(object.y0()).checked_sub(side)?;
            let (ox0, ox1) = (to_px(object.x0()), to_px(object.x1()));
            let lo = ox0.saturating_sub(side / 4);
            let hi = (ox1 + side / 4).saturating_sub(side).min(n - side);
            if lo > hi {
                return None;
            }
            (rng.random_range(lo..=hi), y0)
        }
    };
    Some(px_box(x0, y0, side))
}

fn try_place(rng: &mut ChaCha8Rng, n_entities: usize, tuple: Tuple) -> Option<Vec<Entity>> {
    let (sk, rel, ok) = tuple;
    let object = random_box(rng);
    let subject = place_subject(rng, rel, &object)?;
    if !rel.holds(&subject, &object) || subject.iou(&object) > MAX_PAIR_IOU {
        return None;
    }
    let mut entities = vec![Entity { kind: sk, bbox: subject }, Entity { kind: ok, bbox: object }];
    let mut kinds: Vec<Kind> = Kind::all().into_iter().filter(|k| *k != sk && *k != ok).collect();
    kinds.shuffle(rng);
    for &k in kinds.iter().take(n_entities - 2) {
        let b = random_box(rng);
        if entities.iter().any(|e| e.bbox.iou(&b) > MAX_PAIR_IOU) {
            return None;
        }
        // The captioned object must be the only entity in the relation.
        if rel.holds(&subject, &b) {
            return None;
        }
        entities.push(Entity { kind: k, bbox: b });
    }
    Some(entities)
}

/// Scene with `n_entities` (2..=4) whose caption relation is drawn from `split`.
/// Placement is retried up to 100 times per derived seed.
pub fn generate_scene(seed: u64, n_entities: usize, split: Split) -> SyntheticScene {
    assert!((2..=4).contains(&n_entities), "scenes hold 2 to 4 entities");
    let mut attempt_seed = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let tuple = random_tuple(&mut rng, split);
        for _ in 0..MAX_RETRIES {
            if let Some(entities) = try_place(&mut rng, n_entities, tuple) {
                let (s, r, o) = tuple;
                return SyntheticScene {
                    id: format!("scene-{seed}"),
                    seed,
                    caption: caption_for(s, r, o),
                    relations: vec![RelationFact { subject: 0, relation: r, object: 1 }],
                    entities,
                };
            }
        }
        attempt_seed = attempt_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    }
}

/// Scene with a random entity count in 2..=4.
pub fn random_scene(seed: u64, split: Split) -> SyntheticScene {
    let n = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(2..=4);
    generate_scene(seed, n, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(42, 3, Split::Any);
        assert_eq!(a, generate_scene(42, 3, Split::Any));
        assert_eq!(a.render(), generate_scene(42, 3, Split::Any).render());
    }

    #[test]
    fn relations_hold_and_boxes_are_separate() {
        for seed in 0..300 {
            let s = random_scene(seed, Split::Any);
            let f = s.fact();
            let (sb, ob) = (s.entities[f.subject].bbox, s.entities[f.object].bbox);
            assert!(f.relation.holds(&sb, &ob), "seed {seed}");
            for (i, a) in s.entities.iter().enumerate() {
                assert!(a.bbox.is_valid());
                assert!(a.bbox.x0() >= 0.0 && a.bbox.x1() <= 1.0 && a.bbox.y0() >= 0.0 && a.bbox.y1() <= 1.0);
                for b in &s.entities[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= MAX_PAIR_IOU);
                    assert_ne!(a.kind, b.kind);
                }
                if i != f.subject && i != f.object {
                    assert!(!f.relation.holds(&sb, &a.bbox), "distractor satisfies the relation, seed {seed}");
                }
            }
        }
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let h = Holdout::sample(40, 9);
        assert_eq!(h.tuples.len(), 40);
        let train: BTreeSet<Tuple> = (0..2000).map(|s| random_scene(s, Split::Train(&h)).tuple()).collect();
        assert!(train.intersection(&h.tuples).next().is_none());
        for s in 0..50 {
            assert!(h.contains(&random_scene(s, Split::Test(&h)).tuple()));
        }
    }

    #[test]
    fn every_relation_is_generated() {
        let seen: BTreeSet<Relation> = (0..200).map(|s| random_scene(s, Split::Any).fact().relation).collect();
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn render_paints_entity_colors() {
        let s = generate_scene(5, 2, Split::Any);
        let img = s.render();
        let e = s.entities[0];
        let px = img.get((e.bbox.cx * 64.0) as usize, (e.bbox.cy * 64.0) as usize);
        assert_eq!(px, e.kind.color.rgb());
    }
}
