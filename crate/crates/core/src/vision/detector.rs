use rand::Rng;

use super::{BoxProposal, VisionConfig, VisionError};
use crate::geometry::BBox;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};

const MIN_EXTENT: f32 = 1e-4;

/// Detection head: one 3x3 mixing layer over the grid concatenated with the
/// broadcast hidden state, then a per-cell MLP `2D -> 2D -> 5`.
///
/// Each cell emits `(tx, ty, tw, th, obj)`.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: VisionConfig,
    mix_w: ParamId,
    mix_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Per-image part of the head: the grid's contribution to the mixing layer,
/// computed once and shared by every detector call on that image.
#[derive(Clone, Copy, Debug)]
pub struct DetectionContext {
    image_part: Var,
}

impl Detector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: VisionConfig, rng: &mut impl Rng) -> Result<Self, VisionError> {
        cfg.check()?;
        let d2 = 2 * cfg.dim;
        let mix_in = 9 * d2;
        Ok(Self {
            cfg,
            mix_w: store.normal("detector.mix.w", vec![mix_in, d2], (1.0 / mix_in as f64).sqrt(), rng),
            mix_b: store.constant("detector.mix.b", vec![d2], 0.0),
            fc1_w: store.normal("detector.fc1.w", vec![d2, d2], (1.0 / d2 as f64).sqrt(), rng),
            fc1_b: store.constant("detector.fc1.b", vec![d2], 0.0),
            fc2_w: store.normal("detector.fc2.w", vec![d2, 5], 0.1 * (1.0 / d2 as f64).sqrt(), rng),
            fc2_b: store.constant("detector.fc2.b", vec![5], 0.0),
        })
    }

    /// For each cell, the nine neighbor cells in row-major 3x3 order; `None`
    /// outside the grid (zero padding).
    pub fn neighborhoods(&self) -> Vec<Option<usize>> {
        let n = self.cfg.grid as isize;
        let mut idx = Vec::with_capacity(9 * (n * n) as usize);
        for r in 0..n {
            for c in 0..n {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        let inside = (0..n).contains(&rr) && (0..n).contains(&cc);
                        idx.push(inside.then_some((rr * n + cc) as usize));
                    }
                }
            }
        }
        idx
    }

    fn check_hidden<T: Scalar>(&self, tape: &Tape<T>, hidden: Var) -> Result<(), VisionError> {
        let found = tape.value(hidden).len();
        if found != self.cfg.dim {
            return Err(VisionError::DimMismatch { expected: self.cfg.dim, found });
        }
        Ok(())
    }

    /// Rows of the mixing weight that multiply grid (`hidden_half == false`)
    /// or hidden-state inputs, in neighbor-major order: `[9D, 2D]`.
    fn mix_rows<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], hidden_half: bool) -> Result<Var, VisionError> {
        let d = self.cfg.dim;
        let off = if hidden_half { d } else { 0 };
        let rows = (0..9).flat_map(|k| (0..d).map(move |j| Some(k * 2 * d + off + j))).collect();
        Ok(tape.gather_rows(params[self.mix_w.0], rows)?)
    }

    pub fn context<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], grid: Var) -> Result<DetectionContext, VisionError> {
        let cells = self.cfg.cells();
        let cols = tape.gather_rows(grid, self.neighborhoods())?;
        let cols = tape.reshape(cols, vec![cells, 9 * self.cfg.dim])?;
        let w = self.mix_rows(tape, params, false)?;
        Ok(DetectionContext { image_part: tape.matmul(cols, w)? })
    }

    /// Raw head outputs `[N^2, 5]` for one hidden state `[1, D]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        ctx: DetectionContext,
        hidden: Var,
    ) -> Result<Var, VisionError> {
        self.check_hidden(tape, hidden)?;
        let d = self.cfg.dim;
        let cells = self.cfg.cells();
        // Per-neighbor hidden contribution h . W_k for k in 0..9, as [9, 2D].
        let wh = self.mix_rows(tape, params, true)?;
        let wh = tape.reshape(wh, vec![9, d * 2 * d])?;
        let wh = tape.transpose(wh)?;
        let wh = tape.reshape(wh, vec![d, 2 * d * 9])?;
        let h = tape.reshape(hidden, vec![1, d])?;
        let hk = tape.matmul(h, wh)?;
        let hk = tape.reshape(hk, vec![2 * d, 9])?;
        let hk = tape.transpose(hk)?;
        let mask: Vec<T> = self.neighborhoods().iter().map(|n| if n.is_some() { T::one() } else { T::zero() }).collect();
        let mask = tape.constant(vec![cells, 9], mask)?;
        let hidden_part = tape.matmul(mask, hk)?;
        let mixed = tape.add(ctx.image_part, hidden_part)?;
        self.head(tape, params, mixed)
    }

    /// Reference path: literal concatenation of grid and broadcast hidden
    /// state into `N x N x 2D` before the 3x3 mixing layer.
    pub fn forward_concat<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        grid: Var,
        hidden: Var,
    ) -> Result<Var, VisionError> {
        self.check_hidden(tape, hidden)?;
        let cells = self.cfg.cells();
        let h = tape.reshape(hidden, vec![1, self.cfg.dim])?;
        let hb = tape.gather_rows(h, vec![Some(0); cells])?;
        let joint = tape.concat_cols(&[grid, hb])?;
        let cols = tape.gather_rows(joint, self.neighborhoods())?;
        let cols = tape.reshape(cols, vec![cells, 18 * self.cfg.dim])?;
        let mixed = tape.matmul(cols, params[self.mix_w.0])?;
        self.head(tape, params, mixed)
    }

    fn head<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], mixed: Var) -> Result<Var, VisionError> {
        let x = tape.add_row(mixed, params[self.mix_b.0])?;
        let x = tape.gelu(x)?;
        let x = tape.matmul(x, params[self.fc1_w.0])?;
        let x = tape.add_row(x, params[self.fc1_b.0])?;
        let x = tape.gelu(x)?;
        let x = tape.matmul(x, params[self.fc2_w.0])?;
        Ok(tape.add_row(x, params[self.fc2_b.0])?)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes raw head outputs into all `N^2` proposals, sorted by descending
/// score with ties in cell order.
pub fn proposals_from_raw<T: Scalar>(raw: &[T], grid: usize) -> Vec<BoxProposal> {
    let n = grid as f64;
    let mut out: Vec<BoxProposal> = raw
        .chunks(5)
        .enumerate()
        .map(|(cell, o)| {
            let (row, col) = ((cell / grid) as f64, (cell % grid) as f64);
            let s = |i: usize| sigmoid(o[i].as_f64());
            let bbox = BBox::new(
                ((col + s(0)) / n) as f32,
                ((row + s(1)) / n) as f32,
                (s(2) as f32).clamp(MIN_EXTENT, 1.0),
                (s(3) as f32).clamp(MIN_EXTENT, 1.0),
            );
            BoxProposal { bbox, score: s(4) as f32, cell }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
