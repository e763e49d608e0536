use rand::Rng;

use super::{PatchGrid, VisionConfig, VisionError};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::raster::Image;

/// Init scale of the positional embedding.
const POS_STD: f64 = 0.5;

/// Linear patch embedding with a GELU and a learned per-position embedding.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub cfg: VisionConfig,
    w: ParamId,
    b: ParamId,
    pos: ParamId,
}

impl PatchEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: VisionConfig, rng: &mut impl Rng) -> Result<Self, VisionError> {
        cfg.check()?;
        let fan_in = cfg.patch_size() * cfg.patch_size() * 3;
        Ok(Self {
            cfg,
            w: store.normal("encoder.patch.w", vec![fan_in, cfg.dim], (1.0 / fan_in as f64).sqrt(), rng),
            b: store.constant("encoder.patch.b", vec![cfg.dim], 0.0),
            pos: store.normal("encoder.pos", vec![cfg.cells(), cfg.dim], POS_STD, rng),
        })
    }

    /// Flattens the image into one row of centered pixel values per patch.
    pub fn patch_matrix<T: Scalar>(&self, image: &Image) -> Result<Vec<T>, VisionError> {
        let cfg = self.cfg;
        if image.width != cfg.image_size || image.height != cfg.image_size {
            return Err(VisionError::Config(format!(
                "image is {}x{}, model expects {}x{}",
                image.width, image.height, cfg.image_size, cfg.image_size
            )));
        }
        let p = cfg.patch_size();
        let mut out = Vec::with_capacity(cfg.cells() * p * p * 3);
        for gr in 0..cfg.grid {
            for gc in 0..cfg.grid {
                for y in gr * p..(gr + 1) * p {
                    for x in gc * p..(gc + 1) * p {
                        out.extend(image.get(x, y).iter().map(|&v| T::from_f64(v as f64 - 0.5)));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch features without the positional term, `[N^2, D]`.
    pub fn content<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], image: &Image) -> Result<Var, VisionError> {
        let p = self.cfg.patch_size();
        let x = tape.constant(vec![self.cfg.cells(), p * p * 3], self.patch_matrix(image)?)?;
        let h = tape.matmul(x, params[self.w.0])?;
        let h = tape.add_row(h, params[self.b.0])?;
        Ok(tape.gelu(h)?)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], image: &Image) -> Result<Var, VisionError> {
        let h = self.content(tape, params, image)?;
        Ok(tape.add(h, params[self.pos.0])?)
    }

    pub fn encode(&self, store: &ParamStore<f32>, image: &Image) -> Result<PatchGrid, VisionError> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let g = self.forward(&mut tape, &params, image)?;
        Ok(PatchGrid { n: self.cfg.grid, d: self.cfg.dim, features: tape.value(g).to_vec() })
    }
}
