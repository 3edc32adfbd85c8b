use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{bilinear_sample, Tensor4};

pub const CROP_PAD: usize = 4;
pub const MAX_ROTATION_DEG: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub rotate: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        Self {
            flip: true,
            crop: true,
            rotate: true,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.crop || self.rotate
    }
}

/// Mirrors one `(c, h, w)` image left to right.
pub fn flip_item(item: &mut [f64], w: usize) {
    for row in item.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Window at `(oy, ox)` of the image zero-padded by `CROP_PAD` on every side.
pub fn crop_item(item: &[f64], c: usize, h: usize, w: usize, oy: usize, ox: usize) -> Vec<f64> {
    let mut out = vec![0.0; item.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy).wrapping_sub(CROP_PAD);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox).wrapping_sub(CROP_PAD);
                if sx < w {
                    out[(ch * h + y) * w + x] = item[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Rotation by `angle` radians about the image centre, bilinear, zero fill.
pub fn rotate_item(item: &[f64], c: usize, h: usize, w: usize, angle: f64) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; item.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            for ch in 0..c {
                out[(ch * h + y) * w + x] =
                    bilinear_sample(&item[ch * h * w..(ch + 1) * h * w], h, w, sy, sx);
            }
        }
    }
    out
}

/// Applies the enabled augmentations independently to each batch item.
pub fn augment(batch: &Tensor4, flags: AugmentFlags, rng: &mut impl Rng) -> Tensor4 {
    if !flags.any() {
        return batch.clone();
    }
    let [n, c, h, w] = batch.dims();
    let mut out = batch.clone();
    for b in 0..n {
        let mut item = out.item(b).to_vec();
        if flags.flip && rng.random_bool(0.5) {
            flip_item(&mut item, w);
        }
        if flags.crop {
            let oy = rng.random_range(0..=2 * CROP_PAD);
            let ox = rng.random_range(0..=2 * CROP_PAD);
            item = crop_item(&item, c, h, w, oy, ox);
        }
        if flags.rotate && h == w {
            let limit = MAX_ROTATION_DEG.to_radians();
            item = rotate_item(&item, c, h, w, rng.random_range(-limit..=limit));
        }
        out.item_mut(b).copy_from_slice(&item);
    }
    out
}
