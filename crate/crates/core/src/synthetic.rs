//! Synthetic multi-annotator scenes.
//!
//! Six flat shapes (rectangles or ellipses) sit in a 3 × 2 cell layout on
//! a flat background. Annotator `k` of `n` traces the outlines of the first
//! `ceil(6 (k + 1) / n)` shapes, so the annotations are nested from sparse
//! to dense.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::input_err;
use crate::granularity::AnnotationSet;
use crate::{Image, Map, Mask, Result};

pub const SHAPES: usize = 6;
const CELLS: (usize, usize) = (3, 2);
/// Smallest side that leaves room for a shape in every cell.
pub const MIN_SIDE: usize = 36;

/// Region labels: 0 is background, `1..=6` are shapes.
fn layout(side: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let mut label = vec![0usize; side * side];
    let mut intensity = vec![rng.random_range(0.3..0.5)];
    let (cw, ch) = (side / CELLS.0, side / CELLS.1);
    for k in 0..SHAPES {
        let (y0, x0) = ((k / CELLS.0) * ch, (k % CELLS.0) * cw);
        let h = rng.random_range(ch / 2..ch - 4);
        let w = rng.random_range(cw / 2..cw - 4);
        let oy = y0 + rng.random_range(2..ch - h - 1);
        let ox = x0 + rng.random_range(2..cw - w - 1);
        let ellipse = rng.random_bool(0.5);
        intensity.push(if rng.random_bool(0.5) { rng.random_range(0.7..0.95) } else { rng.random_range(0.0..0.15) });
        let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
        for y in oy..oy + h {
            for x in ox..ox + w {
                let inside = !ellipse || {
                    let dy = (y as f64 - oy as f64 - ry) / ry;
                    let dx = (x as f64 - ox as f64 - rx) / rx;
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    label[y * side + x] = k + 1;
                }
            }
        }
    }
    (label, intensity)
}

/// A `side × side` gray scene with `annotators` nested edge annotations.
pub fn shapes_sample(side: usize, annotators: usize, seed: u64) -> Result<Sample> {
    if side < MIN_SIDE {
        return Err(input_err!("synthetic scenes need side >= {MIN_SIDE}, got {side}"));
    }
    if annotators == 0 || annotators > SHAPES {
        return Err(input_err!("annotator count must be in 1..={SHAPES}, got {annotators}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (label, intensity) = layout(side, &mut rng);
    let gray = Map::from_fn(side, side, |y, x| intensity[label[y * side + x]]);
    let masks: Vec<Mask> = (0..annotators)
        .map(|k| {
            let visible = (SHAPES * (k + 1)).div_ceil(annotators);
            let l = |y: usize, x: usize| {
                let v = label[y * side + x];
                if v <= visible { v } else { 0 }
            };
            Mask::from_fn(side, side, |y, x| {
                (x + 1 < side && l(y, x) != l(y, x + 1)) || (y + 1 < side && l(y, x) != l(y + 1, x))
            })
        })
        .collect();
    Sample::new(format!("shapes{seed}"), Image::from_gray(&gray)?, AnnotationSet::new(masks)?)
}
