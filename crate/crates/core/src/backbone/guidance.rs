use crate::error::dim_err;
use crate::{Map, Mask, Result};

/// Edges of the provider's object masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGuidance {
    /// Union of the per-mask Sobel edges.
    pub edges: Mask,
    /// Fraction of masks whose Sobel edge contains each pixel.
    pub frequency: Map,
}

impl MaskGuidance {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { edges: Mask::new(height, width), frequency: Map::new(height, width) }
    }

    pub fn size(&self) -> (usize, usize) {
        self.edges.size()
    }
}

/// Pixels where the Sobel response of a binary mask is nonzero.
/// Borders are replicated, so the image frame itself is never an edge.
pub fn sobel_edges(mask: &Mask) -> Mask {
    let v = |y: isize, x: isize| mask.clamped(y, x) as i32;
    Mask::from_fn(mask.height(), mask.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = v(y - 1, x + 1) + 2 * v(y, x + 1) + v(y + 1, x + 1) - v(y - 1, x - 1) - 2 * v(y, x - 1) - v(y + 1, x - 1);
        let gy = v(y + 1, x - 1) + 2 * v(y + 1, x) + v(y + 1, x + 1) - v(y - 1, x - 1) - 2 * v(y - 1, x) - v(y - 1, x + 1);
        gx != 0 || gy != 0
    })
}

/// Build the edge map and edge-frequency map of a set of object masks.
///
/// `size` is the expected `(H, W)`; an empty list gives all-zero guidance.
pub fn masks_to_guidance(masks: &[Mask], size: (usize, usize)) -> Result<MaskGuidance> {
    let (h, w) = size;
    let mut counts = alloc::vec![0u32; h * w];
    for (i, m) in masks.iter().enumerate() {
        if m.size() != size {
            return Err(dim_err!("mask {i} is {}x{}, expected {h}x{w}", m.height(), m.width()));
        }
        for (c, &e) in counts.iter_mut().zip(sobel_edges(m).data()) {
            *c += e as u32;
        }
    }
    if masks.is_empty() {
        return Ok(MaskGuidance::empty(h, w));
    }
    let n = masks.len() as f64;
    let edges = Mask::from_vec(h, w, counts.iter().map(|&c| c > 0).collect())?;
    let frequency = Map::from_vec(h, w, counts.iter().map(|&c| c as f64 / n).collect())?;
    Ok(MaskGuidance { edges, frequency })
}
