//! Training losses with analytic gradients with respect to the predicted
//! probability maps.
//!
//! Every loss returns its value together with `∂L/∂p` for each map it
//! reads, ready to seed [`crate::autograd::Tape::backward`].

use crate::backbone::MaskGuidance;
use crate::error::dim_err;
use crate::granularity::LabelLadder;
use crate::math;
use crate::stn::EdgeMapSet;
use crate::{Map, Mask, Result};

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const EPSILON: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.5;

/// A scalar loss and its gradient with respect to one map.
#[derive(Clone, Debug, PartialEq)]
pub struct Graded {
    pub value: f64,
    pub grad: Map,
}

/// `ξ = |Y₋| / (|Y₋| + |Y₊|)`; 1 when there are no positives.
pub fn balance_weight(target: &Mask) -> f64 {
    let pos = target.count();
    if pos == 0 || target.is_empty() {
        return 1.0;
    }
    (target.len() - pos) as f64 / target.len() as f64
}

/// Per-pixel balanced BCE term and its derivative.
#[inline]
fn bce_term(p: f64, y: bool, xi: f64) -> (f64, f64) {
    let inside = p > EPSILON && p < 1.0 - EPSILON;
    let pc = p.clamp(EPSILON, 1.0 - EPSILON);
    if y {
        (-xi * math::ln(pc), if inside { -xi / pc } else { 0.0 })
    } else {
        (-(1.0 - xi) * math::ln(1.0 - pc), if inside { (1.0 - xi) / (1.0 - pc) } else { 0.0 })
    }
}

fn weighted_bce(pred: &Map, target: &Mask, weights: Option<&Map>) -> Result<Graded> {
    pred.ensure_same_size(target)?;
    if let Some(w) = weights {
        pred.ensure_same_size(w)?;
    }
    let xi = balance_weight(target);
    let mut value = 0.0;
    let mut grad = Map::new(pred.height(), pred.width());
    for (j, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let (l, g) = bce_term(p, y, xi);
        let w = weights.map_or(1.0, |w| w.data()[j]);
        value += w * l;
        grad.data_mut()[j] = w * g;
    }
    Ok(Graded { value, grad })
}

/// Class-balanced binary cross entropy, summed over pixels.
pub fn balanced_bce(pred: &Map, target: &Mask) -> Result<Graded> {
    weighted_bce(pred, target, None)
}

/// Sum of balanced BCE of the three side outputs against their ladder
/// labels. Gradients are for coarse, medium and fine.
pub fn side_loss(maps: &EdgeMapSet, ladder: &LabelLadder) -> Result<(f64, [Map; 3])> {
    let c = balanced_bce(&maps.coarse, &ladder.coarse)?;
    let m = balanced_bce(&maps.medium, &ladder.medium)?;
    let f = balanced_bce(&maps.fine, &ladder.fine)?;
    Ok((c.value + m.value + f.value, [c.grad, m.grad, f.grad]))
}

/// `−Σ_j |a_j − b_j| · (y_a ⊕ y_b)_j` with gradients for `a` and `b`.
pub fn differ_pair(a: &Map, b: &Map, ya: &Mask, yb: &Mask) -> Result<(f64, Map, Map)> {
    a.ensure_same_size(b)?;
    a.ensure_same_size(ya)?;
    a.ensure_same_size(yb)?;
    let (h, w) = a.size();
    let mut ga = Map::new(h, w);
    let mut gb = Map::new(h, w);
    let mut value = 0.0;
    for j in 0..a.len() {
        if ya.data()[j] == yb.data()[j] {
            continue;
        }
        let d = a.data()[j] - b.data()[j];
        value -= d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        ga.data_mut()[j] = -s;
        gb.data_mut()[j] = s;
    }
    Ok((value, ga, gb))
}

/// Diversity loss over the pairs (c, m), (c, f), (m, f).
pub fn differ_loss(maps: &EdgeMapSet, ladder: &LabelLadder) -> Result<(f64, [Map; 3])> {
    let p = [&maps.coarse, &maps.medium, &maps.fine];
    let y = [&ladder.coarse, &ladder.medium, &ladder.fine];
    let (h, w) = maps.coarse.size();
    let mut grads = [Map::new(h, w), Map::new(h, w), Map::new(h, w)];
    let mut total = 0.0;
    for (i, k) in [(0, 1), (0, 2), (1, 2)] {
        let (v, gi, gk) = differ_pair(p[i], p[k], y[i], y[k])?;
        total += v;
        for (g, d) in grads[i].data_mut().iter_mut().zip(gi.data()) {
            *g += d;
        }
        for (g, d) in grads[k].data_mut().iter_mut().zip(gk.data()) {
            *g += d;
        }
    }
    Ok((total, grads))
}

/// Per-pixel weights `exp(ψ + ω)` with
/// `ψ = −Y^mask · (Y^mask ⊕ Y^u) · Ȳ^mask` and `ω = cos(Ỹ^u)`.
pub fn guide_weights(consensus: &Mask, soft: &Map, guidance: &MaskGuidance) -> Result<Map> {
    consensus.ensure_same_size(soft)?;
    if guidance.size() != consensus.size() {
        return Err(dim_err!("guidance is {:?}, labels are {:?}", guidance.size(), consensus.size()));
    }
    Ok(Map::from_fn(soft.height(), soft.width(), |y, x| {
        let ym = guidance.edges.at(y, x);
        let psi = if ym && !consensus.at(y, x) { -guidance.frequency.at(y, x) } else { 0.0 };
        math::exp(psi + math::cos(soft.at(y, x)))
    }))
}

/// Balanced BCE on the final output with per-pixel mask guidance weights.
pub fn guide_loss(pred: &Map, consensus: &Mask, soft: &Map, guidance: &MaskGuidance) -> Result<Graded> {
    let w = guide_weights(consensus, soft, guidance)?;
    weighted_bce(pred, consensus, Some(&w))
}

/// Coefficients of the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, beta: DEFAULT_BETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub side: f64,
    pub differ: f64,
    pub guide: f64,
    pub total: f64,
}

/// `guide + λ·differ + β·side`.
pub fn total_loss(guide: f64, differ: f64, side: f64, w: LossWeights) -> LossBreakdown {
    LossBreakdown { side, differ, guide, total: guide + w.lambda * differ + w.beta * side }
}

/// Which terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ablation {
    /// Train only the final output: no side or diversity loss.
    pub soc_off: bool,
    /// Plain balanced BCE on the final output instead of the guided loss.
    pub guide_off: bool,
    /// λ = 0.
    pub differ_off: bool,
}

/// Full objective for one image: the breakdown and `∂L_total/∂p` for the
/// coarse, medium, fine and final maps.
pub fn objective(
    maps: &EdgeMapSet,
    ladder: &LabelLadder,
    guidance: &MaskGuidance,
    weights: LossWeights,
    ablation: Ablation,
) -> Result<(LossBreakdown, [Map; 4])> {
    let mut w = weights;
    if ablation.differ_off {
        w.lambda = 0.0;
    }
    let guide = if ablation.guide_off {
        balanced_bce(&maps.fused, &ladder.consensus)?
    } else {
        guide_loss(&maps.fused, &ladder.consensus, &ladder.soft_consensus, guidance)?
    };
    let (h, w_) = maps.size();
    let mut grads = [Map::new(h, w_), Map::new(h, w_), Map::new(h, w_), guide.grad];
    if ablation.soc_off {
        return Ok((total_loss(guide.value, 0.0, 0.0, LossWeights { lambda: 0.0, beta: 0.0 }), grads));
    }
    let (side, sg) = side_loss(maps, ladder)?;
    let (differ, dg) = differ_loss(maps, ladder)?;
    for i in 0..3 {
        let out = grads[i].data_mut();
        for ((o, s), d) in out.iter_mut().zip(sg[i].data()).zip(dg[i].data()) {
            *o = w.beta * s + w.lambda * d;
        }
    }
    Ok((total_loss(guide.value, differ, side, w), grads))
}
