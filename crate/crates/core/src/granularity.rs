//! Pseudo-label ladders, consensus sampling and granularity blending.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{cfg_err, dim_err, input_err};
use crate::math;
use crate::stn::EdgeMapSet;
use crate::{Map, Mask, Result};

/// Default consensus threshold ζ for BSDS-style data.
pub const DEFAULT_ZETA: f64 = 0.2;
/// ζ for Multicue-style data.
pub const MULTICUE_ZETA: f64 = 0.3;

/// Binary edge annotations of one image, one per annotator.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    labels: Vec<Mask>,
}

impl AnnotationSet {
    pub fn new(labels: Vec<Mask>) -> Result<Self> {
        let Some(first) = labels.first() else {
            return Err(input_err!("an annotation set needs at least one label"));
        };
        for (i, l) in labels.iter().enumerate() {
            if l.size() != first.size() {
                return Err(dim_err!("annotation {i} is {:?}, expected {:?}", l.size(), first.size()));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[Mask] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<Mask> {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.labels[0].size()
    }

    /// Pixel-wise union of all annotators.
    pub fn union(&self) -> Mask {
        let (h, w) = self.size();
        Mask::from_fn(h, w, |y, x| self.labels.iter().any(|l| l.at(y, x)))
    }
}

/// The nested coarse ⊆ medium ⊆ fine labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Ladder {
    pub coarse: Mask,
    pub medium: Mask,
    pub fine: Mask,
}

/// Sort annotations by edge count (stable) and OR-compose the ladder.
pub fn build_ladder(ann: &AnnotationSet) -> Ladder {
    let mut sorted: Vec<&Mask> = ann.labels.iter().collect();
    sorted.sort_by_key(|m| m.count());
    let n = sorted.len();
    let coarse = sorted[0].clone();
    let medium = coarse.or(sorted[n.div_ceil(2) - 1]).expect("equal shapes");
    let fine = medium.or(sorted[n - 1]).expect("equal shapes");
    Ladder { coarse, medium, fine }
}

/// One consensus draw with the statistics it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Consensus {
    /// `Y^u`.
    pub label: Mask,
    /// `Ỹ^u`, the clipped Gaussian sample.
    pub soft: Map,
    pub mean: Map,
    /// Population standard deviation over annotators.
    pub std: Map,
}

/// Per-pixel mean and population standard deviation of the labels.
pub fn label_statistics(ann: &AnnotationSet) -> (Map, Map) {
    let (h, w) = ann.size();
    let n = ann.len() as f64;
    let mean = Map::from_fn(h, w, |y, x| ann.labels.iter().filter(|l| l.at(y, x)).count() as f64 / n);
    // Binary labels: variance = μ(1 − μ).
    let std = mean.map(|&m| math::sqrt((m * (1.0 - m)).max(0.0)));
    (mean, std)
}

pub fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(cfg_err!("consensus threshold ζ = {zeta} must lie in (0, 1)"));
    }
    Ok(())
}

/// Draw `Ỹ^u ~ N(μ, σ)` per pixel, clip to `[0, 1]` and threshold at ζ.
pub fn sample_consensus<R: Rng + ?Sized>(ann: &AnnotationSet, zeta: f64, rng: &mut R) -> Result<Consensus> {
    check_zeta(zeta)?;
    let (mean, std) = label_statistics(ann);
    let soft = mean
        .zip_map(&std, |&m, &s| {
            let z: f64 = StandardNormal.sample(rng);
            (m + s * z).clamp(0.0, 1.0)
        })
        .expect("same size");
    let label = soft.map(|&v| v > zeta);
    Ok(Consensus { label, soft, mean, std })
}

/// All training targets derived from one annotation set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelLadder {
    pub coarse: Mask,
    pub medium: Mask,
    pub fine: Mask,
    pub consensus: Mask,
    pub soft_consensus: Map,
    pub mean: Map,
    pub std: Map,
    pub zeta: f64,
}

impl LabelLadder {
    pub fn build<R: Rng + ?Sized>(ann: &AnnotationSet, zeta: f64, rng: &mut R) -> Result<Self> {
        let Ladder { coarse, medium, fine } = build_ladder(ann);
        let c = sample_consensus(ann, zeta, rng)?;
        Ok(Self { coarse, medium, fine, consensus: c.label, soft_consensus: c.soft, mean: c.mean, std: c.std, zeta })
    }

    pub fn size(&self) -> (usize, usize) {
        self.coarse.size()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(input_err!("granularity α = {alpha} must lie in [0, 1]"));
    }
    Ok(())
}

fn lerp(a: &Map, b: &Map, t: f64) -> Map {
    a.zip_map(b, |&a, &b| {
        let v = t * b + (1.0 - t) * a;
        v.clamp(a.min(b), a.max(b))
    })
    .expect("edge maps share one size")
}

/// Edge map at granularity α: coarse → medium on `[0, ½]`, medium → fine
/// on `(½, 1]`.
pub fn blend(maps: &EdgeMapSet, alpha: f64) -> Result<Map> {
    check_alpha(alpha)?;
    maps.coarse.ensure_same_size(&maps.medium)?;
    maps.coarse.ensure_same_size(&maps.fine)?;
    Ok(if alpha <= 0.5 {
        lerp(&maps.coarse, &maps.medium, alpha / 0.5)
    } else {
        lerp(&maps.medium, &maps.fine, (alpha - 0.5) / 0.5)
    })
}

/// `α_k = k / (M − 1)` for `k = 0..M`.
pub fn candidate_alphas(m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(input_err!("a candidate sweep needs M ≥ 2, got {m}"));
    }
    Ok((0..m).map(|k| k as f64 / (m - 1) as f64).collect())
}

/// Blend at `M` evenly spaced granularities.
pub fn candidate_sweep(maps: &EdgeMapSet, m: usize) -> Result<Vec<Map>> {
    candidate_alphas(m)?.into_iter().map(|a| blend(maps, a)).collect()
}

/// File-name suffix for candidate `k` of a sweep (`a00`, `a01`, …).
pub fn candidate_suffix(k: usize) -> String {
    alloc::format!("a{k:02}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'1')
    }

    #[test]
    fn single_annotator_ladder_is_degenerate() {
        let y = bits(&["0110", "1000"]);
        let l = build_ladder(&AnnotationSet::new(vec![y.clone()]).unwrap());
        assert_eq!((l.coarse.clone(), l.medium.clone()), (y.clone(), y.clone()));
        assert_eq!(l.fine, y);
    }

    #[test]
    fn nested_labels() {
        let a = bits(&["100000", "000000", "000000", "000000", "000000", "000000"]);
        let b = bits(&["110000", "000000", "000000", "000000", "000000", "000000"]);
        let c = bits(&["111000", "100000", "000000", "000000", "000000", "000000"]);
        let d = bits(&["111100", "110000", "100000", "000000", "000000", "000001"]);
        // Given out of order: the ladder sorts by edge count.
        let ann = AnnotationSet::new(vec![c, d.clone(), a.clone(), b.clone()]).unwrap();
        let l = build_ladder(&ann);
        assert_eq!(l.coarse, a);
        assert_eq!(l.medium, b);
        assert_eq!(l.fine, d);
    }

    #[test]
    fn ties_keep_annotator_order() {
        let a = bits(&["10", "00"]);
        let b = bits(&["01", "00"]);
        let l = build_ladder(&AnnotationSet::new(vec![a.clone(), b.clone()]).unwrap());
        assert_eq!(l.coarse, a);
        assert_eq!(l.medium, a);
        assert_eq!(l.fine, a.or(&b).unwrap());
    }

    #[test]
    fn empty_and_mismatched_sets_are_rejected() {
        assert!(matches!(AnnotationSet::new(vec![]), Err(crate::Error::Input(_))));
        let err = AnnotationSet::new(vec![Mask::new(2, 2), Mask::new(2, 3)]);
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn unanimous_pixels_are_certain() {
        let on = bits(&["1100"]);
        let ann = AnnotationSet::new(vec![on.clone(), on.clone(), on.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for zeta in [0.01, 0.5, 0.99] {
            let c = sample_consensus(&ann, zeta, &mut rng).unwrap();
            assert_eq!(c.label, on);
            assert_eq!(c.soft, on.to_map());
            assert!(c.std.data().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn statistics_are_population_moments() {
        let ann = AnnotationSet::new(vec![bits(&["10"]), bits(&["10"]), bits(&["00"]), bits(&["00"])]).unwrap();
        let (m, s) = label_statistics(&ann);
        assert_eq!(m.at(0, 0), 0.5);
        assert_eq!(s.at(0, 0), 0.5);
        assert_eq!((m.at(0, 1), s.at(0, 1)), (0.0, 0.0));
    }

    #[test]
    fn zeta_must_be_inside_the_unit_interval() {
        let ann = AnnotationSet::new(vec![bits(&["1"])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for z in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(sample_consensus(&ann, z, &mut rng), Err(crate::Error::Config(_))));
        }
    }

    fn maps() -> EdgeMapSet {
        let f = |v: [f64; 3]| Map::from_vec(1, 3, v.to_vec()).unwrap();
        EdgeMapSet {
            coarse: f([0.1, 0.5, 0.9]),
            medium: f([0.3, 0.5, 0.2]),
            fine: f([0.7, 0.0, 1.0]),
            fused: f([0.0, 0.0, 0.0]),
        }
    }

    #[test]
    fn blend_endpoints_and_quarter() {
        let m = maps();
        assert_eq!(blend(&m, 0.0).unwrap(), m.coarse);
        assert_eq!(blend(&m, 0.5).unwrap(), m.medium);
        assert_eq!(blend(&m, 1.0).unwrap(), m.fine);
        let q = blend(&m, 0.25).unwrap();
        for i in 0..3 {
            let e = 0.5 * m.coarse.at(0, i) + 0.5 * m.medium.at(0, i);
            assert!((q.at(0, i) - e).abs() < 1e-15);
        }
        assert!(matches!(blend(&m, 1.01), Err(crate::Error::Input(_))));
        assert!(matches!(blend(&m, -1e-9), Err(crate::Error::Input(_))));
    }

    #[test]
    fn sweeps() {
        assert_eq!(candidate_alphas(3).unwrap(), vec![0.0, 0.5, 1.0]);
        let a = candidate_alphas(11).unwrap();
        for (k, v) in a.iter().enumerate() {
            assert!((v - 0.1 * k as f64).abs() < 1e-15);
        }
        let m = maps();
        assert_eq!(candidate_sweep(&m, 2).unwrap(), vec![m.coarse.clone(), m.fine.clone()]);
        assert!(candidate_sweep(&m, 1).is_err());
        assert_eq!(candidate_suffix(10), "a10");
        assert_eq!(candidate_suffix(0), "a00");
    }
}
