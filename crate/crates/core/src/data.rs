//! Samples, geometric augmentation and training-batch preparation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{masks_to_guidance, FeatureBundle, FeatureProvider, MaskGuidance};
use crate::error::cfg_err;
use crate::granularity::{AnnotationSet, LabelLadder};
use crate::math;
use crate::{Grid, Image, Map, Result};

/// One image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub annotations: AnnotationSet,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, annotations: AnnotationSet) -> Result<Self> {
        if image.size() != annotations.size() {
            return Err(crate::error::dim_err!(
                "image is {:?} but annotations are {:?}",
                image.size(),
                annotations.size()
            ));
        }
        Ok(Self { id: id.into(), image, annotations })
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.size()
    }
}

/// Random augmentation options. The default applies nothing.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AugmentConfig {
    /// Flip horizontally with probability ½.
    pub hflip: bool,
    /// Flip vertically with probability ½.
    pub vflip: bool,
    /// Rotate by a uniformly chosen multiple of 90°.
    pub rot90: bool,
    /// Rescale factors to choose from uniformly.
    pub scales: Vec<f64>,
    /// Random crop `(height, width)` taken after the other transforms.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: false, vflip: false, rot90: false, scales: alloc::vec![1.0], crop: None }
    }
}

impl AugmentConfig {
    /// Flips, right-angle rotations and three scales.
    pub fn standard() -> Self {
        Self { hflip: true, vflip: false, rot90: true, scales: alloc::vec![0.75, 1.0, 1.25], crop: None }
    }
}

/// A concrete geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    /// Clockwise quarter turns.
    pub quarter_turns: u8,
    pub scale: f64,
    /// `(top, left, height, width)`.
    pub crop: Option<(usize, usize, usize, usize)>,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { hflip: false, vflip: false, quarter_turns: 0, scale: 1.0, crop: None };
}

pub fn hflip<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let w = g.width();
    Grid::from_fn(g.height(), w, |y, x| g.at(y, w - 1 - x))
}

pub fn vflip<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let h = g.height();
    Grid::from_fn(h, g.width(), |y, x| g.at(h - 1 - y, x))
}

/// One clockwise quarter turn.
pub fn rotate90<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let h = g.height();
    Grid::from_fn(g.width(), h, |y, x| g.at(h - 1 - x, y))
}

pub fn crop<T: Copy>(g: &Grid<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Grid<T>> {
    if top + h > g.height() || left + w > g.width() {
        return Err(cfg_err!("crop {h}x{w} at ({top}, {left}) exceeds {}x{}", g.height(), g.width()));
    }
    Ok(Grid::from_fn(h, w, |y, x| g.at(top + y, left + x)))
}

pub fn resize_nearest<T: Copy>(g: &Grid<T>, h: usize, w: usize) -> Grid<T> {
    let sy = g.height() as f64 / h as f64;
    let sx = g.width() as f64 / w as f64;
    Grid::from_fn(h, w, |y, x| {
        let yy = (math::floor((y as f64 + 0.5) * sy) as usize).min(g.height() - 1);
        let xx = (math::floor((x as f64 + 0.5) * sx) as usize).min(g.width() - 1);
        g.at(yy, xx)
    })
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(m: &Map, h: usize, w: usize) -> Map {
    let sy = m.height() as f64 / h as f64;
    let sx = m.width() as f64 / w as f64;
    Map::from_fn(h, w, |y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
        let (y0, x0) = ((math::floor(fy) as usize).min(m.height() - 1), (math::floor(fx) as usize).min(m.width() - 1));
        let (y1, x1) = ((y0 + 1).min(m.height() - 1), (x0 + 1).min(m.width() - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = m.at(y0, x0) * (1.0 - tx) + m.at(y0, x1) * tx;
        let bot = m.at(y1, x0) * (1.0 - tx) + m.at(y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn scaled_size(h: usize, w: usize, s: f64) -> (usize, usize) {
    ((math::round(h as f64 * s) as usize).max(1), (math::round(w as f64 * s) as usize).max(1))
}

/// Apply `t` to a grid; `interp` resizes it.
fn apply_grid<T: Copy>(g: &Grid<T>, t: &Transform, interp: impl Fn(&Grid<T>, usize, usize) -> Grid<T>) -> Result<Grid<T>> {
    let mut g = g.clone();
    if t.hflip {
        g = hflip(&g);
    }
    if t.vflip {
        g = vflip(&g);
    }
    for _ in 0..t.quarter_turns % 4 {
        g = rotate90(&g);
    }
    if t.scale != 1.0 {
        let (h, w) = scaled_size(g.height(), g.width(), t.scale);
        g = interp(&g, h, w);
    }
    if let Some((top, left, h, w)) = t.crop {
        g = crop(&g, top, left, h, w)?;
    }
    Ok(g)
}

pub fn apply_to_map(m: &Map, t: &Transform) -> Result<Map> {
    apply_grid(m, t, resize_bilinear)
}

pub fn apply_to_mask(m: &crate::Mask, t: &Transform) -> Result<crate::Mask> {
    apply_grid(m, t, resize_nearest)
}

pub fn apply_to_image(img: &Image, t: &Transform) -> Result<Image> {
    let ch = [apply_to_map(&img.channel(0), t)?, apply_to_map(&img.channel(1), t)?, apply_to_map(&img.channel(2), t)?];
    Image::from_channels([&ch[0], &ch[1], &ch[2]])
}

/// Apply one transform to the image and every annotation.
pub fn apply_transform(s: &Sample, t: &Transform) -> Result<Sample> {
    let image = apply_to_image(&s.image, t)?;
    let labels = s.annotations.labels().iter().map(|m| apply_to_mask(m, t)).collect::<Result<Vec<_>>>()?;
    Sample::new(s.id.clone(), image, AnnotationSet::new(labels)?)
}

/// Draw a transform for an `h × w` sample.
pub fn draw_transform<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Result<Transform> {
    let mut t = Transform::IDENTITY;
    if cfg.hflip {
        t.hflip = rng.random_bool(0.5);
    }
    if cfg.vflip {
        t.vflip = rng.random_bool(0.5);
    }
    if cfg.rot90 {
        t.quarter_turns = rng.random_range(0..4u8);
    }
    if cfg.scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(cfg_err!("scales must be positive"));
    }
    if cfg.scales.len() > 1 {
        t.scale = cfg.scales[rng.random_range(0..cfg.scales.len())];
    } else if let Some(&s) = cfg.scales.first() {
        t.scale = s;
    }
    let (mut ch, mut cw) = if t.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    if t.scale != 1.0 {
        (ch, cw) = scaled_size(ch, cw, t.scale);
    }
    if let Some((h, w)) = cfg.crop {
        if h > ch || w > cw {
            return Err(cfg_err!("crop {h}x{w} is larger than the {ch}x{cw} image"));
        }
        let top = rng.random_range(0..=ch - h);
        let left = rng.random_range(0..=cw - w);
        t.crop = Some((top, left, h, w));
    }
    Ok(t)
}

/// Randomly transform a sample.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let (h, w) = s.size();
    let t = draw_transform(cfg, h, w, rng)?;
    apply_transform(s, &t)
}

/// Seed of the random stream for `(seed, epoch, index)`.
pub fn stream_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    // SplitMix64 finaliser over a simple combination.
    let mut z = seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample visiting order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, u64::MAX));
    order.shuffle(&mut rng);
    order
}

/// Everything one training step needs for one image.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub id: String,
    pub bundle: FeatureBundle,
    pub ladder: LabelLadder,
    pub guidance: MaskGuidance,
}

/// Extract features, build labels and guidance, and group the records by
/// image size (groups in order of first appearance).
pub fn prepare_batch<R: Rng + ?Sized>(
    samples: &[Sample],
    provider: &dyn FeatureProvider,
    zeta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<TrainRecord>>> {
    let mut groups: Vec<((usize, usize), Vec<TrainRecord>)> = Vec::new();
    for s in samples {
        let r = prepare_record(s, provider, zeta, rng).map_err(|e| e.context(&s.id))?;
        match groups.iter_mut().find(|(size, _)| *size == s.size()) {
            Some((_, g)) => g.push(r),
            None => groups.push((s.size(), alloc::vec![r])),
        }
    }
    Ok(groups.into_iter().map(|(_, g)| g).collect())
}

pub fn prepare_record<R: Rng + ?Sized>(
    s: &Sample,
    provider: &dyn FeatureProvider,
    zeta: f64,
    rng: &mut R,
) -> Result<TrainRecord> {
    let bundle = provider.extract(&s.image)?;
    let ladder = LabelLadder::build(&s.annotations, zeta, rng)?;
    let guidance = masks_to_guidance(&bundle.object_masks, s.size())?;
    Ok(TrainRecord { id: s.id.clone(), bundle, ladder, guidance })
}
