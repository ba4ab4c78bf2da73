//! Deterministic filter-bank provider.
//!
//! Shallow features are full-resolution gradient responses folded into the
//! feature grid by space-to-depth, so they keep sub-cell detail. The image
//! embedding is a two-level Gaussian pyramid (intensity and gradients) at
//! grid resolution, so it only carries low frequencies. Both are mixed by
//! fixed seeded random matrices and get sinusoidal position channels, the
//! way an encoder with absolute position embeddings would. Masks come from
//! intensity flood fills seeded at the prompt points.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_image, sobel_edges, FeatureBundle, FeatureProvider, ProviderConfig, ProviderKind};
use crate::error::cfg_err;
use crate::math;
use crate::{Image, Map, Mask, Result, Tensor};

/// Gradient filters applied at full resolution: x, y, Laplacian.
const GRADIENT_FILTERS: usize = 3;
const PYRAMID_CHANNELS: usize = 8;
const POSITION_FREQUENCIES: usize = 4;
/// sin/cos × (x, y) × frequencies.
pub const POSITION_CHANNELS: usize = 4 * POSITION_FREQUENCIES;
const FLOOD_TOLERANCE: f64 = 0.08;

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    seed: u64,
    grid_side: usize,
    stride: usize,
    shallow_mix: Vec<f64>,
    image_mix: Vec<f64>,
    mask_mix: Vec<f64>,
}

fn random_mix(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let scale = 1.0 / math::sqrt(n as f64);
    (0..n * n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>()
}

/// `out[o] = Σ_i mix[o][i] · planes[i]` over `n` planes of `hw` values.
fn mix_planes(mix: &[f64], planes: &[f64], n: usize, hw: usize, out: &mut Vec<f64>) {
    for o in 0..n {
        let start = out.len();
        out.resize(start + hw, 0.0);
        let dst = &mut out[start..];
        for i in 0..n {
            let m = mix[o * n + i];
            for (d, s) in dst.iter_mut().zip(&planes[i * hw..(i + 1) * hw]) {
                *d += m * s;
            }
        }
    }
}

/// Separable 5-tap binomial blur with replicated borders.
fn blur(m: &Map) -> Map {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let tmp = Map::from_fn(m.height(), m.width(), |y, x| {
        K.iter().enumerate().map(|(i, k)| k * m.clamped(y as isize, x as isize + i as isize - 2)).sum()
    });
    Map::from_fn(m.height(), m.width(), |y, x| {
        K.iter().enumerate().map(|(i, k)| k * tmp.clamped(y as isize + i as isize - 2, x as isize)).sum()
    })
}

fn downsample2(m: &Map) -> Map {
    let b = blur(m);
    Map::from_fn(m.height() / 2, m.width() / 2, |y, x| b.at(2 * y, 2 * x))
}

fn central_gradients(m: &Map) -> (Map, Map) {
    let gx = Map::from_fn(m.height(), m.width(), |y, x| {
        0.5 * (m.clamped(y as isize, x as isize + 1) - m.clamped(y as isize, x as isize - 1))
    });
    let gy = Map::from_fn(m.height(), m.width(), |y, x| {
        0.5 * (m.clamped(y as isize + 1, x as isize) - m.clamped(y as isize - 1, x as isize))
    });
    (gx, gy)
}

/// Pad to `side × side` by replicating the last row and column.
fn pad_replicate<T: Copy>(g: &crate::Grid<T>, side: usize) -> crate::Grid<T> {
    crate::Grid::from_fn(side, side, |y, x| g.clamped(y as isize, x as isize))
}

/// Space-to-depth: `side × side` map into `stride²` planes of `D × D`.
fn unshuffle(m: &Map, stride: usize, out: &mut Vec<f64>) {
    let d = m.height() / stride;
    for sy in 0..stride {
        for sx in 0..stride {
            for y in 0..d {
                for x in 0..d {
                    out.push(m.at(y * stride + sy, x * stride + sx));
                }
            }
        }
    }
}

fn position_planes(d: usize, out: &mut Vec<f64>) {
    for f in 0..POSITION_FREQUENCIES {
        let omega = core::f64::consts::PI * (1u32 << f) as f64 / d as f64;
        for axis in 0..2 {
            for trig in 0..2 {
                for y in 0..d {
                    for x in 0..d {
                        let t = omega * ((if axis == 0 { x } else { y }) as f64 + 0.5);
                        out.push(if trig == 0 { math::sin(t) } else { math::cos(t) });
                    }
                }
            }
        }
    }
}

/// 4-connected region around `seed` whose intensity stays within tolerance.
fn flood_fill(luma: &Map, seed: (usize, usize)) -> Mask {
    let (h, w) = luma.size();
    let reference = luma.at(seed.0, seed.1);
    let mut mask = Mask::new(h, w);
    let mut queue = VecDeque::new();
    mask.set(seed.0, seed.1, true);
    queue.push_back(seed);
    while let Some((y, x)) = queue.pop_front() {
        let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && !mask.at(ny, nx) && (luma.at(ny, nx) - reference).abs() <= FLOOD_TOLERANCE {
                mask.set(ny, nx, true);
                queue.push_back((ny, nx));
            }
        }
    }
    mask
}

impl ToyBackbone {
    pub fn new(seed: u64, grid_side: usize, stride: usize) -> Result<Self> {
        if grid_side == 0 {
            return Err(cfg_err!("grid_side must be at least 1"));
        }
        if !stride.is_power_of_two() {
            return Err(cfg_err!("toy stride {stride} is not a power of two"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s2 = stride * stride;
        let shallow_mix = random_mix(&mut rng, GRADIENT_FILTERS * s2);
        let image_mix = random_mix(&mut rng, PYRAMID_CHANNELS);
        let mask_mix = random_mix(&mut rng, s2 + 1);
        Ok(Self { seed, grid_side, stride, shallow_mix, image_mix, mask_mix })
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind != ProviderKind::Toy {
            return Err(cfg_err!("not a toy provider config"));
        }
        Self::new(cfg.seed.unwrap_or_default(), cfg.grid_side, cfg.toy_stride)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Gradient channels at the front of the shallow features.
    pub fn gradient_channels(&self) -> usize {
        GRADIENT_FILTERS * self.stride * self.stride
    }

    pub fn shallow_channels(&self) -> usize {
        self.gradient_channels() + POSITION_CHANNELS
    }

    pub fn image_channels(&self) -> usize {
        PYRAMID_CHANNELS + POSITION_CHANNELS
    }

    pub fn mask_channels(&self) -> usize {
        self.stride * self.stride + 1
    }

    /// Side of the padded square frame for an `h × w` image.
    pub fn frame_side(&self, h: usize, w: usize) -> usize {
        h.max(w).div_ceil(self.stride) * self.stride
    }

    fn shallow(&self, gray: &Map, d: usize) -> Result<Tensor> {
        let s = self.stride;
        let (gx, gy) = central_gradients(gray);
        let lap = Map::from_fn(gray.height(), gray.width(), |y, x| {
            let (y, x) = (y as isize, x as isize);
            gray.clamped(y - 1, x) + gray.clamped(y + 1, x) + gray.clamped(y, x - 1) + gray.clamped(y, x + 1)
                - 4.0 * gray.clamped(y, x)
        });
        let n = self.gradient_channels();
        let mut raw = Vec::with_capacity(n * d * d);
        for m in [&gx, &gy, &lap] {
            unshuffle(m, s, &mut raw);
        }
        let mut out = Vec::with_capacity(self.shallow_channels() * d * d);
        mix_planes(&self.shallow_mix, &raw, n, d * d, &mut out);
        position_planes(d, &mut out);
        Tensor::from_vec(&[self.shallow_channels(), d, d], out)
    }

    fn embedding(&self, gray: &Map, d: usize) -> Result<Tensor> {
        let mut level = gray.clone();
        while level.height() > d {
            level = downsample2(&level);
        }
        let coarse = blur(&blur(&level));
        let mut raw = Vec::with_capacity(PYRAMID_CHANNELS * d * d);
        for m in [&level, &coarse] {
            let (gx, gy) = central_gradients(m);
            let mag = gx.zip_map(&gy, |a, b| math::sqrt(a * a + b * b))?;
            for plane in [m, &gx, &gy, &mag] {
                raw.extend_from_slice(plane.data());
            }
        }
        let mut out = Vec::with_capacity(self.image_channels() * d * d);
        mix_planes(&self.image_mix, &raw, PYRAMID_CHANNELS, d * d, &mut out);
        position_planes(d, &mut out);
        Tensor::from_vec(&[self.image_channels(), d, d], out)
    }

    fn prompt_points(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let g = self.grid_side;
        let mut pts = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let y = ((i as f64 + 0.5) * h as f64 / g as f64) as usize;
                let x = ((j as f64 + 0.5) * w as f64 / g as f64) as usize;
                pts.push((y.min(h - 1), x.min(w - 1)));
            }
        }
        pts
    }
}

impl FeatureProvider for ToyBackbone {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Toy
    }

    fn grid_side(&self) -> usize {
        self.grid_side
    }

    fn extract(&self, image: &Image) -> Result<FeatureBundle> {
        check_image(image)?;
        let (h, w) = image.size();
        let side = self.frame_side(h, w);
        let d = side / self.stride;
        let luma = image.luma();
        let gray = pad_replicate(&luma, side);
        let shallow_features = self.shallow(&gray, d)?;
        let image_embedding = self.embedding(&gray, d)?;

        let masks: Vec<Mask> = self.prompt_points(h, w).into_iter().map(|p| flood_fill(&luma, p)).collect();
        let cm = self.mask_channels();
        let mut emb = Vec::with_capacity(masks.len() * cm * d * d);
        let mut raw = Vec::with_capacity(cm * d * d);
        for m in &masks {
            raw.clear();
            let padded = pad_replicate(m, side);
            unshuffle(&sobel_edges(&padded).to_map(), self.stride, &mut raw);
            let area = padded.to_map();
            let norm = 1.0 / (self.stride * self.stride) as f64;
            let mut pooled = vec![0.0; d * d];
            for y in 0..side {
                for x in 0..side {
                    pooled[(y / self.stride) * d + x / self.stride] += area.at(y, x) * norm;
                }
            }
            raw.extend_from_slice(&pooled);
            mix_planes(&self.mask_mix, &raw, cm, d * d, &mut emb);
        }
        let mask_embeddings = Tensor::from_vec(&[masks.len(), cm, d, d], emb)?;

        let bundle = FeatureBundle {
            shallow_features,
            image_embedding,
            mask_embeddings,
            object_masks: masks,
            source_size: (h, w),
            frame_side: side,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn frozen_parameter_count(&self) -> usize {
        self.shallow_mix.len() + self.image_mix.len() + self.mask_mix.len()
    }

    fn state_digest(&self) -> u64 {
        // FNV-1a over the mixing matrices' bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&self.seed.to_le_bytes());
        eat(&(self.grid_side as u64).to_le_bytes());
        eat(&(self.stride as u64).to_le_bytes());
        for v in self.shallow_mix.iter().chain(&self.image_mix).chain(&self.mask_mix) {
            eat(&v.to_bits().to_le_bytes());
        }
        h
    }
}
