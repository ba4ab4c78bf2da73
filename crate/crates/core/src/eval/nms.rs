//! Edge thinning along the local edge normal.

use alloc::vec::Vec;

use crate::math;
use crate::Map;

const SIGMA: f64 = 1.0;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = math::round(3.0 * sigma) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with replicated borders.
pub fn smooth(m: &Map, sigma: f64) -> Map {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let tmp = Map::from_fn(m.height(), m.width(), |y, x| {
        k.iter().enumerate().map(|(i, w)| w * m.clamped(y as isize, x as isize + i as isize - r)).sum()
    });
    Map::from_fn(m.height(), m.width(), |y, x| {
        k.iter().enumerate().map(|(i, w)| w * tmp.clamped(y as isize + i as isize - r, x as isize)).sum()
    })
}

/// Bilinear sample with clamped coordinates.
fn sample(m: &Map, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (m.height() - 1) as f64);
    let x = x.clamp(0.0, (m.width() - 1) as f64);
    let (y0, x0) = (math::floor(y) as usize, math::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(m.height() - 1), (x0 + 1).min(m.width() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = m.at(y0, x0) * (1.0 - fx) + m.at(y0, x1) * fx;
    let bottom = m.at(y1, x0) * (1.0 - fx) + m.at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Angle of the edge normal at every pixel: the Hessian eigenvector of the
/// smoothed map with the largest-magnitude eigenvalue.
pub fn normal_angles(prob: &Map) -> Map {
    let s = smooth(prob, SIGMA);
    let v = |y: usize, x: usize, dy: isize, dx: isize| s.clamped(y as isize + dy, x as isize + dx);
    Map::from_fn(prob.height(), prob.width(), |y, x| {
        let c0 = v(y, x, 0, 0);
        let a = v(y, x, 0, 1) - 2.0 * c0 + v(y, x, 0, -1);
        let c = v(y, x, 1, 0) - 2.0 * c0 + v(y, x, -1, 0);
        let b = 0.25 * (v(y, x, 1, 1) - v(y, x, 1, -1) - v(y, x, -1, 1) + v(y, x, -1, -1));
        let theta_max = 0.5 * math::atan2(2.0 * b, a - c);
        let mean = 0.5 * (a + c);
        let rad = math::sqrt(0.25 * (a - c) * (a - c) + b * b);
        let (l_max, l_min) = (mean + rad, mean - rad);
        if l_min.abs() > l_max.abs() {
            theta_max + core::f64::consts::FRAC_PI_2
        } else {
            theta_max
        }
    })
}

/// Zero every pixel that is strictly smaller than one of its two
/// neighbours along the edge normal. Survivors keep their value.
pub fn nms_thin(prob: &Map) -> Map {
    let angles = normal_angles(prob);
    Map::from_fn(prob.height(), prob.width(), |y, x| {
        let p = prob.at(y, x);
        if p <= 0.0 {
            return p;
        }
        let t = angles.at(y, x);
        let (dx, dy) = (math::cos(t), math::sin(t));
        let (yf, xf) = (y as f64, x as f64);
        let n1 = sample(prob, yf + dy, xf + dx);
        let n2 = sample(prob, yf - dy, xf - dx);
        if p < n1 || p < n2 {
            0.0
        } else {
            p
        }
    })
}
