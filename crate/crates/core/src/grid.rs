use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, input_err};
use crate::Result;

/// A dense row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Real-valued map, e.g. an edge probability map.
pub type Map = Grid<f64>;
/// Binary map, e.g. one annotator's edge label.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::default())
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }

    pub fn zip_map<U, V>(&self, other: &Grid<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<Grid<V>> {
        self.ensure_same_size(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect();
        Ok(Grid { height: self.height, width: self.width, data })
    }

    pub fn ensure_same_size<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.size() != other.size() {
            return Err(dim_err!(
                "grid sizes differ: {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the grid (replicate padding).
    #[inline]
    pub fn clamped(&self, y: isize, x: isize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip_map(other, |a, b| *a || *b)
    }

    pub fn xor(&self, other: &Mask) -> Result<Mask> {
        self.zip_map(other, |a, b| *a != *b)
    }

    /// `true` where `self` implies `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.size() == other.size() && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    pub fn to_map(&self) -> Map {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }
}

impl Map {
    /// `value >= threshold` per pixel.
    pub fn threshold(&self, threshold: f64) -> Mask {
        self.map(|&v| v >= threshold)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// An RGB image with channel values in `[0, 1]`, stored row-major as HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(dim_err!("image {height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(input_err!("image values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    /// Grayscale image replicated into three channels.
    pub fn from_gray(gray: &Map) -> Result<Self> {
        let mut data = Vec::with_capacity(gray.len() * 3);
        for &v in gray.data() {
            data.extend_from_slice(&[v, v, v]);
        }
        Self::from_vec(gray.height(), gray.width(), data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma with Rec. 601 weights.
    pub fn luma(&self) -> Map {
        Map::from_fn(self.height, self.width, |y, x| {
            let [r, g, b] = self.pixel(y, x);
            0.299 * r + 0.587 * g + 0.114 * b
        })
    }

    pub fn channel(&self, c: usize) -> Map {
        Map::from_fn(self.height, self.width, |y, x| self.data[(y * self.width + x) * 3 + c])
    }

    pub fn from_channels(channels: [&Map; 3]) -> Result<Self> {
        channels[0].ensure_same_size(channels[1])?;
        channels[0].ensure_same_size(channels[2])?;
        let (h, w) = channels[0].size();
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for ch in channels {
                data.push(ch.data()[i].clamp(0.0, 1.0));
            }
        }
        Ok(Self { height: h, width: w, data })
    }
}
