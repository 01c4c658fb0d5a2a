//! Two-dimensional per-pixel maps: probabilities and binary masks.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Per-pixel vessel probability, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_err!(
                "probability map {width}×{height} needs {} values, got {}",
                width * height,
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("probability values must lie in [0, 1], found {v}"));
        }
        Ok(ProbMap { width, height, values })
    }

    /// The single channel of a `1×1×H×W`, `1×H×W` or `H×W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
            other => return Err(shape_err!("expected a single-channel map, got shape {other:?}")),
        };
        Self::new(w, h, t.data().to_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(shape_err!(
                "mask {width}×{height} needs {} pixels, got {}",
                width * height,
                bits.len()
            ));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_extent(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn check_extent(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err!(
                "{what}: {}×{} vs {}×{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }

    /// `1×1×H×W` tensor with 1.0 on set pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("extent matches")
    }

    /// Morphological dilation with a 3×3 square.
    pub fn dilate(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let ys = y.saturating_sub(1)..=(y + 1).min(self.height - 1);
            ys.into_iter()
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(self.width - 1)).any(|xx| self.get(xx, yy)))
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_extent(other, "mask intersection")?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }
}
