//! Coordinate-wise binary encoding of object coordinates.
//!
//! Each axis is normalized to `[0, 2^n - 1]` and written as `n` bits, MSB
//! first. Soft decoding keeps exactly one bit probability unrounded so the
//! decoded coordinate is differentiable in that probability.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub const MAX_BITS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentCodec {
    pub c_min: f64,
    pub c_max: f64,
    pub n_bits: usize,
}

impl ComponentCodec {
    pub fn new(c_min: f64, c_max: f64, n_bits: usize) -> Result<Self> {
        let codec = Self { c_min, c_max, n_bits };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_max > self.c_min) || !self.c_min.is_finite() || !self.c_max.is_finite() {
            return Err(Error::InvalidInput(format!("codec range [{}, {}] is empty", self.c_min, self.c_max)));
        }
        if !(1..=MAX_BITS).contains(&self.n_bits) {
            return Err(Error::InvalidInput(format!("n_bits {} outside 1..={MAX_BITS}", self.n_bits)));
        }
        Ok(())
    }

    /// `2^n - 1`.
    pub fn levels(&self) -> f64 {
        ((1u32 << self.n_bits) - 1) as f64
    }

    /// `c_n = (c - c_min) / (c_max - c_min) * (2^n - 1)`, unrounded.
    pub fn normalize(&self, c: f64) -> f64 {
        (c - self.c_min) / (self.c_max - self.c_min) * self.levels()
    }

    pub fn denormalize(&self, c_n: f64) -> f64 {
        self.c_min + c_n / self.levels() * (self.c_max - self.c_min)
    }
}

/// Bits per axis: the largest extent gets `n_max`, the others
/// `round(n_max + log2(s_i / s_max))`, never fewer than one.
pub fn allocate_bits(sizes: [f64; 3], n_max: usize) -> Result<[usize; 3]> {
    if sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput("extents must be positive".into()));
    }
    if n_max < 1 {
        return Err(Error::InvalidInput("n_max must be at least 1".into()));
    }
    let s_max = sizes.iter().copied().fold(f64::MIN, f64::max);
    Ok(sizes.map(|s| {
        let n = (n_max as f64 + (s / s_max).log2()).round();
        (n.max(1.0) as usize).min(n_max)
    }))
}

pub fn encode_component(c: f64, codec: &ComponentCodec) -> Result<Vec<bool>> {
    codec.validate()?;
    if !(c >= codec.c_min && c <= codec.c_max) {
        return Err(Error::OutOfRange { value: c, min: codec.c_min, max: codec.c_max });
    }
    let q = codec.normalize(c).round() as u32;
    Ok((0..codec.n_bits).rev().map(|b| (q >> b) & 1 == 1).collect())
}

/// Integer value of MSB-first bits.
pub fn bits_to_int(bits: &[bool]) -> u32 {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as u32)
}

// Ties go up.
#[inline]
fn round_bit(p: f64) -> bool {
    p >= 0.5
}

/// Soft decode of MSB-first bit probabilities to a normalized coordinate.
///
/// With `gt_bits`, the most significant mispredicted bit keeps its
/// probability and every other bit takes its ground-truth value; when no bit
/// is mispredicted the LSB stays soft. Without `gt_bits`, all bits but the
/// LSB are rounded.
pub fn decode_soft(bit_probs: &[f64], gt_bits: Option<&[bool]>) -> Result<f64> {
    if bit_probs.is_empty() || bit_probs.len() > MAX_BITS {
        return Err(Error::InvalidInput(format!("{} bits outside 1..={MAX_BITS}", bit_probs.len())));
    }
    if let Some(&p) = bit_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::OutOfRange { value: p, min: 0.0, max: 1.0 });
    }
    let n = bit_probs.len();
    let weight = |i: usize| (1u32 << (n - 1 - i)) as f64;
    let value = match gt_bits {
        Some(gt) => {
            if gt.len() != n {
                return Err(Error::InvalidInput(format!("{} probabilities but {} bits", n, gt.len())));
            }
            let soft = (0..n).find(|&i| round_bit(bit_probs[i]) != gt[i]).unwrap_or(n - 1);
            (0..n).map(|i| weight(i) * if i == soft { bit_probs[i] } else { gt[i] as u8 as f64 }).sum()
        }
        None => (0..n)
            .map(|i| weight(i) * if i == n - 1 { bit_probs[i] } else { round_bit(bit_probs[i]) as u8 as f64 })
            .sum(),
    };
    Ok(value)
}

/// Rigid alignment that centers a point set and maps its principal axes
/// onto the coordinate axes, largest spread first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalFrame {
    pub centroid: Vector3<f64>,
    /// Rows are the principal axes; `det = +1`.
    pub rotation: Matrix3<f64>,
}

impl PrincipalFrame {
    pub fn fit(points: &[Vector3<f64>]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InsufficientCorrespondences { required: 3, actual: points.len() });
        }
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let cov = points.iter().map(|p| (p - centroid) * (p - centroid).transpose()).sum::<Matrix3<f64>>()
            / points.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut rotation = Matrix3::zeros();
        for (row, &k) in order.iter().enumerate() {
            rotation.set_row(row, &eig.eigenvectors.column(k).transpose());
        }
        if rotation.determinant() < 0.0 {
            rotation.row_mut(2).neg_mut();
        }
        Ok(Self { centroid, rotation })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.centroid)
    }

    pub fn invert(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * q + self.centroid
    }
}
