//! Dense row-major tensors over a generic float scalar.
//!
//! Shapes follow the channel-first convention used throughout the model:
//! feature maps are `[C, H, W]`, vectors are `[C]`, scalars are `[1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`, drawn in f64 so that f32 and f64
    /// tensors built from the same seed agree up to rounding.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of_f64(rng.gen_range(lo..hi)))
    }

    /// Gaussian samples with the given standard deviation, drawn in f64.
    pub fn rand_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f64, std).expect("valid std");
        Self::from_fn(shape, |_| T::of_f64(normal.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interpret as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected [C, H, W], got {:?}",
                self.shape
            ))),
        }
    }

    /// Interpret as `[A, B]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!(
                "expected rank-2 shape, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.data.len())
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Per-channel spatial mean and population standard deviation of a
    /// `[C, H, W]` map. The reported sigma is exact (no stabilizer), so a
    /// constant channel yields sigma == 0 and affine inputs transform exactly.
    pub fn channel_stats(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let (c, h, w) = self.dims3()?;
        let area = h * w;
        let inv_area = T::one() / T::of_usize(area);
        let mut mu = Vec::with_capacity(c);
        let mut sigma = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &self.data[ch * area..(ch + 1) * area];
            let m = plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv_area;
            let var = plane
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - m) * (v - m))
                * inv_area;
            mu.push(m);
            sigma.push(var.sqrt());
        }
        Ok((
            Tensor::from_vec(vec![c], mu)?,
            Tensor::from_vec(vec![c], sigma)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn channel_stats_constant_channel() {
        let t = Tensor::<f64>::filled(&[1, 2, 2], 2.0);
        let (mu, sigma) = t.channel_stats().unwrap();
        assert_eq!(mu.data(), &[2.0]);
        assert_eq!(sigma.data(), &[0.0]);
    }

    #[test]
    fn channel_stats_two_values() {
        // {1, 3}: mean 2, population std 1 (exactly, no stabilizer)
        let t = Tensor::<f64>::from_vec(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (mu, sigma) = t.channel_stats().unwrap();
        assert_eq!(mu.data(), &[2.0]);
        assert_eq!(sigma.data(), &[1.0]);
    }

    #[test]
    fn channel_stats_independent_per_channel() {
        let t = Tensor::<f64>::from_vec(vec![2, 1, 2], vec![1.0, 3.0, 10.0, 10.0]).unwrap();
        let (mu, sigma) = t.channel_stats().unwrap();
        assert_eq!(mu.data(), &[2.0, 10.0]);
        assert_eq!(sigma.data(), &[1.0, 0.0]);
    }

    #[test]
    fn channel_stats_affine_transform() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::rand_uniform(&[3, 5, 7], -1.0, 1.0, &mut rng);
        let (a, b) = (-2.5, 0.7);
        let y = x.map(|v| a * v + b);
        let (mx, sx) = x.channel_stats().unwrap();
        let (my, sy) = y.channel_stats().unwrap();
        for c in 0..3 {
            assert!((my.data()[c] - (a * mx.data()[c] + b)).abs() < 1e-6);
            assert!((sy.data()[c] - a.abs() * sx.data()[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_finite("bad").is_err());
    }
}
