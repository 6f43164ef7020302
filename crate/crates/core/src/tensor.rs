use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense row-major `f64` array. Feature maps are rank 3 (`C×H×W`),
/// convolution weights rank 4.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(shape_err!("all extents must be >= 1, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("tensor data must be finite".into()));
        }
        Ok(Self { dims, data })
    }

    /// Panics on zero extents; use for shapes the caller already validated.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(
            !dims.is_empty() && !dims.contains(&0),
            "bad extents {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn3(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.data[(ci * h + y) * w + x] = f(ci, y, x);
                }
            }
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a C×H×W tensor, got {:?}", self.dims)),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.dims[1..].iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Multiplies every channel of a `C×H×W` tensor by a `1×H×W` map.
    pub fn mul_broadcast_channel(&self, map: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if map.dims != [1, h, w] {
            return Err(shape_err!(
                "broadcast map must be 1×{h}×{w}, got {:?}",
                map.dims
            ));
        }
        let mut out = self.clone();
        for ci in 0..c {
            let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for (v, m) in plane.iter_mut().zip(&map.data) {
                *v *= m;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.dims)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, " {head:?}")?;
        if self.data.len() > SHOWN {
            write!(f, "…")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_extents() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn broadcast_by_ones_is_identity() {
        let x = Tensor::from_fn3(3, 2, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let ones = Tensor::full(&[1, 2, 4], 1.0);
        assert_eq!(x.mul_broadcast_channel(&ones).unwrap(), x);
        assert!(x.mul_broadcast_channel(&Tensor::full(&[1, 4, 2], 1.0)).is_err());
    }

    #[test]
    fn add_checks_shapes() {
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2], 2.0);
        assert_eq!(a.add(&b).unwrap().data(), &[3.0; 4]);
        assert!(a.add(&Tensor::zeros(&[2, 2])).is_err());
    }
}
