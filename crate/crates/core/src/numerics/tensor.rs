use crate::error::{Error, Result};

use super::Scalar;

/// Dense row-major tensor.
///
/// Most operations view a tensor as a matrix: `rows` is the product of all
/// leading extents and `cols` is the trailing extent. A rank-0 tensor is a
/// single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Builds a matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts between element types (used to run f64 checks on f32 weights).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0f32; 5]), Err(Error::Dimension(_))));
        assert!(Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0]]).is_err());
        let empty = Tensor::<f64>::zeros(&[0, 4]);
        assert_eq!((empty.rows(), empty.cols(), empty.len()), (0, 4, 0));
        let s = Tensor::scalar(2.5f64);
        assert_eq!((s.rows(), s.cols(), s.item()), (1, 1, 2.5));
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_fn(&[2, 6], |i| i as f64);
        let r = t.clone().reshape(vec![3, 2, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!((r.rows(), r.cols()), (6, 2));
        assert!(t.reshape(vec![5]).is_err());
    }

    #[test]
    fn finiteness_and_casts() {
        let mut t = Tensor::from_fn(&[3], |i| i as f32 + 0.5);
        assert!(t.all_finite());
        assert_eq!(t.cast::<f64>().data(), &[0.5, 1.5, 2.5]);
        t.data_mut()[1] = f32::INFINITY;
        assert!(!t.all_finite());
    }

    proptest! {
        #[test]
        fn element_count_is_the_shape_product(shape in proptest::collection::vec(0usize..5, 0..4)) {
            let t = Tensor::<f32>::zeros(&shape);
            prop_assert_eq!(t.len(), shape.iter().product::<usize>());
            prop_assert_eq!(t.rows() * t.cols(), t.len());
        }
    }
}
