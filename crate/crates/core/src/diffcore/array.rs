//! Dense row-major host arrays.
//!
//! `Array` is the value type outside the tape: model parameters, datasets,
//! images. Data is behind an `Arc` so cloning an array (or binding it to a
//! tape as a leaf) never copies the buffer; the optimizer mutates through
//! `make_mut` once all tapes referencing the step have been dropped.

use std::sync::Arc;

use crate::diffcore::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> Array<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Array { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Array { shape, data: Arc::new(vec![E::zero(); numel]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Array { shape, data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: E) -> Self {
        Array::from_vec(vec![1], vec![value])
    }

    /// Identity matrix, mostly for tests.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        Array::from_vec(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; clones the buffer only if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<E>>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len());
        Array { shape, data }
    }

    /// Reinterpret with a new shape of identical element count. Zero-copy.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Array { shape, data: Arc::clone(&self.data) })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Array::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Array<T> {
        Array::from_vec(
            self.shape.clone(),
            self.data.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        )
    }
}

impl<E: Scalar> PartialEq for Array<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Collapse every axis but the last: (leading rows, row width).
pub(crate) fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let w = *shape.last().unwrap();
            (shape.iter().product::<usize>() / w.max(1), w)
        }
    }
}
