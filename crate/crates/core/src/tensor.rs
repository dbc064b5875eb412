//! Small dense arrays with fixed rank, indexed by `[usize; R]`.

use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Array<const R: usize> {
    shape: [usize; R],
    data: Vec<f64>,
}

pub type Array2 = Array<2>;
pub type Array3 = Array<3>;
pub type Array4 = Array<4>;

impl<const R: usize> Array<R> {
    pub fn zeros(shape: [usize; R]) -> Self {
        let len = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: [usize; R], mut f: impl FnMut([usize; R]) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        for flat in 0..out.data.len() {
            let idx = out.unravel(flat);
            out.data[flat] = f(idx);
        }
        out
    }

    pub fn shape(&self) -> [usize; R] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, idx: [usize; R]) -> usize {
        let mut off = 0;
        for k in 0..R {
            debug_assert!(idx[k] < self.shape[k], "index {idx:?} out of shape {:?}", self.shape);
            off = off * self.shape[k] + idx[k];
        }
        off
    }

    fn unravel(&self, mut flat: usize) -> [usize; R] {
        let mut idx = [0; R];
        for k in (0..R).rev() {
            idx[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
        idx
    }

    /// Iterate over all multi-indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = [usize; R]> + '_ {
        (0..self.data.len()).map(|f| self.unravel(f))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl<const R: usize> Index<[usize; R]> for Array<R> {
    type Output = f64;
    fn index(&self, idx: [usize; R]) -> &f64 {
        &self.data[self.offset(idx)]
    }
}

impl<const R: usize> IndexMut<[usize; R]> for Array<R> {
    fn index_mut(&mut self, idx: [usize; R]) -> &mut f64 {
        let off = self.offset(idx);
        &mut self.data[off]
    }
}
