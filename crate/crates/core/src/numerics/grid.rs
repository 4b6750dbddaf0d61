use crate::error::{shape_err, Result};

/// Dense row-major array of up to four extents.
///
/// Image-like grids are channel-last (`h × w × c`); stacks of patches are
/// `n × c × c × d`. `grad` is present iff the grid takes part in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Grid {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(shape_err!("grids have 1 to 4 extents, got {:?}", shape));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                values.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "grids have 1 to 4 extents");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; len],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut g = Self::zeros(shape);
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = f(i);
        }
        g
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same values under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.values.len() || shape.is_empty() || shape.len() > 4 {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = self.grad.as_mut() {
            g.truncate(len);
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Turns gradient tracking on (zeroed accumulator) or off.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.grad = if on { Some(vec![0.0; self.values.len()]) } else { None };
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Value at a multi-index; panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.values[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut o = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {:?} out of range for {:?}", index, self.shape);
            o = o * n + i;
        }
        o
    }

    /// Interprets the grid as `h × w × c` (a rank-2 grid is `h × w × 1`).
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            s => Err(shape_err!("expected an h×w×c grid, got {:?}", s)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_ranks() {
        assert!(Grid::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Grid::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Grid::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_tracks_shape() {
        let mut g = Grid::zeros(&[2, 2, 3]);
        assert!(!g.requires_grad());
        g.set_requires_grad(true);
        assert_eq!(g.grad().unwrap().len(), 12);
        g.set(&[1, 0, 2], 4.0);
        assert_eq!(g.at(&[1, 0, 2]), 4.0);
        assert_eq!(g.values()[8], 4.0);
    }
}
