use crate::{error::invalid, Result};

/// Nodal values on an `n × n` grid over the unit square. Node `(i, j)` sits
/// at `(x, y) = (i·h, j·h)` and is stored at `i·n + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 || values.len() != n * n {
            return Err(invalid(format!(
                "field of {} values does not fit a {n}×{n} grid",
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / (n - 1) as f64;
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i as f64 * h, j as f64 * h));
            }
        }
        Self { n, values }
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    /// Bilinear interpolation at `(x, y)` in the closed unit square.
    pub fn bilinear(&self, x: f64, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(invalid(format!("point ({x}, {y}) outside the unit square")));
        }
        let last = self.n - 1;
        let (fx, fy) = (x * last as f64, y * last as f64);
        let i = (fx.floor() as usize).min(last - 1);
        let j = (fy.floor() as usize).min(last - 1);
        let (wx, wy) = (fx - i as f64, fy - j as f64);
        Ok((1.0 - wx) * (1.0 - wy) * self.at(i, j)
            + wx * (1.0 - wy) * self.at(i + 1, j)
            + (1.0 - wx) * wy * self.at(i, j + 1)
            + wx * wy * self.at(i + 1, j + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_nodes_and_linear_fields() {
        let f = Field2D::from_fn(9, |x, y| (3.0 * x).sin() + y * y);
        let h = f.h();
        assert_eq!(f.bilinear(3.0 * h, 5.0 * h).unwrap(), f.at(3, 5));

        let lin = Field2D::from_fn(9, |x, _| x);
        for &(x, y) in &[(0.123, 0.77), (0.5, 0.5), (0.999, 0.001)] {
            assert!((lin.bilinear(x, y).unwrap() - x).abs() < 1e-14);
        }

        let centre = f.bilinear(2.5 * h, 6.5 * h).unwrap();
        let mean = (f.at(2, 6) + f.at(3, 6) + f.at(2, 7) + f.at(3, 7)) / 4.0;
        assert!((centre - mean).abs() < 1e-14);
        assert!(f.bilinear(1.2, 0.5).is_err());
    }
}
