//! Monotone piecewise cubic Hermite interpolation (Fritsch-Carlson).

use crate::scalar::Real;

/// Shape preserving cubic interpolant through `(x_i, y_i)`.
///
/// Monotone data gives a monotone interpolant, so the derivative has the
/// sign of the data everywhere.
#[derive(Debug, Clone)]
pub struct MonotoneCubic<T> {
    x: Vec<T>,
    y: Vec<T>,
    d: Vec<T>,
}

impl<T: Real> MonotoneCubic<T> {
    /// Requires at least two strictly increasing abscissae.
    pub fn new(x: Vec<T>, y: Vec<T>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len(), "need >= 2 matching points");
        let n = x.len();
        let h: Vec<T> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<T> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![T::zero(); n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
            return Self { x, y, d };
        }
        for i in 1..n - 1 {
            let (a, b) = (delta[i - 1], delta[i]);
            if a * b <= T::zero() {
                d[i] = T::zero();
            } else {
                // weighted harmonic mean
                let w1 = T::lit(2.0) * h[i] + h[i - 1];
                let w2 = h[i] + T::lit(2.0) * h[i - 1];
                d[i] = (w1 + w2) / (w1 / a + w2 / b);
            }
        }
        d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Self { x, y, d }
    }

    pub fn knots(&self) -> &[T] {
        &self.x
    }

    /// Derivatives at the knots.
    pub fn knot_slopes(&self) -> &[T] {
        &self.d
    }

    fn locate(&self, t: T) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    /// Value at `t`, clamped to the knot range.
    pub fn eval(&self, t: T) -> T {
        let t = t.max(self.x[0]).min(self.x[self.x.len() - 1]);
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let two = T::lit(2.0);
        let three = T::lit(3.0);
        let h00 = two * s3 - three * s2 + T::one();
        let h10 = s3 - two * s2 + s;
        let h01 = -two * s3 + three * s2;
        let h11 = s3 - s2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    /// Derivative at `t`, clamped to the knot range.
    pub fn deriv(&self, t: T) -> T {
        let t = t.max(self.x[0]).min(self.x[self.x.len() - 1]);
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let s2 = s * s;
        let six = T::lit(6.0);
        let dy = (self.y[i + 1] - self.y[i]) / h;
        (six * s - six * s2) * dy
            + (T::lit(3.0) * s2 - T::lit(4.0) * s + T::one()) * self.d[i]
            + (T::lit(3.0) * s2 - T::lit(2.0) * s) * self.d[i + 1]
    }

    /// `int_{x_0}^{x_i} deriv` for every knot, by Simpson's rule on each
    /// interval (exact for the quadratic derivative of a cubic).
    pub fn integrated_derivative(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.x.len());
        let mut acc = T::zero();
        out.push(acc);
        for i in 0..self.x.len() - 1 {
            let (a, b) = (self.x[i], self.x[i + 1]);
            let m = (a + b) / T::lit(2.0);
            acc += (b - a) / T::lit(6.0) * (self.deriv(a) + T::lit(4.0) * self.deriv(m) + self.deriv(b));
            out.push(acc);
        }
        out
    }
}

/// Three point end slope, limited to keep monotonicity.
fn end_slope<T: Real>(h0: T, h1: T, d0: T, d1: T) -> T {
    let two = T::lit(2.0);
    let s = ((two * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= T::zero() {
        T::zero()
    } else if d0 * d1 <= T::zero() && s.abs() > (T::lit(3.0) * d0).abs() {
        T::lit(3.0) * d0
    } else {
        s
    }
}
