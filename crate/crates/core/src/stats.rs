//! Sample statistics with standard errors.

use crate::scalar::Real;

pub fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::idx(xs.len())
}

/// Unbiased sample variance.
pub fn variance<T: Real>(xs: &[T]) -> T {
    let n = xs.len();
    if n < 2 {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::idx(n - 1)
}

/// Mean and its standard error.
pub fn mean_se<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::idx(xs.len());
    (mean(xs), (variance(xs) / n).sqrt())
}

/// Sample covariance and its standard error, the latter from the spread of
/// the centred products.
pub fn covariance_se<T: Real>(xs: &[T], ys: &[T]) -> (T, T) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let (mx, my) = (mean(xs), mean(ys));
    let prods: Vec<T> = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).collect();
    let c = prods.iter().copied().sum::<T>() / T::idx(n - 1);
    let se = (variance(&prods) / T::idx(n)).sqrt();
    (c, se)
}

/// Sample variance and its standard error (via the centred squares).
pub fn variance_se<T: Real>(xs: &[T]) -> (T, T) {
    covariance_se(xs, xs)
}

/// Sample skewness and excess kurtosis with their large sample standard
/// errors `sqrt(6 / n)` and `sqrt(24 / n)`.
pub fn shape_moments<T: Real>(xs: &[T]) -> (T, T, T, T) {
    let n = T::idx(xs.len());
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (T::zero(), T::zero(), T::zero());
    for &x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let skew = m3 / m2.powf(T::lit(1.5));
    let kurt = m4 / (m2 * m2) - T::lit(3.0);
    (skew, (T::lit(6.0) / n).sqrt(), kurt, (T::lit(24.0) / n).sqrt())
}
