use super::{Matrix, Scalar};

/// Step used by [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function of one matrix:
/// `(f(x + h·e_ij) − f(x − h·e_ij)) / 2h` per entry.
pub fn finite_diff_grad<T: Scalar>(f: impl Fn(&Matrix<T>) -> T, x: &Matrix<T>) -> Matrix<T> {
    let h = T::lit(FD_STEP);
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe);
        probe.data_mut()[k] = orig - h;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / two_h;
    }
    out
}

/// Max-entry relative error: `max|a − b| / max(max|a|, max|b|)`.
///
/// Both arguments all-zero gives 0.
pub fn relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max);
    let scale = a.max_abs().as_f64().max(b.max_abs().as_f64());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
