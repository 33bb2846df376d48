//! Savitzky-Golay smoothing along the horizon axis.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("poly_order {poly_order} must be smaller than window {window}")]
    OrderTooHigh { window: usize, poly_order: usize },
    #[error("window {window} exceeds signal length {len}")]
    WindowTooLong { window: usize, len: usize },
}

pub fn validate(window: usize, poly_order: usize) -> Result<(), FilterError> {
    if window % 2 == 0 {
        return Err(FilterError::EvenWindow(window));
    }
    if poly_order >= window {
        return Err(FilterError::OrderTooHigh { window, poly_order });
    }
    Ok(())
}

/// Smoothing weights for the window center: the first row of the
/// pseudo-inverse of the local Vandermonde matrix.
pub fn coefficients(window: usize, poly_order: usize) -> Result<Vec<f64>, FilterError> {
    validate(window, poly_order)?;
    let half = (window / 2) as f64;
    let vander = DMatrix::from_fn(window, poly_order + 1, |i, j| (i as f64 - half).powi(j as i32));
    let pinv = vander
        .pseudo_inverse(1e-12)
        .expect("Vandermonde matrix with distinct nodes has full column rank");
    Ok(pinv.row(0).iter().copied().collect())
}

/// Smooths one signal. Edges are extended by point reflection about the end
/// samples (`2 x_0 - x_k`), which keeps straight lines straight.
pub fn smooth(signal: &[f64], window: usize, poly_order: usize) -> Result<Vec<f64>, FilterError> {
    let coeffs = coefficients(window, poly_order)?;
    smooth_with(signal, &coeffs)
}

pub(crate) fn smooth_with(signal: &[f64], coeffs: &[f64]) -> Result<Vec<f64>, FilterError> {
    let window = coeffs.len();
    let len = signal.len();
    if window > len {
        return Err(FilterError::WindowTooLong { window, len });
    }
    let half = window / 2;
    let at = |i: isize| -> f64 {
        if i < 0 {
            2.0 * signal[0] - signal[(-i) as usize]
        } else if i as usize >= len {
            let over = i as usize - (len - 1);
            2.0 * signal[len - 1] - signal[len - 1 - over]
        } else {
            signal[i as usize]
        }
    };
    Ok((0..len)
        .map(|t| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * at(t as isize + k as isize - half as isize))
                .sum()
        })
        .collect())
}
