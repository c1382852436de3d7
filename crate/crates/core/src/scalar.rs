//! Floating-point scalar abstraction shared by the numeric modules.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

/// A real scalar usable for network parameters, probabilities and scores.
///
/// Implemented for `f32` and `f64`. Functions that need transcendental
/// operations not covered by [`Float`] (the Gaussian error function) are
/// provided here.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + FromStr + Send + Sync + 'static
{
    /// Short type tag written into model files.
    const TYPE_NAME: &'static str;

    fn erf(self) -> Self;

    /// Lossy conversion from `f64`; all finite `f64` values map to a finite or infinite scalar.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const TYPE_NAME: &'static str = "f32";

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const TYPE_NAME: &'static str = "f64";

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
///
/// Class lists are kept sorted by code, so the lowest index is the
/// lexicographically smallest code.
pub fn argmax<S: Scalar>(values: &[S]) -> Option<usize> {
    let mut best: Option<(usize, S)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices sorted by descending value, ties by ascending index.
pub fn ranked_indices<S: Scalar>(values: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_tie() {
        assert_eq!(argmax(&[0.2f64, 0.4, 0.4]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    #[test]
    fn erf_matches_known_values() {
        assert!((Scalar::erf(0.5f64) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((Scalar::erf(0.5f32) - 0.520_499_9).abs() < 1e-6);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(ranked_indices(&[0.1f64, 0.5, 0.1, 0.5]), vec![1, 3, 0, 2]);
    }
}
