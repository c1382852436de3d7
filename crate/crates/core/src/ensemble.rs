//! Weighted fusion of per-feature leaf distributions.

use crate::scalar::argmax;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    NoMembers,
    #[error("member {member}: weight {weight} must be finite and positive")]
    InvalidWeight { member: usize, weight: f64 },
    #[error("member {member} scores {found} leaves, expected {expected}")]
    SchemeMismatch { member: usize, expected: usize, found: usize },
    #[error("{members} members but {weights} weights")]
    WeightCount { members: usize, weights: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub scores: Vec<f64>,
    /// Leaf position of the fused argmax; ties go to the smallest code.
    pub leaf: usize,
    /// Members that lacked their feature and contributed a uniform distribution.
    pub missing: Vec<usize>,
}

pub fn validate_weights(weights: &[f64]) -> Result<(), EnsembleError> {
    if weights.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    match weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        Some(member) => Err(EnsembleError::InvalidWeight { member, weight: weights[member] }),
        None => Ok(()),
    }
}

/// `fused[ℓ] = Σ wᵢ·scoreᵢ[ℓ] / Σ wᵢ` over `leaves` leaves. A `None` member
/// stands in with the uniform distribution.
pub fn fuse(members: &[Option<&[f64]>], weights: &[f64], leaves: usize) -> Result<Fused, EnsembleError> {
    validate_weights(weights)?;
    if members.len() != weights.len() {
        return Err(EnsembleError::WeightCount { members: members.len(), weights: weights.len() });
    }
    let uniform = vec![1.0 / leaves as f64; leaves];
    let mut scores = vec![0.0; leaves];
    let mut missing = Vec::new();
    let total: f64 = weights.iter().sum();
    for (i, (member, &w)) in members.iter().zip(weights).enumerate() {
        let s = match member {
            Some(s) => *s,
            None => {
                missing.push(i);
                &uniform
            }
        };
        if s.len() != leaves {
            return Err(EnsembleError::SchemeMismatch { member: i, expected: leaves, found: s.len() });
        }
        scores.iter_mut().zip(s).for_each(|(f, &v)| *f += w * v);
    }
    scores.iter_mut().for_each(|f| *f /= total);
    let leaf = argmax(&scores).ok_or(EnsembleError::SchemeMismatch { member: 0, expected: 1, found: 0 })?;
    Ok(Fused { scores, leaf, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_member_is_identity() {
        let s = [0.2, 0.5, 0.3];
        let f = fuse(&[Some(&s)], &[1.0], 3).unwrap();
        assert_eq!(f.scores, s.to_vec());
        assert_eq!(f.leaf, 1);
    }

    #[test]
    fn heavier_member_wins() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(fuse(&[Some(&a), Some(&b)], &[2.0, 1.0], 2).unwrap().leaf, 0);
        assert_eq!(fuse(&[Some(&a), Some(&b)], &[1.0, 2.0], 2).unwrap().leaf, 1);
        // Equal weights tie; the smaller code wins.
        assert_eq!(fuse(&[Some(&a), Some(&b)], &[1.0, 1.0], 2).unwrap().leaf, 0);
    }

    #[test]
    fn missing_member_is_uniform_and_flagged() {
        let a = [0.1, 0.6, 0.3];
        let f = fuse(&[Some(&a), None], &[1.0, 1.0], 3).unwrap();
        assert_eq!(f.missing, vec![1]);
        assert_eq!(f.leaf, 1);
        assert!((f.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let alone = fuse(&[Some(&a)], &[1.0], 3).unwrap();
        assert_eq!(alone.leaf, f.leaf);
    }

    #[test]
    fn weight_scaling_is_invisible() {
        let a = [0.1, 0.6, 0.3];
        let b = [0.5, 0.2, 0.3];
        let f1 = fuse(&[Some(&a), Some(&b)], &[1.0, 3.0], 3).unwrap();
        let f2 = fuse(&[Some(&a), Some(&b)], &[2.5, 7.5], 3).unwrap();
        assert_eq!(f1.leaf, f2.leaf);
        assert!(f1.scores.iter().zip(&f2.scores).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let a = [0.5, 0.5];
        assert_eq!(fuse(&[], &[], 2), Err(EnsembleError::NoMembers));
        assert!(matches!(fuse(&[Some(&a)], &[0.0], 2), Err(EnsembleError::InvalidWeight { .. })));
        assert!(matches!(fuse(&[Some(&a)], &[1.0], 3), Err(EnsembleError::SchemeMismatch { .. })));
    }
}
