//! Probability vectors, crops and the cropped-entropy identity.
//!
//! Entropies are in nats. Zero-probability tokens carry a log-probability of
//! `-inf` and contribute nothing to entropies (`0 log 0 = 0`).

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over a vocabulary, with cached log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

impl Dist {
    /// Softmax of `logits / temperature`, computed via a max-shifted log-sum-exp.
    pub fn from_logits<T: Copy + Into<f64>>(logits: &[T], temperature: f64) -> Result<Dist> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for &l in logits {
            let l: f64 = l.into();
            if l.is_nan() || l == f64::INFINITY {
                return Err(Error::InvalidParameter(format!("logit {l} is not allowed")));
            }
            max = max.max(l);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::NoFiniteLogits);
        }

        let mut logprobs: Vec<f64> = logits
            .iter()
            .map(|&l| (l.into() - max) / temperature)
            .collect();
        let mut probs: Vec<f64> = logprobs.iter().map(|z| z.exp()).collect();
        let total: f64 = probs.iter().sum();
        let log_total = total.ln();
        for (p, z) in probs.iter_mut().zip(logprobs.iter_mut()) {
            *p /= total;
            if *p > 0.0 {
                *z -= log_total;
            } else {
                *z = f64::NEG_INFINITY;
            }
        }
        Ok(Dist { probs, logprobs })
    }

    /// Wraps an explicit probability vector; it must be nonnegative and sum to 1.
    pub fn from_probs(probs: Vec<f64>) -> Result<Dist> {
        if probs.is_empty() {
            return Err(Error::EmptySet);
        }
        if let Some(&bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidParameter(format!("invalid probability {bad}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        let logprobs = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(Dist { probs, logprobs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Dist> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::ZeroMass);
        }
        Dist::from_probs(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Dist> {
        if n == 0 {
            return Err(Error::EmptySet);
        }
        Dist::from_probs(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn logprob(&self, i: usize) -> f64 {
        self.logprobs[i]
    }

    /// Tokens with strictly positive probability, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// Retained mass of a validated set.
    pub fn mass(&self, set: &[usize]) -> Result<f64> {
        validate_set(set, self.len())?;
        Ok(set.iter().map(|&i| self.probs[i]).sum())
    }

    /// Complement of `set` within the vocabulary, ascending.
    pub fn complement(&self, set: &[usize]) -> Result<Vec<usize>> {
        validate_set(set, self.len())?;
        let mut inside = vec![false; self.len()];
        set.iter().for_each(|&i| inside[i] = true);
        Ok((0..self.len()).filter(|&i| !inside[i]).collect())
    }
}

/// Checks that `set` is nonempty, in range and free of duplicates.
pub(crate) fn validate_set(set: &[usize], n: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut seen = vec![false; n];
    for &i in set {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicateToken(i));
        }
    }
    Ok(())
}

/// An ordered, duplicate-free token subset together with its retained mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    members: Vec<usize>,
    gamma: f64,
}

impl Crop {
    /// Builds a crop of `p`; member order is preserved as given.
    pub fn new(p: &Dist, members: Vec<usize>) -> Result<Crop> {
        let gamma = p.mass(&members)?;
        if gamma <= 0.0 {
            return Err(Error::ZeroMass);
        }
        Ok(Crop { members, gamma })
    }

    pub(crate) fn from_parts(members: Vec<usize>, gamma: f64) -> Crop {
        Crop { members, gamma }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn contains(&self, token: usize) -> bool {
        self.members.contains(&token)
    }

    /// Members in ascending token order.
    pub fn sorted_members(&self) -> Vec<usize> {
        let mut m = self.members.clone();
        m.sort_unstable();
        m
    }
}

/// Restricts `p` to `set` and renormalizes.
pub fn crop(p: &Dist, set: &[usize]) -> Result<(Crop, Dist)> {
    let c = Crop::new(p, set.to_vec())?;
    let mut probs = vec![0.0; p.len()];
    let mut logprobs = vec![f64::NEG_INFINITY; p.len()];
    let log_gamma = c.gamma.ln();
    for &i in set {
        let q = p.probs[i] / c.gamma;
        probs[i] = q;
        if q > 0.0 {
            logprobs[i] = p.logprobs[i] - log_gamma;
        }
    }
    Ok((c, Dist { probs, logprobs }))
}

/// The conditional distribution `p( . | set)`.
pub fn conditional(p: &Dist, set: &[usize]) -> Result<Dist> {
    crop(p, set).map(|(_, q)| q)
}

/// Shannon entropy in nats.
pub fn entropy(q: &Dist) -> f64 {
    let h: f64 = q
        .probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Both sides of the cropped-entropy identity
/// `H(q_S) = -(1/Gamma) sum_{i in S} p_i log p_i + log Gamma`.
///
/// The left side is the entropy of the materialized crop; the right side is
/// evaluated from `p` alone.
pub fn cropped_entropy_identity(p: &Dist, set: &[usize]) -> Result<(f64, f64)> {
    let (c, q) = crop(p, set)?;
    let lhs = entropy(&q);
    let weighted: f64 = set
        .iter()
        .filter(|&&i| p.probs[i] > 0.0)
        .map(|&i| p.probs[i] * p.logprobs[i])
        .sum();
    let rhs = -weighted / c.gamma + c.gamma.ln();
    Ok((lhs, rhs))
}
