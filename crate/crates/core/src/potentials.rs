//! Anchored 1-Lipschitz potentials built from distance to the current crop.

use crate::error::{Error, Result};
use crate::geometry::TokenMetric;
use crate::transport::{require_lipschitz, GroundMetric};

/// Slack allowed when testing anchoring and envelope bounds.
pub const ENVELOPE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    Attraction,
    Repulsion,
    Custom,
}

/// Potential values over a pool of tokens, optionally anchored on a set.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pool: Vec<usize>,
    values: Vec<f64>,
    anchor: Option<Vec<usize>>,
    kind: PotentialKind,
}

fn anchored_inside(pool: &[usize], set: &[usize], n: usize) -> Result<()> {
    crate::simplex::validate_set(set, n)?;
    if let Some(&bad) = set.iter().find(|j| !pool.contains(j)) {
        return Err(Error::InvalidParameter(format!("anchor token {bad} is outside the pool")));
    }
    Ok(())
}

/// `f(i) = -dist(i, S)` over the pool.
pub fn attraction_potential(metric: &TokenMetric, pool: &[usize], set: &[usize]) -> Result<Potential> {
    anchored_inside(pool, set, metric.len())?;
    let values = metric.batched_dist_to_set(pool, set)?.into_iter().map(|d| -d).collect();
    Ok(Potential {
        pool: pool.to_vec(),
        values,
        anchor: Some(set.to_vec()),
        kind: PotentialKind::Attraction,
    })
}

/// `f(i) = +dist(i, S)` over the pool.
pub fn repulsion_potential(metric: &TokenMetric, pool: &[usize], set: &[usize]) -> Result<Potential> {
    anchored_inside(pool, set, metric.len())?;
    let values = metric.batched_dist_to_set(pool, set)?;
    Ok(Potential {
        pool: pool.to_vec(),
        values,
        anchor: Some(set.to_vec()),
        kind: PotentialKind::Repulsion,
    })
}

impl Potential {
    /// Accepts caller-supplied values only if they are 1-Lipschitz on the
    /// pool and, when an anchor is given, zero on it.
    pub fn custom<M: GroundMetric>(
        metric: &M,
        pool: &[usize],
        values: Vec<f64>,
        anchor: Option<Vec<usize>>,
    ) -> Result<Potential> {
        if values.len() != pool.len() {
            return Err(Error::Dimension(format!(
                "{} potential values for a pool of {}",
                values.len(),
                pool.len()
            )));
        }
        if let Some(&i) = pool.iter().find(|&&i| i >= metric.len()) {
            return Err(Error::IndexOutOfRange { index: i, n: metric.len() });
        }
        require_lipschitz(&values, pool, metric)?;
        let p = Potential {
            pool: pool.to_vec(),
            values,
            anchor,
            kind: PotentialKind::Custom,
        };
        if let Some(set) = &p.anchor {
            anchored_inside(pool, set, metric.len())?;
            p.require_anchored()?;
        }
        Ok(p)
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn anchor(&self) -> Option<&[usize]> {
        self.anchor.as_deref()
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn require_anchored(&self) -> Result<()> {
        let set = self.anchor.as_deref().ok_or_else(|| Error::Hypothesis("potential has no anchor set".into()))?;
        for &j in set {
            let k = self.pool.iter().position(|&t| t == j).expect("anchor inside pool");
            if self.values[k].abs() > ENVELOPE_SLACK {
                return Err(Error::NotAnchored { token: j, value: self.values[k] });
            }
        }
        Ok(())
    }
}

/// Checks `-dist(i, S) <= f(i) <= dist(i, S)` over the pool for a potential
/// anchored on `S`.
pub fn envelope_check(f: &Potential, metric: &TokenMetric) -> Result<bool> {
    f.require_anchored()?;
    let set = f.anchor.as_deref().expect("checked above");
    let d = metric.batched_dist_to_set(&f.pool, set)?;
    Ok(f
        .values
        .iter()
        .zip(&d)
        .all(|(v, d)| *v >= -d - ENVELOPE_SLACK && *v <= d + ENVELOPE_SLACK))
}
