//! The Wasserstein-entropy-mass objective and its fixed-potential surrogate.
//!
//! `F(S) = W1(p, q_S) + lambda H(q_S) - beta log Gamma_S` is evaluated two
//! independent ways (direct and via the factorized expansion) so that each
//! serves as the other's oracle. The surrogate `G_f(S)` depends on `S` only
//! through the retained mass and the mass-weighted mean of the combined scores
//! `phi_i = f_i + lambda log p_i`.

use crate::error::{Error, Result};
use crate::simplex::{conditional, crop, entropy, Dist};
use crate::transport::{w1_exact, GroundMetric};

/// Entropy weight `lambda` and log-mass weight `beta`, both in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    lambda: f64,
    beta: f64,
}

impl ObjectiveParams {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("beta", beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self { lambda, beta })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `beta - lambda`; nonnegative in the prefix regime.
    pub fn mass_weight(&self) -> f64 {
        self.beta - self.lambda
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.lambda, beta)
    }
}

/// Pool tokens with their probabilities, potential values and combined scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub tokens: Vec<usize>,
    pub probs: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub potential: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: f64,
    /// Pool entries removed because their probability is zero.
    pub dropped: usize,
}

impl ScoredPool {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The same pool with the potential shifted by a constant; scores are
    /// recomputed from the shifted potential.
    pub fn shifted(&self, c: f64) -> ScoredPool {
        let potential: Vec<f64> = self.potential.iter().map(|f| f + c).collect();
        let phi = potential
            .iter()
            .zip(&self.logprobs)
            .map(|(f, lp)| f + self.lambda * lp)
            .collect();
        ScoredPool {
            potential,
            phi,
            ..self.clone()
        }
    }

    /// Sub-pool at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> ScoredPool {
        let pick = |v: &[f64]| positions.iter().map(|&k| v[k]).collect::<Vec<_>>();
        ScoredPool {
            tokens: positions.iter().map(|&k| self.tokens[k]).collect(),
            probs: pick(&self.probs),
            logprobs: pick(&self.logprobs),
            potential: pick(&self.potential),
            phi: pick(&self.phi),
            lambda: self.lambda,
            dropped: 0,
        }
    }
}

/// `phi_i = f_i + lambda log p_i` over `pool`; `f[k]` is the potential at `pool[k]`.
/// Zero-probability tokens are dropped and counted.
pub fn combined_scores(p: &Dist, pool: &[usize], f: &[f64], lambda: f64) -> Result<ScoredPool> {
    if f.len() != pool.len() {
        return Err(Error::Dimension(format!(
            "potential has {} values for a pool of {}",
            f.len(),
            pool.len()
        )));
    }
    let mut out = ScoredPool {
        tokens: Vec::with_capacity(pool.len()),
        probs: Vec::with_capacity(pool.len()),
        logprobs: Vec::with_capacity(pool.len()),
        potential: Vec::with_capacity(pool.len()),
        phi: Vec::with_capacity(pool.len()),
        lambda,
        dropped: 0,
    };
    for (&i, &fi) in pool.iter().zip(f) {
        if i >= p.len() {
            return Err(Error::IndexOutOfRange { index: i, n: p.len() });
        }
        let pi = p.prob(i);
        if pi <= 0.0 {
            out.dropped += 1;
            continue;
        }
        let lp = p.logprob(i);
        out.tokens.push(i);
        out.probs.push(pi);
        out.logprobs.push(lp);
        out.potential.push(fi);
        out.phi.push(fi + lambda * lp);
    }
    Ok(out)
}

/// Surrogate value of a subset together with the `S`-independent constant
/// `C_f = sum_i p_i f_i`; `C_f - g` lower-bounds `F(S)` for feasible `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateValue {
    pub g: f64,
    pub c_f: f64,
}

/// `G_f(S) = (1/Gamma_S) sum_{i in S} p_i phi_i + (beta - lambda) log Gamma_S`,
/// with `S` given as pool positions.
pub fn eval_g(scored: &ScoredPool, subset: &[usize], params: &ObjectiveParams) -> Result<SurrogateValue> {
    if subset.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut gamma = 0.0;
    let mut weighted = 0.0;
    for &k in subset {
        if k >= scored.len() {
            return Err(Error::IndexOutOfRange { index: k, n: scored.len() });
        }
        gamma += scored.probs[k];
        weighted += scored.probs[k] * scored.phi[k];
    }
    let g = weighted / gamma + params.mass_weight() * gamma.ln();
    let c_f = scored.probs.iter().zip(&scored.potential).map(|(p, f)| p * f).sum();
    Ok(SurrogateValue { g, c_f })
}

/// `F(S) = W1(p, q_S) + lambda H(q_S) - beta log Gamma_S` with exact transport.
pub fn eval_f_exact<M: GroundMetric>(
    p: &Dist,
    set: &[usize],
    params: &ObjectiveParams,
    metric: &M,
) -> Result<f64> {
    let (c, q) = crop(p, set)?;
    let (w1, _) = w1_exact(p, &q, metric)?;
    Ok(w1 + params.lambda * entropy(&q) - params.beta * c.gamma().ln())
}

/// Expanded form
/// `(1 - Gamma) W1(p(.|S^c), p(.|S)) + (lambda - beta) log Gamma - (lambda/Gamma) sum_S p log p`.
///
/// When the complement carries no mass the transport term is taken as zero.
pub fn eval_f_expanded<M: GroundMetric>(
    p: &Dist,
    set: &[usize],
    params: &ObjectiveParams,
    metric: &M,
) -> Result<f64> {
    let gamma = p.mass(set)?;
    if gamma <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let rest = p.complement(set)?;
    let outside: f64 = rest.iter().map(|&i| p.prob(i)).sum();
    let transport = if outside > 0.0 {
        let inner = conditional(p, set)?;
        let outer = conditional(p, &rest)?;
        let (w, _) = w1_exact(&outer, &inner, metric)?;
        (1.0 - gamma) * w
    } else {
        0.0
    };
    Ok(transport + (params.lambda - params.beta) * gamma.ln() - params.lambda * plogp(p, set) / gamma)
}

/// Closed form of `F` under the 0-1 metric:
/// `1 - Gamma + (lambda - beta) log Gamma - (lambda/Gamma) sum_S p log p`.
pub fn eval_f_uniform(p: &Dist, set: &[usize], params: &ObjectiveParams) -> Result<f64> {
    let gamma = p.mass(set)?;
    if gamma <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(1.0 - gamma + (params.lambda - params.beta) * gamma.ln() - params.lambda * plogp(p, set) / gamma)
}

fn plogp(p: &Dist, set: &[usize]) -> f64 {
    set.iter()
        .filter(|&&i| p.prob(i) > 0.0)
        .map(|&i| p.prob(i) * p.logprob(i))
        .sum()
}
