//! Exact subset step for a fixed potential.
//!
//! With `c = beta - lambda > 0` the surrogate is maximized by a prefix of the
//! pool sorted by combined score, so one sort and one pass over prefix sums
//! suffice. With `c <= 0` the optimum collapses to the single token maximizing
//! `phi_i + c log p_i`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::objective::{ObjectiveParams, ScoredPool};
use crate::simplex::Crop;

/// Largest pool accepted by [`brute_force_s_step`].
pub const BRUTE_FORCE_CAP: usize = 14;

/// Total order used to break score ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Larger probability first, then smaller token id.
    #[default]
    ProbDescThenIdAsc,
}

impl TieBreak {
    /// Compares pool positions `a` and `b` given their primary scores;
    /// `Less` means `a` ranks first.
    fn compare(self, scored: &ScoredPool, a: usize, b: usize, sa: f64, sb: f64) -> Ordering {
        match self {
            TieBreak::ProbDescThenIdAsc => sb
                .total_cmp(&sa)
                .then_with(|| scored.probs[b].total_cmp(&scored.probs[a]))
                .then_with(|| scored.tokens[a].cmp(&scored.tokens[b])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Prefix,
    Singleton,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Prefix => "prefix",
            Regime::Singleton => "singleton",
        }
    }
}

/// Prefix sums over the pool in descending combined-score order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixScan {
    /// Pool positions sorted by score.
    pub order: Vec<usize>,
    pub gamma_prefix: Vec<f64>,
    pub phi_mass_prefix: Vec<f64>,
    /// `j[k-1] = Phi_k / Gamma_k + c log Gamma_k`.
    pub j: Vec<f64>,
    /// Smallest maximizing prefix length (at least 1).
    pub best_k: usize,
}

impl PrefixScan {
    pub fn best_value(&self) -> f64 {
        self.j[self.best_k - 1]
    }

    pub fn best_gamma(&self) -> f64 {
        self.gamma_prefix[self.best_k - 1]
    }

    pub fn best_positions(&self) -> &[usize] {
        &self.order[..self.best_k]
    }
}

/// Pool positions sorted by descending `phi`.
pub fn phi_order(scored: &ScoredPool, tiebreak: TieBreak) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_unstable_by(|&a, &b| tiebreak.compare(scored, a, b, scored.phi[a], scored.phi[b]));
    order
}

/// Scans every prefix of the score order with mass weight `c`.
pub fn prefix_scan(scored: &ScoredPool, c: f64, tiebreak: TieBreak) -> Result<PrefixScan> {
    if scored.is_empty() {
        return Err(Error::EmptySet);
    }
    let order = phi_order(scored, tiebreak);
    let m = order.len();
    let mut gamma_prefix = Vec::with_capacity(m);
    let mut phi_mass_prefix = Vec::with_capacity(m);
    let mut j = Vec::with_capacity(m);
    let (mut gamma, mut mass) = (0.0, 0.0);
    let mut best_k = 1;
    for (k, &pos) in order.iter().enumerate() {
        gamma += scored.probs[pos];
        mass += scored.probs[pos] * scored.phi[pos];
        let value = mass / gamma + c * gamma.ln();
        gamma_prefix.push(gamma);
        phi_mass_prefix.push(mass);
        j.push(value);
        if value > j[best_k - 1] {
            best_k = k + 1;
        }
    }
    Ok(PrefixScan {
        order,
        gamma_prefix,
        phi_mass_prefix,
        j,
        best_k,
    })
}

/// Result of one exact subset step.
#[derive(Debug, Clone, PartialEq)]
pub struct SStepResult {
    /// Selected tokens in selection order.
    pub crop: Crop,
    /// Selected pool positions, aligned with `crop.members()`.
    pub positions: Vec<usize>,
    /// Achieved surrogate value `G_f(S)`.
    pub value: f64,
    pub regime: Regime,
}

/// Maximizes the surrogate over nonempty subsets of the pool.
pub fn s_step(scored: &ScoredPool, params: &ObjectiveParams, tiebreak: TieBreak) -> Result<SStepResult> {
    if scored.is_empty() {
        return Err(Error::EmptySet);
    }
    if scored.lambda != params.lambda() {
        return Err(Error::InvalidParameter(format!(
            "pool was scored with lambda={} but the step uses lambda={}",
            scored.lambda,
            params.lambda()
        )));
    }
    let c = params.mass_weight();
    if c > 0.0 {
        let scan = prefix_scan(scored, c, tiebreak)?;
        let positions = scan.best_positions().to_vec();
        let members = positions.iter().map(|&k| scored.tokens[k]).collect();
        return Ok(SStepResult {
            crop: Crop::from_parts(members, scan.best_gamma()),
            positions,
            value: scan.best_value(),
            regime: Regime::Prefix,
        });
    }
    let score = |k: usize| scored.phi[k] + c * scored.logprobs[k];
    let best = (1..scored.len()).fold(0, |best, k| {
        if tiebreak.compare(scored, k, best, score(k), score(best)) == Ordering::Less {
            k
        } else {
            best
        }
    });
    Ok(SStepResult {
        crop: Crop::from_parts(vec![scored.tokens[best]], scored.probs[best]),
        positions: vec![best],
        value: score(best),
        regime: Regime::Singleton,
    })
}

/// Exhaustive maximizer of the surrogate; returns sorted tokens and the value.
/// Exact ties go to the lexicographically smallest token set.
pub fn brute_force_s_step(scored: &ScoredPool, params: &ObjectiveParams) -> Result<(Vec<usize>, f64)> {
    let m = scored.len();
    if m == 0 {
        return Err(Error::EmptySet);
    }
    if m > BRUTE_FORCE_CAP {
        return Err(Error::PoolTooLarge { size: m, cap: BRUTE_FORCE_CAP });
    }
    let c = params.mass_weight();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 1u32..(1u32 << m) {
        let (mut gamma, mut mass) = (0.0, 0.0);
        let mut tokens = Vec::new();
        for k in 0..m {
            if mask >> k & 1 == 1 {
                gamma += scored.probs[k];
                mass += scored.probs[k] * scored.phi[k];
                tokens.push(scored.tokens[k]);
            }
        }
        tokens.sort_unstable();
        let value = mass / gamma + c * gamma.ln();
        let replace = match &best {
            None => true,
            Some((t, v)) => value > *v || (value == *v && tokens < *t),
        };
        if replace {
            best = Some((tokens, value));
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Retained mass of the selected subset for each `beta` in an ascending grid.
pub fn beta_sweep_gammas(scored: &ScoredPool, lambda: f64, betas: &[f64], tiebreak: TieBreak) -> Result<Vec<f64>> {
    if betas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("beta grid must be ascending".into()));
    }
    if let Some(b) = betas.iter().find(|&&b| b < lambda) {
        return Err(Error::Hypothesis(format!("beta={b} is below lambda={lambda}")));
    }
    betas
        .iter()
        .map(|&b| Ok(s_step(scored, &ObjectiveParams::new(lambda, b)?, tiebreak)?.crop.gamma()))
        .collect()
}

/// True when shifting the potential by `c` keeps the selected set and moves the
/// value by `c` (to 1e-9).
pub fn shift_check(scored: &ScoredPool, params: &ObjectiveParams, tiebreak: TieBreak, c: f64) -> Result<bool> {
    let base = s_step(scored, params, tiebreak)?;
    let moved = s_step(&scored.shifted(c), params, tiebreak)?;
    Ok(base.crop.members() == moved.crop.members() && ((moved.value - base.value) - c).abs() <= 1e-9)
}
