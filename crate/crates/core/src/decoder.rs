//! The alternating decoder as a logits processor.
//!
//! Each call forms `p` at the selection temperature, restricts work to the
//! `top_m` most probable tokens, warm-starts a crop with a probability-only
//! rule and then alternates an f-step (`f = -dist(., S)` over the pool) with
//! the exact S-step until the crop stops changing or the iteration budget runs
//! out. Squared distances from pool tokens to crop members are cached per call,
//! so members that persist across iterations are never recomputed.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{kernel, TokenMetric, DEFAULT_EPSILON};
use crate::objective::{combined_scores, ObjectiveParams, ScoredPool};
use crate::selection::{prefix_scan, s_step, Regime, SStepResult, TieBreak};
use crate::simplex::{Crop, Dist};

/// Probability-only rule for the initial crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarmStart {
    /// Smallest probability-descending prefix with mass at least the threshold.
    Nucleus(f64),
    TopK(usize),
}

impl WarmStart {
    fn validate(&self) -> Result<()> {
        match *self {
            WarmStart::Nucleus(t) if !(t > 0.0 && t <= 1.0) => Err(Error::InvalidParameter(format!(
                "warm-start nucleus threshold must lie in (0, 1], got {t}"
            ))),
            WarmStart::TopK(0) => Err(Error::InvalidParameter("warm-start top_k must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Parses `nucleus:0.9` or `top_k:5`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("warm start `{s}` is not `nucleus:<p>` or `top_k:<k>`"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let w = match kind.trim() {
            "nucleus" | "top_p" => WarmStart::Nucleus(value.trim().parse().map_err(|_| bad())?),
            "top_k" => WarmStart::TopK(value.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        w.validate()?;
        Ok(w)
    }
}

impl std::fmt::Display for WarmStart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WarmStart::Nucleus(t) => write!(f, "nucleus:{t}"),
            WarmStart::TopK(k) => write!(f, "top_k:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopWConfig {
    pub lambda: f64,
    pub beta: f64,
    pub sel_temperature: f64,
    pub top_m: usize,
    pub alt_iters: usize,
    pub warm_start: WarmStart,
    /// Whitening regularizer used when a metric is built for this config.
    pub epsilon_whiten: f64,
    pub tiebreak: TieBreak,
    /// Temperature for sampling from the masked logits; `None` reuses `sel_temperature`.
    pub sample_temperature: Option<f64>,
}

impl Default for TopWConfig {
    fn default() -> Self {
        Self {
            lambda: 2.2,
            beta: 2.8,
            sel_temperature: 1.0,
            top_m: 1200,
            alt_iters: 3,
            warm_start: WarmStart::Nucleus(0.9),
            epsilon_whiten: DEFAULT_EPSILON,
            tiebreak: TieBreak::ProbDescThenIdAsc,
            sample_temperature: None,
        }
    }
}

impl TopWConfig {
    /// Keys accepted by [`set`](Self::set).
    pub const KEYS: &'static [&'static str] = &[
        "lambda",
        "beta",
        "sel_temperature",
        "top_m",
        "alt_iters",
        "warm_start",
        "epsilon_whiten",
        "tiebreak",
        "sample_temperature",
    ];

    /// Rejects invalid values and returns warnings for legal but degenerate ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        let params = self.params()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be finite and positive, got {v}")))
            }
        };
        positive("sel_temperature", self.sel_temperature)?;
        positive("epsilon_whiten", self.epsilon_whiten)?;
        if let Some(t) = self.sample_temperature {
            positive("sample_temperature", t)?;
        }
        if self.top_m == 0 {
            return Err(Error::InvalidParameter("top_m must be at least 1".into()));
        }
        if self.alt_iters == 0 {
            return Err(Error::InvalidParameter("alt_iters must be at least 1".into()));
        }
        self.warm_start.validate()?;
        let mut warnings = Vec::new();
        if params.mass_weight() <= 0.0 {
            warnings.push(format!(
                "beta={} <= lambda={}: every S-step collapses to a single token",
                self.beta, self.lambda
            ));
        }
        Ok(warnings)
    }

    pub fn params(&self) -> Result<ObjectiveParams> {
        ObjectiveParams::new(self.lambda, self.beta)
    }

    /// Sets one field from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("{key}: `{v}` is not a number")))
        };
        let int = |v: &str| -> Result<usize> {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidParameter(format!("{key}: `{v}` is not a nonnegative integer")))
        };
        match key {
            "lambda" => self.lambda = num(value)?,
            "beta" => self.beta = num(value)?,
            "sel_temperature" => self.sel_temperature = num(value)?,
            "top_m" => self.top_m = int(value)?,
            "alt_iters" => self.alt_iters = int(value)?,
            "warm_start" => self.warm_start = WarmStart::parse(value)?,
            "epsilon_whiten" => self.epsilon_whiten = num(value)?,
            "tiebreak" => {
                self.tiebreak = match value.trim() {
                    "prob_desc_then_id_asc" => TieBreak::ProbDescThenIdAsc,
                    other => {
                        return Err(Error::InvalidParameter(format!(
                            "unknown tiebreak `{other}`; expected prob_desc_then_id_asc"
                        )))
                    }
                }
            }
            "sample_temperature" => {
                self.sample_temperature = match value.trim() {
                    "" | "none" => None,
                    v => Some(num(v)?),
                }
            }
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                    valid: Self::KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    /// Builds a config from `key=value` overrides on top of the defaults.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k.as_ref(), v.as_ref())?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub crop: Crop,
    pub iterations_used: usize,
    pub converged_early: bool,
    pub regime_per_iter: Vec<Regime>,
    pub gamma: f64,
    /// Entropy of the cropped distribution, in nats.
    pub crop_entropy: f64,
    pub elapsed: Duration,
    pub pool_size: usize,
}

impl StepReport {
    /// Final regime (the last S-step's).
    pub fn regime(&self) -> Regime {
        *self.regime_per_iter.last().expect("at least one iteration")
    }
}

fn prob_desc(p: &Dist) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| p.prob(b).total_cmp(&p.prob(a)).then(a.cmp(&b))
}

/// The `top_m` most probable tokens with positive probability, most probable
/// first (ties by token id).
pub fn candidate_pool(p: &Dist, top_m: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..p.len()).filter(|&i| p.prob(i) > 0.0).collect();
    let cmp = prob_desc(p);
    if top_m < pool.len() {
        if top_m > 0 {
            pool.select_nth_unstable_by(top_m - 1, &cmp);
        }
        pool.truncate(top_m);
    }
    pool.sort_unstable_by(&cmp);
    pool
}

/// Length of the warm-start prefix of a probability-sorted pool.
pub fn warm_start_len(p: &Dist, pool: &[usize], rule: WarmStart) -> usize {
    match rule {
        WarmStart::TopK(k) => k.min(pool.len()),
        WarmStart::Nucleus(t) => {
            let mut mass = 0.0;
            for (k, &i) in pool.iter().enumerate() {
                mass += p.prob(i);
                if mass >= t {
                    return k + 1;
                }
            }
            pool.len()
        }
    }
}

/// One uncached f-step and S-step: `f = -dist(., S)` over the pool, then the exact S-step.
pub fn alternation_step(
    p: &Dist,
    metric: &TokenMetric,
    pool: &[usize],
    set: &[usize],
    params: &ObjectiveParams,
    tiebreak: TieBreak,
) -> Result<SStepResult> {
    let f: Vec<f64> = metric.batched_dist_to_set(pool, set)?.into_iter().map(|d| -d).collect();
    let scored = combined_scores(p, pool, &f, params.lambda())?;
    s_step(&scored, params, tiebreak)
}

/// Squared distances from every pool token to individual pool tokens, filled on demand.
struct ColumnCache {
    cols: Vec<Vec<f64>>,
}

impl ColumnCache {
    fn new(pool_len: usize) -> Self {
        Self {
            cols: vec![Vec::new(); pool_len],
        }
    }

    /// `f[i] = -dist(pool[i], {pool[j] : j in set})`.
    fn potential(&mut self, metric: &TokenMetric, pool: &[usize], set: &[usize]) -> Vec<f64> {
        let missing: Vec<usize> = set.iter().copied().filter(|&j| self.cols[j].is_empty()).collect();
        if !missing.is_empty() {
            let mut fresh = vec![0.0; pool.len() * missing.len()];
            let targets: Vec<&[f64]> = missing.iter().map(|&j| metric.whitened_row(pool[j])).collect();
            let width = missing.len();
            for (i, &ti) in pool.iter().enumerate() {
                let next = pool.get(i + 1).map(|&t| metric.whitened_row(t));
                kernel::sq_dist_many(metric.whitened_row(ti), &targets, &mut fresh[i * width..(i + 1) * width], next);
            }
            for (c, &j) in missing.iter().enumerate() {
                self.cols[j] = fresh.iter().skip(c).step_by(width).copied().collect();
            }
        }
        let mut best = vec![f64::INFINITY; pool.len()];
        for &j in set {
            for (b, &d) in best.iter_mut().zip(&self.cols[j]) {
                *b = b.min(d);
            }
        }
        best.into_iter().map(|d| -d.sqrt()).collect()
    }
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let (mut x, mut y) = (a.to_vec(), b.to_vec());
    x.sort_unstable();
    y.sort_unstable();
    x == y
}

/// Runs the alternating decoder on one logits vector.
///
/// Returns the logits with every token outside the final crop set to negative
/// infinity, plus a report. Tokens inside keep their original values.
pub fn process_logits(logits: &[f32], metric: &TokenMetric, config: &TopWConfig) -> Result<(Vec<f32>, StepReport)> {
    let start = Instant::now();
    let warnings = config.validate()?;
    for w in &warnings {
        log::debug!("{w}");
    }
    if logits.len() != metric.len() {
        return Err(Error::Dimension(format!(
            "{} logits for a metric over {} tokens",
            logits.len(),
            metric.len()
        )));
    }
    let params = config.params()?;
    let p = Dist::from_logits(logits, config.sel_temperature)?;
    let pool = candidate_pool(&p, config.top_m);
    let mut set: Vec<usize> = (0..warm_start_len(&p, &pool, config.warm_start)).collect();
    let mut cache = ColumnCache::new(pool.len());
    let mut regimes = Vec::with_capacity(config.alt_iters);
    let mut converged_early = false;
    let mut last: Option<SStepResult> = None;
    for _ in 0..config.alt_iters {
        let f = cache.potential(metric, &pool, &set);
        let scored = scored_pool(&p, &pool, f, params.lambda());
        let step = s_step(&scored, &params, config.tiebreak)?;
        regimes.push(step.regime);
        let unchanged = same_set(&step.positions, &set);
        set = step.positions.clone();
        last = Some(step);
        if unchanged {
            converged_early = true;
            break;
        }
    }
    let step = last.expect("alt_iters >= 1");
    let mut masked = vec![f32::NEG_INFINITY; logits.len()];
    let mut plogp = 0.0;
    for &i in step.crop.members() {
        masked[i] = logits[i];
        plogp += p.prob(i) * p.logprob(i);
    }
    let gamma = step.crop.gamma();
    let crop_entropy = if step.crop.len() == 1 { 0.0 } else { (gamma.ln() - plogp / gamma).max(0.0) };
    let report = StepReport {
        iterations_used: regimes.len(),
        converged_early,
        regime_per_iter: regimes,
        gamma,
        crop_entropy,
        crop: step.crop,
        elapsed: start.elapsed(),
        pool_size: pool.len(),
    };
    Ok((masked, report))
}

/// Pool scores built directly: every pool token has positive probability.
fn scored_pool(p: &Dist, pool: &[usize], f: Vec<f64>, lambda: f64) -> ScoredPool {
    let probs: Vec<f64> = pool.iter().map(|&i| p.prob(i)).collect();
    let logprobs: Vec<f64> = pool.iter().map(|&i| p.logprob(i)).collect();
    let phi = f.iter().zip(&logprobs).map(|(f, lp)| f + lambda * lp).collect();
    ScoredPool {
        tokens: pool.to_vec(),
        probs,
        logprobs,
        potential: f,
        phi,
        lambda,
        dropped: 0,
    }
}

/// Draws a token from the softmax of the masked logits at `temperature`.
/// Deterministic for a given seed.
pub fn sample_from_masked(masked: &[f32], temperature: f64, seed: u64) -> Result<usize> {
    let q = Dist::from_logits(masked, temperature)?;
    let index = WeightedIndex::new(q.probs()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index.sample(&mut rng))
}

/// Outcome of comparing a pooled prefix scan with the full-vocabulary scan.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutcome {
    Identical { k: usize },
    Mismatch { full_k: usize, pooled_k: usize },
    /// The pool misses part of the full optimum's prefix, so exactness is not promised.
    HypothesisViolated { full_k: usize },
}

/// Pool of the `top_m` best tokens in score order, compared against the full scan.
pub fn pool_exactness_probe(
    full: &ScoredPool,
    top_m: usize,
    params: &ObjectiveParams,
    tiebreak: TieBreak,
) -> Result<ProbeOutcome> {
    let scan = prefix_scan(full, params.mass_weight(), tiebreak)?;
    let take = top_m.min(full.len());
    pool_exactness_probe_with(full, &scan.order[..take], params, tiebreak)
}

/// As [`pool_exactness_probe`] with an explicit pool given as positions into `full`.
pub fn pool_exactness_probe_with(
    full: &ScoredPool,
    pool: &[usize],
    params: &ObjectiveParams,
    tiebreak: TieBreak,
) -> Result<ProbeOutcome> {
    let c = params.mass_weight();
    let scan = prefix_scan(full, c, tiebreak)?;
    let full_k = scan.best_k;
    if !scan.order[..full_k].iter().all(|k| pool.contains(k)) {
        return Ok(ProbeOutcome::HypothesisViolated { full_k });
    }
    let sub = full.select(pool);
    let pooled = prefix_scan(&sub, c, tiebreak)?;
    let full_set: Vec<usize> = scan.best_positions().iter().map(|&k| full.tokens[k]).collect();
    let pooled_set: Vec<usize> = pooled.best_positions().iter().map(|&k| sub.tokens[k]).collect();
    if pooled.best_k == full_k && full_set == pooled_set {
        Ok(ProbeOutcome::Identical { k: full_k })
    } else {
        Ok(ProbeOutcome::Mismatch {
            full_k,
            pooled_k: pooled.best_k,
        })
    }
}
