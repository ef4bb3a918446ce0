//! Probability-only truncation rules sharing the decoder's masking interface.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::objective::{eval_f_uniform, ObjectiveParams};
use crate::simplex::{crop, entropy, Crop, Dist};

/// Largest vocabulary accepted by the exhaustive checks.
pub const EXHAUSTIVE_CAP: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineRule {
    TopK(usize),
    TopP(f64),
    MinP(f64),
    /// Entropy cap as a fraction of `H(p)`.
    TopH(f64),
}

impl BaselineRule {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        match *self {
            BaselineRule::TopK(0) => Err(Error::InvalidParameter("top_k needs k >= 1".into())),
            BaselineRule::TopK(_) => Ok(()),
            BaselineRule::TopP(t) => unit("top_p threshold", t),
            BaselineRule::MinP(r) => unit("min_p ratio", r),
            BaselineRule::TopH(a) => unit("top_h alpha", a),
        }
    }

    pub fn name(&self) -> String {
        match self {
            BaselineRule::TopK(k) => format!("top_k:{k}"),
            BaselineRule::TopP(t) => format!("top_p:{t}"),
            BaselineRule::MinP(r) => format!("min_p:{r}"),
            BaselineRule::TopH(a) => format!("top_h:{a}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub rule: BaselineRule,
    pub sel_temperature: f64,
}

impl BaselineConfig {
    pub fn new(rule: BaselineRule) -> Self {
        Self {
            rule,
            sel_temperature: 1.0,
        }
    }
}

fn by_prob_desc(p: &Dist) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| p.prob(b).total_cmp(&p.prob(a)).then(a.cmp(&b))
}

/// Positive-probability tokens sorted most probable first.
fn sorted_support(p: &Dist) -> Vec<usize> {
    let mut order = p.support();
    order.sort_unstable_by(by_prob_desc(p));
    order
}

/// Applies a rule to a distribution. Members are listed most probable first.
pub fn select_baseline(p: &Dist, rule: BaselineRule) -> Result<Crop> {
    rule.validate()?;
    let members = match rule {
        BaselineRule::TopK(k) => {
            let mut s = p.support();
            let cmp = by_prob_desc(p);
            if k < s.len() {
                s.select_nth_unstable_by(k - 1, &cmp);
                s.truncate(k);
            }
            s.sort_unstable_by(&cmp);
            s
        }
        BaselineRule::TopP(t) => {
            let order = sorted_support(p);
            let mut mass = 0.0;
            let mut keep = order.len();
            for (k, &i) in order.iter().enumerate() {
                mass += p.prob(i);
                if mass >= t {
                    keep = k + 1;
                    break;
                }
            }
            order[..keep].to_vec()
        }
        BaselineRule::MinP(r) => {
            let max = p.probs().iter().copied().fold(0.0, f64::max);
            let mut s: Vec<usize> = (0..p.len()).filter(|&i| p.prob(i) > 0.0 && p.prob(i) >= r * max).collect();
            s.sort_unstable_by(by_prob_desc(p));
            s
        }
        BaselineRule::TopH(alpha) => {
            let order = sorted_support(p);
            let cap = alpha * entropy(p);
            let (mut gamma, mut plogp) = (0.0, 0.0);
            let mut keep = 0;
            for &i in &order {
                let (g, a) = (gamma + p.prob(i), plogp + p.prob(i) * p.logprob(i));
                let h = (g.ln() - a / g).max(0.0);
                if keep > 0 && h > cap {
                    break;
                }
                gamma = g;
                plogp = a;
                keep += 1;
            }
            order[..keep].to_vec()
        }
    };
    Crop::new(p, members)
}

/// Softmax at the configured temperature, rule selection and masking.
pub fn apply_baseline(logits: &[f32], config: &BaselineConfig) -> Result<(Vec<f32>, Crop)> {
    let p = Dist::from_logits(logits, config.sel_temperature)?;
    let c = select_baseline(&p, config.rule)?;
    let mut masked = vec![f32::NEG_INFINITY; logits.len()];
    for &i in c.members() {
        masked[i] = logits[i];
    }
    Ok((masked, c))
}

fn check_small(p: &Dist) -> Result<()> {
    if p.len() > EXHAUSTIVE_CAP {
        return Err(Error::PoolTooLarge {
            size: p.len(),
            cap: EXHAUSTIVE_CAP,
        });
    }
    Ok(())
}

fn nonempty_subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (1u32..(1u32 << n)).map(move |mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect())
}

/// Exhaustively minimizes `F` with `lambda = beta = 0` under the 0-1 metric
/// over sets of at most `k` tokens, and reports whether the minimizer's
/// probabilities equal those of the top-k tokens.
pub fn topk_reduction_check(p: &Dist, k: usize) -> Result<bool> {
    check_small(p)?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let params = ObjectiveParams::new(0.0, 0.0)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for s in nonempty_subsets(p.len()).filter(|s| s.len() <= k) {
        if p.mass(&s)? <= 0.0 {
            continue;
        }
        let v = eval_f_uniform(p, &s, &params)?;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, s));
        }
    }
    let (_, set) = best.ok_or(Error::ZeroMass)?;
    let mut top = p.probs().to_vec();
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    top.truncate(k);
    let mut got: Vec<f64> = set.iter().map(|&i| p.prob(i)).collect();
    got.sort_unstable_by(|a, b| b.total_cmp(a));
    // Zero-probability padding does not change the set's mass.
    got.resize(top.len(), 0.0);
    Ok(got == top)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopHReport {
    /// Exhaustive minimizer of `F` with `beta = 0` under the 0-1 metric, sorted.
    pub set: Vec<usize>,
    pub gamma: f64,
    pub entropy: f64,
    /// No subset has both strictly more mass and strictly less cropped entropy.
    pub undominated: bool,
}

/// Minimizes `F` with `beta = 0` under the 0-1 metric by enumeration and
/// checks that the minimizer is Pareto-optimal in (mass, -entropy).
pub fn toph_lagrangian_check(p: &Dist, lambda: f64) -> Result<TopHReport> {
    check_small(p)?;
    let params = ObjectiveParams::new(lambda, 0.0)?;
    let mut stats = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for s in nonempty_subsets(p.len()) {
        let gamma = p.mass(&s)?;
        if gamma <= 0.0 {
            continue;
        }
        let v = eval_f_uniform(p, &s, &params)?;
        let h = entropy(&crop(p, &s)?.1);
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, stats.len()));
        }
        stats.push((s, gamma, h));
    }
    let (_, at) = best.ok_or(Error::ZeroMass)?;
    let (set, gamma, h) = stats[at].clone();
    const SLACK: f64 = 1e-12;
    let undominated = !stats.iter().any(|(_, g, e)| *g > gamma + SLACK && *e < h - SLACK);
    Ok(TopHReport {
        set,
        gamma,
        entropy: h,
        undominated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> Dist {
        Dist::from_probs(v.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Dist {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-4).collect();
        Dist::from_weights(&w).unwrap()
    }

    #[test]
    fn rule_cases() {
        let p = dist(&[0.5, 0.3, 0.15, 0.05]);
        assert_eq!(select_baseline(&p, BaselineRule::TopK(1)).unwrap().members(), &[0]);
        assert_eq!(select_baseline(&p, BaselineRule::TopK(9)).unwrap().len(), 4);
        assert_eq!(select_baseline(&p, BaselineRule::TopP(1.0)).unwrap().len(), 4);
        assert_eq!(select_baseline(&p, BaselineRule::TopP(0.8)).unwrap().members(), &[0, 1]);
        assert_eq!(select_baseline(&p, BaselineRule::TopP(0.81)).unwrap().members(), &[0, 1, 2]);
        assert_eq!(select_baseline(&p, BaselineRule::MinP(0.1)).unwrap().members(), &[0, 1, 2, 3]);
        assert_eq!(select_baseline(&p, BaselineRule::MinP(0.2)).unwrap().members(), &[0, 1, 2]);
        assert_eq!(select_baseline(&p, BaselineRule::TopH(1.0)).unwrap().len(), 4);
        assert_eq!(select_baseline(&p, BaselineRule::TopH(1e-9)).unwrap().members(), &[0]);
        for bad in [
            BaselineRule::TopK(0),
            BaselineRule::TopP(0.0),
            BaselineRule::MinP(1.5),
            BaselineRule::TopH(-0.1),
        ] {
            assert!(select_baseline(&p, bad).is_err());
        }
    }

    #[test]
    fn masking() {
        let logits = [0.5f32, 2.0, -1.0, 1.0];
        let (masked, c) = apply_baseline(&logits, &BaselineConfig::new(BaselineRule::TopK(2))).unwrap();
        assert_eq!(c.members(), &[1, 3]);
        assert_eq!(masked, vec![f32::NEG_INFINITY, 2.0, f32::NEG_INFINITY, 1.0]);
    }

    #[test]
    fn argmax_always_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let n = rng.random_range(1..40);
            let p = random_dist(&mut rng, n);
            let argmax = (0..n).max_by(|&a, &b| p.prob(a).total_cmp(&p.prob(b)).then(b.cmp(&a))).unwrap();
            for rule in [
                BaselineRule::TopK(rng.random_range(1..5)),
                BaselineRule::TopP(rng.random_range(0.01..1.0)),
                BaselineRule::MinP(rng.random_range(0.01..1.0)),
                BaselineRule::TopH(rng.random_range(0.01..1.0)),
            ] {
                assert!(select_baseline(&p, rule).unwrap().contains(argmax), "{rule:?}");
            }
        }
    }

    #[test]
    fn top_h_is_feasible_and_bounded_by_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let n = rng.random_range(1..9);
            let p = random_dist(&mut rng, n);
            let alpha = rng.random_range(0.05..1.0);
            let cap = alpha * entropy(&p);
            let greedy = select_baseline(&p, BaselineRule::TopH(alpha)).unwrap();
            let h = entropy(&crop(&p, greedy.members()).unwrap().1);
            assert!(greedy.len() == 1 || h <= cap + 1e-12);
            let best = nonempty_subsets(n)
                .filter(|s| entropy(&crop(&p, s).unwrap().1) <= cap)
                .map(|s| p.mass(&s).unwrap())
                .fold(0.0, f64::max);
            assert!(greedy.gamma() <= best + 1e-12 || greedy.len() == 1);
        }
    }

    #[test]
    fn topk_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = random_dist(&mut rng, 6);
        assert!(topk_reduction_check(&p, 6).unwrap());
        assert!(topk_reduction_check(&p, 1).unwrap());
        for _ in 0..30 {
            let p = random_dist(&mut rng, 8);
            assert!(topk_reduction_check(&p, 3).unwrap());
        }
        assert!(topk_reduction_check(&Dist::uniform(15).unwrap(), 2).is_err());
    }

    #[test]
    fn toph_lagrangian() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = random_dist(&mut rng, 7);
        let r = toph_lagrangian_check(&p, 0.0).unwrap();
        assert_eq!(r.set, (0..7).collect::<Vec<_>>());
        let r = toph_lagrangian_check(&p, 1e4).unwrap();
        let argmax = (0..7).max_by(|&a, &b| p.prob(a).total_cmp(&p.prob(b))).unwrap();
        assert_eq!(r.set, vec![argmax]);
        for _ in 0..20 {
            let p = random_dist(&mut rng, 8);
            assert!(toph_lagrangian_check(&p, 1.0).unwrap().undominated);
        }
    }
}
