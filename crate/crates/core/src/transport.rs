//! Exact Wasserstein-1 on small supports and Kantorovich-Rubinstein dual checks.
//!
//! These routines are test oracles: the transport problem is solved exactly by
//! successive shortest paths on a dense bipartite network, which is only
//! affordable for supports of a few dozen tokens.

use crate::error::{Error, Result};
use crate::geometry::TokenMetric;
use crate::simplex::{conditional, crop, validate_set, Dist};

/// Largest joint support accepted by [`w1_exact`].
pub const EXACT_SUPPORT_CAP: usize = 64;

/// Masses below this are dropped from transport supports.
pub const MASS_FLOOR: f64 = 1e-15;

const LIPSCHITZ_SLACK: f64 = 1e-9;

/// A finite metric space over token ids `0..len()`.
pub trait GroundMetric {
    fn len(&self) -> usize;

    fn distance(&self, i: usize, j: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GroundMetric for TokenMetric {
    fn len(&self) -> usize {
        TokenMetric::len(self)
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.sq_dist(i, j).sqrt()
    }
}

/// The discrete 0-1 metric.
#[derive(Debug, Clone, Copy)]
pub struct UniformMetric {
    n: usize,
}

impl UniformMetric {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl GroundMetric for UniformMetric {
    fn len(&self) -> usize {
        self.n
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            1.0
        }
    }
}

/// An explicit symmetric distance table. The caller is responsible for the
/// metric axioms.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Dimension(format!(
                "distance table for {n} tokens needs {} entries, got {}",
                n * n,
                d.len()
            )));
        }
        Ok(Self { n, d })
    }

    /// Tabulates any other metric (optionally scaled).
    pub fn tabulate<M: GroundMetric>(metric: &M, scale: f64) -> Self {
        let n = metric.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = scale * metric.distance(i, j);
            }
        }
        Self { n, d }
    }
}

impl GroundMetric for DistanceMatrix {
    fn len(&self) -> usize {
        self.n
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// An optimal coupling restricted to the supports of the two marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Row-major `sources.len() x targets.len()` flow matrix.
    pub flows: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn flow(&self, a: usize, b: usize) -> f64 {
        self.flows[a * self.targets.len() + b]
    }
}

/// Optimal dual variables of the transportation problem:
/// `u[a] + v[b] <= d(sources[a], targets[b])` with equality on the support of the plan.
#[derive(Debug, Clone)]
pub struct TransportDual {
    pub source_potential: Vec<f64>,
    pub target_potential: Vec<f64>,
}

fn supported(p: &Dist) -> Vec<usize> {
    (0..p.len()).filter(|&i| p.prob(i) >= MASS_FLOOR).collect()
}

fn check_inputs<M: GroundMetric>(p: &Dist, q: &Dist, metric: &M) -> Result<(Vec<usize>, Vec<usize>)> {
    if p.len() != q.len() || p.len() != metric.len() {
        return Err(Error::Dimension(format!(
            "distributions of length {} and {} over a metric of {} tokens",
            p.len(),
            q.len(),
            metric.len()
        )));
    }
    let sources = supported(p);
    let targets = supported(q);
    let mut joint = vec![false; p.len()];
    sources.iter().chain(&targets).for_each(|&i| joint[i] = true);
    let size = joint.iter().filter(|&&b| b).count();
    if size > EXACT_SUPPORT_CAP {
        return Err(Error::SupportTooLarge { size, cap: EXACT_SUPPORT_CAP });
    }
    Ok((sources, targets))
}

/// Successive shortest paths on the bipartite network with uncapacitated
/// source-to-target arcs. Returns the plan and optimal duals.
fn solve_transport<M: GroundMetric>(
    supply: &[f64],
    sources: &[usize],
    demand: &[f64],
    targets: &[usize],
    metric: &M,
) -> (TransportPlan, TransportDual) {
    let (a, b) = (sources.len(), targets.len());
    let cost: Vec<f64> = sources
        .iter()
        .flat_map(|&i| targets.iter().map(move |&j| metric.distance(i, j)))
        .collect();
    let mut flow = vec![0.0f64; a * b];
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let nodes = a + b;

    // Residual arcs: source->target always, target->source while flow > floor.
    let shortest = |flow: &[f64], roots: &dyn Fn(usize) -> bool| {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut parent = vec![usize::MAX; nodes];
        for (s, d) in dist.iter_mut().enumerate().take(a) {
            if roots(s) {
                *d = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for s in 0..a {
                if dist[s].is_finite() {
                    for t in 0..b {
                        let nd = dist[s] + cost[s * b + t];
                        if nd < dist[a + t] - 1e-14 {
                            dist[a + t] = nd;
                            parent[a + t] = s;
                            changed = true;
                        }
                    }
                }
            }
            for t in 0..b {
                if dist[a + t].is_finite() {
                    for s in 0..a {
                        if flow[s * b + t] > MASS_FLOOR {
                            let nd = dist[a + t] - cost[s * b + t];
                            if nd < dist[s] - 1e-14 {
                                dist[s] = nd;
                                parent[s] = a + t;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (dist, parent)
    };

    loop {
        if supply.iter().all(|&s| s < MASS_FLOOR) || demand.iter().all(|&d| d < MASS_FLOOR) {
            break;
        }
        let (dist, parent) = shortest(&flow, &|s| supply[s] >= MASS_FLOOR);
        let Some(t) = (0..b)
            .filter(|&t| demand[t] >= MASS_FLOOR && dist[a + t].is_finite())
            .min_by(|&x, &y| dist[a + x].total_cmp(&dist[a + y]))
        else {
            break;
        };

        // Walk back to the root source, collecting the bottleneck.
        let mut amount = demand[t];
        let mut node = a + t;
        loop {
            let prev = parent[node];
            if node >= a {
                node = prev;
            } else if prev == usize::MAX {
                amount = amount.min(supply[node]);
                break;
            } else {
                let tt = prev - a;
                amount = amount.min(flow[node * b + tt]);
                node = prev;
            }
        }
        let root = node;
        let mut node = a + t;
        while node != root {
            let prev = parent[node];
            if node >= a {
                flow[prev * b + (node - a)] += amount;
            } else {
                let tt = prev - a;
                flow[node * b + tt] = (flow[node * b + tt] - amount).max(0.0);
            }
            node = prev;
        }
        supply[root] -= amount;
        demand[t] -= amount;
    }

    // Potentials from shortest paths on the final residual graph, rooted at every node.
    let (pi, _) = shortest(&flow, &|_| true);
    let mut pi = pi;
    for t in 0..b {
        if !pi[a + t].is_finite() {
            pi[a + t] = 0.0;
        }
    }
    let dual = TransportDual {
        source_potential: pi[..a].iter().map(|x| -x).collect(),
        target_potential: pi[a..].to_vec(),
    };
    let total = flow.iter().zip(&cost).map(|(f, c)| f * c).sum();
    (
        TransportPlan {
            sources: sources.to_vec(),
            targets: targets.to_vec(),
            flows: flow,
            cost: total,
        },
        dual,
    )
}

/// Exact `W1(p, q)` under `metric` together with an optimal plan.
pub fn w1_exact<M: GroundMetric>(p: &Dist, q: &Dist, metric: &M) -> Result<(f64, TransportPlan)> {
    let (plan, _) = w1_exact_with_dual(p, q, metric)?;
    Ok((plan.cost, plan))
}

/// Exact `W1(p, q)` with its optimal plan and transportation duals.
pub fn w1_exact_with_dual<M: GroundMetric>(
    p: &Dist,
    q: &Dist,
    metric: &M,
) -> Result<(TransportPlan, TransportDual)> {
    let (sources, targets) = check_inputs(p, q, metric)?;
    let supply: Vec<f64> = sources.iter().map(|&i| p.prob(i)).collect();
    let demand: Vec<f64> = targets.iter().map(|&j| q.prob(j)).collect();
    Ok(solve_transport(&supply, &sources, &demand, &targets, metric))
}

/// An optimal 1-Lipschitz potential over the whole vocabulary, obtained as the
/// c-transform `f(x) = min_b (d(x, targets[b]) - v[b])` of the optimal target duals.
pub fn kr_optimal_potential<M: GroundMetric>(p: &Dist, q: &Dist, metric: &M) -> Result<(f64, Vec<f64>)> {
    let (plan, dual) = w1_exact_with_dual(p, q, metric)?;
    let f = (0..metric.len())
        .map(|x| {
            plan.targets
                .iter()
                .zip(&dual.target_potential)
                .map(|(&j, v)| metric.distance(x, j) - v)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok((plan.cost, f))
}

/// Closed form of `W1(p, q_S)` under the 0-1 metric: `1 - Gamma_S`.
pub fn w1_uniform_metric(p: &Dist, set: &[usize]) -> Result<f64> {
    let gamma = p.mass(set)?;
    if gamma <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(1.0 - gamma)
}

/// Outcome of an exhaustive Lipschitz scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub feasible: bool,
    /// Pair with the largest `|f(i) - f(j)| - d(i, j)` (token ids), if any pair was checked.
    pub worst: Option<(usize, usize, f64)>,
}

/// Checks `|f(i) - f(j)| <= d(i, j) (1 + 1e-9)` over all pairs of `tokens`.
///
/// `values[k]` is the potential at `tokens[k]`.
pub fn check_lipschitz<M: GroundMetric>(values: &[f64], tokens: &[usize], metric: &M) -> LipschitzCheck {
    assert_eq!(values.len(), tokens.len(), "one value per token");
    let mut feasible = true;
    let mut worst: Option<(usize, usize, f64)> = None;
    for a in 0..tokens.len() {
        for b in a + 1..tokens.len() {
            let d = metric.distance(tokens[a], tokens[b]);
            let gap = (values[a] - values[b]).abs();
            if !(gap <= d * (1.0 + LIPSCHITZ_SLACK)) {
                feasible = false;
            }
            let excess = gap - d;
            if worst.is_none_or(|(_, _, e)| excess > e) {
                worst = Some((tokens[a], tokens[b], excess));
            }
        }
    }
    LipschitzCheck { feasible, worst }
}

fn lipschitz_error<M: GroundMetric>(values: &[f64], tokens: &[usize], metric: &M) -> Result<()> {
    let check = check_lipschitz(values, tokens, metric);
    if check.feasible {
        return Ok(());
    }
    let (i, j, _) = check.worst.expect("infeasible check has a worst pair");
    let (a, b) = (
        tokens.iter().position(|&t| t == i).unwrap(),
        tokens.iter().position(|&t| t == j).unwrap(),
    );
    Err(Error::NotLipschitz {
        i,
        j,
        gap: (values[a] - values[b]).abs(),
        dist: metric.distance(i, j),
    })
}

/// `|W1(p, q_S) - (1 - Gamma_S) W1(p(.|S^c), p(.|S))|`, both sides solved exactly.
pub fn factorization_residual<M: GroundMetric>(p: &Dist, set: &[usize], metric: &M) -> Result<f64> {
    let gamma = p.mass(set)?;
    let rest = p.complement(set)?;
    let outside: f64 = rest.iter().map(|&i| p.prob(i)).sum();
    if gamma <= 0.0 || rest.is_empty() || outside <= 0.0 {
        return Err(Error::Hypothesis(format!(
            "factorization needs 0 < Gamma_S < 1, got retained mass {gamma}"
        )));
    }
    let (_, q) = crop(p, set)?;
    let (lhs, _) = w1_exact(p, &q, metric)?;
    let inner = conditional(p, set)?;
    let outer = conditional(p, &rest)?;
    let (between, _) = w1_exact(&outer, &inner, metric)?;
    Ok((lhs - (1.0 - gamma) * between).abs())
}

/// Duality slack `W1(P, Q) - (E_P f - E_Q f)` of a feasible potential `f`
/// indexed by token id.
pub fn kr_dual_gap<M: GroundMetric>(p: &Dist, q: &Dist, f: &[f64], metric: &M) -> Result<f64> {
    if f.len() != metric.len() {
        return Err(Error::Dimension(format!(
            "potential has {} entries for {} tokens",
            f.len(),
            metric.len()
        )));
    }
    let (w1, plan) = w1_exact(p, q, metric)?;
    let mut joint: Vec<usize> = plan.sources.iter().chain(&plan.targets).copied().collect();
    joint.sort_unstable();
    joint.dedup();
    let values: Vec<f64> = joint.iter().map(|&i| f[i]).collect();
    lipschitz_error(&values, &joint, metric)?;
    let ep: f64 = (0..p.len()).filter(|&i| p.prob(i) > 0.0).map(|i| p.prob(i) * f[i]).sum();
    let eq: f64 = (0..q.len()).filter(|&i| q.prob(i) > 0.0).map(|i| q.prob(i) * f[i]).sum();
    Ok(w1 - (ep - eq))
}

/// Validates a vocabulary-indexed potential over `tokens`, for callers outside this module.
pub fn require_lipschitz<M: GroundMetric>(values: &[f64], tokens: &[usize], metric: &M) -> Result<()> {
    validate_set(tokens, metric.len())?;
    lipschitz_error(values, tokens, metric)
}
