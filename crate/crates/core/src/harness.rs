//! Batch evaluation of truncation rules over a trace: per-step statistics,
//! parameter sweeps and latency measurements.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{apply_baseline, BaselineConfig, BaselineRule};
use crate::decoder::{process_logits, TopWConfig};
use crate::error::{Error, Result};
use crate::geometry::{build_metric, TokenMetric};
use crate::simplex::{entropy, Dist};
use crate::trace::TraceBundle;

/// A truncation rule as named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    TopW(TopWConfig),
    Baseline(BaselineConfig),
}

impl Rule {
    /// Parses `topw[:key=value,...]`, `top_k:K`, `top_p:P`, `min_p:R` or
    /// `top_h:A`. Baselines use `sel_temperature`; Top-W uses it unless its
    /// own overrides set it.
    pub fn parse(text: &str, sel_temperature: f64) -> Result<Rule> {
        let text = text.trim();
        let (head, tail) = match text.split_once(':') {
            Some((h, t)) => (h.trim(), Some(t.trim())),
            None => (text, None),
        };
        let usage = || {
            Error::InvalidParameter(format!(
                "rule `{text}` is not one of topw[:key=value,...], top_k:K, top_p:P, min_p:R, top_h:A"
            ))
        };
        if head == "topw" {
            let mut config = TopWConfig {
                sel_temperature,
                ..TopWConfig::default()
            };
            for pair in tail.unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (k, v) = pair.split_once('=').ok_or_else(usage)?;
                config.set(k.trim(), v.trim())?;
            }
            config.validate()?;
            return Ok(Rule::TopW(config));
        }
        let value = tail.ok_or_else(usage)?;
        let real = || value.parse::<f64>().map_err(|_| usage());
        let rule = match head {
            "top_k" => BaselineRule::TopK(value.parse().map_err(|_| usage())?),
            "top_p" => BaselineRule::TopP(real()?),
            "min_p" => BaselineRule::MinP(real()?),
            "top_h" => BaselineRule::TopH(real()?),
            _ => return Err(usage()),
        };
        rule.validate()?;
        if !(sel_temperature.is_finite() && sel_temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sel_temperature must be finite and positive, got {sel_temperature}"
            )));
        }
        Ok(Rule::Baseline(BaselineConfig { rule, sel_temperature }))
    }
}

/// A parsed rule with the label used in output tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedRule {
    pub name: String,
    pub rule: Rule,
}

impl NamedRule {
    pub fn parse(text: &str, sel_temperature: f64) -> Result<Self> {
        Ok(Self {
            name: text.trim().to_string(),
            rule: Rule::parse(text, sel_temperature)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStatsRow {
    pub step: usize,
    pub rule: String,
    pub crop_size: usize,
    pub gamma: f64,
    pub crop_entropy: f64,
    pub regime: String,
    pub iterations_used: usize,
    pub elapsed_us: f64,
}

/// Metrics keyed by whitening regularizer, built on first use.
struct Metrics<'a> {
    trace: &'a TraceBundle,
    built: Vec<(f64, TokenMetric)>,
}

impl<'a> Metrics<'a> {
    fn new(trace: &'a TraceBundle) -> Self {
        Self { trace, built: Vec::new() }
    }

    fn get(&mut self, epsilon: f64) -> Result<&TokenMetric> {
        if let Some(k) = self.built.iter().position(|(e, _)| *e == epsilon) {
            return Ok(&self.built[k].1);
        }
        let m = build_metric(&self.trace.embeddings, epsilon)?;
        self.built.push((epsilon, m));
        Ok(&self.built.last().expect("just pushed").1)
    }
}

/// Output of one rule on one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub masked: Vec<f32>,
    pub row: StepStatsRow,
}

fn apply_rule(name: &str, rule: &Rule, step: usize, logits: &[f32], metrics: &mut Metrics) -> Result<StepOutcome> {
    match rule {
        Rule::TopW(config) => {
            let metric = metrics.get(config.epsilon_whiten)?;
            let (masked, report) = process_logits(logits, metric, config)?;
            Ok(StepOutcome {
                masked,
                row: StepStatsRow {
                    step,
                    rule: name.to_string(),
                    crop_size: report.crop.len(),
                    gamma: report.gamma,
                    crop_entropy: report.crop_entropy,
                    regime: report.regime().as_str().to_string(),
                    iterations_used: report.iterations_used,
                    elapsed_us: report.elapsed.as_secs_f64() * 1e6,
                },
            })
        }
        Rule::Baseline(config) => {
            let start = Instant::now();
            let (masked, crop) = apply_baseline(logits, config)?;
            let elapsed = start.elapsed();
            let p = Dist::from_logits(logits, config.sel_temperature)?;
            let q = crate::simplex::crop(&p, crop.members())?.1;
            Ok(StepOutcome {
                masked,
                row: StepStatsRow {
                    step,
                    rule: name.to_string(),
                    crop_size: crop.len(),
                    gamma: crop.gamma(),
                    crop_entropy: entropy(&q),
                    regime: "baseline".into(),
                    iterations_used: 0,
                    elapsed_us: elapsed.as_secs_f64() * 1e6,
                },
            })
        }
    }
}

/// Applies every rule to every step, in step-major order. Golden mode zeroes
/// the timing column.
pub fn run_outcomes(trace: &TraceBundle, rules: &[NamedRule], golden: bool) -> Result<Vec<StepOutcome>> {
    if rules.is_empty() {
        return Err(Error::InvalidParameter("at least one rule is required".into()));
    }
    let mut metrics = Metrics::new(trace);
    let mut out = Vec::with_capacity(trace.steps() * rules.len());
    for t in 0..trace.steps() {
        for r in rules {
            let mut o = apply_rule(&r.name, &r.rule, t, trace.step(t), &mut metrics)?;
            if golden {
                o.row.elapsed_us = 0.0;
            }
            out.push(o);
        }
    }
    Ok(out)
}

pub fn run(trace: &TraceBundle, rules: &[NamedRule], golden: bool) -> Result<Vec<StepStatsRow>> {
    Ok(run_outcomes(trace, rules, golden)?.into_iter().map(|o| o.row).collect())
}

/// Writes rows as CSV with a header and LF line endings.
pub fn write_csv<R: Serialize, W: Write>(rows: &[R], sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_csv_file<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub beta: f64,
    pub mean_gamma: f64,
    pub mean_crop_size: f64,
    pub mean_crop_entropy: f64,
    /// For `beta >= lambda` after the first such grid point: whether every
    /// step's retained mass is at least its value at the previous `beta`.
    /// Empty otherwise.
    pub gamma_nondecreasing: Option<bool>,
}

/// Runs the Top-W rule over a lambda x beta grid. With `alt_iters = 1` the
/// potential is fixed by the shared warm start, so retained mass must be
/// nondecreasing in `beta`; a violation is an error. With more iterations the
/// trend is only reported.
pub fn sweep(trace: &TraceBundle, base: &TopWConfig, lambdas: &[f64], betas: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidParameter("sweep grids must be nonempty".into()));
    }
    let mut betas = betas.to_vec();
    betas.sort_by(f64::total_cmp);
    let metric = build_metric(&trace.embeddings, base.epsilon_whiten)?;
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut previous: Option<Vec<f64>> = None;
        for &beta in &betas {
            let config = TopWConfig { lambda, beta, ..base.clone() };
            config.validate()?;
            let (mut g, mut k, mut h) = (Vec::new(), 0.0, 0.0);
            for t in 0..trace.steps() {
                let (_, r) = process_logits(trace.step(t), &metric, &config)?;
                g.push(r.gamma);
                k += r.crop.len() as f64;
                h += r.crop_entropy;
            }
            let steps = trace.steps() as f64;
            let mut monotone = None;
            if beta >= lambda {
                if let Some(prev) = &previous {
                    let ok = g.iter().zip(prev).all(|(now, before)| now >= before);
                    if !ok && config.alt_iters == 1 {
                        return Err(Error::Hypothesis(format!(
                            "retained mass decreased in beta at lambda={lambda}, beta={beta}"
                        )));
                    }
                    monotone = Some(ok);
                }
                previous = Some(g.clone());
            }
            rows.push(SweepRow {
                lambda,
                beta,
                mean_gamma: g.iter().sum::<f64>() / steps,
                mean_crop_size: k / steps,
                mean_crop_entropy: h / steps,
                gamma_nondecreasing: monotone,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub rule: String,
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

/// Summary statistics of per-call latencies in microseconds.
pub fn latency_summary(rule: &str, samples: &mut [f64]) -> BenchRow {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    BenchRow {
        rule: rule.to_string(),
        samples: n,
        mean_us: samples.iter().sum::<f64>() / n as f64,
        median_us: median,
        p99_us: samples[rank - 1],
    }
}

/// Times each rule over all steps, `repeats` times, after `warmup` untimed
/// passes. Metric construction happens before timing starts.
pub fn bench(trace: &TraceBundle, rules: &[NamedRule], repeats: usize, warmup: usize) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::InvalidParameter(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    if rules.is_empty() {
        return Err(Error::InvalidParameter("at least one rule is required".into()));
    }
    let mut metrics = Metrics::new(trace);
    for r in rules {
        if let Rule::TopW(c) = &r.rule {
            metrics.get(c.epsilon_whiten)?;
        }
    }
    let mut rows = Vec::new();
    for r in rules {
        let mut samples = Vec::with_capacity(repeats * trace.steps());
        for pass in 0..warmup + repeats {
            for t in 0..trace.steps() {
                let logits = trace.step(t);
                let start = Instant::now();
                match &r.rule {
                    Rule::TopW(c) => {
                        std::hint::black_box(process_logits(logits, metrics.get(c.epsilon_whiten)?, c)?);
                    }
                    Rule::Baseline(c) => {
                        std::hint::black_box(apply_baseline(logits, c)?);
                    }
                }
                let us = start.elapsed().as_secs_f64() * 1e6;
                if pass >= warmup {
                    samples.push(us);
                }
            }
        }
        rows.push(latency_summary(&r.name, &mut samples));
    }
    Ok(rows)
}
