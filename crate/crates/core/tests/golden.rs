use std::path::PathBuf;

use sha2::{Digest, Sha256};
use topw::harness::{self, NamedRule};
use topw::simplex::{crop, entropy};
use topw::{build_metric, load_trace, process_logits, Dist, EmbeddingMatrix, Regime, TopWConfig};

const BUNDLE_SHA256: &str = "01a346bff928e29c23e1adbb76803348ba57b4b32e2f01604ec6fb9ef1b06682";
const GOLDEN_RULES: [&str; 6] = ["topw", "top_k:2", "top_p:0.9", "min_p:0.1", "top_h:0.5", "topw:beta=2.2"];

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn five_token_metric() -> topw::TokenMetric {
    let emb = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9], [0.7, 0.7]]).unwrap();
    build_metric(&emb, 1e-5).unwrap()
}

fn five_token_config() -> TopWConfig {
    TopWConfig {
        top_m: 5,
        ..TopWConfig::default()
    }
}

#[test]
fn bundle_digest_is_pinned() {
    let dir = fixtures().join("golden");
    let mut h = Sha256::new();
    for name in ["meta.json", "embeddings.f32", "logits.f32"] {
        h.update(std::fs::read(dir.join(name)).unwrap());
    }
    assert_eq!(hex::encode(h.finalize()), BUNDLE_SHA256);
    let bundle = load_trace(&dir).unwrap();
    assert_eq!((bundle.meta.n, bundle.meta.m, bundle.steps()), (5, 2, 4));
}

#[test]
fn five_token_crop_is_frozen() {
    // Cross-checked once against a scalar reference that enumerates every
    // subset at each iteration.
    let metric = five_token_metric();
    let logits = [2.0f32, 1.5, 1.0, 0.5, 0.0];
    let (masked, report) = process_logits(&logits, &metric, &five_token_config()).unwrap();
    let want = [2.0f32, f32::NEG_INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY];
    assert_eq!(
        masked.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        want.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(report.crop.members(), &[0]);
    assert_eq!(report.iterations_used, 2);
    assert!(report.converged_early);
    assert_eq!(report.regime_per_iter, vec![Regime::Prefix, Regime::Prefix]);
    assert_eq!(report.gamma.to_bits(), 0.42865552877716695f64.to_bits());
    assert_eq!(report.crop_entropy, 0.0);
    assert_eq!(report.pool_size, 5);

    let again = process_logits(&logits, &metric, &five_token_config()).unwrap();
    assert_eq!(again.1.crop, report.crop);
}

#[test]
fn five_token_distances_match_hand_values() {
    let metric = five_token_metric();
    let close = [(0, 1, 0.25794718594094335), (0, 2, 3.298280734203968), (0, 4, 1.7850166705385226)];
    for (i, j, d) in close {
        assert!((metric.distance(i, j).unwrap() - d).abs() < 1e-12);
    }
}

#[test]
fn golden_csv_is_byte_identical() {
    let bundle = load_trace(fixtures().join("golden")).unwrap();
    let rules: Vec<NamedRule> = GOLDEN_RULES.iter().map(|r| NamedRule::parse(r, 1.0).unwrap()).collect();
    let rows = harness::run(&bundle, &rules, true).unwrap();
    let mut buf = Vec::new();
    harness::write_csv(&rows, &mut buf).unwrap();
    let frozen = std::fs::read(fixtures().join("golden_run.csv")).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), String::from_utf8(frozen).unwrap());
}

#[test]
fn run_stats_recompute_from_masked_logits() {
    let bundle = synth_bundle();
    let rules: Vec<NamedRule> = ["topw", "topw:beta=3.5,alt_iters=5", "top_k:7", "top_p:0.8", "min_p:0.05", "top_h:0.6"]
        .iter()
        .map(|r| NamedRule::parse(r, 1.0).unwrap())
        .collect();
    for o in harness::run_outcomes(&bundle, &rules, false).unwrap() {
        let logits = bundle.step(o.row.step);
        let p = Dist::from_logits(logits, 1.0).unwrap();
        let kept: Vec<usize> = (0..logits.len()).filter(|&i| o.masked[i].is_finite()).collect();
        for &i in &kept {
            assert_eq!(o.masked[i].to_bits(), logits[i].to_bits());
        }
        assert_eq!(kept.len(), o.row.crop_size);
        let gamma: f64 = kept.iter().map(|&i| p.prob(i)).sum();
        let q = Dist::from_logits(&o.masked, 1.0).unwrap();
        assert!((gamma - o.row.gamma).abs() <= 1e-9, "{} step {}", o.row.rule, o.row.step);
        assert!((entropy(&q) - o.row.crop_entropy).abs() <= 1e-9, "{} step {}", o.row.rule, o.row.step);
        assert!((entropy(&crop(&p, &kept).unwrap().1) - o.row.crop_entropy).abs() <= 1e-9);
    }
}

#[test]
fn full_top_k_keeps_all_mass() {
    let bundle = synth_bundle();
    let rule = format!("top_k:{}", bundle.meta.n);
    let rows = harness::run(&bundle, &[NamedRule::parse(&rule, 1.0).unwrap()], true).unwrap();
    assert_eq!(rows.len(), bundle.steps());
    for r in rows {
        assert!((r.gamma - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_token_trace_end_to_end() {
    let bundle = topw::synth_trace(1, 3, 2, 5, topw::Generator::GaussianDirichlet).unwrap();
    let rules: Vec<NamedRule> = ["topw", "top_p:0.9"].iter().map(|r| NamedRule::parse(r, 1.0).unwrap()).collect();
    let rows = harness::run(&bundle, &rules, true).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.crop_size == 1 && r.gamma == 1.0));
}

fn synth_bundle() -> topw::TraceBundle {
    topw::synth_trace(300, 16, 6, 11, topw::Generator::Clustered { clusters: 6 }).unwrap()
}
