//! On-disk trace bundles and synthetic trace generation.
//!
//! A bundle is a directory holding `meta.json`, `embeddings.f32` (n x m) and
//! `logits.f32` (steps x n). Both arrays are raw little-endian `f32`, row-major.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32";
pub const LOGITS_FILE: &str = "logits.f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u32,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub layout: String,
    pub dtype: String,
    pub endianness: String,
}

impl TraceMeta {
    pub fn new(n: usize, m: usize, steps: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n,
            m,
            steps,
            layout: "row-major".into(),
            dtype: "float32".into(),
            endianness: "little".into(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Trace(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (field, got, want) in [
            ("layout", &self.layout, "row-major"),
            ("dtype", &self.dtype, "float32"),
            ("endianness", &self.endianness, "little"),
        ] {
            if got != want {
                return Err(Error::Trace(format!("{field} is `{got}`, expected `{want}`")));
            }
        }
        if self.n == 0 || self.m == 0 || self.steps == 0 {
            return Err(Error::Trace(format!(
                "n, m and steps must be positive (got n={}, m={}, steps={})",
                self.n, self.m, self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub meta: TraceMeta,
    pub embeddings: EmbeddingMatrix,
    /// `steps * n` logits, one row per step.
    pub logits: Vec<f32>,
}

impl TraceBundle {
    pub fn new(embeddings: EmbeddingMatrix, logits: Vec<f32>) -> Result<Self> {
        let n = embeddings.rows();
        if logits.is_empty() || logits.len() % n != 0 {
            return Err(Error::Trace(format!(
                "{} logits do not form whole steps over {n} tokens",
                logits.len()
            )));
        }
        let meta = TraceMeta::new(n, embeddings.dim(), logits.len() / n);
        Ok(Self { meta, embeddings, logits })
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.logits[t * self.meta.n..(t + 1) * self.meta.n]
    }
}

fn read_f32s(path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = expected_values * 4;
    if bytes.len() != want {
        return Err(Error::Trace(format!(
            "{}: expected {want} bytes, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a bundle directory.
pub fn load_trace(dir: impl AsRef<Path>) -> Result<TraceBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TraceMeta =
        serde_json::from_str(&text).map_err(|e| Error::Trace(format!("{}: {e}", meta_path.display())))?;
    meta.check()?;
    let emb = read_f32s(&dir.join(EMBEDDINGS_FILE), meta.n * meta.m)?;
    if let Some(k) = emb.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: k / meta.m,
            col: k % meta.m,
        });
    }
    let logits = read_f32s(&dir.join(LOGITS_FILE), meta.steps * meta.n)?;
    if let Some(k) = logits.iter().position(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(Error::Trace(format!(
            "logit at step {}, token {} is {}",
            k / meta.n,
            k % meta.n,
            logits[k]
        )));
    }
    let embeddings = EmbeddingMatrix::new(meta.n, meta.m, emb)?;
    Ok(TraceBundle { meta, embeddings, logits })
}

/// Writes a bundle directory, creating it if needed.
pub fn save_trace(bundle: &TraceBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&bundle.meta).expect("meta serializes") + "\n";
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    write_f32s(&dir.join(EMBEDDINGS_FILE), bundle.embeddings.data())?;
    write_f32s(&dir.join(LOGITS_FILE), &bundle.logits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Standard normal embeddings; each step's logits are the log of a
    /// Dirichlet draw with Zipf-shaped concentrations over a random token order.
    GaussianDirichlet,
    /// Embeddings scattered tightly around `clusters` random centers, with the
    /// same logits as above.
    Clustered { clusters: usize },
}

/// Zipf exponent and scale of the Dirichlet concentrations `a * r^-s`.
const ZIPF_EXPONENT: f64 = 1.1;
const ZIPF_SCALE: f64 = 1.0;
/// Spread of clustered embeddings around their center.
const CLUSTER_NOISE: f64 = 0.05;

/// Deterministic synthetic bundle.
pub fn synth_trace(n: usize, m: usize, steps: usize, seed: u64, generator: Generator) -> Result<TraceBundle> {
    if n == 0 || m == 0 || steps == 0 {
        return Err(Error::InvalidParameter("n, m and steps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let emb: Vec<f32> = match generator {
        Generator::GaussianDirichlet => (0..n * m).map(|_| normal(&mut rng) as f32).collect(),
        Generator::Clustered { clusters } => {
            if clusters == 0 {
                return Err(Error::InvalidParameter("clusters must be positive".into()));
            }
            let centers: Vec<f64> = (0..clusters * m).map(|_| normal(&mut rng)).collect();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let c = &centers[(i % clusters) * m..(i % clusters + 1) * m];
                out.extend(c.iter().map(|x| (x + CLUSTER_NOISE * normal(&mut rng)) as f32));
            }
            out
        }
    };
    let gammas: Vec<Gamma<f64>> = (1..=n)
        .map(|r| {
            let alpha = ZIPF_SCALE * (r as f64).powf(-ZIPF_EXPONENT);
            Gamma::new(alpha + 1.0, 1.0).expect("positive shape")
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut logits = vec![0f32; n * steps];
    for t in 0..steps {
        perm.shuffle(&mut rng);
        let row = &mut logits[t * n..(t + 1) * n];
        for (r, g) in gammas.iter().enumerate() {
            let alpha = ZIPF_SCALE * ((r + 1) as f64).powf(-ZIPF_EXPONENT);
            // ln Gamma(alpha) = ln Gamma(alpha + 1) + ln(U) / alpha, U in (0, 1].
            let u: f64 = 1.0 - rng.random::<f64>();
            row[perm[r]] = (rng.sample(g).ln() + u.ln() / alpha) as f32;
        }
    }
    TraceBundle::new(EmbeddingMatrix::new(n, m, emb)?, logits)
}
