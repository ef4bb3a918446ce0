//! Geometry-aware truncation sampling.
//!
//! Given next-token logits and a token embedding matrix, the decoder selects a
//! crop of the vocabulary that balances transport cost to the full
//! distribution, entropy of the renormalized crop and retained probability
//! mass. Tokens outside the crop are masked to negative infinity.
//!
//! ```
//! use topw::{build_metric, process_logits, EmbeddingMatrix, TopWConfig};
//!
//! let emb = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.9, 0.1], [0.0, 1.0]]).unwrap();
//! let metric = build_metric(&emb, 1e-5).unwrap();
//! let (masked, report) = process_logits(&[2.0, 1.5, 0.0], &metric, &TopWConfig::default()).unwrap();
//! assert_eq!(masked.len(), 3);
//! assert!(report.gamma > 0.0 && report.gamma <= 1.0);
//! ```

pub mod baselines;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod objective;
pub mod potentials;
pub mod selection;
pub mod simplex;
pub mod trace;
pub mod transport;

pub use baselines::{apply_baseline, select_baseline, BaselineConfig, BaselineRule};
pub use decoder::{process_logits, sample_from_masked, StepReport, TopWConfig, WarmStart};
pub use error::{Error, Result};
pub use geometry::{build_metric, EmbeddingMatrix, TokenMetric, DEFAULT_EPSILON};
pub use objective::{combined_scores, ObjectiveParams, ScoredPool};
pub use selection::{s_step, Regime, TieBreak};
pub use simplex::{Crop, Dist};
pub use trace::{load_trace, save_trace, synth_trace, Generator, TraceBundle};
