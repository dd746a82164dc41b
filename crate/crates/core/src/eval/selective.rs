//! Risk-coverage curves for selective retrieval.
//!
//! Queries are sorted by confidence (descending, ties by query index). At
//! coverage `m / n` the risk is the error rate among the `m` most confident
//! queries, where a query is correct when its ground truth is within the top
//! K. AURC is the mean of the `n` prefix risks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::calibration::ece;
use crate::eval::retrieval::{argmin, correct_at_k, Direction};
use crate::gaussian::{match_prob, GaussianEmbedding, MatchScalars};
use crate::matrix::Matrix;
use crate::synth::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Match probability of the top-1 retrieved item.
    MatchProb,
    /// Negative total variance of the query embedding.
    NegTotalVariance,
    /// Uniform random scores (control).
    Random,
}

impl ConfidenceSource {
    pub const ALL: [ConfidenceSource; 3] =
        [ConfidenceSource::MatchProb, ConfidenceSource::NegTotalVariance, ConfidenceSource::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConfidenceSource::MatchProb => "match_prob",
            ConfidenceSource::NegTotalVariance => "neg_total_variance",
            ConfidenceSource::Random => "random",
        }
    }
}

impl fmt::Display for ConfidenceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfidenceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown confidence source {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    /// `(coverage, risk)` with strictly increasing coverage.
    pub points: Vec<(f64, f64)>,
    pub aurc: f64,
    pub confidence_source: ConfidenceSource,
}

/// Builds the curve from per-query confidences and correctness.
pub fn risk_coverage(confidences: &[f64], correct: &[bool], source: ConfidenceSource) -> Result<RiskCoverageCurve> {
    if confidences.len() != correct.len() {
        return Err(Error::dims(confidences.len(), correct.len()));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("risk-coverage needs at least one query"));
    }
    if confidences.iter().any(|c| c.is_nan()) {
        return Err(Error::invalid("NaN confidence"));
    }
    let n = confidences.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower query index first among equal confidences
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(n);
    for (m, &q) in order.iter().enumerate() {
        hits += usize::from(correct[q]);
        let covered = (m + 1) as f64;
        points.push((covered / n as f64, 1.0 - hits as f64 / covered));
    }
    let mut curve = RiskCoverageCurve { points, aurc: 0.0, confidence_source: source };
    curve.aurc = aurc(&curve);
    Ok(curve)
}

/// Mean prefix risk.
pub fn aurc(curve: &RiskCoverageCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    curve.points.iter().map(|&(_, r)| r).sum::<f64>() / curve.points.len() as f64
}

/// Per-query confidence scores for a query-by-item distance matrix.
///
/// `seed` only matters for [`ConfidenceSource::Random`].
pub fn query_confidences(
    dist: &Matrix,
    queries: &[GaussianEmbedding],
    scalars: &MatchScalars,
    source: ConfidenceSource,
    seed: u64,
) -> Result<Vec<f64>> {
    if queries.len() != dist.rows() {
        return Err(Error::dims(dist.rows(), queries.len()));
    }
    Ok(match source {
        ConfidenceSource::MatchProb => {
            (0..dist.rows()).map(|i| match_prob(dist.get(i, argmin(dist.row(i))), scalars)).collect()
        }
        ConfidenceSource::NegTotalVariance => queries.iter().map(|z| -z.total_variance()).collect(),
        ConfidenceSource::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dist.rows()).map(|_| rng.random::<f64>()).collect()
        }
    })
}

/// Selective retrieval summary for one direction and cut-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveSummary {
    pub direction: Direction,
    pub k: usize,
    /// One curve per source; the random curve is the first control.
    pub curves: Vec<RiskCoverageCurve>,
    pub random_controls: usize,
    pub random_mean_aurc: f64,
    pub random_std_aurc: f64,
    /// Risk at full coverage (`1 - R@K / 100`).
    pub full_coverage_risk: f64,
    /// ECE of top-1 match probability against correctness at K.
    pub ece: f64,
}

impl SelectiveSummary {
    pub fn curve(&self, source: ConfidenceSource) -> Option<&RiskCoverageCurve> {
        self.curves.iter().find(|c| c.confidence_source == source)
    }
}

/// Risk-coverage curves for every confidence source plus `random_controls`
/// random orderings, whose seeds are derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn selective_summary(
    dist: &Matrix,
    gt: &[usize],
    queries: &[GaussianEmbedding],
    scalars: &MatchScalars,
    direction: Direction,
    k: usize,
    random_controls: usize,
    ece_bins: usize,
    seed: u64,
) -> Result<SelectiveSummary> {
    if random_controls == 0 {
        return Err(Error::invalid("need at least one random control"));
    }
    let correct = correct_at_k(dist, gt, k)?;
    let mut curves = Vec::with_capacity(ConfidenceSource::ALL.len());
    let mut random_aurcs = Vec::with_capacity(random_controls);
    for source in ConfidenceSource::ALL {
        let conf = query_confidences(dist, queries, scalars, source, derive_seed(seed, 0))?;
        curves.push(risk_coverage(&conf, &correct, source)?);
    }
    for c in 0..random_controls {
        let conf = query_confidences(dist, queries, scalars, ConfidenceSource::Random, derive_seed(seed, c as u64))?;
        random_aurcs.push(risk_coverage(&conf, &correct, ConfidenceSource::Random)?.aurc);
    }
    let n = random_aurcs.len() as f64;
    let random_mean_aurc = random_aurcs.iter().sum::<f64>() / n;
    let random_std_aurc = (random_aurcs.iter().map(|a| (a - random_mean_aurc).powi(2)).sum::<f64>() / n).sqrt();
    let match_conf = query_confidences(dist, queries, scalars, ConfidenceSource::MatchProb, 0)?;
    let full_coverage_risk = correct.iter().filter(|&&c| !c).count() as f64 / correct.len() as f64;
    Ok(SelectiveSummary {
        direction,
        k,
        curves,
        random_controls,
        random_mean_aurc,
        random_std_aurc,
        full_coverage_risk,
        ece: ece(&match_conf, &correct, ece_bins)?,
    })
}
