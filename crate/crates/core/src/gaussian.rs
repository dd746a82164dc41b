//! Closed-form math on diagonal Gaussian embeddings.
//!
//! An embedding is `N(mu, diag(exp(log_var)))`. Two embeddings are compared
//! with the contrastive stochastic distance
//!
//! ```text
//! csd(z1, z2) = 1/2 * sum_d [ (mu1_d - mu2_d)^2 / s_d + ln s_d ],   s_d = var1_d + var2_d
//! ```
//!
//! and a distance is mapped to a match probability `logistic(-a * d + b)`.
//! Everything here is 64-bit and allocation-light; the batch variants live in
//! [`crate::objective`].

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::par;
use crate::{Error, Result};

pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 6.0;

/// Clamps raw log-variances into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
pub fn clamp_log_var(raw: &[f64]) -> Result<Vec<f64>> {
    raw.iter()
        .map(|&x| {
            if x.is_finite() {
                Ok(x.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            } else {
                Err(Error::invalid(format!("non-finite log-variance {x}")))
            }
        })
        .collect()
}

/// Derivative of the clamp: 1 on the closed interval, 0 when saturated.
#[inline]
pub fn clamp_log_var_grad(raw: f64) -> f64 {
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
        1.0
    } else {
        0.0
    }
}

/// Diagonal Gaussian embedding with clamped log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingParts", into = "EmbeddingParts")]
pub struct GaussianEmbedding {
    mu: Vec<f64>,
    log_var: Vec<f64>,
    // exp(log_var), cached because every pairwise kernel needs it
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingParts {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl TryFrom<EmbeddingParts> for GaussianEmbedding {
    type Error = Error;

    fn try_from(p: EmbeddingParts) -> Result<Self> {
        Self::new(p.mu, p.log_var)
    }
}

impl From<GaussianEmbedding> for EmbeddingParts {
    fn from(z: GaussianEmbedding) -> Self {
        Self { mu: z.mu, log_var: z.log_var }
    }
}

impl GaussianEmbedding {
    /// Builds an embedding, clamping `raw_log_var`.
    pub fn new(mu: Vec<f64>, raw_log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if mu.len() != raw_log_var.len() {
            return Err(Error::dims(mu.len(), raw_log_var.len()));
        }
        if let Some(x) = mu.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite mean {x}")));
        }
        let log_var = clamp_log_var(&raw_log_var)?;
        let var = log_var.iter().map(|lv| lv.exp()).collect();
        Ok(Self { mu, log_var, var })
    }

    /// Embedding with the same variance `exp(log_var)` in every dimension.
    pub fn isotropic(mu: Vec<f64>, log_var: f64) -> Result<Self> {
        let n = mu.len();
        Self::new(mu, vec![log_var; n])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> &[f64] {
        &self.var
    }

    /// Sum of per-dimension variances.
    pub fn total_variance(&self) -> f64 {
        self.var.iter().sum()
    }
}

/// Logit scale and offset for the match probability.
///
/// The scale is stored as `softplus(raw_scale)` so it stays positive under
/// unconstrained gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScalars {
    pub raw_scale: f64,
    pub b: f64,
}

impl Default for MatchScalars {
    fn default() -> Self {
        Self::new(1.0, 0.0).expect("a = 1 is positive")
    }
}

impl MatchScalars {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !b.is_finite() {
            return Err(Error::invalid(format!("match scalars need finite a > 0, got a={a}, b={b}")));
        }
        Ok(Self { raw_scale: inverse_softplus(a), b })
    }

    #[inline]
    pub fn a(&self) -> f64 {
        softplus(self.raw_scale)
    }

    /// `da / d raw_scale`.
    #[inline]
    pub fn a_grad_factor(&self) -> f64 {
        sigmoid(self.raw_scale)
    }
}

/// How the non-matching term of the binary cross-entropy is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BceMode {
    /// Bernoulli likelihood: non-matches pay `-ln(1 - p)`, i.e. `-ln logistic(a*d - b)`.
    #[default]
    Standard,
    /// Non-matches pay `-ln logistic(-a*d - b)`, which grows with distance.
    #[serde(alias = "paper_literal")]
    NegatedOffset,
}

/// Partial derivatives of a pairwise quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_mu1: Vec<f64>,
    pub d_mu2: Vec<f64>,
    pub d_logvar1: Vec<f64>,
    pub d_logvar2: Vec<f64>,
    pub d_a: Option<f64>,
    pub d_b: Option<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))` without cancellation for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(exp(y) - 1) = y + ln(1 - exp(-y))
    y + (-(-y).exp()).ln_1p()
}

fn check_dims(z1: &GaussianEmbedding, z2: &GaussianEmbedding) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(Error::dims(z1.dim(), z2.dim()));
    }
    Ok(())
}

// Summed variances are multiplied in groups this size before taking one log.
// With log-variances clamped to [-6, 6] a group product stays within
// [1e-19, 1e24], far from under- or overflow.
const LOG_GROUP: usize = 8;

/// CSD from means and variances (not log-variances). Callers guarantee equal
/// lengths.
#[inline]
pub(crate) fn csd_slices(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let n = mu1.len();
    let mut quad = 0.0;
    let mut log_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + LOG_GROUP).min(n);
        let mut prod = 1.0;
        for d in start..end {
            let s = var1[d] + var2[d];
            let gap = mu1[d] - mu2[d];
            quad += gap * gap / s;
            prod *= s;
        }
        log_sum += prod.ln();
        start = end;
    }
    0.5 * (quad + log_sum)
}

/// Contrastive stochastic distance between two embeddings.
pub fn csd(z1: &GaussianEmbedding, z2: &GaussianEmbedding) -> Result<f64> {
    check_dims(z1, z2)?;
    Ok(csd_slices(&z1.mu, &z1.var, &z2.mu, &z2.var))
}

/// Gradient of `csd` with respect to both means and log-variances.
pub fn csd_grads(z1: &GaussianEmbedding, z2: &GaussianEmbedding) -> Result<GradBundle> {
    check_dims(z1, z2)?;
    let n = z1.dim();
    let mut g = GradBundle {
        d_mu1: vec![0.0; n],
        d_mu2: vec![0.0; n],
        d_logvar1: vec![0.0; n],
        d_logvar2: vec![0.0; n],
        d_a: None,
        d_b: None,
    };
    accumulate_csd_grad(
        1.0,
        (&z1.mu, &z1.var),
        (&z2.mu, &z2.var),
        (&mut g.d_mu1, &mut g.d_logvar1),
        (&mut g.d_mu2, &mut g.d_logvar2),
    );
    Ok(g)
}

/// Adds `scale * d csd / d(mu, log_var)` for both sides into the output slices,
/// given means and variances.
#[inline]
pub(crate) fn accumulate_csd_grad(
    scale: f64,
    (mu1, var1): (&[f64], &[f64]),
    (mu2, var2): (&[f64], &[f64]),
    (g_mu1, g_lv1): (&mut [f64], &mut [f64]),
    (g_mu2, g_lv2): (&mut [f64], &mut [f64]),
) {
    for d in 0..mu1.len() {
        let v1 = var1[d];
        let v2 = var2[d];
        let s = v1 + v2;
        let gap = mu1[d] - mu2[d];
        let dmu = scale * gap / s;
        // d/ds [gap^2/s + ln s] / 2 = (1 - gap^2/s) / (2 s)
        let ds = scale * 0.5 * (1.0 - gap * gap / s) / s;
        g_mu1[d] += dmu;
        g_mu2[d] -= dmu;
        g_lv1[d] += ds * v1;
        g_lv2[d] += ds * v2;
    }
}

/// Match probability `logistic(-a * d + b)`.
pub fn match_prob(d: f64, s: &MatchScalars) -> f64 {
    sigmoid(-s.a() * d + s.b)
}

/// Binary label of a pair.
fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::invalid(format!("match label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// Loss and its partials `(dL/dd, dL/da, dL/db)` for one pair.
#[inline]
pub(crate) fn bce_with_grad(d: f64, y: u8, a: f64, b: f64, mode: BceMode) -> (f64, f64, f64, f64) {
    if y == 1 {
        let z = -a * d + b;
        let g = sigmoid(z) - 1.0;
        return (-log_sigmoid(z), -a * g, -d * g, g);
    }
    match mode {
        BceMode::Standard => {
            // -ln(1 - logistic(z)) = -ln logistic(-z)
            let z = -a * d + b;
            let g = sigmoid(z);
            (-log_sigmoid(-z), -a * g, -d * g, g)
        }
        BceMode::NegatedOffset => {
            let z = -a * d - b;
            let g = sigmoid(z) - 1.0;
            (-log_sigmoid(z), -a * g, -d * g, -g)
        }
    }
}

/// Binary cross-entropy of the match probability against label `y`.
pub fn match_bce(d: f64, y: u8, s: &MatchScalars, mode: BceMode) -> Result<f64> {
    check_label(y)?;
    if !d.is_finite() {
        return Err(Error::invalid(format!("non-finite distance {d}")));
    }
    Ok(bce_with_grad(d, y, s.a(), s.b, mode).0)
}

/// KL divergence from the embedding to `N(0, I)`.
pub fn vib_kl(z: &GaussianEmbedding) -> f64 {
    vib_kl_slices(&z.mu, &z.log_var)
}

#[inline]
pub(crate) fn vib_kl_slices(mu: &[f64], lv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mu.len() {
        acc += lv[d].exp() + mu[d] * mu[d] - 1.0 - lv[d];
    }
    0.5 * acc
}

/// `(d KL / d mu, d KL / d log_var)`.
pub fn vib_kl_grad(z: &GaussianEmbedding) -> (Vec<f64>, Vec<f64>) {
    let d_mu = z.mu.clone();
    let d_lv = z.log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect();
    (d_mu, d_lv)
}

/// `M x N` matrix of CSD between every pair of the two batches.
pub fn pairwise_csd(batch1: &[GaussianEmbedding], batch2: &[GaussianEmbedding]) -> Result<Matrix> {
    let dim = batch1.first().or(batch2.first()).map(|z| z.dim()).unwrap_or(0);
    if let Some(z) = batch1.iter().chain(batch2).find(|z| z.dim() != dim) {
        return Err(Error::dims(dim, z.dim()));
    }
    let cols = batch2.len();
    let mut out = Matrix::zeros(batch1.len(), cols);
    par::fill_rows(out.as_mut_slice(), cols, |i, row| {
        let z1 = &batch1[i];
        for (j, z2) in batch2.iter().enumerate() {
            row[j] = csd_slices(&z1.mu, &z1.var, &z2.mu, &z2.var);
        }
    });
    Ok(out)
}

/// Pair loss `match_bce(csd(z1, z2), y)` and all of its partial derivatives.
///
/// `d_a` is with respect to the scale `a` itself, not its raw parameter.
pub fn analytic_grads(
    z1: &GaussianEmbedding,
    z2: &GaussianEmbedding,
    y: u8,
    s: &MatchScalars,
    mode: BceMode,
) -> Result<(f64, GradBundle)> {
    check_label(y)?;
    let d = csd(z1, z2)?;
    let (loss, dl_dd, dl_da, dl_db) = bce_with_grad(d, y, s.a(), s.b, mode);
    let n = z1.dim();
    let mut g = GradBundle {
        d_mu1: vec![0.0; n],
        d_mu2: vec![0.0; n],
        d_logvar1: vec![0.0; n],
        d_logvar2: vec![0.0; n],
        d_a: Some(dl_da),
        d_b: Some(dl_db),
    };
    accumulate_csd_grad(
        dl_dd,
        (&z1.mu, &z1.var),
        (&z2.mu, &z2.var),
        (&mut g.d_mu1, &mut g.d_logvar1),
        (&mut g.d_mu2, &mut g.d_logvar2),
    );
    Ok((loss, g))
}
