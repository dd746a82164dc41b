//! Batch objectives: pairwise match BCE, the four-pairing inter-modal loss,
//! intra-modal view/section losses, VIB penalties and their weighted total.
//! A deterministic bidirectional InfoNCE loss is kept as a baseline.
//!
//! Every loss has a `*_with_grads` twin returning gradients with respect to the
//! means and log-variances of each embedding plus the match scalars. Pair
//! gradients are accumulated row-wise for the left batch and column-wise for
//! the right batch so each output has exactly one writer and a fixed
//! summation order.

use serde::{Deserialize, Serialize};

use crate::gaussian::{
    accumulate_csd_grad, bce_with_grad, csd_slices, pairwise_csd, sigmoid, softplus, vib_kl_slices, BceMode,
    GaussianEmbedding, MatchScalars,
};
use crate::matrix::Matrix;
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_img: f64,
    pub lambda_txt: f64,
    pub beta_img: f64,
    pub beta_txt: f64,
    pub mode: BceMode,
    pub positive_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_img: 0.1,
            lambda_txt: 0.1,
            beta_img: 1e-4,
            beta_txt: 1e-4,
            mode: BceMode::Standard,
            positive_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_img", self.lambda_img),
            ("lambda_txt", self.lambda_txt),
            ("beta_img", self.beta_img),
            ("beta_txt", self.beta_txt),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.positive_weight.is_finite() && self.positive_weight > 0.0) {
            return Err(Error::invalid(format!(
                "positive_weight must be finite and > 0, got {}",
                self.positive_weight
            )));
        }
        Ok(())
    }
}

/// Per-term values of the composite objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inter: f64,
    pub intra_img: f64,
    pub intra_txt: f64,
    pub kl_img: f64,
    pub kl_txt: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn compose(inter: f64, intra_img: f64, intra_txt: f64, kl_img: f64, kl_txt: f64, cfg: &LossConfig) -> Self {
        let total = inter
            + cfg.lambda_img * intra_img
            + cfg.lambda_txt * intra_txt
            + cfg.beta_img * kl_img
            + cfg.beta_txt * kl_txt;
        Self { inter, intra_img, intra_txt, kl_img, kl_txt, total }
    }

    /// Field-wise mean of a non-empty slice.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.inter += b.inter;
            acc.intra_img += b.intra_img;
            acc.intra_txt += b.intra_txt;
            acc.kl_img += b.kl_img;
            acc.kl_txt += b.kl_txt;
            acc.total += b.total;
        }
        LossBreakdown {
            inter: acc.inter / n,
            intra_img: acc.intra_img / n,
            intra_txt: acc.intra_txt / n,
            kl_img: acc.kl_img / n,
            kl_txt: acc.kl_txt / n,
            total: acc.total / n,
        }
    }
}

/// Square binary matrix of match labels; `1` marks a matched pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMatrix {
    size: usize,
    labels: Vec<u8>,
}

impl MatchMatrix {
    /// In-batch diagonal positives.
    pub fn identity(size: usize) -> Self {
        let mut labels = vec![0; size * size];
        for i in 0..size {
            labels[i * size + i] = 1;
        }
        Self { size, labels }
    }

    pub fn from_labels(size: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != size * size {
            return Err(Error::dims(size * size, labels.len()));
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("match label must be 0 or 1, got {y}")));
        }
        Ok(Self { size, labels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.size + j]
    }

    /// Relabels so that new row/column `k` is old row/column `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let mut labels = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                labels[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { size: n, labels }
    }
}

/// Gradients of a loss with respect to one batch of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
}

impl BatchGrads {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        Self { mu: vec![vec![0.0; dim]; batch], log_var: vec![vec![0.0; dim]; batch] }
    }

    fn add_scaled(&mut self, other: &BatchGrads, scale: f64) {
        for (dst, src) in self.mu.iter_mut().zip(&other.mu) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        for (dst, src) in self.log_var.iter_mut().zip(&other.log_var) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Gradients of a pairwise loss: both batches plus the match scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLossGrads {
    pub left: BatchGrads,
    pub right: BatchGrads,
    /// With respect to the scale `a`.
    pub d_a: f64,
    pub d_b: f64,
}

/// Gradients of the composite loss for the four input batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossGrads {
    pub view1: BatchGrads,
    pub view2: BatchGrads,
    pub sect1: BatchGrads,
    pub sect2: BatchGrads,
    pub d_a: f64,
    pub d_b: f64,
}

/// The four inputs of one training batch, one embedding per study each.
#[derive(Debug, Clone, Copy)]
pub struct FourViews<'a> {
    pub view1: &'a [GaussianEmbedding],
    pub view2: &'a [GaussianEmbedding],
    pub sect1: &'a [GaussianEmbedding],
    pub sect2: &'a [GaussianEmbedding],
}

impl FourViews<'_> {
    fn validate(&self) -> Result<(usize, usize)> {
        let b = self.view1.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let dim = self.view1[0].dim();
        for batch in [self.view2, self.sect1, self.sect2] {
            if batch.len() != b {
                return Err(Error::dims(b, batch.len()));
            }
        }
        for z in self.view1.iter().chain(self.view2).chain(self.sect1).chain(self.sect2) {
            if z.dim() != dim {
                return Err(Error::dims(dim, z.dim()));
            }
        }
        Ok((b, dim))
    }
}

fn pair_weight(y: u8, cfg: &LossConfig) -> f64 {
    if y == 1 {
        cfg.positive_weight
    } else {
        1.0
    }
}

fn total_weight(y: &MatchMatrix, cfg: &LossConfig) -> f64 {
    let positives = y.labels.iter().filter(|&&v| v == 1).count() as f64;
    let negatives = y.labels.len() as f64 - positives;
    positives * cfg.positive_weight + negatives
}

/// Weighted mean match BCE over every entry of a distance matrix.
pub fn batch_match_loss(dist: &Matrix, y: &MatchMatrix, s: &MatchScalars, cfg: &LossConfig) -> Result<f64> {
    if dist.rows() != y.size() || dist.cols() != y.size() {
        return Err(Error::invalid(format!(
            "distance matrix is {}x{} but labels are {}x{}",
            dist.rows(),
            dist.cols(),
            y.size(),
            y.size()
        )));
    }
    let (a, b) = (s.a(), s.b);
    let n = y.size();
    let row_sums = par::map_range(n, |i| {
        (0..n)
            .map(|j| {
                let yij = y.get(i, j);
                pair_weight(yij, cfg) * bce_with_grad(dist.get(i, j), yij, a, b, cfg.mode).0
            })
            .sum::<f64>()
    });
    Ok(row_sums.iter().sum::<f64>() / total_weight(y, cfg))
}

/// [`batch_match_loss`] over `pairwise_csd(left, right)` with gradients.
pub fn pair_loss_with_grads(
    left: &[GaussianEmbedding],
    right: &[GaussianEmbedding],
    y: &MatchMatrix,
    s: &MatchScalars,
    cfg: &LossConfig,
) -> Result<(f64, PairLossGrads)> {
    let n = y.size();
    if left.len() != n || right.len() != n {
        return Err(Error::dims(n, if left.len() != n { left.len() } else { right.len() }));
    }
    let dim = left.first().map(|z| z.dim()).unwrap_or(0);
    if let Some(z) = left.iter().chain(right).find(|z| z.dim() != dim) {
        return Err(Error::dims(dim, z.dim()));
    }
    let (a, b) = (s.a(), s.b);
    let inv_w = 1.0 / total_weight(y, cfg);

    // Row pass: loss, scalar grads, left-side embedding grads and the
    // per-pair coefficients `w * dL/dd` reused by the column pass.
    let rows = par::map_range(n, |i| {
        let zi = &left[i];
        let mut g_mu = vec![0.0; dim];
        let mut g_lv = vec![0.0; dim];
        let mut scratch_mu = vec![0.0; dim];
        let mut scratch_lv = vec![0.0; dim];
        let mut coef = vec![0.0; n];
        let (mut loss, mut da, mut db) = (0.0, 0.0, 0.0);
        for (j, zj) in right.iter().enumerate() {
            let yij = y.get(i, j);
            let w = pair_weight(yij, cfg) * inv_w;
            let d = csd_slices(zi.mu(), zi.variance(), zj.mu(), zj.variance());
            let (l, dl_dd, dl_da, dl_db) = bce_with_grad(d, yij, a, b, cfg.mode);
            loss += w * l;
            da += w * dl_da;
            db += w * dl_db;
            coef[j] = w * dl_dd;
            accumulate_csd_grad(
                coef[j],
                (zi.mu(), zi.variance()),
                (zj.mu(), zj.variance()),
                (&mut g_mu, &mut g_lv),
                (&mut scratch_mu, &mut scratch_lv),
            );
        }
        (loss, da, db, g_mu, g_lv, coef)
    });
    // Column pass: right-side embedding grads.
    let cols = par::map_range(n, |j| {
        let zj = &right[j];
        let mut g_mu = vec![0.0; dim];
        let mut g_lv = vec![0.0; dim];
        let mut scratch_mu = vec![0.0; dim];
        let mut scratch_lv = vec![0.0; dim];
        for (i, zi) in left.iter().enumerate() {
            accumulate_csd_grad(
                rows[i].5[j],
                (zi.mu(), zi.variance()),
                (zj.mu(), zj.variance()),
                (&mut scratch_mu, &mut scratch_lv),
                (&mut g_mu, &mut g_lv),
            );
        }
        (g_mu, g_lv)
    });

    let mut loss = 0.0;
    let mut grads = PairLossGrads {
        left: BatchGrads { mu: Vec::with_capacity(n), log_var: Vec::with_capacity(n) },
        right: BatchGrads { mu: Vec::with_capacity(n), log_var: Vec::with_capacity(n) },
        d_a: 0.0,
        d_b: 0.0,
    };
    for (l, da, db, g_mu, g_lv, _) in rows {
        loss += l;
        grads.d_a += da;
        grads.d_b += db;
        grads.left.mu.push(g_mu);
        grads.left.log_var.push(g_lv);
    }
    for (g_mu, g_lv) in cols {
        grads.right.mu.push(g_mu);
        grads.right.log_var.push(g_lv);
    }
    Ok((loss, grads))
}

/// Mean of the pairwise loss over (v1,t1), (v1,t2), (v2,t1), (v2,t2).
pub fn inter_modal_loss(views: FourViews<'_>, y: &MatchMatrix, s: &MatchScalars, cfg: &LossConfig) -> Result<f64> {
    views.validate()?;
    let mut acc = 0.0;
    for (img, txt) in inter_pairings(&views) {
        acc += batch_match_loss(&pairwise_csd(img, txt)?, y, s, cfg)?;
    }
    Ok(acc / 4.0)
}

fn inter_pairings<'a>(v: &FourViews<'a>) -> [(&'a [GaussianEmbedding], &'a [GaussianEmbedding]); 4] {
    [(v.view1, v.sect1), (v.view1, v.sect2), (v.view2, v.sect1), (v.view2, v.sect2)]
}

/// Pairwise loss between the two inputs of one modality, same-study pairs positive.
pub fn intra_modal_loss(
    first: &[GaussianEmbedding],
    second: &[GaussianEmbedding],
    s: &MatchScalars,
    cfg: &LossConfig,
) -> Result<f64> {
    if first.len() != second.len() {
        return Err(Error::dims(first.len(), second.len()));
    }
    let y = MatchMatrix::identity(first.len());
    batch_match_loss(&pairwise_csd(first, second)?, &y, s, cfg)
}

fn mean_kl(batches: [&[GaussianEmbedding]; 2]) -> f64 {
    let count: usize = batches.iter().map(|b| b.len()).sum();
    let sum: f64 = batches.iter().flat_map(|b| b.iter()).map(|z| vib_kl_slices(z.mu(), z.log_var())).sum();
    sum / count as f64
}

/// Composite objective with every term reported.
pub fn total_loss(views: FourViews<'_>, y: &MatchMatrix, s: &MatchScalars, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let (b, _) = views.validate()?;
    if y.size() != b {
        return Err(Error::dims(b, y.size()));
    }
    let inter = inter_modal_loss(views, y, s, cfg)?;
    let intra_img = intra_modal_loss(views.view1, views.view2, s, cfg)?;
    let intra_txt = intra_modal_loss(views.sect1, views.sect2, s, cfg)?;
    let kl_img = mean_kl([views.view1, views.view2]);
    let kl_txt = mean_kl([views.sect1, views.sect2]);
    Ok(LossBreakdown::compose(inter, intra_img, intra_txt, kl_img, kl_txt, cfg))
}

fn add_kl_grads(target: &mut BatchGrads, batch: &[GaussianEmbedding], scale: f64) {
    for (k, z) in batch.iter().enumerate() {
        for d in 0..z.dim() {
            target.mu[k][d] += scale * z.mu()[d];
            target.log_var[k][d] += scale * 0.5 * (z.log_var()[d].exp() - 1.0);
        }
    }
}

/// [`total_loss`] plus gradients for every input embedding and the scalars.
pub fn total_loss_with_grads(
    views: FourViews<'_>,
    y: &MatchMatrix,
    s: &MatchScalars,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, TotalLossGrads)> {
    cfg.validate()?;
    let (b, dim) = views.validate()?;
    if y.size() != b {
        return Err(Error::dims(b, y.size()));
    }
    let mut grads = TotalLossGrads {
        view1: BatchGrads::zeros(b, dim),
        view2: BatchGrads::zeros(b, dim),
        sect1: BatchGrads::zeros(b, dim),
        sect2: BatchGrads::zeros(b, dim),
        d_a: 0.0,
        d_b: 0.0,
    };

    let mut inter = 0.0;
    for (img_idx, txt_idx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let img = if img_idx == 0 { views.view1 } else { views.view2 };
        let txt = if txt_idx == 0 { views.sect1 } else { views.sect2 };
        let (l, g) = pair_loss_with_grads(img, txt, y, s, cfg)?;
        inter += l;
        let img_grads = if img_idx == 0 { &mut grads.view1 } else { &mut grads.view2 };
        img_grads.add_scaled(&g.left, 0.25);
        let txt_grads = if txt_idx == 0 { &mut grads.sect1 } else { &mut grads.sect2 };
        txt_grads.add_scaled(&g.right, 0.25);
        grads.d_a += 0.25 * g.d_a;
        grads.d_b += 0.25 * g.d_b;
    }
    let inter = inter / 4.0;

    let identity = MatchMatrix::identity(b);
    let (intra_img, g) = pair_loss_with_grads(views.view1, views.view2, &identity, s, cfg)?;
    grads.view1.add_scaled(&g.left, cfg.lambda_img);
    grads.view2.add_scaled(&g.right, cfg.lambda_img);
    grads.d_a += cfg.lambda_img * g.d_a;
    grads.d_b += cfg.lambda_img * g.d_b;

    let (intra_txt, g) = pair_loss_with_grads(views.sect1, views.sect2, &identity, s, cfg)?;
    grads.sect1.add_scaled(&g.left, cfg.lambda_txt);
    grads.sect2.add_scaled(&g.right, cfg.lambda_txt);
    grads.d_a += cfg.lambda_txt * g.d_a;
    grads.d_b += cfg.lambda_txt * g.d_b;

    let kl_img = mean_kl([views.view1, views.view2]);
    let kl_txt = mean_kl([views.sect1, views.sect2]);
    let img_scale = cfg.beta_img / (2 * b) as f64;
    let txt_scale = cfg.beta_txt / (2 * b) as f64;
    add_kl_grads(&mut grads.view1, views.view1, img_scale);
    add_kl_grads(&mut grads.view2, views.view2, img_scale);
    add_kl_grads(&mut grads.sect1, views.sect1, txt_scale);
    add_kl_grads(&mut grads.sect2, views.sect2, txt_scale);

    Ok((LossBreakdown::compose(inter, intra_img, intra_txt, kl_img, kl_txt, cfg), grads))
}

/// `softplus(x + delta) - softplus(x)` without cancellation for small `delta`.
fn softplus_step(x: f64, delta: f64) -> f64 {
    if delta.abs() > 1.0 {
        return softplus(x + delta) - softplus(x);
    }
    (sigmoid(x) * delta.exp_m1()).ln_1p()
}

/// `csd(minus)` and `csd(plus) - csd(minus)` for two pairs of embeddings.
fn csd_difference(
    (p1, p2): (&GaussianEmbedding, &GaussianEmbedding),
    (m1, m2): (&GaussianEmbedding, &GaussianEmbedding),
) -> (f64, f64) {
    let mut acc = 0.0;
    for k in 0..m1.dim() {
        let gap_m = m1.mu()[k] - m2.mu()[k];
        let gap_p = p1.mu()[k] - p2.mu()[k];
        let d_gap = (p1.mu()[k] - m1.mu()[k]) - (p2.mu()[k] - m2.mu()[k]);
        let dv1 = m1.variance()[k] * (p1.log_var()[k] - m1.log_var()[k]).exp_m1();
        let dv2 = m2.variance()[k] * (p2.log_var()[k] - m2.log_var()[k]).exp_m1();
        let ds = dv1 + dv2;
        let s_m = m1.variance()[k] + m2.variance()[k];
        let s_p = p1.variance()[k] + p2.variance()[k];
        // gap_p^2/s_p - gap_m^2/s_m over a common denominator
        acc += (d_gap * (gap_p + gap_m) * s_m - gap_m * gap_m * ds) / (s_p * s_m) + (ds / s_m).ln_1p();
    }
    (csd_slices(m1.mu(), m1.variance(), m2.mu(), m2.variance()), 0.5 * acc)
}

/// Signs `(of a*d, of b)` in the softplus argument of a pair's BCE term.
fn bce_signs(y: u8, mode: BceMode) -> (f64, f64) {
    match (y, mode) {
        (1, _) => (1.0, -1.0),
        (_, BceMode::Standard) => (-1.0, 1.0),
        (_, BceMode::NegatedOffset) => (1.0, 1.0),
    }
}

struct ScalarStep {
    a: f64,
    b: f64,
    d_a: f64,
    d_b: f64,
}

fn pair_loss_difference(
    (left_p, right_p): (&[GaussianEmbedding], &[GaussianEmbedding]),
    (left_m, right_m): (&[GaussianEmbedding], &[GaussianEmbedding]),
    y: &MatchMatrix,
    step: &ScalarStep,
    plus_a: f64,
    cfg: &LossConfig,
) -> f64 {
    let n = y.size();
    let inv_w = 1.0 / total_weight(y, cfg);
    let rows = par::map_range(n, |i| {
        let mut acc = 0.0;
        for j in 0..n {
            let yij = y.get(i, j);
            let (d_m, dd) = csd_difference((&left_p[i], &right_p[j]), (&left_m[i], &right_m[j]));
            let (sa, sb) = bce_signs(yij, cfg.mode);
            let t_m = sa * step.a * d_m + sb * step.b;
            let dt = sa * (plus_a * dd + step.d_a * d_m) + sb * step.d_b;
            acc += pair_weight(yij, cfg) * inv_w * softplus_step(t_m, dt);
        }
        acc
    });
    rows.iter().sum()
}

fn kl_difference(plus: &[GaussianEmbedding], minus: &[GaussianEmbedding]) -> f64 {
    let mut acc = 0.0;
    for (p, m) in plus.iter().zip(minus) {
        for k in 0..m.dim() {
            let d_lv = p.log_var()[k] - m.log_var()[k];
            let d_mu = p.mu()[k] - m.mu()[k];
            acc += m.variance()[k] * d_lv.exp_m1() + d_mu * (p.mu()[k] + m.mu()[k]) - d_lv;
        }
    }
    0.5 * acc
}

/// `total_loss(plus).total - total_loss(minus).total`, evaluated term by term
/// so nearby arguments do not lose precision to cancellation.
///
/// Central differences divide this by `2h`; with a plain subtraction of two
/// O(1) losses the rounding error alone is about `1e-16 / h`.
pub fn total_loss_difference(
    plus: (FourViews<'_>, &MatchScalars),
    minus: (FourViews<'_>, &MatchScalars),
    y: &MatchMatrix,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (vp, sp) = plus;
    let (vm, sm) = minus;
    let (b, dim) = vm.validate()?;
    let (bp, dim_p) = vp.validate()?;
    if (bp, dim_p) != (b, dim) {
        return Err(Error::dims(b * dim, bp * dim_p));
    }
    if y.size() != b {
        return Err(Error::dims(b, y.size()));
    }
    let step = ScalarStep {
        a: sm.a(),
        b: sm.b,
        d_a: softplus_step(sm.raw_scale, sp.raw_scale - sm.raw_scale),
        d_b: sp.b - sm.b,
    };
    let plus_a = sp.a();
    let pair = |p: (&[GaussianEmbedding], &[GaussianEmbedding]), m: (&[GaussianEmbedding], &[GaussianEmbedding])| {
        pair_loss_difference(p, m, y, &step, plus_a, cfg)
    };
    let identity = MatchMatrix::identity(b);
    let intra = |p: (&[GaussianEmbedding], &[GaussianEmbedding]), m: (&[GaussianEmbedding], &[GaussianEmbedding])| {
        pair_loss_difference(p, m, &identity, &step, plus_a, cfg)
    };
    let mut inter = 0.0;
    for (p, m) in inter_pairings(&vp).into_iter().zip(inter_pairings(&vm)) {
        inter += pair(p, m);
    }
    let intra_img = intra((vp.view1, vp.view2), (vm.view1, vm.view2));
    let intra_txt = intra((vp.sect1, vp.sect2), (vm.sect1, vm.sect2));
    let kl_img = (kl_difference(vp.view1, vm.view1) + kl_difference(vp.view2, vm.view2)) / (2 * b) as f64;
    let kl_txt = (kl_difference(vp.sect1, vm.sect1) + kl_difference(vp.sect2, vm.sect2)) / (2 * b) as f64;
    Ok(inter / 4.0
        + cfg.lambda_img * intra_img
        + cfg.lambda_txt * intra_txt
        + cfg.beta_img * kl_img
        + cfg.beta_txt * kl_txt)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_square(sim: &Matrix, temperature: f64) -> Result<usize> {
    if sim.rows() != sim.cols() {
        return Err(Error::invalid(format!("similarity matrix must be square, got {}x{}", sim.rows(), sim.cols())));
    }
    if sim.rows() == 0 {
        return Err(Error::invalid("empty similarity matrix"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if sim.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite similarity"));
    }
    Ok(sim.rows())
}

/// Bidirectional InfoNCE against the diagonal, logits `sim / temperature`.
pub fn infonce_loss(sim: &Matrix, temperature: f64) -> Result<f64> {
    Ok(infonce_loss_with_grad(sim, temperature)?.0)
}

/// InfoNCE loss and its gradient with respect to `sim`.
pub fn infonce_loss_with_grad(sim: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let n = check_square(sim, temperature)?;
    let logits = sim.map(|x| x / temperature);
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(logits.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| logits.get(i, j)))).collect();
    let mut loss = 0.0;
    for i in 0..n {
        loss += 0.5 * (row_lse[i] - logits.get(i, i)) + 0.5 * (col_lse[i] - logits.get(i, i));
    }
    loss /= n as f64;
    let scale = 0.5 / (n as f64 * temperature);
    let grad = Matrix::from_fn(n, n, |i, j| {
        let row_soft = (logits.get(i, j) - row_lse[i]).exp();
        let col_soft = (logits.get(i, j) - col_lse[j]).exp();
        let target = if i == j { 2.0 } else { 0.0 };
        scale * (row_soft + col_soft - target)
    });
    Ok((loss, grad))
}
