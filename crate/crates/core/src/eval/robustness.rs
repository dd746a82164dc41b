//! Relative recall under image corruptions.
//!
//! For each (kind, severity) only the query images are corrupted; the text
//! gallery is encoded once from clean reports. Relative recall is
//! `R@K(perturbed) / R@K(clean)`, undefined when the clean recall is zero.

use serde::{Deserialize, Serialize};

use crate::eval::retrieval::{distance_matrix, ranks};
use crate::perturb::{perturb_image, PerturbKind, PerturbSpec};
use crate::synth::{derive_seed, SynthStudy};
use crate::trainer::DualEncoder;
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub kind: PerturbKind,
    pub severity: u8,
    pub k: usize,
    pub clean: f64,
    pub perturbed: f64,
    /// `None` when the clean recall is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub entries: Vec<RobustnessEntry>,
}

impl RobustnessReport {
    pub fn get(&self, kind: PerturbKind, severity: u8, k: usize) -> Option<&RobustnessEntry> {
        self.entries.iter().find(|e| e.kind == kind && e.severity == severity && e.k == k)
    }
}

pub fn relative_recall(clean: f64, perturbed: f64) -> Option<f64> {
    (clean > 0.0).then(|| perturbed / clean)
}

fn recalls(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = ranks.len().max(1) as f64;
    ks.iter().map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n).collect()
}

/// Image-to-text R@K for every kind, severity and cut-off.
///
/// Each study's corruption seed is derived from `seed`, the kind, the severity
/// and the study index, so reports are reproducible and independent of order.
pub fn robustness_report(
    model: &DualEncoder,
    studies: &[SynthStudy],
    kinds: &[PerturbKind],
    severities: &[u8],
    ks: &[usize],
    seed: u64,
) -> Result<RobustnessReport> {
    if studies.is_empty() {
        return Err(Error::invalid("robustness needs at least one study"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > studies.len()) {
        return Err(Error::invalid(format!("K must lie in 1..={}, got {k}", studies.len())));
    }
    let texts = par::map_slice(studies, |s| model.encode_text(&s.sect1)).into_iter().collect::<Result<Vec<_>>>()?;
    let gt: Vec<usize> = (0..studies.len()).collect();
    let eval_images = |images: Vec<Result<crate::GaussianEmbedding>>| -> Result<Vec<f64>> {
        let images = images.into_iter().collect::<Result<Vec<_>>>()?;
        let dist = distance_matrix(&images, &texts, model.scoring)?;
        Ok(recalls(&ranks(&dist, &gt)?, ks))
    };
    let clean = eval_images(par::map_slice(studies, |s| model.encode_image(s.view1.as_slice())))?;

    let mut entries = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for &severity in severities {
            let perturbed = if severity == 0 {
                clean.clone()
            } else {
                let base = derive_seed(derive_seed(seed, ki as u64), severity as u64);
                let images = par::map_range(studies.len(), |i| {
                    let spec = PerturbSpec { kind, severity, seed: derive_seed(base, i as u64) };
                    let img = perturb_image(&studies[i].view1, &spec)?;
                    model.encode_image(img.as_slice())
                });
                eval_images(images)?
            };
            for (j, &k) in ks.iter().enumerate() {
                entries.push(RobustnessEntry {
                    kind,
                    severity,
                    k,
                    clean: clean[j],
                    perturbed: perturbed[j],
                    ratio: relative_recall(clean[j], perturbed[j]),
                });
            }
        }
    }
    Ok(RobustnessReport { entries })
}
