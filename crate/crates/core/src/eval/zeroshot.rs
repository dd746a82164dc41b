//! Zero-shot classification by nearest class-prompt embedding.

use serde::{Deserialize, Serialize};

use crate::eval::retrieval::{argmin, distance_matrix};
use crate::gaussian::GaussianEmbedding;
use crate::trainer::Scoring;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// Per-class recall in percent; `None` for classes with no images.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes that have images.
    pub mean: f64,
    pub predictions: Vec<usize>,
}

/// Predicts each image's class as the prompt at the smallest distance (under
/// CSD this is also the prompt with the highest match probability).
pub fn zero_shot_eval(
    images: &[GaussianEmbedding],
    prompts: &[GaussianEmbedding],
    labels: &[usize],
    scoring: Scoring,
) -> Result<ZeroShotReport> {
    let c = prompts.len();
    if c == 0 {
        return Err(Error::invalid("need at least one class prompt"));
    }
    if labels.len() != images.len() {
        return Err(Error::dims(images.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    let dist = distance_matrix(images, prompts, scoring)?;
    let predictions: Vec<usize> = (0..images.len()).map(|i| argmin(dist.row(i))).collect();
    let mut totals = vec![0usize; c];
    let mut hits = vec![0usize; c];
    for (&l, &p) in labels.iter().zip(&predictions) {
        totals[l] += 1;
        hits[l] += usize::from(l == p);
    }
    let per_class: Vec<Option<f64>> =
        totals.iter().zip(&hits).map(|(&t, &h)| (t > 0).then(|| 100.0 * h as f64 / t as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(ZeroShotReport { per_class, mean, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn emb(mu: Vec<f64>) -> GaussianEmbedding {
        GaussianEmbedding::isotropic(mu, -2.0).unwrap()
    }

    #[test]
    fn self_match_is_classified() {
        let prompts = vec![emb(vec![5.0, 0.0]), emb(vec![-5.0, 0.0]), emb(vec![0.0, 5.0])];
        let images = prompts.clone();
        let r = zero_shot_eval(&images, &prompts, &[0, 1, 2], Scoring::Csd).unwrap();
        assert_eq!(r.predictions, vec![0, 1, 2]);
        assert_eq!(r.mean, 100.0);
    }

    #[test]
    fn single_class_is_perfect() {
        let r = zero_shot_eval(&[emb(vec![1.0]), emb(vec![-3.0])], &[emb(vec![0.0])], &[0, 0], Scoring::Csd).unwrap();
        assert_eq!(r.mean, 100.0);
    }

    #[test]
    fn empty_class_excluded() {
        let prompts = vec![emb(vec![5.0]), emb(vec![-5.0])];
        let r = zero_shot_eval(&[emb(vec![4.0])], &prompts, &[0], Scoring::Csd).unwrap();
        assert_eq!(r.per_class, vec![Some(100.0), None]);
        assert_eq!(r.mean, 100.0);
        assert!(zero_shot_eval(&[emb(vec![4.0])], &prompts, &[2], Scoring::Csd).is_err());
    }

    #[test]
    fn random_embeddings_hit_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = 5;
        let mut draw = |n: usize| -> Vec<GaussianEmbedding> {
            (0..n).map(|_| emb((0..4).map(|_| StandardNormal.sample(&mut rng)).collect())).collect()
        };
        let mut correct = 0usize;
        let trials = 200;
        let per_trial = 50;
        for t in 0..trials {
            let prompts = draw(c);
            let images = draw(per_trial);
            let labels: Vec<usize> = (0..per_trial).map(|i| (i + t) % c).collect();
            let r = zero_shot_eval(&images, &prompts, &labels, Scoring::Csd).unwrap();
            correct += r.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let n = (trials * per_trial) as f64;
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        // prompts are shared within a trial, so allow for the clustering
        let acc = correct as f64 / n;
        assert!((acc - p).abs() < 3.0 * sigma * (per_trial as f64).sqrt(), "{acc}");
    }
}
