use crate::{Error, Result};

/// Expected calibration error over `n_bins` equal-width bins on `[0, 1]`.
///
/// `ECE = sum_b (n_b / n) |mean confidence_b - accuracy_b|`; empty bins are
/// skipped and a confidence of exactly 1 falls in the last bin.
pub fn ece(probabilities: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if probabilities.len() != correct.len() {
        return Err(Error::dims(probabilities.len(), correct.len()));
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be >= 1"));
    }
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let n = probabilities.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&p, &c) in probabilities.iter().zip(correct) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[b] += p;
        hits[b] += usize::from(c);
        counts[b] += 1;
    }
    let mut total = 0.0;
    for b in 0..n_bins {
        if counts[b] == 0 {
            continue;
        }
        let m = counts[b] as f64;
        total += (m / n as f64) * (conf_sum[b] / m - hits[b] as f64 / m).abs();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confident_and_correct_is_zero() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
    }

    #[test]
    fn single_bin_gap() {
        let e = ece(&[0.8; 4], &[true; 4], 10).unwrap();
        assert!((e - 0.2).abs() < 1e-12);
    }

    #[test]
    fn calibrated_draws_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut last = f64::INFINITY;
        for n in [1_000, 100_000] {
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let correct: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
            let e = ece(&probs, &correct, 10).unwrap();
            assert!(e < last);
            last = e;
        }
        assert!(last < 0.01, "{last}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ece(&[0.5], &[true, false], 10).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
    }
}
