//! Synthetic many-to-many multi-view dataset.
//!
//! Each study has a latent class and a latent instance code. Both image views
//! and both report sections render the class prototype plus a projection of the
//! instance code, each with independent noise, so instance-level retrieval is
//! learnable. With probability `ambiguity` a study's report is instead rendered
//! from the midpoint between its class prototype and the prototype of a ring
//! neighbour (`c - 1` or `c + 1`, chosen at random), with a freshly drawn
//! instance code. Such reports plausibly match many images of two classes,
//! which is the unannotated false-negative structure the probabilistic
//! objective is meant to absorb.
//!
//! Generation is a pure function of [`SynthConfig`]. Shared prototypes come from
//! one stream keyed on the seed; each study draws from its own stream derived
//! from `(seed, index)`, so studies can be generated in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::par;
use crate::perturb::{gaussian_blur, shift, Grid};
use crate::{Error, Result};

/// Interpolation weight toward the neighbour prototype for ambiguous reports.
pub const AMBIGUOUS_MIX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Per-pixel bound on `|view2 - view1|`.
    pub amplitude: f64,
    /// Largest crop-and-pad offset in pixels.
    pub max_shift: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { amplitude: 0.1, max_shift: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_studies: usize,
    pub n_classes: usize,
    pub ambiguity: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    /// Weight of the instance code relative to the class prototype.
    pub instance_scale: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Fraction of studies generated without a second view.
    pub missing_view_rate: f64,
    pub jitter: JitterConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_studies: 2000,
            n_classes: 10,
            ambiguity: 0.3,
            seed: 42,
            height: 10,
            width: 10,
            text_dim: 32,
            latent_dim: 8,
            instance_scale: 0.6,
            image_noise: 0.05,
            text_noise: 0.2,
            missing_view_rate: 0.1,
            jitter: JitterConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn new(n_studies: usize, n_classes: usize, ambiguity: f64, seed: u64) -> Self {
        Self { n_studies, n_classes, ambiguity, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_studies < 1 {
            return Err(Error::invalid("n_studies must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be >= 2"));
        }
        for (name, p) in [("ambiguity", self.ambiguity), ("missing_view_rate", self.missing_view_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.height == 0 || self.width == 0 || self.text_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("height, width, text_dim and latent_dim must be positive"));
        }
        for (name, v) in [
            ("instance_scale", self.instance_scale),
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
            ("jitter.amplitude", self.jitter.amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One study: two image views, two report sections, labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStudy {
    pub id: String,
    pub view1: Grid,
    /// `None` until filled by [`synthesize_missing_view`].
    pub view2: Option<Grid>,
    pub sect1: Vec<f64>,
    pub sect2: Vec<f64>,
    pub class_label: usize,
    /// Class whose prototype the report was rendered from (a neighbour when ambiguous).
    pub text_class: usize,
    /// Interpolation weight toward the neighbour class; 0 for clean studies.
    pub ambiguity: f64,
}

impl SynthStudy {
    pub fn is_ambiguous(&self) -> bool {
        self.ambiguity > 0.0
    }

    /// Second view, if present.
    pub fn view2(&self) -> Result<&Grid> {
        self.view2.as_ref().ok_or_else(|| Error::invalid(format!("study {} has no second view", self.id)))
    }
}

/// Generated studies plus the shared class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub studies: Vec<SynthStudy>,
    /// Clean report prototype per class; used as zero-shot class prompts.
    pub text_prototypes: Vec<Vec<f64>>,
    pub image_prototypes: Vec<Grid>,
}

impl SynthDataset {
    pub fn class_prompts(&self) -> &[Vec<f64>] {
        &self.text_prototypes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.studies.iter().map(|s| s.class_label).collect()
    }

    /// Splits off the last `round(n * fraction)` studies as a held-out set.
    pub fn split(&self, test_fraction: f64) -> Result<(SynthDataset, SynthDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction must lie in [0, 1), got {test_fraction}")));
        }
        let n = self.studies.len();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let cut = n - n_test;
        let part = |studies: &[SynthStudy]| SynthDataset {
            config: self.config.clone(),
            studies: studies.to_vec(),
            text_prototypes: self.text_prototypes.clone(),
            image_prototypes: self.image_prototypes.clone(),
        };
        Ok((part(&self.studies[..cut]), part(&self.studies[cut..])))
    }
}

/// Mixes `(seed, index)` into an independent stream seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Smooth random field with zero mean and unit standard deviation.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    let raw = Grid::new(h, w, normal_vec(rng, h * w)).expect("positive dims");
    let blurred = gaussian_blur(&raw, 1.0);
    let n = (h * w) as f64;
    let mean = blurred.as_slice().iter().sum::<f64>() / n;
    let var = blurred.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    blurred.map(|v| (v - mean) / sd)
}

struct Prototypes {
    image: Vec<Grid>,
    text: Vec<Vec<f64>>,
    image_basis: Vec<Grid>,
    sect1_basis: Vec<Vec<f64>>,
    sect2_basis: Vec<Vec<f64>>,
}

fn draw_prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let (h, w) = (cfg.height, cfg.width);
    let image = (0..cfg.n_classes).map(|_| smooth_field(&mut rng, h, w)).collect();
    let text = (0..cfg.n_classes).map(|_| normal_vec(&mut rng, cfg.text_dim)).collect();
    let image_basis = (0..cfg.latent_dim).map(|_| smooth_field(&mut rng, h, w)).collect();
    // columns scaled so the projected code has unit variance per coordinate
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let basis = |rng: &mut ChaCha8Rng| {
        (0..cfg.latent_dim)
            .map(|_| normal_vec(rng, cfg.text_dim).into_iter().map(|v| v * scale).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let sect1_basis = basis(&mut rng);
    let sect2_basis = basis(&mut rng);
    Prototypes { image, text, image_basis, sect1_basis, sect2_basis }
}

fn render_view(p: &Prototypes, cfg: &SynthConfig, class: usize, code: &[f64], rng: &mut ChaCha8Rng) -> Grid {
    let n = cfg.height * cfg.width;
    let img_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let proto = p.image[class].as_slice();
    let data = (0..n)
        .map(|k| {
            let inst: f64 = code.iter().zip(&p.image_basis).map(|(c, b)| c * b.as_slice()[k]).sum();
            let noise: f64 = StandardNormal.sample(rng);
            let v = 0.5 + 0.15 * (proto[k] + cfg.instance_scale * img_scale * inst) + cfg.image_noise * noise;
            v.clamp(0.0, 1.0)
        })
        .collect();
    Grid::new(cfg.height, cfg.width, data).expect("positive dims")
}

fn render_section(
    proto: &[f64],
    basis: &[Vec<f64>],
    cfg: &SynthConfig,
    code: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..cfg.text_dim)
        .map(|k| {
            let inst: f64 = code.iter().zip(basis).map(|(c, b)| c * b[k]).sum();
            let noise: f64 = StandardNormal.sample(rng);
            proto[k] + cfg.instance_scale * inst + cfg.text_noise * noise
        })
        .collect()
}

fn generate_study(p: &Prototypes, cfg: &SynthConfig, index: usize) -> SynthStudy {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let c = cfg.n_classes;
    let class_label = rng.random_range(0..c);
    let code = normal_vec(&mut rng, cfg.latent_dim);
    let ambiguous = rng.random::<f64>() < cfg.ambiguity;
    let (text_class, mix) = if ambiguous {
        let neighbour = if rng.random::<bool>() { (class_label + 1) % c } else { (class_label + c - 1) % c };
        (neighbour, AMBIGUOUS_MIX)
    } else {
        (class_label, 0.0)
    };
    let text_proto: Vec<f64> =
        p.text[class_label].iter().zip(&p.text[text_class]).map(|(own, nb)| (1.0 - mix) * own + mix * nb).collect();
    // An ambiguous report is re-drawn: it keeps none of the image's instance
    // code, so it plausibly matches many images of either class.
    let redrawn = normal_vec(&mut rng, cfg.latent_dim);
    let text_code = if ambiguous { &redrawn } else { &code };
    let missing = rng.random::<f64>() < cfg.missing_view_rate;

    let view1 = render_view(p, cfg, class_label, &code, &mut rng);
    let view2 = render_view(p, cfg, class_label, &code, &mut rng);
    let sect1 = render_section(&text_proto, &p.sect1_basis, cfg, text_code, &mut rng);
    let sect2 = render_section(&text_proto, &p.sect2_basis, cfg, text_code, &mut rng);
    SynthStudy {
        id: format!("study-{index:06}"),
        view1,
        view2: (!missing).then_some(view2),
        sect1,
        sect2,
        class_label,
        text_class,
        ambiguity: mix,
    }
}

/// Generates a dataset; second views may be missing (see [`fill_missing_views`]).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let protos = draw_prototypes(cfg);
    let studies = par::map_range(cfg.n_studies, |i| generate_study(&protos, cfg, i));
    Ok(SynthDataset { config: cfg.clone(), studies, text_prototypes: protos.text, image_prototypes: protos.image })
}

/// Builds a second view from the first: a crop-and-pad shift plus uniform
/// noise, with the per-pixel change bounded by `jitter.amplitude`.
pub fn synthesize_missing_view(study: &SynthStudy, jitter: &JitterConfig, seed: u64) -> SynthStudy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = jitter.max_shift as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let shifted = shift(&study.view1, dy, dx);
    let half = jitter.amplitude / 2.0;
    let data: Vec<f64> = study
        .view1
        .as_slice()
        .iter()
        .zip(shifted.as_slice())
        .map(|(&orig, &moved)| {
            let noise = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
            (orig + (moved - orig).clamp(-half, half) + noise).clamp(0.0, 1.0)
        })
        .collect();
    let view2 = Grid::new(study.view1.height(), study.view1.width(), data).expect("same dims as view1");
    SynthStudy { view2: Some(view2), ..study.clone() }
}

/// Fills every missing second view, each study keyed on `(seed, index)`.
pub fn fill_missing_views(dataset: &SynthDataset, seed: u64) -> SynthDataset {
    let jitter = dataset.config.jitter;
    let studies = par::map_range(dataset.studies.len(), |i| {
        let study = &dataset.studies[i];
        if study.view2.is_some() {
            study.clone()
        } else {
            synthesize_missing_view(study, &jitter, derive_seed(seed ^ 0xA11CE, i as u64))
        }
    });
    SynthDataset { studies, ..dataset.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(n: usize, ambiguity: f64, seed: u64) -> SynthConfig {
        SynthConfig { n_studies: n, ambiguity, seed, ..Default::default() }
    }

    #[test]
    fn no_ambiguity_means_matching_text_class() {
        let ds = generate_dataset(&small(300, 0.0, 1)).unwrap();
        assert!(ds.studies.iter().all(|s| s.text_class == s.class_label && s.ambiguity == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(50, 0.3, 9)).unwrap();
        let b = generate_dataset(&small(50, 0.3, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(50, 0.3, 10)).unwrap();
        assert_ne!(a.studies, c.studies);
    }

    #[test]
    fn cardinality_and_unique_ids() {
        let ds = generate_dataset(&small(100, 0.3, 2)).unwrap();
        assert_eq!(ds.studies.len(), 100);
        let ids: HashSet<_> = ds.studies.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 100);
        assert_eq!(ds.text_prototypes.len(), 10);
    }

    #[test]
    fn studies_respect_invariants() {
        let ds = generate_dataset(&small(200, 0.5, 3)).unwrap();
        for s in &ds.studies {
            assert!(s.class_label < 10 && s.text_class < 10);
            assert!((0.0..=1.0).contains(&s.ambiguity));
            assert!(s.view1.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            if let Some(v2) = &s.view2 {
                assert_eq!((v2.height(), v2.width()), (s.view1.height(), s.view1.width()));
            }
            if s.is_ambiguous() {
                let diff = (s.text_class + 10 - s.class_label) % 10;
                assert!(diff == 1 || diff == 9);
            }
        }
    }

    #[test]
    fn ambiguity_rate_within_three_sigma() {
        let rate = 0.3;
        let ds = generate_dataset(&SynthConfig { height: 2, width: 2, text_dim: 2, ..small(10_000, rate, 4) }).unwrap();
        let hits = ds.studies.iter().filter(|s| s.is_ambiguous()).count() as f64;
        let n = 10_000.0;
        let sigma = (n * rate * (1.0 - rate)).sqrt();
        assert!((hits - n * rate).abs() <= 3.0 * sigma, "{hits} ambiguous of {n}");
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(generate_dataset(&small(0, 0.1, 0)).is_err());
        assert!(generate_dataset(&SynthConfig { n_classes: 1, ..small(10, 0.1, 0) }).is_err());
        assert!(generate_dataset(&small(10, 1.5, 0)).is_err());
    }

    #[test]
    fn missing_view_synthesis() {
        let ds = generate_dataset(&SynthConfig { missing_view_rate: 1.0, ..small(20, 0.0, 5) }).unwrap();
        let jitter = JitterConfig { amplitude: 0.08, max_shift: 2 };
        for s in &ds.studies {
            assert!(s.view2.is_none());
            let filled = synthesize_missing_view(s, &jitter, 123);
            let v2 = filled.view2.as_ref().unwrap();
            assert_eq!((v2.height(), v2.width()), (s.view1.height(), s.view1.width()));
            assert_eq!(filled, synthesize_missing_view(s, &jitter, 123));
            assert!(s.view1.mean_abs_diff(v2) <= jitter.amplitude);
            assert!(s
                .view1
                .as_slice()
                .iter()
                .zip(v2.as_slice())
                .all(|(a, b)| (a - b).abs() <= jitter.amplitude + 1e-15));
        }
        let filled = fill_missing_views(&ds, 7);
        assert!(filled.studies.iter().all(|s| s.view2.is_some()));
        assert_eq!(filled, fill_missing_views(&ds, 7));
    }

    #[test]
    fn split_keeps_order() {
        let ds = generate_dataset(&small(10, 0.0, 6)).unwrap();
        let (train, test) = ds.split(0.2).unwrap();
        assert_eq!(train.studies.len(), 8);
        assert_eq!(test.studies[0].id, "study-000008");
    }
}
