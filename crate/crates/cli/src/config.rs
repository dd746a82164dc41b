//! Flat run configuration.
//!
//! A run is described by one flat TOML table. Values are layered as
//! defaults < config file < `PROBEMBED_SEED` < command-line flags, and the
//! merged table is deserialized with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use probembed::perturb::{PerturbKind, MAX_SEVERITY};
use probembed::synth::JitterConfig;
use probembed::trainer::{Schedule, TrainConfig, TrainObjective};
use probembed::{BceMode, LossConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable overriding the config seed.
pub const SEED_ENV: &str = "PROBEMBED_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Probabilistic,
    Infonce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, initialization, shuffling and every evaluation stream.
    pub seed: u64,
    pub out_dir: PathBuf,

    pub n_studies: usize,
    pub n_classes: usize,
    pub ambiguity: f64,
    pub height: usize,
    pub width: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub instance_scale: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    pub missing_view_rate: f64,
    pub jitter_amplitude: f64,
    pub jitter_max_shift: usize,
    /// Fraction of studies held out for encoding and evaluation.
    pub test_fraction: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_max_norm: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,

    pub objective: ObjectiveKind,
    pub temperature: f64,
    pub lambda_img: f64,
    pub lambda_txt: f64,
    pub beta_img: f64,
    pub beta_txt: f64,
    pub bce_mode: BceMode,
    pub positive_weight: f64,

    pub retrieval_ks: Vec<usize>,
    pub selective_ks: Vec<usize>,
    pub random_controls: usize,
    pub ece_bins: usize,
    pub perturb_kinds: Vec<PerturbKind>,
    pub perturb_severities: Vec<u8>,
    pub robustness_ks: Vec<usize>,

    pub gradcheck_batches: usize,
    pub gradcheck_batch_size: usize,
    pub gradcheck_h: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        Self {
            seed: synth.seed,
            out_dir: PathBuf::from("out"),
            n_studies: synth.n_studies,
            n_classes: synth.n_classes,
            ambiguity: synth.ambiguity,
            height: synth.height,
            width: synth.width,
            text_dim: synth.text_dim,
            latent_dim: synth.latent_dim,
            instance_scale: synth.instance_scale,
            image_noise: synth.image_noise,
            text_noise: synth.text_noise,
            missing_view_rate: synth.missing_view_rate,
            jitter_amplitude: synth.jitter.amplitude,
            jitter_max_shift: synth.jitter.max_shift,
            test_fraction: 0.2,
            epochs: train.epochs,
            batch_size: train.batch_size,
            base_lr: train.base_lr,
            lr_min: train.lr_min,
            schedule: train.schedule,
            weight_decay: train.weight_decay,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            clip_max_norm: train.clip_max_norm,
            embed_dim: train.embed_dim,
            hidden: train.hidden,
            objective: ObjectiveKind::Probabilistic,
            temperature: 0.07,
            lambda_img: loss.lambda_img,
            lambda_txt: loss.lambda_txt,
            beta_img: loss.beta_img,
            beta_txt: loss.beta_txt,
            bce_mode: loss.mode,
            positive_weight: loss.positive_weight,
            retrieval_ks: vec![1, 5, 10, 100],
            selective_ks: vec![1, 5],
            random_controls: 100,
            ece_bins: 15,
            perturb_kinds: PerturbKind::ALL.to_vec(),
            perturb_severities: (0..=MAX_SEVERITY).collect(),
            robustness_ks: vec![1, 5, 10],
            gradcheck_batches: 20,
            gradcheck_batch_size: 4,
            gradcheck_h: 1e-5,
            gradcheck_tolerance: 1e-5,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

impl RunConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_studies: self.n_studies,
            n_classes: self.n_classes,
            ambiguity: self.ambiguity,
            seed: self.seed,
            height: self.height,
            width: self.width,
            text_dim: self.text_dim,
            latent_dim: self.latent_dim,
            instance_scale: self.instance_scale,
            image_noise: self.image_noise,
            text_noise: self.text_noise,
            missing_view_rate: self.missing_view_rate,
            jitter: JitterConfig { amplitude: self.jitter_amplitude, max_shift: self.jitter_max_shift },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_min: self.lr_min,
            schedule: self.schedule,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_max_norm: self.clip_max_norm,
            seed: self.seed,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_img: self.lambda_img,
            lambda_txt: self.lambda_txt,
            beta_img: self.beta_img,
            beta_txt: self.beta_txt,
            mode: self.bce_mode,
            positive_weight: self.positive_weight,
        }
    }

    pub fn train_objective(&self) -> TrainObjective {
        match self.objective {
            ObjectiveKind::Probabilistic => TrainObjective::Probabilistic(self.loss()),
            ObjectiveKind::Infonce => TrainObjective::InfoNce { temperature: self.temperature },
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: probembed::Error| CliError::Config(e.to_string());
        self.synth().validate().map_err(core)?;
        self.train().validate().map_err(core)?;
        self.train_objective().validate().map_err(core)?;
        check(self.test_fraction > 0.0 && self.test_fraction < 1.0, || {
            format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)
        })?;
        let n_test = (self.n_studies as f64 * self.test_fraction).round() as usize;
        check(n_test >= 1 && n_test < self.n_studies, || {
            format!("test_fraction {} leaves no train or no test studies", self.test_fraction)
        })?;
        for (name, ks) in [
            ("retrieval_ks", &self.retrieval_ks),
            ("selective_ks", &self.selective_ks),
            ("robustness_ks", &self.robustness_ks),
        ] {
            check(!ks.is_empty(), || format!("{name} must not be empty"))?;
            check(ks.iter().all(|&k| k >= 1 && k <= n_test), || {
                format!("{name} entries must lie in 1..={n_test} (the test split size)")
            })?;
        }
        check(self.random_controls >= 1, || "random_controls must be >= 1".into())?;
        check(self.ece_bins >= 1, || "ece_bins must be >= 1".into())?;
        check(self.perturb_severities.iter().all(|&s| s <= MAX_SEVERITY), || {
            format!("perturb_severities must lie in 0..={MAX_SEVERITY}")
        })?;
        check(self.gradcheck_batch_size >= 1, || "gradcheck_batch_size must be >= 1".into())?;
        check(self.gradcheck_h > 0.0 && self.gradcheck_h.is_finite(), || "gradcheck_h must be positive".into())?;
        check(self.gradcheck_tolerance > 0.0, || "gradcheck_tolerance must be positive".into())?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Config-related command-line inputs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    /// `key=value` pairs; the value is parsed as a TOML value, else taken as a string.
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn seed_value(seed: u64, origin: &str) -> Result<toml::Value, CliError> {
    i64::try_from(seed)
        .map(toml::Value::Integer)
        .map_err(|_| CliError::Config(format!("{origin}: seed {seed} exceeds {}", i64::MAX)))
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Merges file, environment seed and flags, then validates.
pub fn resolve(ov: &Overrides, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut table = match &ov.config {
        Some(path) => read_table(path)?,
        None => toml::Table::new(),
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        table.insert("seed".into(), seed_value(seed, SEED_ENV)?);
    }
    for pair in &ov.sets {
        let (key, raw) =
            pair.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {pair:?}")))?;
        table.insert(key.trim().to_string(), parse_value(raw.trim()));
    }
    if let Some(seed) = ov.seed {
        table.insert("seed".into(), seed_value(seed, "--seed")?);
    }
    if let Some(dir) = &ov.out_dir {
        table.insert("out_dir".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_values_parse_as_toml_or_string() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("[1, 5]"), toml::Value::Array(vec![1.into(), 5.into()]));
        assert_eq!(parse_value("infonce"), toml::Value::String("infonce".into()));
        assert_eq!(parse_value("\"x y\""), toml::Value::String("x y".into()));
    }

    #[test]
    fn unknown_key_rejected() {
        let ov = Overrides { sets: vec!["learning_rate=0.1".into()], ..Default::default() };
        assert!(matches!(resolve(&ov, None), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_precedence_flag_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 1\nepochs = 2\n").unwrap();
        let mut ov = Overrides { config: Some(path), ..Default::default() };
        assert_eq!(resolve(&ov, None).unwrap().seed, 1);
        assert_eq!(resolve(&ov, Some("2")).unwrap().seed, 2);
        ov.sets.push("seed=3".into());
        assert_eq!(resolve(&ov, Some("2")).unwrap().seed, 3);
        ov.seed = Some(4);
        assert_eq!(resolve(&ov, Some("2")).unwrap().seed, 4);
        assert_eq!(resolve(&ov, Some("2")).unwrap().epochs, 2);
        assert!(resolve(&ov, Some("abc")).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for set in
            ["test_fraction=0.0", "selective_ks=[]", "perturb_severities=[6]", "base_lr=-1.0", "bce_mode=\"odd\""]
        {
            let ov = Overrides { sets: vec![set.into()], ..Default::default() };
            assert!(resolve(&ov, None).is_err(), "{set}");
        }
        let ov = Overrides { sets: vec!["bce_mode=paper_literal".into()], ..Default::default() };
        assert_eq!(resolve(&ov, None).unwrap().bce_mode, BceMode::NegatedOffset);
    }
}
