//! Subcommand bodies. Every command reads and writes fixed file names inside
//! `out_dir` and echoes its effective config there as `config.<command>.toml`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use probembed::eval::retrieval::{distance_matrix, ground_truth_by_id};
use probembed::eval::{
    retrieval_report, robustness_report, rsum, selective_summary, zero_shot_eval, Direction, STANDARD_KS,
};
use probembed::store::{read_dataset, read_store, write_dataset, write_store};
use probembed::synth::generate_dataset;
use probembed::trainer::checkpoint::{read_checkpoint, write_checkpoint};
use probembed::trainer::{encode_corpus, encode_texts, fit, random_gradient_checks, Scoring, TrainState};
use probembed::{EmbeddingStore, Error, LossBreakdown, SynthDataset};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{
    export_csv, write_report, write_text, GradCheckOutput, RecallRow, Report, RetrievalOutput, RobustnessOutput,
    SelectiveOutput, ZeroShotOutput,
};

pub const DATASET_FILE: &str = "dataset.pgds";
pub const MANIFEST_FILE: &str = "dataset.manifest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "train_history.json";
pub const IMAGES_FILE: &str = "images.pges";
pub const TEXTS_FILE: &str = "texts.pges";
pub const RETRIEVAL_JSON: &str = "retrieval.json";
pub const RETRIEVAL_CSV: &str = "retrieval.csv";
pub const ZEROSHOT_JSON: &str = "zeroshot.json";
pub const ROBUSTNESS_JSON: &str = "robustness.json";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

pub fn selective_json(k: usize) -> String {
    format!("selective_k{k}.json")
}

pub fn risk_coverage_csv(k: usize) -> String {
    format!("risk_coverage_k{k}.csv")
}

struct Run<'a> {
    cfg: &'a RunConfig,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn prepare(&self, command: &str) -> Result<(), CliError> {
        let dir = &self.cfg.out_dir;
        fs::create_dir_all(dir).map_err(|source| CliError::Core(Error::Io { path: dir.clone(), source }))?;
        write_text(&self.path(&format!("config.{command}.toml")), &self.cfg.to_toml())
    }

    /// The stored dataset, rejected when it was generated from other settings.
    fn dataset(&self) -> Result<SynthDataset, CliError> {
        let path = self.path(DATASET_FILE);
        let ds = read_dataset(&path)?;
        if ds.config != self.cfg.synth() {
            return Err(CliError::Core(Error::Validation {
                path,
                reason: "generated with different dataset settings; rerun gen-data".into(),
            }));
        }
        Ok(ds)
    }

    fn test_split(&self) -> Result<SynthDataset, CliError> {
        Ok(self.dataset()?.split(self.cfg.test_fraction)?.1)
    }

    fn model(&self) -> Result<TrainState, CliError> {
        let state = read_checkpoint(self.path(MODEL_FILE))?;
        let expected = self.cfg.train_objective().scoring();
        if state.model.scoring != expected {
            return Err(CliError::Config(format!(
                "{} was trained with {:?} scoring but the config objective implies {expected:?}",
                self.path(MODEL_FILE).display(),
                state.model.scoring
            )));
        }
        Ok(state)
    }

    fn stores(&self) -> Result<(EmbeddingStore, EmbeddingStore), CliError> {
        Ok((read_store(self.path(IMAGES_FILE))?, read_store(self.path(TEXTS_FILE))?))
    }

    fn scoring(&self) -> Scoring {
        self.cfg.train_objective().scoring()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    seed: u64,
    n_studies: usize,
    n_train: usize,
    n_test: usize,
    test_fraction: f64,
    n_ambiguous: usize,
    n_missing_view2: usize,
    config: &'a probembed::SynthConfig,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("gen-data")?;
    let ds = generate_dataset(&cfg.synth())?;
    let (train, test) = ds.split(cfg.test_fraction)?;
    write_dataset(&ds, run.path(DATASET_FILE))?;
    let manifest = Manifest {
        format: "PGDS v1",
        seed: cfg.seed,
        n_studies: ds.studies.len(),
        n_train: train.studies.len(),
        n_test: test.studies.len(),
        test_fraction: cfg.test_fraction,
        n_ambiguous: ds.studies.iter().filter(|s| s.is_ambiguous()).count(),
        n_missing_view2: ds.studies.iter().filter(|s| s.view2.is_none()).count(),
        config: &ds.config,
    };
    write_text(&run.path(MANIFEST_FILE), &to_json(&manifest))?;
    println!(
        "wrote {} studies ({} train, {} test, {} ambiguous) to {}",
        manifest.n_studies,
        manifest.n_train,
        manifest.n_test,
        manifest.n_ambiguous,
        run.path(DATASET_FILE).display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("train")?;
    let (train, _) = run.dataset()?.split(cfg.test_fraction)?;
    let result = fit(&train, &cfg.train(), &cfg.train_objective())?;
    for (epoch, loss) in result.history.iter().enumerate() {
        println!("epoch {:>3}/{} loss {:.6}", epoch + 1, cfg.epochs, loss.total);
    }
    write_checkpoint(&result.state, run.path(MODEL_FILE))?;
    let history: Vec<LossBreakdown> = result.history;
    write_text(&run.path(HISTORY_FILE), &to_json(&history))?;
    let s = &result.state.model.scalars;
    println!("a {:.6} b {:.6}; wrote {}", s.a(), s.b, run.path(MODEL_FILE).display());
    Ok(())
}

pub fn encode(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("encode")?;
    let test = run.test_split()?;
    let state = run.model()?;
    let (images, texts) = encode_corpus(&state.model, &test.studies)?;
    write_store(&images, run.path(IMAGES_FILE))?;
    write_store(&texts, run.path(TEXTS_FILE))?;
    println!("encoded {} test studies into {} and {}", images.len(), IMAGES_FILE, TEXTS_FILE);
    Ok(())
}

pub fn eval_retrieval(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("eval-retrieval")?;
    let (images, texts) = run.stores()?;
    let i2t = distance_matrix(&images.embeddings(), &texts.embeddings(), run.scoring())?;
    let t2i = i2t.transpose();
    let reports = [
        retrieval_report(&i2t, &ground_truth_by_id(&images, &texts)?, Direction::I2t, &cfg.retrieval_ks)?,
        retrieval_report(&t2i, &ground_truth_by_id(&texts, &images)?, Direction::T2i, &cfg.retrieval_ks)?,
    ];
    let mut rows = Vec::new();
    for r in &reports {
        for (&k, &value) in &r.recall_at {
            println!("{} R@{k} {value:.6}", r.direction);
            rows.push(RecallRow { direction: r.direction, k, value });
        }
    }
    let total: f64 = rows.iter().map(|r| r.value).sum();
    // RSUM proper needs the four standard cut-offs; otherwise report the plain sum.
    let standard =
        STANDARD_KS.iter().all(|k| cfg.retrieval_ks.contains(k)) && cfg.retrieval_ks.len() == STANDARD_KS.len();
    let rsum_value = if standard { rsum(&reports[0], &reports[1])? } else { total };
    println!("{} {rsum_value:.6}", if standard { "RSUM" } else { "sum" });
    let report =
        Report::Retrieval(RetrievalOutput { scoring: run.scoring(), n_queries: images.len(), rsum: rsum_value, rows });
    write_report(&report, &run.path(RETRIEVAL_JSON))?;
    export_csv(&report, &run.path(RETRIEVAL_CSV))
}

pub fn eval_zeroshot(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("eval-zeroshot")?;
    let test = run.test_split()?;
    let state = run.model()?;
    let (images, _) = run.stores()?;
    let label_of: HashMap<&str, usize> = test.studies.iter().map(|s| (s.id.as_str(), s.class_label)).collect();
    let labels = images
        .ids()
        .iter()
        .map(|id| {
            label_of.get(id.as_str()).copied().ok_or_else(|| {
                CliError::Core(Error::Validation {
                    path: run.path(IMAGES_FILE),
                    reason: format!("id {id:?} is not in the test split"),
                })
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let prompts = encode_texts(&state.model, test.class_prompts())?;
    let zs = zero_shot_eval(&images.embeddings(), &prompts, &labels, state.model.scoring)?;
    for (c, acc) in zs.per_class.iter().enumerate() {
        match acc {
            Some(v) => println!("class {c} {v:.6}"),
            None => println!("class {c} NA"),
        }
    }
    println!("mean {:.6}", zs.mean);
    let report = Report::ZeroShot(ZeroShotOutput {
        n_classes: prompts.len(),
        n_images: labels.len(),
        mean: zs.mean,
        per_class: zs.per_class,
    });
    write_report(&report, &run.path(ZEROSHOT_JSON))
}

pub fn eval_selective(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("eval-selective")?;
    let state = run.model()?;
    let (images, texts) = run.stores()?;
    let (img, txt) = (images.embeddings(), texts.embeddings());
    let i2t = distance_matrix(&img, &txt, run.scoring())?;
    let t2i = i2t.transpose();
    let gt_i2t = ground_truth_by_id(&images, &texts)?;
    let gt_t2i = ground_truth_by_id(&texts, &images)?;
    for &k in &cfg.selective_ks {
        let mut summaries = Vec::new();
        for (d, (dist, gt, queries)) in
            [(Direction::I2t, (&i2t, &gt_i2t, &img)), (Direction::T2i, (&t2i, &gt_t2i, &txt))]
        {
            let seed = probembed::synth::derive_seed(cfg.seed, k as u64 * 2 + u64::from(d == Direction::T2i));
            let s = selective_summary(
                dist,
                gt,
                queries,
                &state.model.scalars,
                d,
                k,
                cfg.random_controls,
                cfg.ece_bins,
                seed,
            )?;
            for curve in &s.curves {
                println!("{d} K={k} {} AURC {:.6}", curve.confidence_source, curve.aurc);
            }
            println!(
                "{d} K={k} random mean AURC {:.6} (sd {:.6}, {} controls); ECE {:.6}",
                s.random_mean_aurc, s.random_std_aurc, s.random_controls, s.ece
            );
            summaries.push(s);
        }
        let report = Report::Selective(SelectiveOutput { k, summaries });
        write_report(&report, &run.path(&selective_json(k)))?;
        export_csv(&report, &run.path(&risk_coverage_csv(k)))?;
    }
    Ok(())
}

pub fn eval_robustness(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("eval-robustness")?;
    let test = run.test_split()?;
    let state = run.model()?;
    let r = robustness_report(
        &state.model,
        &test.studies,
        &cfg.perturb_kinds,
        &cfg.perturb_severities,
        &cfg.robustness_ks,
        cfg.seed,
    )?;
    for e in &r.entries {
        let ratio = e.ratio.map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
        println!("{} severity {} R@{} {:.6} ratio {ratio}", e.kind, e.severity, e.k, e.perturbed);
    }
    let report = Report::Robustness(RobustnessOutput { n_queries: test.studies.len(), entries: r.entries });
    write_report(&report, &run.path(ROBUSTNESS_JSON))?;
    export_csv(&report, &run.path(ROBUSTNESS_CSV))
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run { cfg };
    run.prepare("gradcheck")?;
    let ds = generate_dataset(&cfg.synth())?;
    let batches = random_gradient_checks(
        &ds,
        &cfg.train(),
        &cfg.train_objective(),
        cfg.gradcheck_batches,
        cfg.gradcheck_batch_size,
        cfg.gradcheck_h,
    )?;
    let max_rel_error = batches.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    let passed = max_rel_error < cfg.gradcheck_tolerance;
    let checked: usize = batches.iter().map(|b| b.checked).sum();
    println!("checked {checked} partial derivatives over {} batches", batches.len());
    println!("max relative error {max_rel_error:.6e}");
    let report = Report::GradCheck(GradCheckOutput {
        batch_size: cfg.gradcheck_batch_size,
        h: cfg.gradcheck_h,
        tolerance: cfg.gradcheck_tolerance,
        max_rel_error,
        passed,
        batches,
    });
    write_report(&report, &run.path(GRADCHECK_JSON))?;
    if passed {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed { max_rel_error, tolerance: cfg.gradcheck_tolerance })
    }
}

/// Converts a JSON report into its CSV form; needs no config.
pub fn export(report: &Path, output: &Path) -> Result<(), CliError> {
    let r = crate::report::read_report(report)?;
    export_csv(&r, output)?;
    println!("wrote {} CSV to {}", r.name(), output.display());
    Ok(())
}
