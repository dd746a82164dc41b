//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Criteria 6 to 9 train the toy models described by `configs/toy.toml` on
//! seeds 0 to 4 and share them.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use probembed::eval::retrieval::distance_matrix;
use probembed::eval::stats::{median, spearman};
use probembed::eval::{
    evaluate_stores, retrieval_report, robustness_report, rsum, selective_summary, ConfidenceSource, Direction,
    RetrievalReport, STANDARD_KS,
};
use probembed::gaussian::{csd, vib_kl, vib_kl_grad};
use probembed::perturb::MAX_SEVERITY;
use probembed::store::EmbeddingStore;
use probembed::synth::{derive_seed, generate_dataset, SynthConfig};
use probembed::trainer::{encode_corpus, fit, random_gradient_checks, DualEncoder, TrainConfig, TrainObjective};
use probembed::{GaussianEmbedding, PerturbKind, SynthDataset};
use probembed_cli::config::{resolve, ObjectiveKind, Overrides, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const GRAD_TOL: f64 = 1e-5;
const GRAD_H: f64 = 1e-5;
const GRAD_BUDGET_S: f64 = 120.0;
const CSD_CLOSED_FORM_TOL: f64 = 1e-12;
const KL_ZERO_TOL: f64 = 1e-12;
const KL_SAMPLES: usize = 1_000_000;
const ORACLE_N: usize = 1000;
const ORACLE_SEEDS: u64 = 20;
const TOY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOY_BUDGET_S: f64 = 15.0 * 60.0;
const SPEARMAN_MIN: f64 = 0.5;
const RANDOM_CONTROLS: usize = 100;
const STORE_CASES: usize = 1000;

type Outcome = Result<String, String>;

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} [PRIMARY] {tag} {name}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

fn emb(mu: Vec<f64>, lv: Vec<f64>) -> GaussianEmbedding {
    GaussianEmbedding::new(mu, lv).expect("valid embedding")
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let ds = generate_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let reports =
        random_gradient_checks(&ds, &cfg, &TrainObjective::default(), 20, 4, GRAD_H).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    verdict(
        reports.len() == 20 && worst < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "max relative error {worst:.3e} < {GRAD_TOL:.0e} over {} batches of 4, {checked} partials (D={}, hidden {:?}); {secs:.1} s < {GRAD_BUDGET_S} s",
            reports.len(),
            cfg.embed_dim,
            cfg.hidden
        ),
    )
}

fn csd_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 16;
    let mut asymmetric = 0;
    let mut worst_closed = 0.0f64;
    for _ in 0..10_000 {
        let draw = |rng: &mut ChaCha8Rng| {
            let mu = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let lv = (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect();
            emb(mu, lv)
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        if csd(&a, &b).unwrap().to_bits() != csd(&b, &a).unwrap().to_bits() {
            asymmetric += 1;
        }
        // equal constant variance: 0.5 * (|delta|^2 / (2 v) + D ln(2 v))
        let lv = rng.random_range(-6.0..6.0);
        let v: f64 = f64::exp(lv);
        let c1 = emb(a.mu().to_vec(), vec![lv; dim]);
        let c2 = emb(b.mu().to_vec(), vec![lv; dim]);
        let gap2: f64 = a.mu().iter().zip(b.mu()).map(|(x, y)| (x - y).powi(2)).sum();
        let closed = 0.5 * (gap2 / (2.0 * v) + dim as f64 * (2.0 * v).ln());
        let got = csd(&c1, &c2).unwrap();
        worst_closed = worst_closed.max((got - closed).abs() / closed.abs().max(1.0));
    }
    // per-dimension minimum over s = 2 v at s = delta^2
    let step = 1e-4;
    let mut worst_min = 0.0f64;
    for gap in [0.3f64, 1.0, 1.7, 2.5] {
        let (best, _) = (1..100_000)
            .map(|k| k as f64 * step)
            .map(|s| (s, csd(&emb(vec![0.0], vec![(s / 2.0).ln()]), &emb(vec![gap], vec![(s / 2.0).ln()])).unwrap()))
            .fold((0.0, f64::INFINITY), |acc, (s, v)| if v < acc.1 { (s, v) } else { acc });
        worst_min = worst_min.max((best - gap * gap).abs());
    }
    verdict(
        asymmetric == 0 && worst_closed <= CSD_CLOSED_FORM_TOL && worst_min <= step,
        format!(
            "asymmetric pairs {asymmetric}/10000; closed-form error {worst_closed:.2e} <= {CSD_CLOSED_FORM_TOL:.0e}; grid minimum off by {worst_min:.1e} <= step {step:.0e}"
        ),
    )
}

fn vib_kl_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wide = Normal::new(0.0, 3.0).unwrap();
    let dim = 8;
    let mut negative = 0usize;
    let mut min_kl = f64::INFINITY;
    for _ in 0..KL_SAMPLES {
        let mu = (0..dim).map(|_| wide.sample(&mut rng)).collect();
        let lv = (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect();
        let kl = vib_kl(&emb(mu, lv));
        min_kl = min_kl.min(kl);
        negative += usize::from(kl < 0.0);
    }
    let at_prior = emb(vec![0.0; dim], vec![0.0; dim]);
    let kl0 = vib_kl(&at_prior);
    let (g_mu, g_lv) = vib_kl_grad(&at_prior);
    let grad_max = g_mu.iter().chain(&g_lv).fold(0.0f64, |m, g| m.max(g.abs()));
    verdict(
        negative == 0 && kl0.abs() <= KL_ZERO_TOL && grad_max <= KL_ZERO_TOL,
        format!(
            "{negative} negative of {KL_SAMPLES} (min {min_kl:.3e}); KL at N(0, I) = {kl0:.1e}; max |grad| there {grad_max:.1e}"
        ),
    )
}

fn rsum_arithmetic() -> Outcome {
    let mk = |direction, vals: [f64; 4]| RetrievalReport {
        direction,
        recall_at: STANDARD_KS.iter().copied().zip(vals).collect::<BTreeMap<_, _>>(),
    };
    let i2t = mk(Direction::I2t, [21.02, 46.88, 58.91, 92.41]);
    let t2i = mk(Direction::T2i, [19.96, 47.44, 59.42, 92.58]);
    let total = rsum(&i2t, &t2i).map_err(|e| e.to_string())?;
    verdict(total == 438.62, format!("rsum = {total:?} (expected exactly 438.62)"))
}

fn random_oracle() -> Outcome {
    let dim = 16;
    let mut sums = [[0.0f64; 4]; 2];
    for seed in 0..ORACLE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, seed));
        let mut draw = || -> Vec<GaussianEmbedding> {
            (0..ORACLE_N)
                .map(|_| emb((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(), vec![0.0; dim]))
                .collect()
        };
        let (img, txt) = (draw(), draw());
        let gt: Vec<usize> = (0..ORACLE_N).collect();
        let i2t = distance_matrix(&img, &txt, probembed::trainer::Scoring::Csd).unwrap();
        for (d, dist) in [i2t.transpose(), i2t].iter().rev().enumerate() {
            let r = retrieval_report(dist, &gt, Direction::I2t, &STANDARD_KS).unwrap();
            for (j, k) in STANDARD_KS.iter().enumerate() {
                sums[d][j] += r.get(*k).unwrap();
            }
        }
    }
    let mut worst_z = 0.0f64;
    let mut parts = Vec::new();
    for (j, &k) in STANDARD_KS.iter().enumerate() {
        let p = k as f64 / ORACLE_N as f64;
        let sigma = 100.0 * (p * (1.0 - p) / (ORACLE_N as f64 * ORACLE_SEEDS as f64)).sqrt();
        for (d, name) in ["i2t", "t2i"].iter().enumerate() {
            let mean = sums[d][j] / ORACLE_SEEDS as f64;
            let z = (mean - 100.0 * p).abs() / sigma;
            worst_z = worst_z.max(z);
            parts.push(format!("{name} R@{k} {mean:.3}"));
        }
    }
    verdict(worst_z < 3.0, format!("max |z| {worst_z:.2} < 3 ({})", parts.join(", ")))
}

struct ToyRun {
    seed: u64,
    test: SynthDataset,
    prob: DualEncoder,
    prob_rsum: f64,
    nce_rsum: f64,
}

fn toy_config(seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    resolve(&Overrides { config: Some(path), seed: Some(seed), ..Default::default() }, None).expect("toy config")
}

fn model_rsum(model: &DualEncoder, test: &SynthDataset) -> f64 {
    let (img, txt) = encode_corpus(model, &test.studies).unwrap();
    let (i2t, t2i) = evaluate_stores(&img, &txt, model.scoring, &STANDARD_KS).unwrap();
    rsum(&i2t, &t2i).unwrap()
}

fn toy_runs() -> Result<(Vec<ToyRun>, f64), String> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in TOY_SEEDS {
        let cfg = toy_config(seed);
        let data = generate_dataset(&cfg.synth()).map_err(|e| e.to_string())?;
        let (train, test) = data.split(cfg.test_fraction).map_err(|e| e.to_string())?;
        let prob_cfg = RunConfig { objective: ObjectiveKind::Probabilistic, ..cfg.clone() };
        let nce_cfg = RunConfig { objective: ObjectiveKind::Infonce, ..cfg.clone() };
        let prob = fit(&train, &prob_cfg.train(), &prob_cfg.train_objective()).map_err(|e| e.to_string())?.state.model;
        let nce = fit(&train, &nce_cfg.train(), &nce_cfg.train_objective()).map_err(|e| e.to_string())?.state.model;
        let prob_rsum = model_rsum(&prob, &test);
        let nce_rsum = model_rsum(&nce, &test);
        runs.push(ToyRun { seed, test, prob, prob_rsum, nce_rsum });
    }
    Ok((runs, start.elapsed().as_secs_f64()))
}

fn probabilistic_vs_infonce(runs: &[ToyRun], secs: f64) -> Outcome {
    let prob: Vec<f64> = runs.iter().map(|r| r.prob_rsum).collect();
    let nce: Vec<f64> = runs.iter().map(|r| r.nce_rsum).collect();
    let (mp, mn) = (median(&prob), median(&nce));
    let cfg = toy_config(0);
    verdict(
        mp >= mn && secs < TOY_BUDGET_S,
        format!(
            "median RSUM probabilistic {mp:.2} >= InfoNCE {mn:.2} (per seed {prob:?} vs {nce:?}; n={}, C={}, ambiguity {}, {} epochs, batch {}, lr {}, temperature {}); {secs:.1} s < {TOY_BUDGET_S} s",
            cfg.n_studies, cfg.n_classes, cfg.ambiguity, cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.temperature
        ),
    )
}

fn ambiguity_variance_coupling(runs: &[ToyRun]) -> Outcome {
    let mut rhos = Vec::new();
    for r in runs {
        let amb: Vec<f64> = r.test.studies.iter().map(|s| s.ambiguity).collect();
        let var: Vec<f64> = r
            .test
            .studies
            .iter()
            .map(|s| r.prob.encode_text(&s.sect1).map(|z| z.total_variance()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        rhos.push(spearman(&amb, &var));
    }
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = rhos.iter().map(|r| format!("{r:.3}")).collect();
    verdict(
        min > SPEARMAN_MIN,
        format!(
            "Spearman(ambiguity, text total variance) per seed [{}], min {min:.3} > {SPEARMAN_MIN}",
            shown.join(", ")
        ),
    )
}

fn selective_retrieval(runs: &[ToyRun]) -> Outcome {
    let mut failures = Vec::new();
    let mut worst_margin = f64::INFINITY;
    let mut cases = 0;
    for r in runs {
        let (img, txt) = encode_corpus(&r.prob, &r.test.studies).unwrap();
        let (img, txt) = (img.embeddings(), txt.embeddings());
        let i2t = distance_matrix(&img, &txt, r.prob.scoring).unwrap();
        let t2i = i2t.transpose();
        let gt: Vec<usize> = (0..img.len()).collect();
        for (d, dist, queries) in [(Direction::I2t, &i2t, &img), (Direction::T2i, &t2i, &txt)] {
            for k in [1usize, 5] {
                let seed = derive_seed(r.seed, k as u64 * 2 + u64::from(d == Direction::T2i));
                let s =
                    selective_summary(dist, &gt, queries, &r.prob.scalars, d, k, RANDOM_CONTROLS, 15, seed).unwrap();
                let ours = s.curve(ConfidenceSource::MatchProb).unwrap().aurc;
                cases += 1;
                worst_margin = worst_margin.min(s.random_mean_aurc - ours);
                if ours >= s.random_mean_aurc {
                    failures.push(format!("seed {} {d} R@{k}: {ours:.4} >= {:.4}", r.seed, s.random_mean_aurc));
                }
            }
        }
    }
    let first = &runs[0];
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "match_prob AURC below the mean of {RANDOM_CONTROLS} random orderings in {cases}/{cases} cases (5 seeds x i2t/t2i x R@1/R@5), smallest margin {worst_margin:.4}; seed {} RSUM {:.2}",
                first.seed, first.prob_rsum
            )
        } else {
            failures.join("; ")
        },
    )
}

fn robustness_sanity(runs: &[ToyRun]) -> Outcome {
    let r = &runs[0];
    let severities: Vec<u8> = (0..=MAX_SEVERITY).collect();
    let ks = [1usize, 5, 10];
    let a = robustness_report(&r.prob, &r.test.studies, &PerturbKind::ALL, &severities, &ks, 17)
        .map_err(|e| e.to_string())?;
    let b = robustness_report(&r.prob, &r.test.studies, &PerturbKind::ALL, &severities, &ks, 17)
        .map_err(|e| e.to_string())?;
    let zero_ok =
        PerturbKind::ALL.iter().all(|&kind| ks.iter().all(|&k| a.get(kind, 0, k).unwrap().ratio == Some(1.0)));
    let ratios = |sev: u8| -> Vec<f64> {
        ks.iter().filter_map(|&k| a.get(PerturbKind::Noise, sev, k).and_then(|e| e.ratio)).collect()
    };
    let (m1, m5) = (median(&ratios(1)), median(&ratios(5)));
    verdict(
        zero_ok && a == b && m5 <= m1,
        format!(
            "severity-0 ratios all exactly 1: {zero_ok}; repeat run identical: {}; noise median ratio severity 5 {m5:.4} <= severity 1 {m1:.4}",
            a == b
        ),
    )
}

fn random_store(rng: &mut ChaCha8Rng) -> EmbeddingStore {
    let dim = rng.random_range(1..24);
    let n = rng.random_range(0..40);
    let mut store = EmbeddingStore::new(dim);
    for i in 0..n {
        let mu = (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect();
        let lv = (0..dim).map(|_| rng.random_range(-6.0..=6.0)).collect();
        let len = rng.random_range(0..12);
        let tag: String = (0..len).map(|_| char::from(rng.random_range(b'a'..=b'z'))).collect();
        store.push(format!("{i}-{tag}"), &emb(mu, lv)).unwrap();
    }
    store
}

fn pipeline_files(cwd: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fs::write(
        cwd.join("run.toml"),
        "seed = 3\nout_dir = \"out\"\nn_studies = 400\nepochs = 3\nbatch_size = 32\nbase_lr = 1e-2\n\
         retrieval_ks = [1, 5, 10, 50]\nrandom_controls = 20\nperturb_severities = [0, 2, 5]\n",
    )
    .map_err(|e| e.to_string())?;
    for step in ["gen-data", "train", "encode", "eval-retrieval", "eval-zeroshot", "eval-selective", "eval-robustness"]
    {
        let out = Command::new(env!("CARGO_BIN_EXE_probembed"))
            .current_dir(cwd)
            .env_remove("PROBEMBED_SEED")
            .args(["--config", "run.toml", step])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{step} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(cwd.join("out")).map_err(|e| e.to_string())? {
        let path: PathBuf = entry.map_err(|e| e.to_string())?.path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&path).map_err(|e| e.to_string())?,
        );
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("s.pges");
    let mut mismatched = 0;
    for _ in 0..STORE_CASES {
        let store = random_store(&mut rng);
        probembed::store::write_store(&store, &path).map_err(|e| e.to_string())?;
        let back = probembed::store::read_store(&path).map_err(|e| e.to_string())?;
        let same_bits = back.mu_raw().iter().zip(store.mu_raw()).all(|(a, b)| a.to_bits() == b.to_bits())
            && back.log_var_raw().iter().zip(store.log_var_raw()).all(|(a, b)| a.to_bits() == b.to_bits());
        if back != store || !same_bits || back.to_bytes() != fs::read(&path).unwrap() {
            mismatched += 1;
        }
    }
    let (d1, d2) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (f1, f2) = (pipeline_files(d1.path())?, pipeline_files(d2.path())?);
    let differing: Vec<&String> = f1.keys().filter(|k| f1.get(*k) != f2.get(*k)).collect();
    let csvs = f1.keys().filter(|k| k.ends_with(".csv")).count();
    verdict(
        mismatched == 0 && f1.keys().eq(f2.keys()) && differing.is_empty() && csvs >= 4,
        format!(
            "store roundtrip mismatches {mismatched}/{STORE_CASES}; pipeline run twice in separate directories: {} files ({csvs} CSV), differing {differing:?}",
            f1.len()
        ),
    )
}

fn main() {
    let mut passed = Vec::new();
    passed.push(report(1, "gradient fidelity", gradient_fidelity));
    passed.push(report(2, "CSD invariants", csd_invariants));
    passed.push(report(3, "VIB-KL", vib_kl_checks));
    passed.push(report(4, "RSUM arithmetic", rsum_arithmetic));
    passed.push(report(5, "random-retrieval oracle", random_oracle));
    let toy = catch_unwind(toy_runs).unwrap_or_else(|_| Err("toy training panicked".into()));
    match &toy {
        Ok((runs, secs)) => {
            passed.push(report(6, "probabilistic vs deterministic", || probabilistic_vs_infonce(runs, *secs)));
            passed.push(report(7, "uncertainty-ambiguity coupling", || ambiguity_variance_coupling(runs)));
            passed.push(report(8, "selective retrieval", || selective_retrieval(runs)));
            passed.push(report(9, "robustness harness sanity", || robustness_sanity(runs)));
        }
        Err(e) => {
            for (n, name) in [
                (6, "probabilistic vs deterministic"),
                (7, "uncertainty-ambiguity coupling"),
                (8, "selective retrieval"),
                (9, "robustness harness sanity"),
            ] {
                passed.push(report(n, name, || Err(format!("toy training failed: {e}"))));
            }
        }
    }
    passed.push(report(10, "storage and pipeline determinism", determinism));
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
