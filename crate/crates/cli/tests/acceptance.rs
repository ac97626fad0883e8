//! Acceptance checks, one line per criterion.
//!
//! Parts that need hours of compute or the image datasets report NOT RUN
//! unless enabled:
//!
//! * `BIVA_ACCEPTANCE_DENSITY=1` trains the missing 2D-density benchmark
//!   runs (resumable; results are cached in `BIVA_DENSITY_CACHE`).
//! * `BIVA_ACCEPTANCE_FULL=1` trains the image-model checks, given the
//!   datasets under `BIVA_DATA_ROOT`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use biva::autodiff::Graph;
use biva::data::load_dataset;
use biva::density::{median, run_density, DensityRun, DensityRunConfig};
use biva::distributions::{categorical_log_prob, gaussian_kl, CategoricalParams, DiagonalGaussianParams};
use biva::evaluation::{class_log_probs, grid_kl_estimate, sample_grid_target};
use biva::objectives::{
    anomaly_bound, bound_eval, elbo, energy_2d_eval, free_bits_elbo, iw_bound, iw_bound_graph, ssl_labeled_eval,
    ssl_unlabeled_eval, EvalSettings,
};
use biva::rng::Noise;
use biva::training::{read_metrics, FitData, FitPlan, TrainObjective};
use biva::{
    Dataset, DatasetName, DatasetSpec, KlEstimator, LatentKind, Likelihood, Model64, ModelConfig, ObjectiveConfig,
    OptimizerConfig, PotentialId, RandomSource, Split, Tensor64, Trainer, Variant,
};
use biva_cli::commands::{self, AblationVariant, AnomalyArgs, EvalArgs};
use biva_cli::config::ExperimentConfig;
use common::*;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

use Outcome::{Fail, NotRun, Pass};

/// Collects sub-checks of one criterion. Any failure fails the criterion;
/// otherwise any skipped part leaves it NOT RUN.
#[derive(Default)]
struct Parts {
    passed: Vec<String>,
    failed: Vec<String>,
    skipped: Vec<String>,
}

impl Parts {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.passed.push(what.into());
        } else {
            self.failed.push(what.into());
        }
    }

    fn skip(&mut self, what: impl Into<String>) {
        self.skipped.push(what.into());
    }

    fn outcome(self) -> Outcome {
        if !self.failed.is_empty() {
            Fail(format!("{}; passed: {}", self.failed.join("; "), self.passed.join("; ")))
        } else if !self.skipped.is_empty() {
            NotRun(format!("{}; passed: {}", self.skipped.join("; "), if self.passed.is_empty() { "-".into() } else { self.passed.join("; ") }))
        } else {
            Pass(self.passed.join("; "))
        }
    }
}

fn enabled(var: &str) -> bool {
    std::env::var(var).is_ok_and(|v| v == "1")
}

fn work_dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    fs::create_dir_all(&d).unwrap();
    d
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small(variant: Variant, seed: u64) -> Model64 {
    Model64::new(ModelConfig::dense(variant, 3, &[2, 2, 2], 6, 1), &mut RandomSource::new(seed)).unwrap()
}

const VARIANTS: [Variant; 4] = [Variant::Vae, Variant::Lvae, Variant::LvaePlus, Variant::Biva];

// ---------------------------------------------------------------------------

fn exact_identities() -> Outcome {
    let mut parts = Parts::default();
    let (mut k0, mut fb, mut iw1, mut chunk) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for v in VARIANTS {
        for seed in 0..8u64 {
            let m = small(v, seed);
            let x = RandomSource::new(seed + 100).normal_tensor::<f64>(&[4, 3]);
            let e = elbo(&m, &x, &mut RandomSource::new(seed), 1).unwrap();
            let a = anomaly_bound(&m, &x, &mut RandomSource::new(seed), 0, 1).unwrap();
            k0 = k0.max(max_abs_diff(&a.per_example, &e.per_example)).max((a.bound - e.bound).abs());
            let f = free_bits_elbo(&m, &x, &mut RandomSource::new(seed), 0.0).unwrap();
            fb = fb.max((f.objective - e.bound).abs()).max((f.bound - e.bound).abs());

            // one importance sample draws from the first split stream; the
            // single-sample ELBO on that stream with the sampled log-ratio
            // is the same quantity
            let r = iw_bound(&m, &x, &mut RandomSource::new(seed), 1, 1).unwrap();
            let mut streams = RandomSource::new(seed).split(1);
            let mut noise = Noise::new(&mut streams, 4);
            let mut g = Graph::new();
            let settings = EvalSettings { estimator: KlEstimator::LogRatio, ..EvalSettings::default() };
            let ev = bound_eval(&mut g, &m, &x, None, &mut noise, &settings).unwrap();
            iw1 = iw1.max(max_abs_diff(&r.per_example, &ev.report(&g).per_example));

            for (k, c) in [(7, 3), (64, 5), (64, 1), (20, 20)] {
                let a = iw_bound(&m, &x, &mut RandomSource::new(seed), k, c).unwrap();
                let b = iw_bound(&m, &x, &mut RandomSource::new(seed), k, k).unwrap();
                chunk = chunk.max(max_abs_diff(&a.per_example, &b.per_example));
            }
        }
    }
    let eps = 1e-12;
    parts.check(k0 <= eps, format!("L>0 vs ELBO max diff {k0:.1e}"));
    parts.check(fb <= eps, format!("free bits 0 vs ELBO max diff {fb:.1e}"));
    parts.check(iw1 <= eps, format!("L_1 vs ELBO max diff {iw1:.1e}"));
    parts.check(chunk <= 1e-10, format!("chunked L_K max diff {chunk:.1e}"));
    parts.outcome()
}

fn normalization() -> Outcome {
    let mut parts = Parts::default();
    let mut rng = RandomSource::new(2024);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = 1 + i % 10;
        let raw = random_dlm_raw(&mut rng, k, 1);
        worst = worst.max((dlm_total(&raw, k, 1) - 1.0).abs());
    }
    parts.check(worst <= 1e-5, format!("DLM 100 sets max |sum-1| {worst:.1e}"));
    let mut coupled = 0.0f64;
    for k in [1, 4] {
        let raw = random_dlm_raw(&mut rng, k, 2);
        coupled = coupled.max((dlm_total(&raw, k, 2) - 1.0).abs());
    }
    parts.check(coupled <= 1e-5, format!("coupled 2-channel DLM {coupled:.1e}"));

    let mut bern = 0.0f64;
    for i in 0..100 {
        let d = 1 + i % 8;
        let logits: Vec<f64> = (0..d).map(|_| 20.0 * (2.0 * rng.uniform() - 1.0)).collect();
        bern = bern.max((bernoulli_total(&logits) - 1.0).abs());
    }
    parts.check(bern <= 1e-5, format!("Bernoulli 100 sets {bern:.1e}"));

    let mut cat = 0.0f64;
    for i in 0..100 {
        let c = 2 + i % 10;
        let w: Vec<f64> = (0..c).map(|_| 0.01 + 5.0 * rng.uniform()).collect();
        let s: f64 = w.iter().sum();
        let p = CategoricalParams::new(w.iter().map(|v| v / s).collect()).unwrap();
        let total: f64 = (0..c).map(|y| categorical_log_prob(&p, y).unwrap().exp()).sum();
        cat = cat.max((total - 1.0).abs());
    }
    let mut cfg = ModelConfig::dense(Variant::Biva, 4, &[2, 2], 4, 1);
    cfg.num_classes = Some(7);
    cfg.likelihood = Likelihood::Bernoulli;
    for seed in 0..10 {
        let m = Model64::new(cfg.clone(), &mut RandomSource::new(seed)).unwrap();
        let x = RandomSource::new(seed).normal_tensor::<f64>(&[5, 4]);
        for row in class_log_probs(&m, &x, &mut RandomSource::new(seed)).unwrap() {
            cat = cat.max((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs());
        }
    }
    parts.check(cat <= 1e-5, format!("categorical and classifier rows {cat:.1e}"));
    parts.outcome()
}

const X: [f64; 2] = [0.9, -1.3];
const DRAWS: usize = 100_000;

fn mc_elbo(m: &Model64, estimator: KlEstimator, seed: u64) -> f64 {
    let xb = x_batch(&[X]);
    let mut rng = RandomSource::new(seed);
    let mut noise = Noise::single(&mut rng, DRAWS);
    let mut g = Graph::new();
    let settings = EvalSettings { repeats: DRAWS, estimator, ..EvalSettings::default() };
    bound_eval(&mut g, m, &xb, None, &mut noise, &settings).unwrap().report(&g).bound
}

fn oracles() -> Outcome {
    let mut parts = Parts::default();
    let one = OneLayer::standard();
    let two = TwoLayer::standard();
    let shifted = |h: &LinearHead| LinearHead { a: h.a.iter().map(|a| a * 0.7 + 0.1).collect(), c: h.c - 0.25, sigma: h.sigma * 1.4 };

    // exact posteriors: the ELBO is the log evidence
    let mut worst = 0.0f64;
    let cases: Vec<(Model64, f64)> = vec![
        (one.model(Variant::Vae, &one.posterior()), one.log_evidence(X)),
        (one.model(Variant::Lvae, &one.posterior()), one.log_evidence(X)),
        (two.ladder(&two.z2_given_x(), &two.z1_given_x_z2()), two.log_evidence(X)),
        (two.stacked(&two.z1_given_x(), &two.z2_given_z1()), two.log_evidence(X)),
    ];
    for (i, (m, truth)) in cases.iter().enumerate() {
        for est in [KlEstimator::Auto, KlEstimator::LogRatio] {
            worst = worst.max(rel_err(mc_elbo(m, est, 10 + i as u64), *truth));
        }
    }
    parts.check(worst <= 5e-3, format!("MC ELBO vs log evidence rel {worst:.1e}"));

    // mismatched posterior: the gap is the posterior KL
    let q = shifted(&one.posterior());
    let (pm, pv) = one.posterior_moments(X);
    let qm = q.a[0] * X[0] + q.a[1] * X[1] + q.c;
    let expected = one.log_evidence(X) - kl_1d(qm, q.sigma * q.sigma, pm, pv);
    let got = mc_elbo(&one.model(Variant::Lvae, &q), KlEstimator::Auto, 3);
    parts.check(rel_err(got, expected) <= 5e-3, format!("ELBO gap = posterior KL rel {:.1e}", rel_err(got, expected)));

    let mut iw = 0.0f64;
    for (m, truth) in &cases {
        for k in [1, 2, 10, 100, 1000] {
            let r = iw_bound(m, &x_batch(&[X]), &mut RandomSource::new(k as u64), k, 64).unwrap();
            iw = iw.max((r.bound - truth).abs());
        }
    }
    parts.check(iw <= 1e-9, format!("L_K with exact posterior, K up to 1e3, abs {iw:.1e}"));

    let mut rng = RandomSource::new(42);
    let mut kl = 0.0f64;
    for _ in 0..20 {
        let d = 3;
        let draw = |rng: &mut RandomSource, lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| lo + (hi - lo) * rng.uniform()).collect() };
        let (m1, s1, m2, s2) = (draw(&mut rng, -2.0, 2.0), draw(&mut rng, -0.5, 0.3), draw(&mut rng, -2.0, 2.0), draw(&mut rng, -0.3, 0.3));
        let mut g = Graph::new();
        let t = |v: &[f64], n: usize| Tensor64::from_f64(&[1, d], v).unwrap().repeat_batch(n);
        let q1 = DiagonalGaussianParams::constant(&mut g, t(&m1, 1), t(&s1, 1)).unwrap();
        let p1 = DiagonalGaussianParams::constant(&mut g, t(&m2, 1), t(&s2, 1)).unwrap();
        let kv = gaussian_kl(&mut g, &q1, &p1).unwrap();
        let analytic = g.value(kv).data()[0];
        let qn = DiagonalGaussianParams::constant(&mut g, t(&m1, DRAWS), t(&s1, DRAWS)).unwrap();
        let pn = DiagonalGaussianParams::constant(&mut g, t(&m2, DRAWS), t(&s2, DRAWS)).unwrap();
        let mut noise = Noise::single(&mut rng, DRAWS);
        let z = qn.sample(&mut g, &mut noise, 1.0).unwrap();
        let lq = qn.log_prob(&mut g, z).unwrap();
        let lp = pn.log_prob(&mut g, z).unwrap();
        let mc = (g.value(lq).sum() - g.value(lp).sum()) / DRAWS as f64;
        kl = kl.max(rel_err(mc, analytic));
    }
    parts.check(kl <= 0.01, format!("gaussian_kl vs MC log-ratio rel {kl:.1e}"));
    parts.outcome()
}

fn build(cfg: ModelConfig, x: &Tensor64, labels: Option<&[usize]>) -> Model64 {
    let mut rng = RandomSource::new(5);
    let mut m = Model64::new(cfg, &mut rng).unwrap();
    m.initialize(x, labels, &mut rng).unwrap();
    for t in m.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.standard_normal();
        }
    }
    m
}

fn binary(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = RandomSource::new(seed);
    let n: usize = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn gradients() -> Outcome {
    const SEED: u64 = 77;
    let mut checks: Vec<(String, Model64, Box<Objective>)> = Vec::new();
    let x = RandomSource::new(1).normal_tensor::<f64>(&[5, 3]);
    let bound = |x: Tensor64, s: EvalSettings| -> Box<Objective> {
        Box::new(move |g, m| {
            let mut rng = RandomSource::new(SEED);
            let mut noise = Noise::single(&mut rng, x.shape()[0] * s.repeats);
            bound_eval(g, m, &x, None, &mut noise, &s).unwrap().objective
        })
    };
    for v in VARIANTS {
        let mut c = ModelConfig::dense(v, 3, &[2, 2], 4, 1);
        c.weight_norm = true;
        let m = build(c, &x, None);
        for (name, s) in [
            ("elbo", EvalSettings::default()),
            ("elbo log-ratio", EvalSettings { estimator: KlEstimator::LogRatio, ..EvalSettings::default() }),
            ("free bits", EvalSettings { free_bits: 0.3, ..EvalSettings::default() }),
            ("L>1", EvalSettings { prior_below: 1, ..EvalSettings::default() }),
        ] {
            checks.push((format!("{name} {v:?}"), m.clone(), bound(x.clone(), s)));
        }
        let xc = x.clone();
        checks.push((
            format!("iw {v:?}"),
            m.clone(),
            Box::new(move |g, m| {
                let per = iw_bound_graph(g, m, &xc, &mut RandomSource::new(SEED), 5, 2, false).unwrap();
                g.mean_all(per)
            }),
        ));
        let xe = RandomSource::new(3).normal_tensor::<f64>(&[6, 2]);
        let mut c = ModelConfig::dense(v, 2, &[2, 2], 8, 1);
        c.weight_norm = true;
        let me = build(c, &xe, None);
        checks.push((
            format!("energy {v:?}"),
            me,
            Box::new(move |g, m| {
                let mut rng = RandomSource::new(SEED);
                let mut noise = Noise::single(&mut rng, 6);
                energy_2d_eval(g, m, &xe, &mut noise, PotentialId::U2, 0.4, &EvalSettings::default()).unwrap().objective
            }),
        ));
    }
    let mut c = ModelConfig::dense(Variant::Biva, 1, &[2, 2], 4, 1);
    c.input_shape = vec![1, 4, 4];
    c.latent_kind = vec![LatentKind::Convolutional, LatentKind::Dense];
    c.stride_schedule = vec![2, 1];
    c.kernel_sizes = vec![3, 3];
    c.likelihood = Likelihood::Bernoulli;
    c.weight_norm = true;
    let xb = binary(&[3, 1, 4, 4], 6);
    checks.push(("conv bernoulli".into(), build(c.clone(), &xb, None), bound(xb, EvalSettings::default())));
    c.input_shape = vec![3, 4, 4];
    c.likelihood = Likelihood::Dlm;
    c.dlm_components = 2;
    let mut rng = RandomSource::new(8);
    let xd = Tensor64::new(vec![2, 3, 4, 4], (0..96).map(|_| rng.below(256) as f64).collect()).unwrap();
    checks.push(("conv dlm".into(), build(c, &xd, None), bound(xd, EvalSettings::default())));

    let mut c = ModelConfig::dense(Variant::Biva, 4, &[2, 2], 4, 1);
    c.likelihood = Likelihood::Bernoulli;
    c.num_classes = Some(3);
    c.weight_norm = true;
    let xs = binary(&[4, 4], 9);
    let labels = [0usize, 2, 1, 2];
    let ms = build(c, &xs, Some(&labels));
    let xl = xs.clone();
    checks.push((
        "ssl labeled".into(),
        ms.clone(),
        Box::new(move |g, m| {
            let mut rng = RandomSource::new(SEED);
            let mut noise = Noise::single(&mut rng, 4);
            ssl_labeled_eval(g, m, &xl, &labels, &mut noise, 0.7, &EvalSettings::default()).unwrap().0.objective
        }),
    ));
    checks.push((
        "ssl unlabeled".into(),
        ms,
        Box::new(move |g, m| {
            let mut rng = RandomSource::new(SEED);
            let mut noise = Noise::single(&mut rng, 4);
            ssl_unlabeled_eval(g, m, &xs, &mut noise, &EvalSettings::default()).unwrap().0.objective
        }),
    ));

    let mut worst = (0.0f64, String::new());
    let mut bad = Vec::new();
    for (label, m, f) in &checks {
        for (group, rel) in gradient_errors(m, f.as_ref()) {
            if rel > worst.0 {
                worst = (rel, format!("{label} / {group}"));
            }
            if rel > 1e-4 {
                bad.push(format!("{label} / {group}: {rel:.1e}"));
            }
        }
    }
    if bad.is_empty() {
        Pass(format!("{} objectives, worst group rel err {:.1e} ({})", checks.len(), worst.0, worst.1))
    } else {
        Fail(bad.join(", "))
    }
}

// ---------------------------------------------------------------------------

const DENSITY_SEEDS: u64 = 10;
const DENSITY_VARIANTS: [Variant; 3] = [Variant::Vae, Variant::Lvae, Variant::Biva];

fn density_cache() -> PathBuf {
    std::env::var("BIVA_DENSITY_CACHE").map(PathBuf::from).unwrap_or_else(|_| work_dir("density").join("runs.jsonl"))
}

fn read_runs(path: &Path) -> Vec<DensityRun> {
    fs::read_to_string(path)
        .map(|t| t.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
        .unwrap_or_default()
}

fn density_benchmark(parts: &mut Parts) {
    let cache = density_cache();
    let cfg = DensityRunConfig::default();
    let potentials = [PotentialId::U1, PotentialId::U2, PotentialId::U3, PotentialId::U4];
    let mut runs = read_runs(&cache);
    let have = |runs: &[DensityRun], v: Variant, p: PotentialId, s: u64| runs.iter().any(|r| r.variant == v && r.potential == p && r.seed == s);
    let total = DENSITY_VARIANTS.len() * potentials.len() * DENSITY_SEEDS as usize;
    if enabled("BIVA_ACCEPTANCE_DENSITY") {
        for s in 0..DENSITY_SEEDS {
            for p in potentials {
                for v in DENSITY_VARIANTS {
                    if have(&runs, v, p, s) {
                        continue;
                    }
                    match run_density::<f32>(v, p, s, &cfg) {
                        Ok((run, _)) => {
                            let mut f = fs::OpenOptions::new().create(true).append(true).open(&cache).unwrap();
                            writeln!(f, "{}", serde_json::to_string(&run).unwrap()).unwrap();
                            runs.push(run);
                        }
                        Err(e) => {
                            parts.check(false, format!("density run {v:?} {p:?} seed {s}: {e}"));
                            return;
                        }
                    }
                }
            }
        }
    }
    let done = DENSITY_VARIANTS
        .iter()
        .flat_map(|&v| potentials.iter().flat_map(move |&p| (0..DENSITY_SEEDS).map(move |s| (v, p, s))))
        .filter(|&(v, p, s)| have(&runs, v, p, s))
        .count();
    if done < total {
        parts.skip(format!(
            "benchmark: {done}/{total} runs cached in {} (set BIVA_ACCEPTANCE_DENSITY=1; about 8 min per run on one core)",
            cache.display()
        ));
        return;
    }
    let med = |v: Variant, p: PotentialId| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.variant == v && r.potential == p && r.seed < DENSITY_SEEDS).map(|r| r.grid_kl).collect();
        median(&xs).unwrap()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for p in potentials {
        let (b, l, va) = (med(Variant::Biva, p), med(Variant::Lvae, p), med(Variant::Vae, p));
        if b <= l {
            wins += 1;
        }
        detail.push(format!("{p:?} BIVA {b:.3} LVAE {l:.3} VAE {va:.3}"));
    }
    parts.check(wins >= 2, format!("BIVA median <= LVAE on {wins}/4 ({})", detail.join(", ")));
}

fn density() -> Outcome {
    let mut parts = Parts::default();
    let mut worst = 0.0f64;
    for (i, p) in [PotentialId::U1, PotentialId::U2, PotentialId::U3, PotentialId::U4].into_iter().enumerate() {
        let samples = sample_grid_target(p, 1_000_000, &mut RandomSource::new(i as u64));
        worst = worst.max(grid_kl_estimate(&samples, p).unwrap());
    }
    parts.check(worst <= 0.05, format!("grid KL on exact samples max {worst:.4} nats"));
    density_benchmark(&mut parts);
    parts.outcome()
}

// ---------------------------------------------------------------------------
// Image-model checks.

fn have_data(names: &[DatasetName]) -> Result<(), String> {
    for &n in names {
        for s in [Split::Train, Split::Valid, Split::Test] {
            load_dataset(&DatasetSpec::new(n, s)).map_err(|e| format!("{n} unavailable: {e}"))?;
        }
    }
    Ok(())
}

fn full_gate(names: &[DatasetName]) -> Result<(), String> {
    have_data(names)?;
    if !enabled("BIVA_ACCEPTANCE_FULL") {
        return Err("datasets present; set BIVA_ACCEPTANCE_FULL=1 to train (hours)".into());
    }
    Ok(())
}

fn recipe(name: &str) -> ExperimentConfig {
    ExperimentConfig::resolve(None, Some(name), &[]).unwrap()
}

/// LVAE and BIVA on the binary6 architecture for 20 epochs of FashionMNIST.
fn activity_runs() -> Result<Vec<commands::AblationRow>, String> {
    full_gate(&[DatasetName::FashionMnist])?;
    let mut cfg = recipe("binary6");
    cfg.dataset = DatasetSpec::new(DatasetName::FashionMnist, Split::Train);
    cfg.training.epochs = 20;
    cfg.training.finetune = None;
    cfg.training.evaluate_test = false;
    cfg.output_dir = work_dir("activity");
    commands::ablate(&cfg, &[AblationVariant::Lvae, AblationVariant::Biva], 0).map_err(|e| e.to_string())
}

fn activity(rows: &Result<Vec<commands::AblationRow>, String>) -> Outcome {
    match rows {
        Err(why) => NotRun(why.clone()),
        Ok(rows) => {
            let (l, b) = (&rows[0], &rows[1]);
            let msg = format!("active variables LVAE {}/{}, BIVA {}/{}", l.active_variables, l.num_variables, b.active_variables, b.num_variables);
            if b.active_variables >= l.active_variables {
                Pass(msg)
            } else {
                Fail(msg)
            }
        }
    }
}

fn binary_mnist() -> Outcome {
    if let Err(why) = full_gate(&[DatasetName::MnistStatic]) {
        return NotRun(why);
    }
    let mut cfg = recipe("binary6");
    cfg.output_dir = work_dir("binary6");
    let run = commands::train(&cfg).unwrap().remove(0);
    let eval = |ckpt: &str| {
        let args = EvalArgs {
            checkpoint: run.dir.join("checkpoints").join(ckpt),
            dataset: None,
            split: Split::Test,
            k: 1,
            chunk: 1,
            batch: None,
            limit: None,
            output: Some(work_dir(&format!("binary6-eval-{ckpt}"))),
            data_root: None,
        };
        -commands::eval(&args).unwrap().rows[0].bound
    };
    let before = eval("last.ckpt");
    let after = eval("finetuned.ckpt");
    let mut parts = Parts::default();
    parts.check(before <= 89.0, format!("test -L1 after 100 epochs {before:.2}"));
    parts.check(after <= before, format!("after finetune {after:.2}"));
    parts.outcome()
}

fn anomaly_ordering(rows: &Result<Vec<commands::AblationRow>, String>) -> Outcome {
    if let Err(why) = rows {
        return NotRun(why.clone());
    }
    if let Err(why) = have_data(&[DatasetName::MnistDynamic]) {
        return NotRun(why);
    }
    let ckpt = work_dir("activity").join("BIVA").join("seed-0").join("checkpoints").join("best.ckpt");
    let l = 6;
    let report = commands::anomaly(&AnomalyArgs {
        checkpoint: ckpt,
        in_dataset: Some(DatasetName::FashionMnist),
        out_dataset: DatasetName::MnistDynamic,
        split: Split::Test,
        ks: Some(vec![l - 2, l - 4, 0]),
        mc: None,
        batch: None,
        limit: None,
        output: Some(work_dir("anomaly")),
        data_root: None,
    })
    .unwrap();
    let mut parts = Parts::default();
    for (i, o) in report.in_dist.iter().zip(&report.out_dist) {
        parts.check(o.mean > i.mean, format!("k={}: MNIST {:.2} vs Fashion {:.2}", i.k, o.mean, i.mean));
    }
    parts.outcome()
}

/// The unlabeled bound equals the q(y|x)-weighted labeled bounds plus the
/// classifier entropy when every class sees the same draws.
fn enumeration_identity() -> f64 {
    let mut c = ModelConfig::dense(Variant::Biva, 4, &[2, 2], 4, 1);
    c.likelihood = Likelihood::Bernoulli;
    c.num_classes = Some(2);
    let m = Model64::new(c, &mut RandomSource::new(3)).unwrap();
    let x = binary(&[3, 4], 4);
    let n = 3;
    let settings = EvalSettings::default();
    let mut g = Graph::new();
    let mut rng = RandomSource::new(9);
    let mut noise = Noise::single(&mut rng, n).recording();
    let (ev, lp) = ssl_unlabeled_eval(&mut g, &m, &x, &mut noise, &settings).unwrap();
    let draws = noise.take_record();
    let unl = g.value(ev.terms.rows).data().to_vec();
    let lp = g.value(lp).data().to_vec();
    let td = m.config().num_layers;
    let bu = draws.len() - 2 * td;
    let mut expected = vec![0.0; n];
    for class in 0..2 {
        let mut script = draws[..bu].to_vec();
        script.extend_from_slice(&draws[bu + class * td..bu + (class + 1) * td]);
        let mut noise = Noise::scripted(n, script, 0);
        let mut g = Graph::new();
        let (ev, _) = ssl_labeled_eval(&mut g, &m, &x, &vec![class; n], &mut noise, 0.0, &settings).unwrap();
        let rows = g.value(ev.terms.rows).data().to_vec();
        for r in 0..n {
            let lq = lp[r * 2 + class];
            expected[r] += lq.exp() * (rows[r] - lq);
        }
    }
    max_abs_diff(&unl, &expected)
}

fn semi_supervised() -> Outcome {
    let mut parts = Parts::default();
    let mut c = ModelConfig::dense(Variant::Biva, 6, &[3, 2], 8, 1);
    c.likelihood = Likelihood::Bernoulli;
    c.num_classes = Some(10);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let m = Model64::new(c.clone(), &mut RandomSource::new(seed)).unwrap();
        let x = binary(&[8, 6], seed);
        for row in class_log_probs(&m, &x, &mut RandomSource::new(seed)).unwrap() {
            worst = worst.max((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs());
        }
    }
    parts.check(worst <= 1e-12, format!("classifier rows sum to 1 within {worst:.1e}"));
    let id = enumeration_identity();
    parts.check(id <= 1e-12, format!("enumeration identity on 2 classes, max diff {id:.1e}"));
    match full_gate(&[DatasetName::MnistDynamic]) {
        Err(why) => parts.skip(format!("100-label run: {why}")),
        Ok(()) => {
            let mut cfg = recipe("ssl100");
            cfg.seeds = vec![cfg.seeds[0]];
            cfg.output_dir = work_dir("ssl100");
            let run = commands::train(&cfg).unwrap().remove(0);
            let err = run.summary.test_error_rate.unwrap_or(1.0);
            parts.check(err <= 0.10, format!("100-label test error {:.2}%", 100.0 * err));
        }
    }
    parts.outcome()
}

// ---------------------------------------------------------------------------

fn toy_trainer(seed: u64) -> Trainer<f64> {
    let cfg = ModelConfig::dense(Variant::Biva, 3, &[3, 2, 2], 8, 1);
    let model = Model64::new(cfg, &mut RandomSource::new(seed)).unwrap();
    let obj = ObjectiveConfig { free_bits: 0.2, ..ObjectiveConfig::default() };
    Trainer::new(model, OptimizerConfig::default(), obj, TrainObjective::Elbo, seed).unwrap()
}

fn params_of(t: &Trainer<f64>) -> Vec<f64> {
    let ema = t.ema.apply_to(&t.model).unwrap();
    t.model.params().values().iter().chain(ema.params().values()).flat_map(|p| p.data().to_vec()).collect()
}

fn determinism() -> Outcome {
    let mut parts = Parts::default();
    let mut rng = RandomSource::new(11);
    let data = |rng: &mut RandomSource, n: usize| {
        let v: Vec<f64> = (0..n * 3).map(|_| rng.standard_normal()).collect();
        Dataset::from_reals("toy", vec![3], v, None).unwrap()
    };
    let (train, valid) = (data(&mut rng, 96), data(&mut rng, 32));
    let fd = FitData { train: &train, valid: Some(&valid), labeled: None };
    let plan = |epochs| FitPlan { epochs, batch_size: 16, eval_batch: 16, ..FitPlan::default() };

    let mut straight = toy_trainer(5);
    straight.fit(&fd, &plan(4)).unwrap();
    let mut first = toy_trainer(5);
    first.fit(&fd, &plan(2)).unwrap();
    let ckpt = work_dir("determinism").join("half.ckpt");
    first.save(&ckpt, &serde_json::Value::Null).unwrap();
    let (mut resumed, _) = Trainer::<f64>::load(&ckpt).unwrap();
    resumed.fit(&fd, &plan(4)).unwrap();
    let d = max_abs_diff(&params_of(&straight), &params_of(&resumed));
    parts.check(d <= 1e-7 && straight.state.step == resumed.state.step, format!("resumed vs straight max param diff {d:.1e}"));

    // config echo: re-running the written config reproduces the metrics
    let root = work_dir("echo");
    let a = root.join("a");
    let b = root.join("b");
    let _ = fs::remove_dir_all(&a);
    let _ = fs::remove_dir_all(&b);
    let flags = [
        "--set", "training.steps_per_epoch=15", "--set", "training.batch_size=32", "--set", "training.eval_limit=128",
        "--set", "model.feature_widths=[8,8,8,8,8]", "--set", "evaluation.grid_kl_samples=4000", "--epochs", "2",
    ];
    let mut argv = vec!["biva", "train", "--recipe", "density2d", "--potential", "2", "--output", a.to_str().unwrap()];
    argv.extend(flags);
    let code_a = biva_cli::run_args(argv);
    let echo = a.join("config.toml");
    let code_b = biva_cli::run_args(["biva", "train", echo.to_str().unwrap(), "--output", b.to_str().unwrap()]);
    if code_a != 0 || code_b != 0 {
        parts.check(false, format!("train exit codes {code_a}, {code_b}"));
        return parts.outcome();
    }
    let strip = |dir: &Path| -> Vec<serde_json::Value> {
        read_metrics(&dir.join("seed-0").join("metrics.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| {
                let mut v = serde_json::to_value(r).unwrap();
                v.as_object_mut().unwrap().remove("wallclock");
                v
            })
            .collect()
    };
    let (ma, mb) = (strip(&a), strip(&b));
    parts.check(!ma.is_empty() && ma == mb, format!("config echo re-run: {} metric records identical", ma.len()));
    parts.outcome()
}

// ---------------------------------------------------------------------------

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, title: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match &o {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {n:>2} [{tag}] {title} ({:.1}s): {detail}", t.elapsed().as_secs_f64());
        results.push((n, title, o));
    };
    run(1, "exact identities", &mut exact_identities);
    run(2, "normalization", &mut normalization);
    run(3, "linear-Gaussian oracles", &mut oracles);
    run(4, "gradients vs finite differences", &mut gradients);
    run(5, "2D density benchmark", &mut density);
    let rows = activity_runs();
    run(6, "layer activity LVAE vs BIVA", &mut || activity(&rows));
    run(7, "binary MNIST sanity", &mut binary_mnist);
    run(8, "anomaly ordering", &mut || anomaly_ordering(&rows));
    run(9, "semi-supervised sanity", &mut semi_supervised);
    run(10, "determinism and persistence", &mut determinism);

    let failed: Vec<_> = results.iter().filter(|r| matches!(r.2, Fail(_))).map(|r| r.0).collect();
    let skipped = results.iter().filter(|r| matches!(r.2, NotRun(_))).count();
    println!(
        "acceptance: {} passed, {} failed, {skipped} not run ({:.0}s)",
        results.len() - failed.len() - skipped,
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
