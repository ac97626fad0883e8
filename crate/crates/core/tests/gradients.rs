//! Reverse-mode gradients against central finite differences, per parameter group.

mod common;

use biva::autodiff::Graph;
use biva::nn::ParamGroup;
use biva::objectives::{
    bound_eval, energy_2d_eval, iw_bound_graph, ssl_labeled_eval, ssl_unlabeled_eval, EvalSettings,
};
use biva::rng::Noise;
use biva::{KlEstimator, LatentKind, Likelihood, Model64, ModelConfig, PotentialId, RandomSource, Tensor64, Variant};
use common::{gradient_errors, Objective};

const TOL: f64 = 1e-4;
const NOISE_SEED: u64 = 77;

fn check(label: &str, model: &Model64, f: &Objective) {
    for (group, rel) in gradient_errors(model, f) {
        assert!(rel <= TOL, "{label}: group {group} relative error {rel:e}");
    }
}

fn data(n: usize, d: usize, seed: u64) -> Tensor64 {
    let mut rng = RandomSource::new(seed);
    rng.normal_tensor(&[n, d])
}

fn binary(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = RandomSource::new(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect();
    Tensor64::new(shape.to_vec(), v).unwrap()
}

fn build(cfg: ModelConfig, x: &Tensor64, labels: Option<&[usize]>) -> Model64 {
    let mut rng = RandomSource::new(5);
    let mut m = Model64::new(cfg, &mut rng).unwrap();
    m.initialize(x, labels, &mut rng).unwrap();
    // move away from the data-dependent initialization so no gradient is trivially zero
    for t in m.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.standard_normal();
        }
    }
    m
}

fn bound_objective(x: Tensor64, settings: EvalSettings) -> Box<Objective> {
    Box::new(move |g, m| {
        let mut rng = RandomSource::new(NOISE_SEED);
        let mut noise = Noise::single(&mut rng, x.shape()[0] * settings.repeats);
        bound_eval(g, m, &x, None, &mut noise, &settings).unwrap().objective
    })
}

fn dense(variant: Variant, weight_norm: bool) -> ModelConfig {
    let mut c = ModelConfig::dense(variant, 3, &[2, 2], 4, 1);
    c.weight_norm = weight_norm;
    c
}

#[test]
fn elbo_all_variants() {
    let x = data(5, 3, 1);
    for variant in [Variant::Vae, Variant::Lvae, Variant::LvaePlus, Variant::Biva] {
        for wn in [false, true] {
            let m = build(dense(variant, wn), &x, None);
            check(&format!("{variant:?} wn={wn}"), &m, &*bound_objective(x.clone(), EvalSettings::default()));
        }
    }
}

#[test]
fn elbo_estimators_and_free_bits() {
    let x = data(6, 3, 2);
    let m = build(dense(Variant::Biva, true), &x, None);
    for estimator in [KlEstimator::Analytic, KlEstimator::LogRatio] {
        let s = EvalSettings { estimator, repeats: 2, ..EvalSettings::default() };
        check(&format!("{estimator:?}"), &m, &*bound_objective(x.clone(), s));
    }
    // a threshold between the per-variable KLs, so both branches of the clamp are exercised
    let s = EvalSettings { free_bits: 0.3, ..EvalSettings::default() };
    check("free bits", &m, &*bound_objective(x.clone(), s));
}

#[test]
fn partial_inference_bound() {
    let x = data(4, 3, 3);
    let m = build(dense(Variant::Biva, true), &x, None);
    let s = EvalSettings { prior_below: 1, ..EvalSettings::default() };
    check("L>1", &m, &*bound_objective(x, s));
}

#[test]
fn importance_weighted_bound() {
    let x = data(3, 3, 4);
    for variant in [Variant::Lvae, Variant::Biva] {
        let m = build(dense(variant, true), &x, None);
        let xc = x.clone();
        check(
            &format!("iw {variant:?}"),
            &m,
            &move |g: &mut Graph<f64>, m: &Model64| {
                let mut rng = RandomSource::new(NOISE_SEED);
                let per = iw_bound_graph(g, m, &xc, &mut rng, 5, 2, false).unwrap();
                g.mean_all(per)
            },
        );
    }
}

#[test]
fn convolutional_likelihoods() {
    let mut c = ModelConfig::dense(Variant::Biva, 1, &[2, 2], 4, 1);
    c.input_shape = vec![1, 4, 4];
    c.latent_kind = vec![LatentKind::Convolutional, LatentKind::Dense];
    c.stride_schedule = vec![2, 1];
    c.kernel_sizes = vec![3, 3];
    c.likelihood = Likelihood::Bernoulli;
    c.weight_norm = true;
    let x = binary(&[3, 1, 4, 4], 6);
    let m = build(c.clone(), &x, None);
    check("conv bernoulli", &m, &*bound_objective(x, EvalSettings::default()));

    c.input_shape = vec![3, 4, 4];
    c.likelihood = Likelihood::Dlm;
    c.dlm_components = 2;
    let mut rng = RandomSource::new(8);
    let v: Vec<f64> = (0..2 * 48).map(|_| rng.below(256) as f64).collect();
    let x = Tensor64::new(vec![2, 3, 4, 4], v).unwrap();
    let m = build(c, &x, None);
    check("conv dlm", &m, &*bound_objective(x, EvalSettings::default()));
}

#[test]
fn semi_supervised_objectives() {
    let mut c = ModelConfig::dense(Variant::Biva, 4, &[2, 2], 4, 1);
    c.likelihood = Likelihood::Bernoulli;
    c.num_classes = Some(3);
    c.weight_norm = true;
    let x = binary(&[4, 4], 9);
    let labels = [0usize, 2, 1, 2];
    let m = build(c, &x, Some(&labels));
    let xl = x.clone();
    check("labeled", &m, &move |g: &mut Graph<f64>, m: &Model64| {
        let mut rng = RandomSource::new(NOISE_SEED);
        let mut noise = Noise::single(&mut rng, 4);
        ssl_labeled_eval(g, m, &xl, &labels, &mut noise, 0.7, &EvalSettings::default()).unwrap().0.objective
    });
    check("unlabeled", &m, &move |g: &mut Graph<f64>, m: &Model64| {
        let mut rng = RandomSource::new(NOISE_SEED);
        let mut noise = Noise::single(&mut rng, 4);
        ssl_unlabeled_eval(g, m, &x, &mut noise, &EvalSettings::default()).unwrap().0.objective
    });
}

#[test]
fn energy_objective() {
    let x = data(6, 2, 10);
    for variant in [Variant::Vae, Variant::Lvae, Variant::Biva] {
        let mut c = ModelConfig::dense(variant, 2, &[2, 2], 8, 1);
        c.weight_norm = true;
        let m = build(c, &x, None);
        for id in [PotentialId::U1, PotentialId::U4] {
            let xc = x.clone();
            check(&format!("energy {variant:?} {id:?}"), &m, &move |g: &mut Graph<f64>, m: &Model64| {
                let mut rng = RandomSource::new(NOISE_SEED);
                let mut noise = Noise::single(&mut rng, 6);
                energy_2d_eval(g, m, &xc, &mut noise, id, 0.4, &EvalSettings::default()).unwrap().objective
            });
        }
    }
}

#[test]
fn every_group_is_reached() {
    let mut c = ModelConfig::dense(Variant::Biva, 4, &[2, 2], 4, 1);
    c.num_classes = Some(2);
    let m = Model64::new(c, &mut RandomSource::new(0)).unwrap();
    for group in [ParamGroup::BottomUp, ParamGroup::Generative, ParamGroup::TopDownHeads, ParamGroup::Classifier] {
        assert!(!m.params().ids_in(group).is_empty(), "{group:?}");
    }
}
