//! Shared helpers for the integration tests: small linear-Gaussian models
//! whose evidence and posteriors are available in closed form.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use biva::autodiff::{Graph, Var};
use biva::distributions::raw_for_scale;
use biva::{Model64, ModelConfig, RandomSource, Tensor64, Variant};

pub fn set_param(m: &mut Model64, name: &str, shape: &[usize], vals: &[f64]) {
    let id = m.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params_mut().set(id, Tensor64::from_f64(shape, vals).unwrap()).unwrap();
}

pub type Mat2 = [[f64; 2]; 2];

pub fn log_normal_1d(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

pub fn log_normal_2d(x: [f64; 2], mean: [f64; 2], cov: Mat2) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let d = [x[0] - mean[0], x[1] - mean[1]];
    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q
}

/// `a · w wᵀ + s2 · I`.
pub fn rank_one_cov(w: [f64; 2], a: f64, s2: f64) -> Mat2 {
    [[a * w[0] * w[0] + s2, a * w[0] * w[1]], [a * w[1] * w[0], a * w[1] * w[1] + s2]]
}

pub fn solve2(m: Mat2, v: [f64; 2]) -> [f64; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [(m[1][1] * v[0] - m[0][1] * v[1]) / det, (-m[1][0] * v[0] + m[0][0] * v[1]) / det]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn kl_1d(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

/// Linear-Gaussian posterior head `q(z | u) = N(a·u + c, σ²)`.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub a: Vec<f64>,
    pub c: f64,
    pub sigma: f64,
}

impl LinearHead {
    pub fn install(&self, m: &mut Model64, name: &str) {
        let k = self.a.len();
        let mut w = self.a.clone();
        w.extend(std::iter::repeat_n(0.0, k));
        set_param(m, &format!("{name}.weight"), &[2, k], &w);
        set_param(m, &format!("{name}.bias"), &[2], &[self.c, raw_for_scale(self.sigma)]);
    }
}

/// One latent: `z ~ N(0,1)`, `x | z ~ N(w z + b, s² I)` in two dimensions.
#[derive(Clone, Copy, Debug)]
pub struct OneLayer {
    pub w: [f64; 2],
    pub b: [f64; 2],
    pub s: f64,
}

impl OneLayer {
    pub fn standard() -> Self {
        Self { w: [1.2, -0.7], b: [0.3, -0.1], s: 0.6 }
    }

    pub fn log_evidence(&self, x: [f64; 2]) -> f64 {
        log_normal_2d(x, self.b, rank_one_cov(self.w, 1.0, self.s * self.s))
    }

    /// Exact posterior as a head on `x`.
    pub fn posterior(&self) -> LinearHead {
        let s2 = self.s * self.s;
        let p = 1.0 + dot(self.w, self.w) / s2;
        let a = [self.w[0] / (s2 * p), self.w[1] / (s2 * p)];
        LinearHead { a: a.to_vec(), c: -dot(a, self.b), sigma: p.powf(-0.5) }
    }

    /// Posterior mean and variance of `z` given `x`.
    pub fn posterior_moments(&self, x: [f64; 2]) -> (f64, f64) {
        let h = self.posterior();
        (h.a[0] * x[0] + h.a[1] * x[1] + h.c, h.sigma * h.sigma)
    }

    pub fn model(&self, variant: Variant, q: &LinearHead) -> Model64 {
        let cfg = ModelConfig::dense(variant, 2, &[1], 1, 0);
        let mut m = Model64::new(cfg, &mut RandomSource::new(1)).unwrap();
        q.install(&mut m, "q.z1");
        self.install_likelihood(&mut m);
        m
    }

    fn install_likelihood(&self, m: &mut Model64) {
        let r = raw_for_scale(self.s);
        set_param(m, "likelihood.weight", &[4, 1], &[self.w[0], self.w[1], 0.0, 0.0]);
        set_param(m, "likelihood.bias", &[4], &[self.b[0], self.b[1], r, r]);
    }
}

/// Two latents: `z2 ~ N(0,1)`, `z1 | z2 ~ N(β z2 + c, τ²)`, `x | z1 ~ N(w z1 + b, s² I)`.
#[derive(Clone, Copy, Debug)]
pub struct TwoLayer {
    pub lik: OneLayer,
    pub beta: f64,
    pub c: f64,
    pub tau: f64,
}

impl TwoLayer {
    pub fn standard() -> Self {
        Self { lik: OneLayer { w: [1.3, -0.6], b: [0.2, 0.1], s: 0.5 }, beta: 0.8, c: 0.3, tau: 0.6 }
    }

    pub fn log_evidence(&self, x: [f64; 2]) -> f64 {
        let OneLayer { w, b, s } = self.lik;
        let mean = [w[0] * self.c + b[0], w[1] * self.c + b[1]];
        log_normal_2d(x, mean, rank_one_cov(w, self.tau * self.tau + self.beta * self.beta, s * s))
    }

    /// Exact `p(z2 | x)` as a head on `x`.
    pub fn z2_given_x(&self) -> LinearHead {
        let OneLayer { w, b, s } = self.lik;
        let u = [w[0] * self.beta, w[1] * self.beta];
        let v = [w[0] * self.c + b[0], w[1] * self.c + b[1]];
        let sigma = rank_one_cov(w, self.tau * self.tau, s * s);
        let si_u = solve2(sigma, u);
        let p = 1.0 + dot(u, si_u);
        let a = [si_u[0] / p, si_u[1] / p];
        LinearHead { a: a.to_vec(), c: -dot(a, v), sigma: p.powf(-0.5) }
    }

    /// Exact `p(z1 | x, z2)` as a head on `[x, z2]`.
    pub fn z1_given_x_z2(&self) -> LinearHead {
        let OneLayer { w, b, s } = self.lik;
        let (s2, t2) = (s * s, self.tau * self.tau);
        let p = 1.0 / t2 + dot(w, w) / s2;
        let a = vec![w[0] / (s2 * p), w[1] / (s2 * p), self.beta / (t2 * p)];
        let c = self.c / (t2 * p) - dot(w, b) / (s2 * p);
        LinearHead { a, c, sigma: p.powf(-0.5) }
    }

    /// Exact `p(z1 | x)` as a head on `x`.
    pub fn z1_given_x(&self) -> LinearHead {
        let OneLayer { w, b, s } = self.lik;
        let s2 = s * s;
        let v = self.beta * self.beta + self.tau * self.tau;
        let p = 1.0 / v + dot(w, w) / s2;
        let a = vec![w[0] / (s2 * p), w[1] / (s2 * p)];
        let c = (self.c / v - dot(w, b) / s2) / p;
        LinearHead { a, c, sigma: p.powf(-0.5) }
    }

    /// Exact `p(z2 | z1)` as a head on `z1`.
    pub fn z2_given_z1(&self) -> LinearHead {
        let t2 = self.tau * self.tau;
        let p = 1.0 + self.beta * self.beta / t2;
        let a = self.beta / (t2 * p);
        LinearHead { a: vec![a], c: -a * self.c, sigma: p.powf(-0.5) }
    }

    /// `L^{>1}` in closed form: `z2 ~ q`, `z1 ~ p(z1 | z2)`.
    pub fn partial_bound(&self, x: [f64; 2], q2: &LinearHead) -> f64 {
        let OneLayer { w, b, s } = self.lik;
        let m2 = q2.a[0] * x[0] + q2.a[1] * x[1] + q2.c;
        let v2 = q2.sigma * q2.sigma;
        let mu = self.beta * m2 + self.c;
        let var = self.beta * self.beta * v2 + self.tau * self.tau;
        let mut rec = 0.0;
        for d in 0..2 {
            rec += -0.5 * (2.0 * PI * s * s).ln() - ((x[d] - w[d] * mu - b[d]).powi(2) + w[d] * w[d] * var) / (2.0 * s * s);
        }
        rec - kl_1d(m2, v2, 0.0, 1.0)
    }

    fn base(&self, variant: Variant) -> Model64 {
        let cfg = ModelConfig::dense(variant, 2, &[1, 1], 1, 0);
        let mut m = Model64::new(cfg, &mut RandomSource::new(1)).unwrap();
        set_param(&mut m, "p.z1.weight", &[2, 1], &[self.beta, 0.0]);
        set_param(&mut m, "p.z1.bias", &[2], &[self.c, raw_for_scale(self.tau)]);
        self.lik.install_likelihood(&mut m);
        m
    }

    /// LVAE with `q(z2 | x)` and `q(z1 | x, z2)`.
    pub fn ladder(&self, q2: &LinearHead, q1: &LinearHead) -> Model64 {
        let mut m = self.base(Variant::Lvae);
        q2.install(&mut m, "q.z2");
        q1.install(&mut m, "q.z1");
        m
    }

    /// Plain VAE with `q(z1 | x)` and `q(z2 | z1)`.
    pub fn stacked(&self, q1: &LinearHead, q2: &LinearHead) -> Model64 {
        let mut m = self.base(Variant::Vae);
        q1.install(&mut m, "q.z1");
        q2.install(&mut m, "q.z2");
        m
    }
}

pub fn x_batch(points: &[[f64; 2]]) -> Tensor64 {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor64::from_f64(&[points.len(), 2], &flat).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Random raw DLM outputs for `k` components over `c` channels.
pub fn random_dlm_raw(rng: &mut RandomSource, k: usize, c: usize) -> Vec<f64> {
    use biva::distributions::DiscretizedLogisticMixtureParams as P;
    let mut raw = Vec::with_capacity(P::raw_channels(k, c));
    raw.extend((0..k).map(|_| 2.0 * rng.standard_normal()));
    raw.extend((0..k * c).map(|_| 2.4 * rng.uniform() - 1.2));
    raw.extend((0..k * c).map(|_| -7.5 + 8.5 * rng.uniform()));
    raw.extend((0..k * c * (c - 1) / 2).map(|_| rng.standard_normal()));
    raw
}

/// Total probability of a one-pixel DLM over all `256^c` values.
pub fn dlm_total(raw: &[f64], k: usize, c: usize) -> f64 {
    use biva::autodiff::Graph;
    use biva::distributions::{dlm_log_prob, DiscretizedLogisticMixtureParams as P};
    let n = 256usize.pow(c as u32);
    let mut rows = Vec::with_capacity(n * raw.len());
    for _ in 0..n {
        rows.extend_from_slice(raw);
    }
    let mut xs = vec![0.0; n * c];
    for i in 0..n {
        let mut r = i;
        for ch in (0..c).rev() {
            xs[i * c + ch] = (r % 256) as f64;
            r /= 256;
        }
    }
    let mut g = Graph::new();
    let raw_t = g.constant(Tensor64::new(vec![n, raw.len(), 1, 1], rows).unwrap());
    let params = P::from_raw(&mut g, raw_t, k, c).unwrap();
    let x = Tensor64::new(vec![n, c, 1, 1], xs).unwrap();
    let lp = dlm_log_prob(&mut g, &params, &x).unwrap();
    g.value(lp).data().iter().map(|v| v.exp()).sum()
}

/// Total probability of independent Bernoulli pixels over all `2^D` images.
pub fn bernoulli_total(logits: &[f64]) -> f64 {
    use biva::autodiff::Graph;
    use biva::distributions::{bernoulli_log_prob, BernoulliParams};
    let d = logits.len();
    let n = 1usize << d;
    let mut g = Graph::new();
    let l = g.constant(Tensor64::new(vec![n, d], logits.repeat(n)).unwrap());
    let xs: Vec<f64> = (0..n).flat_map(|i| (0..d).map(move |j| ((i >> j) & 1) as f64)).collect();
    let x = Tensor64::new(vec![n, d], xs).unwrap();
    let lp = bernoulli_log_prob(&mut g, &BernoulliParams { logits: l }, &x).unwrap();
    g.value(lp).data().iter().map(|v| v.exp()).sum()
}

pub type Objective = dyn Fn(&mut Graph<f64>, &Model64) -> Var;

const FD_STEP: f64 = 1e-5;

fn objective_value(model: &Model64, f: &Objective) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g, model);
    g.scalar_value(v)
}

/// Relative error `‖fd − ad‖ / max(‖fd‖, ‖ad‖)` of reverse-mode gradients
/// against central differences, per parameter group. Groups the objective
/// never touches have zero gradient on both sides and report 0.
pub fn gradient_errors(model: &Model64, f: &Objective) -> BTreeMap<String, f64> {
    let mut g = Graph::new();
    let v = f(&mut g, model);
    let grads = g.backward(v).into_params();
    let mut per_group: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    let mut probe = model.clone();
    for id in 0..model.params().len() {
        let group = format!("{:?}", model.params().meta(id).group);
        let n = model.params().get(id).len();
        let ad = grads.get(&id).cloned().unwrap_or_else(|| Tensor64::zeros(model.params().get(id).shape()));
        let e = per_group.entry(group).or_insert((0.0, 0.0, 0.0));
        for i in 0..n {
            let orig = probe.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = objective_value(&probe, f);
            probe.params_mut().get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = objective_value(&probe, f);
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = ad.data()[i];
            e.0 += (fd - a).powi(2);
            e.1 += fd * fd;
            e.2 += a * a;
        }
    }
    per_group
        .into_iter()
        .map(|(group, (diff, fd, ad))| {
            let scale = fd.sqrt().max(ad.sqrt());
            (group, if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
        })
        .collect()
}
