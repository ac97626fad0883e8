//! Probability kernels: diagonal Gaussian (reparameterized), Bernoulli,
//! discretized logistic mixture and categorical.
//!
//! Parameters live in an autodiff [`Graph`], so every log-density here is
//! differentiable with respect to the network outputs that produced it.
//! Batched log-densities return one value per row (`[N]`), summed over all
//! remaining axes. All values are in nats.

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::rng::{Noise, RandomSource};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

/// Lower bound on every Gaussian standard deviation produced by a network head.
pub const MIN_SCALE: f64 = 1e-3;
/// Floor for discretized-logistic log-scales, in the `[-1, 1]` data scale.
pub const DLM_LOG_SCALE_FLOOR: f64 = -7.0;
/// Default number of logistic mixture components.
pub const DLM_DEFAULT_COMPONENTS: usize = 10;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains non-finite entries")))
    }
}

/// Maps a raw network output to a log standard deviation with
/// `σ = softplus(raw) + MIN_SCALE`.
pub fn floored_log_scale<T: Scalar>(g: &mut Graph<T>, raw: Var) -> Var {
    let sp = g.softplus(raw);
    let sigma = g.offset(sp, T::c(MIN_SCALE));
    g.log(sigma)
}

/// Inverse of [`floored_log_scale`]: the raw output yielding standard deviation `sigma`.
pub fn raw_for_scale(sigma: f64) -> f64 {
    let s = sigma - MIN_SCALE;
    assert!(s > 0.0, "scale must exceed the floor");
    // softplus^-1(s) = ln(e^s - 1)
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Mean and log standard deviation of a factorized Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct DiagonalGaussianParams {
    pub mean: Var,
    pub log_scale: Var,
}

impl DiagonalGaussianParams {
    pub fn new<T: Scalar>(g: &Graph<T>, mean: Var, log_scale: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(log_scale) {
            return Err(Error::Shape(format!(
                "mean {:?} vs log_scale {:?}",
                g.shape(mean),
                g.shape(log_scale)
            )));
        }
        Ok(Self { mean, log_scale })
    }

    /// Constant (non-trainable) parameters from plain tensors.
    pub fn constant<T: Scalar>(g: &mut Graph<T>, mean: Tensor<T>, log_scale: Tensor<T>) -> Result<Self> {
        let m = g.constant(mean);
        let s = g.constant(log_scale);
        Self::new(g, m, s)
    }

    /// Standard normal with the given shape.
    pub fn standard<T: Scalar>(g: &mut Graph<T>, shape: &[usize]) -> Self {
        let m = g.constant(Tensor::zeros(shape));
        let s = g.constant(Tensor::zeros(shape));
        Self { mean: m, log_scale: s }
    }

    pub fn shape<'g, T: Scalar>(&self, g: &'g Graph<T>) -> &'g [usize] {
        g.shape(self.mean)
    }

    pub fn validate<T: Scalar>(&self, g: &Graph<T>) -> Result<()> {
        check_finite(g, self.mean, "gaussian mean")?;
        check_finite(g, self.log_scale, "gaussian log_scale")
    }

    /// `mean + temperature · exp(log_scale) ⊗ eps` for externally supplied `eps`.
    pub fn sample_with<T: Scalar>(&self, g: &mut Graph<T>, eps: Tensor<T>, temperature: f64) -> Result<Var> {
        validate_temperature(temperature)?;
        self.validate(g)?;
        if eps.shape() != g.shape(self.mean) {
            return Err(Error::Shape(format!("noise {:?} vs params {:?}", eps.shape(), g.shape(self.mean))));
        }
        let sd = g.exp(self.log_scale);
        let eps = eps.map(|e| e * T::c(temperature));
        let noise = g.mul_const(sd, eps);
        Ok(g.add(self.mean, noise))
    }

    /// Reparameterized draw using noise from `noise`.
    pub fn sample<T: Scalar>(&self, g: &mut Graph<T>, noise: &mut Noise<'_>, temperature: f64) -> Result<Var> {
        let shape = g.shape(self.mean).to_vec();
        let eps = noise.normal::<T>(&shape[1..]);
        self.sample_with(g, eps, temperature)
    }

    /// Per-row log-density of `z`.
    pub fn log_prob<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        if g.shape(z) != g.shape(self.mean) {
            return Err(Error::Shape(format!("z {:?} vs params {:?}", g.shape(z), g.shape(self.mean))));
        }
        let diff = g.sub(z, self.mean);
        let neg_ls = g.neg(self.log_scale);
        let inv_sd = g.exp(neg_ls);
        let standardized = g.mul(diff, inv_sd);
        let sq = g.square(standardized);
        let half = g.scale(sq, T::c(-0.5));
        let t = g.sub(half, self.log_scale);
        let t = g.offset(t, T::c(-HALF_LN_2PI));
        Ok(g.sum_rows(t))
    }
}

fn validate_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidValue(format!("temperature must be finite and non-negative, got {t}")));
    }
    Ok(())
}

/// Reparameterized sample `mean + temperature · σ ⊗ ε`, `ε ~ N(0, I)` drawn from `rng`.
pub fn gaussian_sample<T: Scalar>(
    g: &mut Graph<T>,
    params: &DiagonalGaussianParams,
    rng: &mut RandomSource,
    temperature: f64,
) -> Result<Var> {
    let shape = g.shape(params.mean).to_vec();
    let eps = rng.normal_tensor::<T>(&shape);
    params.sample_with(g, eps, temperature)
}

pub fn gaussian_log_prob<T: Scalar>(g: &mut Graph<T>, params: &DiagonalGaussianParams, z: Var) -> Result<Var> {
    params.log_prob(g, z)
}

/// Analytic `KL(q ‖ p)` per row.
pub fn gaussian_kl<T: Scalar>(
    g: &mut Graph<T>,
    q: &DiagonalGaussianParams,
    p: &DiagonalGaussianParams,
) -> Result<Var> {
    if g.shape(q.mean) != g.shape(p.mean) {
        return Err(Error::Shape(format!("q {:?} vs p {:?}", g.shape(q.mean), g.shape(p.mean))));
    }
    // ln σp − ln σq + (σq² + (μq − μp)²) / (2σp²) − ½
    let dls = g.sub(p.log_scale, q.log_scale);
    let two_dls = g.scale(dls, T::c(-2.0));
    let var_ratio = g.exp(two_dls);
    let dm = g.sub(q.mean, p.mean);
    let neg_ls = g.neg(p.log_scale);
    let inv_sp = g.exp(neg_ls);
    let z = g.mul(dm, inv_sp);
    let z2 = g.square(z);
    let quad = g.add(var_ratio, z2);
    let quad = g.scale(quad, T::c(0.5));
    let t = g.add(dls, quad);
    let t = g.offset(t, T::c(-0.5));
    Ok(g.sum_rows(t))
}

/// Logits of independent Bernoulli pixels.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliParams {
    pub logits: Var,
}

impl BernoulliParams {
    pub fn probabilities<T: Scalar>(&self, g: &Graph<T>) -> Tensor<T> {
        g.value(self.logits).map(scalar::sigmoid)
    }
}

/// Per-row Bernoulli log-likelihood `x·l − softplus(l)`.
pub fn bernoulli_log_prob<T: Scalar>(g: &mut Graph<T>, params: &BernoulliParams, x: &Tensor<T>) -> Result<Var> {
    if x.shape() != g.shape(params.logits) {
        return Err(Error::Shape(format!("x {:?} vs logits {:?}", x.shape(), g.shape(params.logits))));
    }
    if let Some(bad) = x.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidValue(format!("bernoulli observation {bad} is not in {{0, 1}}")));
    }
    check_finite(g, params.logits, "bernoulli logits")?;
    let xl = g.mul_const(params.logits, x.clone());
    let sp = g.softplus(params.logits);
    let lp = g.sub(xl, sp);
    Ok(g.sum_rows(lp))
}

/// Mixture of discretized logistics over 8-bit images with linear coupling
/// between channels.
///
/// Every entry is a `[N, K, H, W]` node: `means`/`log_scales` hold one node
/// per channel, `coeffs` holds the coupling coefficients in the order
/// `(c1←c0)`, `(c2←c0)`, `(c2←c1)` and is empty for single-channel data.
#[derive(Clone, Debug)]
pub struct DiscretizedLogisticMixtureParams {
    pub mixture_logits: Var,
    pub means: Vec<Var>,
    pub log_scales: Vec<Var>,
    pub coeffs: Vec<Var>,
}

impl DiscretizedLogisticMixtureParams {
    /// Number of raw network output channels needed for `k` components over `c` channels.
    pub fn raw_channels(k: usize, c: usize) -> usize {
        k * (1 + 2 * c + c * (c - 1) / 2)
    }

    /// Splits raw network output `[N, raw_channels, H, W]` into mixture parameters,
    /// applying the log-scale floor and a `tanh` on the coupling coefficients.
    pub fn from_raw<T: Scalar>(g: &mut Graph<T>, raw: Var, k: usize, c: usize) -> Result<Self> {
        if g.shape(raw).len() != 4 || g.shape(raw)[1] != Self::raw_channels(k, c) {
            return Err(Error::Shape(format!(
                "raw DLM output {:?} needs {} channels",
                g.shape(raw),
                Self::raw_channels(k, c)
            )));
        }
        let mixture_logits = g.slice(raw, 0, k);
        let mut offset = k;
        let mut means = Vec::with_capacity(c);
        let mut log_scales = Vec::with_capacity(c);
        for _ in 0..c {
            means.push(g.slice(raw, offset, k));
            offset += k;
        }
        for _ in 0..c {
            let ls = g.slice(raw, offset, k);
            log_scales.push(g.clamp_min(ls, T::c(DLM_LOG_SCALE_FLOOR)));
            offset += k;
        }
        let mut coeffs = Vec::new();
        for _ in 0..c * (c - 1) / 2 {
            let r = g.slice(raw, offset, k);
            coeffs.push(g.tanh(r));
            offset += k;
        }
        Ok(Self { mixture_logits, means, log_scales, coeffs })
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    fn coeff_index(target: usize, source: usize) -> usize {
        match (target, source) {
            (1, 0) => 0,
            (2, 0) => 1,
            (2, 1) => 2,
            _ => unreachable!("channel coupling only runs forward over RGB"),
        }
    }

    /// Coupled component means for channel `c` given the rescaled image.
    fn coupled_mean<T: Scalar>(&self, g: &mut Graph<T>, c: usize, scaled: &[Tensor<T>]) -> Var {
        let mut m = self.means[c];
        for src in 0..c {
            let coeff = self.coeffs[Self::coeff_index(c, src)];
            let shift = g.mul_const(coeff, scaled[src].clone());
            m = g.add(m, shift);
        }
        m
    }
}

/// Validates 8-bit image data and returns it rescaled to `[-1, 1]`,
/// broadcast over `k` components: one `[N, K, H, W]` tensor per channel.
fn rescale_levels<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("DLM data must be [N, C, H, W], got {:?}", x.shape())));
    }
    for &v in x.data() {
        let f = v.f64();
        if !(0.0..=255.0).contains(&f) || f.fract() != 0.0 {
            return Err(Error::InvalidValue(format!("pixel value {f} is not an integer in 0..=255")));
        }
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut data = Vec::with_capacity(n * k * plane);
        for i in 0..n {
            let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for _ in 0..k {
                data.extend(src.iter().map(|&v| T::c(v.f64() / 127.5 - 1.0)));
            }
        }
        out.push(Tensor::new(vec![n, k, h, w], data)?);
    }
    Ok(out)
}

/// Per-row log-likelihood of 8-bit images `x: [N, C, H, W]` (values 0..=255).
///
/// Interior bins integrate the logistic density over `x ± 1/255`; the
/// lowest bin integrates from `-∞` and the highest to `+∞`, so the 256 bin
/// probabilities of every channel sum to one.
pub fn dlm_log_prob<T: Scalar>(
    g: &mut Graph<T>,
    params: &DiscretizedLogisticMixtureParams,
    x: &Tensor<T>,
) -> Result<Var> {
    let logits_shape = g.shape(params.mixture_logits).to_vec();
    let k = logits_shape[1];
    let c = params.channels();
    if x.rank() != 4
        || x.shape()[1] != c
        || x.shape()[0] != logits_shape[0]
        || x.shape()[2..] != logits_shape[2..]
    {
        return Err(Error::Shape(format!("x {:?} vs mixture logits {:?} with {c} channels", x.shape(), logits_shape)));
    }
    let scaled = rescale_levels(x, k)?;
    let bin = T::c(1.0 / 255.0);
    let mut total: Option<Var> = None;
    for ch in 0..c {
        let mean = params.coupled_mean(g, ch, &scaled);
        let log_s = params.log_scales[ch];
        let xs = g.constant(scaled[ch].clone());
        let centered = g.sub(xs, mean);
        let neg_ls = g.neg(log_s);
        let inv_s = g.exp(neg_ls);
        let c_plus = g.offset(centered, bin);
        let c_min = g.offset(centered, -bin);
        let plus_in = g.mul(c_plus, inv_s);
        let min_in = g.mul(c_min, inv_s);
        // lowest bin: ln σ(plus_in)
        let log_cdf_plus = g.log_sigmoid(plus_in);
        // highest bin: ln(1 − σ(min_in)) = −softplus(min_in)
        let sp_min = g.softplus(min_in);
        let log_sf_min = g.neg(sp_min);
        // interior: ln(σ(a) − σ(b)) = ln σ(a) + ln σ(−b) + ln(1 − e^{−(a−b)})
        let width = g.scale(inv_s, T::c(2.0) * bin);
        let gap = g.unary(width, Unary::LogOneMinusExpNeg);
        let mid = g.add(log_cdf_plus, log_sf_min);
        let mid = g.add(mid, gap);
        let xv = &scaled[ch];
        let low: Vec<bool> = xv.data().iter().map(|&v| v < T::c(-0.999)).collect();
        let high: Vec<bool> = xv.data().iter().map(|&v| v > T::c(0.999)).collect();
        let lp = g.select(high, log_sf_min, mid);
        let lp = g.select(low, log_cdf_plus, lp);
        total = Some(match total {
            Some(t) => g.add(t, lp),
            None => lp,
        });
    }
    let total = total.expect("at least one channel");
    let log_w = g.log_softmax(params.mixture_logits);
    let joint = g.add(total, log_w);
    let per_pixel = g.logsumexp(joint);
    Ok(g.sum_rows(per_pixel))
}

/// Draws 8-bit images from evaluated mixture parameters.
pub fn dlm_sample<T: Scalar>(
    g: &Graph<T>,
    params: &DiscretizedLogisticMixtureParams,
    rng: &mut RandomSource,
    temperature: f64,
) -> Tensor<T> {
    let logits = g.value(params.mixture_logits);
    let (n, k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let c = params.channels();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for p in 0..plane {
            let at = |t: &Tensor<T>, comp: usize| t.data()[(i * k + comp) * plane + p].f64();
            // Gumbel-max component choice
            let mut best = (f64::NEG_INFINITY, 0);
            for comp in 0..k {
                let u = rng.uniform().clamp(1e-12, 1.0 - 1e-12);
                let score = at(logits, comp) - (-u.ln()).ln();
                if score > best.0 {
                    best = (score, comp);
                }
            }
            let comp = best.1;
            let mut xs = [0.0f64; 3];
            for ch in 0..c {
                let mut m = at(g.value(params.means[ch]), comp);
                for src in 0..ch {
                    let coeff = g.value(params.coeffs[DiscretizedLogisticMixtureParams::coeff_index(ch, src)]);
                    m += at(coeff, comp) * xs[src];
                }
                let s = at(g.value(params.log_scales[ch]), comp).exp();
                let u = rng.uniform().clamp(1e-5, 1.0 - 1e-5);
                let v = (m + temperature * s * (u.ln() - (1.0 - u).ln())).clamp(-1.0, 1.0);
                xs[ch] = v;
                out.data_mut()[(i * c + ch) * plane + p] = T::c(((v + 1.0) * 127.5).round());
            }
        }
    }
    out
}

/// Probabilities over a finite set of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalParams {
    probabilities: Vec<f64>,
}

impl CategoricalParams {
    /// Fails unless entries are non-negative and sum to one within `1e-6`.
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidValue("categorical needs at least one class".into()));
        }
        if probabilities.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidValue("categorical probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidValue(format!("categorical probabilities sum to {s}, not 1")));
        }
        Ok(Self { probabilities })
    }

    pub fn uniform(classes: usize) -> Self {
        Self { probabilities: vec![1.0 / classes as f64; classes] }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn classes(&self) -> usize {
        self.probabilities.len()
    }

    pub fn entropy(&self) -> f64 {
        -self.probabilities.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        self.probabilities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

pub fn categorical_log_prob(params: &CategoricalParams, y: usize) -> Result<f64> {
    params
        .probabilities
        .get(y)
        .map(|p| p.ln())
        .ok_or_else(|| Error::InvalidValue(format!("class {y} out of range 0..{}", params.classes())))
}

/// One-hot encoding `[N, classes]`.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidValue(format!("label {y} out of range 0..{classes}")));
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

/// Per-row `log q(y)` from log-probabilities `[N, classes]`.
pub fn categorical_log_prob_rows<T: Scalar>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(log_probs)[1];
    if labels.len() != g.shape(log_probs)[0] {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), g.shape(log_probs)[0])));
    }
    let oh = one_hot(labels, classes)?;
    let picked = g.mul_const(log_probs, oh);
    Ok(g.sum_rows(picked))
}
