//! The stochastic hierarchy: parameter layout plus bottom-up, top-down and
//! generative passes for all model variants.
//!
//! A pass records one [`LatentRecord`] per stochastic variable in the order
//! `z1_bu, z1_td, z2_bu, ..., zL` (BIVA) or `z1, ..., zL` (other variants).

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::config::{LatentKind, Likelihood, ModelConfig, Variant};
use crate::distributions::{
    bernoulli_log_prob, dlm_log_prob, floored_log_scale, one_hot, BernoulliParams, DiagonalGaussianParams,
    DiscretizedLogisticMixtureParams,
};
use crate::error::{Error, Result};
use crate::nn::{Affine, AffineShape, Ctx, ParamGroup, ParamStore, ResLayer};
use crate::rng::{Noise, RandomSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const HEAD_INIT_SCALE: f64 = 0.1;

/// Where a variable sits in a BIVA layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    BottomUp,
    TopDown,
    /// The only variable of its layer (top layer, or non-BIVA variants).
    Single,
}

/// Static description of one stochastic variable.
#[derive(Clone, Debug)]
pub struct VariableSpec {
    pub name: String,
    pub level: usize,
    pub role: Role,
    pub dim: usize,
    pub kind: LatentKind,
    pub res: (usize, usize),
    /// Sampled during the bottom-up pass.
    pub bottom_up: bool,
    /// The conditional prior does not depend on anything sampled after
    /// this variable, so the analytic KL is an unbiased estimate.
    pub analytic_kl: bool,
}

impl VariableSpec {
    fn sample_shape(&self, n: usize, conv: bool) -> Vec<usize> {
        match (conv, self.kind) {
            (true, LatentKind::Convolutional) => vec![n, self.dim, self.res.0, self.res.1],
            _ => vec![n, self.dim],
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    affine: Affine,
    dim: usize,
    flatten: bool,
}

#[derive(Clone, Debug)]
struct Classifier {
    blocks: Vec<Vec<ResLayer>>,
    out: Affine,
}

#[derive(Clone, Debug)]
struct Arch {
    conv: bool,
    res: Vec<(usize, usize)>,
    vars: Vec<VariableSpec>,
    q_heads: Vec<Head>,
    p_heads: Vec<Option<Head>>,
    bu: Vec<Vec<ResLayer>>,
    gen: Vec<Vec<ResLayer>>,
    likelihood: Affine,
    classifier: Option<Classifier>,
}

/// Evaluated likelihood parameters for `x`.
#[derive(Clone, Debug)]
pub enum LikelihoodParams {
    Bernoulli(BernoulliParams),
    Gaussian(DiagonalGaussianParams),
    Dlm(DiscretizedLogisticMixtureParams),
}

impl LikelihoodParams {
    /// Per-row `log p(x | z)`.
    pub fn log_prob<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Var> {
        let lp = match self {
            LikelihoodParams::Bernoulli(p) => bernoulli_log_prob(g, p, x)?,
            LikelihoodParams::Gaussian(p) => {
                let xv = g.constant(x.clone());
                p.log_prob(g, xv)?
            }
            LikelihoodParams::Dlm(p) => dlm_log_prob(g, p, x)?,
        };
        if !g.value(lp).all_finite() {
            return Err(Error::Numerical("likelihood is not finite".into()));
        }
        Ok(lp)
    }

    /// Mean image / vector under the likelihood (probabilities for Bernoulli).
    pub fn mean<T: Scalar>(&self, g: &Graph<T>) -> Tensor<T> {
        match self {
            LikelihoodParams::Bernoulli(p) => p.probabilities(g),
            LikelihoodParams::Gaussian(p) => g.value(p.mean).clone(),
            LikelihoodParams::Dlm(p) => {
                // mode of the most probable component, channels uncoupled
                let logits = g.value(p.mixture_logits);
                let (n, k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
                let c = p.channels();
                let plane = h * w;
                let mut out = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    for px in 0..plane {
                        let at = |t: &Tensor<T>, comp: usize| t.data()[(i * k + comp) * plane + px].f64();
                        let best = (0..k).max_by(|&a, &b| at(logits, a).total_cmp(&at(logits, b))).unwrap_or(0);
                        for ch in 0..c {
                            let m = at(g.value(p.means[ch]), best).clamp(-1.0, 1.0);
                            out.data_mut()[(i * c + ch) * plane + px] = T::c(((m + 1.0) * 127.5).round());
                        }
                    }
                }
                out
            }
        }
    }
}

/// One stochastic variable of an evaluated pass.
#[derive(Clone, Debug)]
pub struct LatentRecord {
    pub z: Var,
    /// `None` when the variable was drawn from its conditional prior.
    pub posterior: Option<DiagonalGaussianParams>,
    /// Conditional prior; standard normal for the top layer.
    pub prior: DiagonalGaussianParams,
}

impl LatentRecord {
    pub fn from_prior(&self) -> bool {
        self.posterior.is_none()
    }
}

/// Evaluated hierarchy. Variables index into the graph used for the pass.
#[derive(Clone, Debug)]
pub struct HierarchyState {
    pub latents: Vec<LatentRecord>,
    pub likelihood: LikelihoodParams,
    /// Bottom-up features `d̃_{i,j}`: `[i-1][j]`, empty for pure generation.
    pub bu_features: Vec<Vec<Var>>,
    /// Top-down features `d_{i,j}`: `[i][j]` for `i = 0..L-1`.
    pub td_features: Vec<Vec<Var>>,
}

pub type InferenceState = HierarchyState;
pub type GenerativeState = HierarchyState;

/// Per-variable log densities of the sampled latents.
#[derive(Clone, Copy, Debug)]
pub struct LayerLogProbs {
    pub log_p: Var,
    pub log_q: Option<Var>,
}

/// Output of the bottom-up pass.
#[derive(Clone, Debug)]
pub struct BottomUp<T> {
    pub features: Vec<Vec<Var>>,
    samples: Vec<Option<BuSample<T>>>,
}

#[derive(Clone, Debug)]
struct BuSample<T> {
    q: DiagonalGaussianParams,
    z: Var,
    eps: Tensor<T>,
}

/// Ordered latent values, any of which may be left unspecified.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchySample<T> {
    pub latents: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> HierarchySample<T> {
    pub fn empty(num_variables: usize) -> Self {
        Self { latents: vec![None; num_variables] }
    }

    pub fn from_state(g: &Graph<T>, state: &HierarchyState) -> Self {
        Self { latents: state.latents.iter().map(|r| Some(g.value(r.z).clone())).collect() }
    }

    /// Keeps only variables of layers above `level`.
    pub fn keep_above(mut self, model_vars: &[VariableSpec], level: usize) -> Self {
        for (slot, spec) in self.latents.iter_mut().zip(model_vars) {
            if spec.level <= level {
                *slot = None;
            }
        }
        self
    }
}

/// Sampling controls for a pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    /// Scales posterior noise.
    pub temperature: f64,
    /// Scales prior noise for variables drawn from conditional priors.
    pub prior_temperature: f64,
    /// Layers `1..=prior_below` are drawn from their conditional priors
    /// instead of the posterior (the partial-inference bound uses this).
    pub prior_below: usize,
    /// Enables dropout.
    pub train: bool,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self { temperature: 1.0, prior_temperature: 1.0, prior_below: 0, train: false }
    }
}

impl PassOptions {
    pub fn training() -> Self {
        Self { train: true, ..Self::default() }
    }
}

/// A hierarchical VAE of any supported variant.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    arch: Arch,
    initialized: bool,
}

fn feat_len(c: usize, res: (usize, usize), conv: bool) -> usize {
    if conv {
        c * res.0 * res.1
    } else {
        c
    }
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut RandomSource,
    conv: bool,
    wn: bool,
}

impl<T: Scalar> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn res_layer(
        &mut self,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        width: usize,
        k: usize,
        stride: usize,
        upsample: Option<(usize, usize)>,
        dropout: f64,
    ) -> ResLayer {
        let (sa, sb) = if self.conv {
            (
                AffineShape::Conv { c_in, c_out: width, k, stride, upsample },
                AffineShape::Conv { c_in: width, c_out: width, k, stride: 1, upsample: None },
            )
        } else {
            (AffineShape::Dense { fan_in: c_in, fan_out: width }, AffineShape::Dense { fan_in: width, fan_out: width })
        };
        let a = Affine::new(self.store, self.rng, &format!("{name}.a"), group, sa, self.wn, 1.0);
        let b = Affine::new(self.store, self.rng, &format!("{name}.b"), group, sb, self.wn, 1.0);
        ResLayer { a, b, dropout }
    }

    fn head(&mut self, name: &str, group: ParamGroup, c_in: usize, res: (usize, usize), spec: &VariableSpec) -> Head {
        let out = 2 * spec.dim;
        let (shape, flatten) = match (self.conv, spec.kind) {
            (true, LatentKind::Convolutional) => {
                (AffineShape::Conv { c_in, c_out: out, k: 1, stride: 1, upsample: None }, false)
            }
            (true, LatentKind::Dense) => (AffineShape::Dense { fan_in: feat_len(c_in, res, true), fan_out: out }, true),
            (false, _) => (AffineShape::Dense { fan_in: c_in, fan_out: out }, false),
        };
        let affine = Affine::new(self.store, self.rng, name, group, shape, self.wn, HEAD_INIT_SCALE);
        Head { affine, dim: spec.dim, flatten }
    }
}

impl<T: Scalar> Model<T> {
    /// Allocates all parameters for `config`.
    pub fn new(config: ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = Self::build(&config, &mut params, rng);
        let initialized = !config.weight_norm;
        Ok(Self { config, params, arch, initialized })
    }

    fn build(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut RandomSource) -> Arch {
        let l = cfg.num_layers;
        let m = cfg.resnet_depth;
        let conv = cfg.is_conv();
        let res = cfg.resolutions();
        let n = &cfg.latent_dims;
        let w = &cfg.feature_widths;
        let biva = cfg.variant == Variant::Biva;
        let y_c = cfg.num_classes.unwrap_or(0);
        let drop_inf = cfg.dropout_rates.inference;
        let drop_gen = cfg.dropout_rates.generative;
        let mut b = Builder { store, rng, conv, wn: cfg.weight_norm };

        // variables
        let mut vars = Vec::new();
        for i in 1..=l {
            let kind = cfg.latent_kind[i - 1];
            let mk = |name: String, role: Role, bottom_up: bool, analytic_kl: bool| VariableSpec {
                name,
                level: i,
                role,
                dim: n[i - 1],
                kind,
                res: res[i],
                bottom_up,
                analytic_kl,
            };
            if i == l {
                vars.push(mk(format!("z{i}"), Role::Single, false, true));
            } else {
                match cfg.variant {
                    Variant::Biva => {
                        vars.push(mk(format!("z{i}_bu"), Role::BottomUp, true, false));
                        vars.push(mk(format!("z{i}_td"), Role::TopDown, false, true));
                    }
                    Variant::Vae => vars.push(mk(format!("z{i}"), Role::Single, true, false)),
                    _ => vars.push(mk(format!("z{i}"), Role::Single, false, true)),
                }
            }
        }

        // bottom-up blocks
        let in_c = cfg.input_shape[0];
        let mut bu = Vec::with_capacity(l);
        let mut bu_c: Vec<Vec<usize>> = Vec::with_capacity(l);
        for i in 1..=l {
            let c0 = if i == 1 {
                in_c
            } else {
                match cfg.variant {
                    Variant::Vae => n[i - 2],
                    Variant::Biva => n[i - 2] + bu_c[i - 2][m],
                    _ => bu_c[i - 2][m],
                }
            };
            let mut cs = vec![c0];
            let mut layers = Vec::with_capacity(m);
            for j in 1..=m {
                let stride = if j == 1 { cfg.stride_schedule[i - 1] } else { 1 };
                layers.push(b.res_layer(
                    &format!("bu.{i}.{j}"),
                    ParamGroup::BottomUp,
                    cs[j - 1],
                    w[i - 1],
                    cfg.kernel(i - 1),
                    stride,
                    None,
                    drop_inf,
                ));
                let skip = if i > 1 && cfg.variant != Variant::Vae { bu_c[i - 2][j] } else { 0 };
                cs.push(w[i - 1] + skip);
            }
            bu.push(layers);
            bu_c.push(cs);
        }

        // generative blocks, top to bottom
        let mut gen: Vec<Vec<ResLayer>> = vec![Vec::new(); l];
        let mut gen_c: Vec<Vec<usize>> = vec![Vec::new(); l];
        for i in (0..l).rev() {
            let zc = if biva && i + 1 < l { 2 * n[i] } else { n[i] };
            let mut cs = vec![zc + y_c];
            let mut layers = Vec::with_capacity(m);
            for j in 1..=m {
                let up = (j == 1 && conv && res[i] != res[i + 1]).then_some(res[i]);
                layers.push(b.res_layer(
                    &format!("gen.{i}.{j}"),
                    ParamGroup::Generative,
                    cs[j - 1],
                    w[i],
                    cfg.kernel(i),
                    1,
                    up,
                    drop_gen,
                ));
                let skip = if cfg.variant.generative_skips() && i + 1 < l { gen_c[i + 1][j] } else { 0 };
                cs.push(w[i] + skip);
            }
            gen[i] = layers;
            gen_c[i] = cs;
        }

        // heads
        let mut q_heads = Vec::with_capacity(vars.len());
        let mut p_heads = Vec::with_capacity(vars.len());
        for spec in &vars {
            let i = spec.level;
            let d_bu = bu_c[i - 1][m];
            let (q_in, q_group) = if i == l {
                (d_bu + y_c, ParamGroup::BottomUp)
            } else if spec.bottom_up {
                (d_bu, ParamGroup::BottomUp)
            } else {
                (d_bu + gen_c[i][m] + y_c, ParamGroup::TopDownHeads)
            };
            q_heads.push(b.head(&format!("q.{}", spec.name), q_group, q_in, res[i], spec));
            p_heads.push(
                (i < l).then(|| b.head(&format!("p.{}", spec.name), ParamGroup::Generative, gen_c[i][m], res[i], spec)),
            );
        }

        let x_c = cfg.input_shape[0];
        let out_c = match cfg.likelihood {
            Likelihood::Bernoulli => x_c,
            Likelihood::Gaussian => 2 * x_c,
            Likelihood::Dlm => DiscretizedLogisticMixtureParams::raw_channels(cfg.dlm_components, x_c),
        };
        let lik_shape = if conv {
            AffineShape::Conv { c_in: gen_c[0][m], c_out: out_c, k: 1, stride: 1, upsample: None }
        } else {
            AffineShape::Dense { fan_in: gen_c[0][m], fan_out: out_c }
        };
        let likelihood = Affine::new(b.store, b.rng, "likelihood", ParamGroup::Generative, lik_shape, b.wn, HEAD_INIT_SCALE);

        let classifier = cfg.num_classes.map(|classes| {
            let lc = (l - 1).max(1);
            let mut blocks = Vec::with_capacity(lc);
            let mut prev = in_c;
            for i in 1..=lc {
                let mut c = prev;
                let mut layers = Vec::with_capacity(m);
                for j in 1..=m {
                    let stride = if j == 1 { cfg.stride_schedule[i - 1] } else { 1 };
                    layers.push(b.res_layer(
                        &format!("cls.{i}.{j}"),
                        ParamGroup::Classifier,
                        c,
                        w[i - 1],
                        cfg.kernel(i - 1),
                        stride,
                        None,
                        drop_inf,
                    ));
                    c = w[i - 1] + if biva && i < l { n[i - 1] } else { 0 };
                }
                blocks.push(layers);
                prev = c;
            }
            let fan_in = feat_len(prev, res[lc], conv);
            let out = Affine::new(
                b.store,
                b.rng,
                "cls.out",
                ParamGroup::Classifier,
                AffineShape::Dense { fan_in, fan_out: classes },
                b.wn,
                HEAD_INIT_SCALE,
            );
            Classifier { blocks, out }
        });

        Arch { conv, res, vars, q_heads, p_heads, bu, gen, likelihood, classifier }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.arch.vars
    }

    pub fn num_variables(&self) -> usize {
        self.arch.vars.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn set_initialized(&mut self, v: bool) {
        self.initialized = v;
    }

    pub fn has_classifier(&self) -> bool {
        self.arch.classifier.is_some()
    }

    /// Per-variable sample shape for a batch of `n`.
    pub fn latent_shape(&self, var: usize, n: usize) -> Vec<usize> {
        self.arch.vars[var].sample_shape(n, self.arch.conv)
    }

    /// Scales raw data into the network's input range.
    pub fn network_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(match self.config.likelihood {
            Likelihood::Dlm => x.map(|v| v / T::c(127.5) - T::one()),
            _ => x.clone(),
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != self.config.input_shape.len() + 1 || s[1..] != self.config.input_shape[..] || s[0] == 0 {
            return Err(Error::Shape(format!("input {:?} does not match model input {:?}", s, self.config.input_shape)));
        }
        Ok(())
    }

    fn latent_feature(&self, ctx: &mut Ctx<'_, '_, T>, z: Var, res: (usize, usize)) -> Var {
        if !self.arch.conv {
            return z;
        }
        if ctx.g.shape(z).len() == 2 {
            ctx.g.tile(z, res.0, res.1)
        } else {
            ctx.g.resize(z, res.0, res.1)
        }
    }

    fn skip_concat(&self, ctx: &mut Ctx<'_, '_, T>, h: Var, skip: Var) -> Var {
        let skip = if self.arch.conv {
            let s = ctx.g.shape(h);
            let (oh, ow) = (s[2], s[3]);
            ctx.g.resize(skip, oh, ow)
        } else {
            skip
        };
        ctx.g.concat(&[h, skip])
    }

    fn with_label(&self, ctx: &mut Ctx<'_, '_, T>, feat: Var, y: Option<Var>) -> Var {
        match y {
            None => feat,
            Some(y) => {
                let yf = if self.arch.conv {
                    let s = ctx.g.shape(feat);
                    let (h, w) = (s[2], s[3]);
                    ctx.g.tile(y, h, w)
                } else {
                    y
                };
                ctx.g.concat(&[feat, yf])
            }
        }
    }

    fn head(&self, ctx: &mut Ctx<'_, '_, T>, head: &Head, x: Var) -> Result<DiagonalGaussianParams> {
        let x = if head.flatten { ctx.g.flatten(x) } else { x };
        let out = head.affine.forward(ctx, x);
        let mean = ctx.g.slice(out, 0, head.dim);
        let raw = ctx.g.slice(out, head.dim, head.dim);
        let log_scale = floored_log_scale(ctx.g, raw);
        let p = DiagonalGaussianParams::new(ctx.g, mean, log_scale)?;
        p.validate(ctx.g)?;
        Ok(p)
    }

    fn run_block(&self, ctx: &mut Ctx<'_, '_, T>, layers: &[ResLayer], d0: Var, skips: Option<&[Var]>) -> Vec<Var> {
        let mut ds = Vec::with_capacity(layers.len() + 1);
        ds.push(d0);
        for (j, layer) in layers.iter().enumerate() {
            let h = layer.forward(ctx, ds[j]);
            let h = match skips {
                Some(s) => self.skip_concat(ctx, h, s[j + 1]),
                None => h,
            };
            ds.push(h);
        }
        ds
    }

    fn label_var(&self, g: &mut Graph<T>, labels: Option<&[usize]>, n: usize) -> Result<Option<Var>> {
        match (self.config.num_classes, labels) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::Model("labels given to a model without classes".into())),
            (Some(_), None) => Err(Error::Model("class-conditional model needs labels".into())),
            (Some(c), Some(y)) => {
                if y.len() != n {
                    return Err(Error::Shape(format!("{} labels for {} rows", y.len(), n)));
                }
                Ok(Some(g.constant(one_hot::<T>(y, c)?)))
            }
        }
    }

    /// Bottom-up pass: deterministic features and, for BIVA and VAE, the
    /// bottom-up latents below the top.
    pub fn bottom_up(&self, ctx: &mut Ctx<'_, '_, T>, x: &Tensor<T>, temperature: f64) -> Result<BottomUp<T>> {
        let input = self.network_input(x)?;
        let n = input.shape()[0];
        if ctx.noise.rows() != n {
            return Err(Error::Shape(format!("noise supplies {} rows for a batch of {}", ctx.noise.rows(), n)));
        }
        let l = self.config.num_layers;
        let m = self.config.resnet_depth;
        let xin = ctx.g.constant(input);
        let mut features: Vec<Vec<Var>> = Vec::with_capacity(l);
        let mut samples: Vec<Option<BuSample<T>>> = Vec::with_capacity(l);
        for i in 1..=l {
            let d0 = if i == 1 {
                xin
            } else {
                let prev = features[i - 2][m];
                match self.config.variant {
                    Variant::Vae | Variant::Biva => {
                        let z = samples[i - 2].as_ref().expect("bottom-up sample below").z;
                        let zf = self.latent_feature(ctx, z, self.arch.res[i - 1]);
                        if self.config.variant == Variant::Vae {
                            zf
                        } else {
                            ctx.g.concat(&[zf, prev])
                        }
                    }
                    _ => prev,
                }
            };
            let skips = (i > 1 && self.config.variant != Variant::Vae).then(|| features[i - 2].clone());
            let ds = self.run_block(ctx, &self.arch.bu[i - 1], d0, skips.as_deref());
            let top = ds[m];
            features.push(ds);
            let bu_var = (i < l)
                .then(|| self.arch.vars.iter().position(|v| v.level == i && v.bottom_up))
                .flatten();
            match bu_var {
                Some(v) => {
                    let q = self.head(ctx, &self.arch.q_heads[v], top)?;
                    let shape = self.latent_shape(v, n);
                    let eps = ctx.noise.normal::<T>(&shape[1..]);
                    let z = q.sample_with(ctx.g, eps.clone(), temperature)?;
                    samples.push(Some(BuSample { q, z, eps }));
                }
                None => samples.push(None),
            }
        }
        Ok(BottomUp { features, samples })
    }

    /// Top-down pass. With `bu` it performs inference (layers at or below
    /// `opts.prior_below` come from conditional priors); without it, it
    /// generates, taking any variables present in `supplied`.
    pub fn top_down(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        bu: Option<&BottomUp<T>>,
        supplied: Option<&HierarchySample<T>>,
        y: Option<Var>,
        n: usize,
        opts: &PassOptions,
    ) -> Result<HierarchyState> {
        let l = self.config.num_layers;
        let m = self.config.resnet_depth;
        let nv = self.arch.vars.len();
        if let Some(s) = supplied {
            if s.latents.len() != nv {
                return Err(Error::Shape(format!("{} latents supplied, model has {}", s.latents.len(), nv)));
            }
            for (v, t) in s.latents.iter().enumerate() {
                if let Some(t) = t {
                    let want = self.latent_shape(v, n);
                    if t.shape() != want.as_slice() {
                        return Err(Error::Shape(format!(
                            "latent {} has shape {:?}, expected {:?}",
                            self.arch.vars[v].name,
                            t.shape(),
                            want
                        )));
                    }
                }
            }
        }
        if opts.prior_below > l {
            return Err(Error::InvalidValue(format!("prior_below {} exceeds {} layers", opts.prior_below, l)));
        }
        let given = |v: usize| supplied.and_then(|s| s.latents[v].clone());
        let mut records: Vec<Option<LatentRecord>> = vec![None; nv];

        // top layer
        let top = nv - 1;
        let shape = self.latent_shape(top, n);
        let std = DiagonalGaussianParams::standard(ctx.g, &shape);
        let rec = match (bu, given(top)) {
            (Some(bu), _) if opts.prior_below < l => {
                let feat = self.with_label(ctx, bu.features[l - 1][m], y);
                let q = self.head(ctx, &self.arch.q_heads[top], feat)?;
                let z = q.sample(ctx.g, ctx.noise, opts.temperature)?;
                LatentRecord { z, posterior: Some(q), prior: std }
            }
            (_, Some(t)) => LatentRecord { z: ctx.g.constant(t), posterior: None, prior: std },
            _ => {
                let z = std.sample(ctx.g, ctx.noise, opts.prior_temperature)?;
                LatentRecord { z, posterior: None, prior: std }
            }
        };
        records[top] = Some(rec);

        let mut td: Vec<Vec<Var>> = vec![Vec::new(); l];
        for i in (0..l).rev() {
            let above: Vec<Var> = self
                .arch
                .vars
                .iter()
                .enumerate()
                .filter(|(_, s)| s.level == i + 1)
                .map(|(v, _)| records[v].as_ref().expect("layer above sampled").z)
                .collect();
            let feats: Vec<Var> = above.iter().map(|&z| self.latent_feature(ctx, z, self.arch.res[i + 1])).collect();
            let d0 = if feats.len() == 1 { feats[0] } else { ctx.g.concat(&feats) };
            let d0 = self.with_label(ctx, d0, y);
            let skips = (self.config.variant.generative_skips() && i + 1 < l).then(|| td[i + 1].clone());
            td[i] = self.run_block(ctx, &self.arch.gen[i], d0, skips.as_deref());
            if i == 0 {
                break;
            }
            let d = td[i][m];
            for v in 0..nv {
                let spec = &self.arch.vars[v];
                if spec.level != i {
                    continue;
                }
                let prior = self.head(ctx, self.arch.p_heads[v].as_ref().expect("prior head"), d)?;
                let rec = match bu {
                    Some(bu) if i > opts.prior_below => {
                        if spec.bottom_up {
                            let s = bu.samples[i - 1].as_ref().expect("bottom-up sample");
                            LatentRecord { z: s.z, posterior: Some(s.q), prior }
                        } else {
                            let both = ctx.g.concat(&[bu.features[i - 1][m], d]);
                            let feat = self.with_label(ctx, both, y);
                            let q = self.head(ctx, &self.arch.q_heads[v], feat)?;
                            let z = q.sample(ctx.g, ctx.noise, opts.temperature)?;
                            LatentRecord { z, posterior: Some(q), prior }
                        }
                    }
                    Some(bu) if spec.bottom_up => {
                        // reuse the bottom-up draw's noise for the prior sample
                        let eps = bu.samples[i - 1].as_ref().expect("bottom-up sample").eps.clone();
                        let z = prior.sample_with(ctx.g, eps, opts.prior_temperature)?;
                        LatentRecord { z, posterior: None, prior }
                    }
                    _ => match given(v) {
                        Some(t) if bu.is_none() => LatentRecord { z: ctx.g.constant(t), posterior: None, prior },
                        _ => {
                            let z = prior.sample(ctx.g, ctx.noise, opts.prior_temperature)?;
                            LatentRecord { z, posterior: None, prior }
                        }
                    },
                };
                records[v] = Some(rec);
            }
        }

        let d = td[0][m];
        let likelihood = self.likelihood_head(ctx, d)?;
        Ok(HierarchyState {
            latents: records.into_iter().map(|r| r.expect("every variable sampled")).collect(),
            likelihood,
            bu_features: bu.map(|b| b.features.clone()).unwrap_or_default(),
            td_features: td,
        })
    }

    fn likelihood_head(&self, ctx: &mut Ctx<'_, '_, T>, d: Var) -> Result<LikelihoodParams> {
        let out = self.arch.likelihood.forward(ctx, d);
        let c = self.config.input_shape[0];
        Ok(match self.config.likelihood {
            Likelihood::Bernoulli => LikelihoodParams::Bernoulli(BernoulliParams { logits: out }),
            Likelihood::Gaussian => {
                let mean = ctx.g.slice(out, 0, c);
                let raw = ctx.g.slice(out, c, c);
                let ls = floored_log_scale(ctx.g, raw);
                LikelihoodParams::Gaussian(DiagonalGaussianParams::new(ctx.g, mean, ls)?)
            }
            Likelihood::Dlm => LikelihoodParams::Dlm(DiscretizedLogisticMixtureParams::from_raw(
                ctx.g,
                out,
                self.config.dlm_components,
                c,
            )?),
        })
    }

    /// Full inference pass: bottom-up, top latent, top-down.
    pub fn infer_ctx(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        x: &Tensor<T>,
        labels: Option<&[usize]>,
        opts: &PassOptions,
    ) -> Result<InferenceState> {
        let n = x.shape().first().copied().unwrap_or(0);
        let y = self.label_var(ctx.g, labels, n)?;
        let bu = self.bottom_up(ctx, x, opts.temperature)?;
        self.top_down(ctx, Some(&bu), None, y, n, opts)
    }

    /// Convenience wrapper over [`Model::infer_ctx`].
    pub fn infer(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        noise: &mut Noise<'_>,
        labels: Option<&[usize]>,
        opts: &PassOptions,
    ) -> Result<InferenceState> {
        let mut ctx = Ctx::new(g, &self.params, noise, opts.train);
        self.infer_ctx(&mut ctx, x, labels, opts)
    }

    /// Samples the generative model for `n` rows, keeping any supplied latents.
    pub fn generate(
        &self,
        g: &mut Graph<T>,
        n: usize,
        supplied: &HierarchySample<T>,
        noise: &mut Noise<'_>,
        labels: Option<&[usize]>,
        temperature: f64,
    ) -> Result<GenerativeState> {
        if noise.rows() != n {
            return Err(Error::Shape(format!("noise supplies {} rows for {} samples", noise.rows(), n)));
        }
        let opts = PassOptions { prior_temperature: temperature, ..PassOptions::default() };
        let mut ctx = Ctx::new(g, &self.params, noise, false);
        let y = self.label_var(ctx.g, labels, n)?;
        self.top_down(&mut ctx, None, Some(supplied), y, n, &opts)
    }

    /// Class log-probabilities `log q(y | x, z_bu)` given a bottom-up pass.
    pub fn classify(&self, ctx: &mut Ctx<'_, '_, T>, x: &Tensor<T>, bu: &BottomUp<T>) -> Result<Var> {
        let cls = self.arch.classifier.as_ref().ok_or_else(|| Error::Model("model has no classifier".into()))?;
        let l = self.config.num_layers;
        let input = self.network_input(x)?;
        let mut d = ctx.g.constant(input);
        for (idx, layers) in cls.blocks.iter().enumerate() {
            let i = idx + 1;
            let z = (self.config.variant == Variant::Biva && i < l)
                .then(|| bu.samples[i - 1].as_ref().map(|s| s.z))
                .flatten();
            for layer in layers {
                let h = layer.forward(ctx, d);
                d = match z {
                    Some(z) => {
                        let zf = if self.arch.conv {
                            let s = ctx.g.shape(h);
                            let (hh, ww) = (s[2], s[3]);
                            self.latent_feature(ctx, z, (hh, ww))
                        } else {
                            z
                        };
                        ctx.g.concat(&[h, zf])
                    }
                    None => h,
                };
            }
        }
        let flat = if self.arch.conv { ctx.g.flatten(d) } else { d };
        let logits = cls.out.forward(ctx, flat);
        Ok(ctx.g.log_softmax(logits))
    }

    /// Per-variable `log p` and `log q` (when inferred) of the sampled latents.
    pub fn conditional_prior_log_prob(&self, g: &mut Graph<T>, state: &InferenceState) -> Result<Vec<LayerLogProbs>> {
        if state.latents.len() != self.arch.vars.len() {
            return Err(Error::Model("state does not belong to this model".into()));
        }
        state
            .latents
            .iter()
            .map(|r| {
                let log_p = r.prior.log_prob(g, r.z)?;
                let log_q = r.posterior.map(|q| q.log_prob(g, r.z)).transpose()?;
                Ok(LayerLogProbs { log_p, log_q })
            })
            .collect()
    }

    /// Data-dependent initialization of weight-normalized layers from one batch.
    pub fn initialize(&mut self, x: &Tensor<T>, labels: Option<&[usize]>, rng: &mut RandomSource) -> Result<()> {
        if !self.config.weight_norm {
            self.initialized = true;
            return Ok(());
        }
        let n = x.shape().first().copied().unwrap_or(0);
        let fallback;
        let labels = match (self.config.num_classes, labels) {
            (Some(c), None) => {
                fallback = (0..n).map(|i| i % c).collect::<Vec<_>>();
                Some(fallback.as_slice())
            }
            (_, l) => l,
        };
        let mut overrides: HashMap<usize, Tensor<T>> = HashMap::new();
        {
            let mut g = Graph::new();
            let mut noise = Noise::single(rng, n);
            let mut ctx = Ctx::new(&mut g, &self.params, &mut noise, false);
            ctx.init = Some(&mut overrides);
            let y = self.label_var(ctx.g, labels, n)?;
            let bu = self.bottom_up(&mut ctx, x, 1.0)?;
            self.top_down(&mut ctx, Some(&bu), None, y, n, &PassOptions::default())?;
            if self.arch.classifier.is_some() {
                self.classify(&mut ctx, x, &bu)?;
            }
        }
        for (id, t) in overrides {
            self.params.set(id, t)?;
        }
        self.initialized = true;
        Ok(())
    }
}

/// Builds a model; see [`Model::new`].
pub fn build_model<T: Scalar>(config: ModelConfig, rng: &mut RandomSource) -> Result<Model<T>> {
    Model::new(config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DropoutRates;

    fn tiny(variant: Variant, conv: bool) -> ModelConfig {
        if conv {
            ModelConfig {
                variant,
                num_layers: 3,
                input_shape: vec![1, 8, 8],
                latent_dims: vec![3, 2, 2],
                latent_kind: vec![LatentKind::Convolutional, LatentKind::Dense, LatentKind::Dense],
                resnet_depth: 2,
                feature_widths: vec![4, 4, 4],
                kernel_sizes: vec![3, 3, 3],
                stride_schedule: vec![2, 1, 2],
                likelihood: Likelihood::Bernoulli,
                dlm_components: 2,
                dropout_rates: DropoutRates { generative: 0.1, inference: 0.1 },
                weight_norm: true,
                num_classes: None,
            }
        } else {
            let mut c = ModelConfig::dense(variant, 5, &[4, 3, 2], 6, 1);
            c.weight_norm = true;
            c
        }
    }

    fn batch(conv: bool, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RandomSource::new(seed);
        if conv {
            let d = (0..n * 64).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
            Tensor::new(vec![n, 1, 8, 8], d).unwrap()
        } else {
            rng.normal_tensor(&[n, 5])
        }
    }

    fn run(model: &Model<f64>, x: &Tensor<f64>, seed: u64, opts: &PassOptions) -> (Graph<f64>, InferenceState) {
        let mut g = Graph::new();
        let mut rng = RandomSource::new(seed);
        let mut noise = Noise::single(&mut rng, x.shape()[0]);
        let st = model.infer(&mut g, x, &mut noise, None, opts).unwrap();
        (g, st)
    }

    #[test]
    fn variable_counts_per_variant() {
        for conv in [false, true] {
            for (v, expect) in [(Variant::Vae, 3), (Variant::Lvae, 3), (Variant::LvaePlus, 3), (Variant::Biva, 5)] {
                let mut rng = RandomSource::new(0);
                let model = Model::<f64>::new(tiny(v, conv), &mut rng).unwrap();
                assert_eq!(model.num_variables(), expect);
                let x = batch(conv, 2, 1);
                let (_, st) = run(&model, &x, 2, &PassOptions::default());
                assert_eq!(st.latents.len(), expect);
                assert!(st.latents.iter().all(|r| !r.from_prior()));
            }
        }
    }

    #[test]
    fn latent_shapes_follow_config() {
        let mut rng = RandomSource::new(0);
        let model = Model::<f64>::new(tiny(Variant::Biva, true), &mut rng).unwrap();
        let x = batch(true, 3, 1);
        let (g, st) = run(&model, &x, 2, &PassOptions::default());
        let shapes: Vec<Vec<usize>> = st.latents.iter().map(|r| g.shape(r.z).to_vec()).collect();
        assert_eq!(shapes, vec![vec![3, 3, 4, 4], vec![3, 3, 4, 4], vec![3, 2], vec![3, 2], vec![3, 2]]);
        // d̃ resolutions follow the strides
        assert_eq!(&g.shape(st.bu_features[0][2])[2..], [4, 4]);
        assert_eq!(&g.shape(st.bu_features[2][2])[2..], [2, 2]);
        assert_eq!(&g.shape(st.td_features[0][2])[2..], [8, 8]);
    }

    #[test]
    fn identical_seed_gives_identical_state() {
        let mut rng = RandomSource::new(0);
        let model = Model::<f64>::new(tiny(Variant::Biva, false), &mut rng).unwrap();
        let x = batch(false, 4, 1);
        let (g1, s1) = run(&model, &x, 9, &PassOptions::training());
        let (g2, s2) = run(&model, &x, 9, &PassOptions::training());
        for (a, b) in s1.latents.iter().zip(&s2.latents) {
            assert_eq!(g1.value(a.z).data(), g2.value(b.z).data());
        }
    }

    #[test]
    fn temperature_zero_generation_is_deterministic() {
        let mut rng = RandomSource::new(0);
        let model = Model::<f64>::new(tiny(Variant::LvaePlus, false), &mut rng).unwrap();
        let empty = HierarchySample::empty(model.num_variables());
        let mut outs = Vec::new();
        for seed in [1, 2] {
            let mut g = Graph::new();
            let mut r = RandomSource::new(seed);
            let mut noise = Noise::single(&mut r, 2);
            let st = model.generate(&mut g, 2, &empty, &mut noise, None, 0.0).unwrap();
            let top = st.latents.last().unwrap().z;
            assert!(g.value(top).data().iter().all(|&v| v == 0.0));
            outs.push(st.likelihood.mean(&g));
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn rejects_wrong_input_shape_and_partial_latents() {
        let mut rng = RandomSource::new(0);
        let model = Model::<f64>::new(tiny(Variant::Lvae, false), &mut rng).unwrap();
        let mut g = Graph::new();
        let mut r = RandomSource::new(1);
        let mut noise = Noise::single(&mut r, 2);
        let bad = Tensor::zeros(&[2, 4]);
        assert!(model.infer(&mut g, &bad, &mut noise, None, &PassOptions::default()).is_err());
        let mut partial = HierarchySample::empty(3);
        partial.latents[1] = Some(Tensor::zeros(&[2, 7]));
        assert!(model.generate(&mut g, 2, &partial, &mut noise, None, 1.0).is_err());
    }

    #[test]
    fn data_init_marks_model_initialized() {
        let mut rng = RandomSource::new(0);
        let mut model = Model::<f64>::new(tiny(Variant::Biva, true), &mut rng).unwrap();
        assert!(!model.is_initialized());
        let before = model.params().values().to_vec();
        model.initialize(&batch(true, 6, 1), None, &mut rng).unwrap();
        assert!(model.is_initialized());
        assert_ne!(before, model.params().values());
    }
}
