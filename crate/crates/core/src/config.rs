//! Model description and validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Purely bottom-up inference, no generative skips.
    #[serde(alias = "vae")]
    Vae,
    /// Deterministic bottom-up path, top-down inference, no generative skips.
    #[serde(alias = "lvae")]
    Lvae,
    /// LVAE with skip connections in the generative path.
    #[serde(alias = "lvae_plus")]
    LvaePlus,
    /// Bidirectional inference: stochastic bottom-up and top-down latents.
    #[serde(alias = "biva")]
    Biva,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vae => "VAE",
            Variant::Lvae => "LVAE",
            Variant::LvaePlus => "LVAE_PLUS",
            Variant::Biva => "BIVA",
        }
    }

    pub fn generative_skips(self) -> bool {
        matches!(self, Variant::LvaePlus | Variant::Biva)
    }

    pub fn top_down_inference(self) -> bool {
        !matches!(self, Variant::Vae)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "VAE" => Ok(Variant::Vae),
            "LVAE" => Ok(Variant::Lvae),
            "LVAE_PLUS" | "LVAE+" => Ok(Variant::LvaePlus),
            "BIVA" => Ok(Variant::Biva),
            _ => Err(Error::config("variant", format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Dense,
    #[serde(alias = "conv")]
    Convolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Per-pixel Bernoulli logits on binary data.
    Bernoulli,
    /// Discretized logistic mixture on 8-bit images.
    Dlm,
    /// Diagonal Gaussian on real-valued vectors.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutRates {
    #[serde(default)]
    pub generative: f64,
    #[serde(default)]
    pub inference: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self { generative: 0.0, inference: 0.0 }
    }
}

fn default_dlm_components() -> usize {
    crate::distributions::DLM_DEFAULT_COMPONENTS
}

fn default_true() -> bool {
    true
}

/// Complete architecture description of a hierarchy.
///
/// Per-block lists (`feature_widths`, `kernel_sizes`, `stride_schedule`) are
/// indexed by stochastic layer: block `i` maps layer `i-1` features to layer
/// `i` in the bottom-up direction and mirrors back in the generative one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    /// `[C, H, W]` for images, `[D]` for vectors.
    pub input_shape: Vec<usize>,
    pub latent_dims: Vec<usize>,
    pub latent_kind: Vec<LatentKind>,
    pub resnet_depth: usize,
    pub feature_widths: Vec<usize>,
    /// Defaults to 3 for every block when empty.
    #[serde(default)]
    pub kernel_sizes: Vec<usize>,
    pub stride_schedule: Vec<usize>,
    pub likelihood: Likelihood,
    #[serde(default = "default_dlm_components")]
    pub dlm_components: usize,
    #[serde(default)]
    pub dropout_rates: DropoutRates,
    #[serde(default = "default_true")]
    pub weight_norm: bool,
    /// Adds the class-conditional path and classifier when set.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl ModelConfig {
    /// A small dense model; handy as a starting point.
    pub fn dense(variant: Variant, input_dim: usize, latent_dims: &[usize], width: usize, depth: usize) -> Self {
        let l = latent_dims.len();
        Self {
            variant,
            num_layers: l,
            input_shape: vec![input_dim],
            latent_dims: latent_dims.to_vec(),
            latent_kind: vec![LatentKind::Dense; l],
            resnet_depth: depth,
            feature_widths: vec![width; l],
            kernel_sizes: vec![1; l],
            stride_schedule: vec![1; l],
            likelihood: Likelihood::Gaussian,
            dlm_components: default_dlm_components(),
            dropout_rates: DropoutRates::default(),
            weight_norm: false,
            num_classes: None,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.input_shape.len() == 3
    }

    pub fn kernel(&self, block: usize) -> usize {
        self.kernel_sizes.get(block).copied().unwrap_or(3)
    }

    /// Number of stochastic variables: `2L-1` for BIVA, `L` otherwise.
    pub fn num_variables(&self) -> usize {
        match self.variant {
            Variant::Biva => 2 * self.num_layers - 1,
            _ => self.num_layers,
        }
    }

    /// Spatial size after each block, starting with the input: `L+1` entries.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_layers + 1);
        let (mut h, mut w) = if self.is_conv() { (self.input_shape[1], self.input_shape[2]) } else { (1, 1) };
        out.push((h, w));
        for &s in &self.stride_schedule {
            h = h.div_ceil(s);
            w = w.div_ceil(s);
            out.push((h, w));
        }
        out
    }

    /// Per-variable labels in the order `z1_bu, z1_td, ..., zL`.
    pub fn variable_names(&self) -> Vec<String> {
        let l = self.num_layers;
        let mut out = Vec::new();
        for i in 1..=l {
            if self.variant == Variant::Biva && i < l {
                out.push(format!("z{i}_bu"));
                out.push(format!("z{i}_td"));
            } else {
                out.push(format!("z{i}"));
            }
        }
        out
    }

    /// Twice as many stochastic layers (`2L-1`) with the same per-block
    /// settings repeated; used for the deep LVAE+ baseline.
    pub fn deepened(&self) -> Self {
        let l = self.num_layers;
        let n = 2 * l - 1;
        let pick = |j: usize| j / 2;
        let mut c = self.clone();
        c.num_layers = n;
        c.latent_dims = (0..n).map(|j| self.latent_dims[pick(j)]).collect();
        c.latent_kind = (0..n).map(|j| self.latent_kind[pick(j)]).collect();
        c.feature_widths = (0..n).map(|j| self.feature_widths[pick(j)]).collect();
        if !self.kernel_sizes.is_empty() {
            c.kernel_sizes = (0..n).map(|j| self.kernel_sizes[pick(j)]).collect();
        }
        c.stride_schedule = (0..n).map(|j| if j % 2 == 0 { self.stride_schedule[pick(j)] } else { 1 }).collect();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers;
        if l == 0 {
            return Err(Error::config("num_layers", "must be at least 1"));
        }
        if !(self.input_shape.len() == 1 || self.input_shape.len() == 3) || self.input_shape.contains(&0) {
            return Err(Error::config("input_shape", "expected [D] or [C, H, W] with positive entries"));
        }
        let check_len = |field: &str, len: usize| {
            if len != l {
                Err(Error::config(field, format!("expected {l} entries, got {len}")))
            } else {
                Ok(())
            }
        };
        check_len("latent_dims", self.latent_dims.len())?;
        check_len("latent_kind", self.latent_kind.len())?;
        check_len("feature_widths", self.feature_widths.len())?;
        check_len("stride_schedule", self.stride_schedule.len())?;
        if !self.kernel_sizes.is_empty() {
            check_len("kernel_sizes", self.kernel_sizes.len())?;
            if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(Error::config("kernel_sizes", "kernel sizes must be odd"));
            }
        }
        if self.latent_dims.contains(&0) {
            return Err(Error::config("latent_dims", "dimensions must be positive"));
        }
        if self.feature_widths.contains(&0) {
            return Err(Error::config("feature_widths", "widths must be positive"));
        }
        if self.stride_schedule.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("stride_schedule", "strides must be 1 or 2"));
        }
        if self.resnet_depth == 0 && self.stride_schedule.iter().any(|&s| s != 1) {
            return Err(Error::config("stride_schedule", "strides require resnet_depth >= 1"));
        }
        for (name, r) in [("generative", self.dropout_rates.generative), ("inference", self.dropout_rates.inference)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("dropout_rates.{name}"), "must lie in [0, 1)"));
            }
        }
        if !self.is_conv() {
            if self.latent_kind.contains(&LatentKind::Convolutional) {
                return Err(Error::config("latent_kind", "convolutional latents need an image input"));
            }
            if self.stride_schedule.iter().any(|&s| s != 1) {
                return Err(Error::config("stride_schedule", "vector inputs take stride 1"));
            }
        }
        match self.likelihood {
            Likelihood::Dlm if !self.is_conv() => {
                return Err(Error::config("likelihood", "dlm needs an image input"));
            }
            Likelihood::Dlm if self.dlm_components == 0 => {
                return Err(Error::config("dlm_components", "must be positive"));
            }
            _ => {}
        }
        if let Some(c) = self.num_classes {
            if c == 0 {
                return Err(Error::config("num_classes", "must be positive"));
            }
            if self.variant == Variant::Vae {
                return Err(Error::config("num_classes", "the class-conditional model needs top-down inference"));
            }
        }
        Ok(())
    }
}
