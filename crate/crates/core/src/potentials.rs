//! Unnormalized 2D target densities `p(z) ∝ exp(-U(z))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{logaddexp, sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PotentialId {
    U1,
    U2,
    U3,
    U4,
    /// `½‖z‖²`, a standard normal target with a known sampler.
    StandardGaussian,
}

impl PotentialId {
    /// The four benchmark potentials, numbered 1 to 4.
    pub fn from_index(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Self::U1),
            2 => Ok(Self::U2),
            3 => Ok(Self::U3),
            4 => Ok(Self::U4),
            _ => Err(Error::InvalidValue(format!("potential id must be 1..=4, got {id}"))),
        }
    }

    pub fn index(self) -> u32 {
        match self {
            Self::U1 => 1,
            Self::U2 => 2,
            Self::U3 => 3,
            Self::U4 => 4,
            Self::StandardGaussian => 0,
        }
    }

    pub const ALL: [PotentialId; 4] = [Self::U1, Self::U2, Self::U3, Self::U4];
}

fn w1(z1: f64) -> f64 {
    (2.0 * PI * z1 / 4.0).sin()
}

fn w2(z1: f64) -> f64 {
    3.0 * (-0.5 * ((z1 - 1.0) / 0.6).powi(2)).exp()
}

fn w3(z1: f64) -> f64 {
    3.0 * sigmoid((z1 - 1.0) / 0.3)
}

fn sq_half(v: f64, s: f64) -> f64 {
    0.5 * (v / s).powi(2)
}

/// Energy `U(z)` at a single point.
pub fn potential_u(id: PotentialId, z: [f64; 2]) -> f64 {
    let [z1, z2] = z;
    match id {
        PotentialId::U1 => {
            let r = (z1 * z1 + z2 * z2).sqrt();
            sq_half(r - 2.0, 0.4) - logaddexp(-sq_half(z1 - 2.0, 0.6), -sq_half(z1 + 2.0, 0.6))
        }
        PotentialId::U2 => sq_half(z2 - w1(z1), 0.4),
        PotentialId::U3 => -logaddexp(-sq_half(z2 - w1(z1), 0.35), -sq_half(z2 - w1(z1) + w2(z1), 0.35)),
        PotentialId::U4 => -logaddexp(-sq_half(z2 - w1(z1), 0.4), -sq_half(z2 - w1(z1) + w3(z1), 0.35)),
        PotentialId::StandardGaussian => 0.5 * (z1 * z1 + z2 * z2),
    }
}

/// `-½((v)/s)²` on the graph.
fn neg_sq_half<T: Scalar>(g: &mut Graph<T>, v: Var, s: f64) -> Var {
    let sq = g.square(v);
    g.scale(sq, T::c(-0.5 / (s * s)))
}

fn neg_logaddexp<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let ab = g.concat(&[a, b]);
    let l = g.logsumexp(ab);
    g.neg(l)
}

/// Differentiable `U(z)` for `z` of shape `[N, 2]`; returns `[N]`.
pub fn potential_u_graph<T: Scalar>(g: &mut Graph<T>, id: PotentialId, z: Var) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Shape(format!("potential expects [N, 2], got {shape:?}")));
    }
    let n = shape[0];
    let z1 = g.slice(z, 0, 1);
    let z2 = g.slice(z, 1, 1);
    let w1v = {
        let a = g.scale(z1, T::c(2.0 * PI / 4.0));
        g.sin(a)
    };
    let d = g.sub(z2, w1v);
    let u = match id {
        PotentialId::U1 => {
            let sq = g.square(z);
            let r2 = g.sum_rows(sq);
            let r = g.sqrt(r2);
            let r = g.reshape(r, &[n, 1]);
            let r = g.offset(r, T::c(-2.0));
            let ring = neg_sq_half(g, r, 0.4);
            let ring = g.neg(ring);
            let a = g.offset(z1, T::c(-2.0));
            let a = neg_sq_half(g, a, 0.6);
            let b = g.offset(z1, T::c(2.0));
            let b = neg_sq_half(g, b, 0.6);
            let mix = neg_logaddexp(g, a, b);
            let mix = g.reshape(mix, &[n, 1]);
            g.add(ring, mix)
        }
        PotentialId::U2 => {
            let t = neg_sq_half(g, d, 0.4);
            g.neg(t)
        }
        PotentialId::U3 | PotentialId::U4 => {
            let shift = if id == PotentialId::U3 {
                let c = g.offset(z1, T::c(-1.0));
                let e = neg_sq_half(g, c, 0.6);
                let e = g.exp(e);
                g.scale(e, T::c(3.0))
            } else {
                let c = g.offset(z1, T::c(-1.0));
                let c = g.scale(c, T::c(1.0 / 0.3));
                let s = g.sigmoid(c);
                g.scale(s, T::c(3.0))
            };
            let first_scale = if id == PotentialId::U3 { 0.35 } else { 0.4 };
            let a = neg_sq_half(g, d, first_scale);
            let ds = g.add(d, shift);
            let b = neg_sq_half(g, ds, 0.35);
            let m = neg_logaddexp(g, a, b);
            g.reshape(m, &[n, 1])
        }
        PotentialId::StandardGaussian => {
            let sq = g.square(z);
            let s = g.sum_rows(sq);
            let s = g.scale(s, T::c(0.5));
            g.reshape(s, &[n, 1])
        }
    };
    Ok(g.reshape(u, &[n]))
}
