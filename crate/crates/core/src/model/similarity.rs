use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity between a user embedding and an item embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// `u · v`
    Dot,
    /// `u · v / (‖u‖ ‖v‖)`
    Cosine,
    /// `1 − ‖u − v‖`
    Euclidean,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Euclidean => "euclidean",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(SimilarityKind::Dot),
            "cosine" => Ok(SimilarityKind::Cosine),
            "euclidean" => Ok(SimilarityKind::Euclidean),
            other => Err(Error::InvalidConfig(format!("unknown similarity {other:?}"))),
        }
    }
}

#[inline]
fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Evaluates `kind` on a pair of equal-length vectors.
pub fn similarity(kind: SimilarityKind, u: &[f64], v: &[f64]) -> Result<f64> {
    debug_assert_eq!(u.len(), v.len());
    match kind {
        SimilarityKind::Dot => Ok(dot(u, v)),
        SimilarityKind::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(dot(u, v) / (nu * nv))
        }
        SimilarityKind::Euclidean => Ok(1.0 - distance(u, v)),
    }
}

/// Adds `upstream · ∂sim/∂u` into `du` and `upstream · ∂sim/∂v` into `dv`.
///
/// The euclidean similarity is not differentiable at `u = v`; the zero
/// subgradient is used there.
pub(crate) fn accumulate_similarity_grad(
    kind: SimilarityKind,
    u: &[f64],
    v: &[f64],
    upstream: f64,
    du: &mut [f64],
    dv: &mut [f64],
) -> Result<()> {
    if upstream == 0.0 {
        return Ok(());
    }
    match kind {
        SimilarityKind::Dot => {
            for k in 0..u.len() {
                du[k] += upstream * v[k];
                dv[k] += upstream * u[k];
            }
        }
        SimilarityKind::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::ZeroVector);
            }
            let s = dot(u, v) / (nu * nv);
            let inv = 1.0 / (nu * nv);
            let (su, sv) = (s / (nu * nu), s / (nv * nv));
            for k in 0..u.len() {
                du[k] += upstream * (v[k] * inv - su * u[k]);
                dv[k] += upstream * (u[k] * inv - sv * v[k]);
            }
        }
        SimilarityKind::Euclidean => {
            let dist = distance(u, v);
            if dist == 0.0 {
                return Ok(());
            }
            for k in 0..u.len() {
                let g = upstream * (u[k] - v[k]) / dist;
                du[k] -= g;
                dv[k] += g;
            }
        }
    }
    Ok(())
}
