use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, min_singular_value, monomial_count, monomial_features, svd, Matrix};
use crate::rng::{rng_from_seed, split_seed, standard_normal};

/// Leaky-ReLU slope of the invertible MLP mixing.
pub const MLP_SLOPE: f64 = 0.2;
/// Singular values of the MLP mixing weights are clamped into this range.
pub const MLP_SV_RANGE: (f64, f64) = (0.5, 2.0);
const POLY_RANK_ATTEMPTS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingKind {
    /// `f(u) = A [1, u, u^⊗2, …, u^⊗L]` with full-column-rank `A`.
    InjectivePolynomial { degree: usize },
    /// Two square leaky-ReLU layers.
    InvertibleMlp,
}

/// Declarative description of the map from latents `(W, V)` to observed instruments `Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    #[serde(flatten)]
    pub kind: MixingKind,
    pub d_z: usize,
    pub seed: u64,
}

impl MixingSpec {
    /// Polynomial mixing with `d_z` equal to the monomial count, as in the ablations.
    pub fn polynomial(degree: usize, latent_dim: usize, seed: u64) -> Self {
        Self {
            kind: MixingKind::InjectivePolynomial { degree },
            d_z: monomial_count(latent_dim, degree),
            seed,
        }
    }

    pub fn invertible_mlp(latent_dim: usize, seed: u64) -> Self {
        Self {
            kind: MixingKind::InvertibleMlp,
            d_z: latent_dim,
            seed,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            MixingKind::InjectivePolynomial { degree } => format!("poly{degree}"),
            MixingKind::InvertibleMlp => "mlp".into(),
        }
    }
}

/// A constructed mixing function.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixing {
    Polynomial {
        degree: usize,
        /// `d_z × C(m+L, L)` coefficient matrix.
        coef: Matrix,
    },
    Mlp {
        /// Square weights in row-vector convention: `out = leaky(in · W)`.
        weights: Vec<Matrix>,
        inverses: Vec<Matrix>,
        slope: f64,
    },
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_inv(y: f64, slope: f64) -> f64 {
    if y >= 0.0 {
        y
    } else {
        y / slope
    }
}

impl Mixing {
    pub fn build(spec: &MixingSpec, latent_dim: usize) -> Result<Self> {
        match spec.kind {
            MixingKind::InjectivePolynomial { degree } => {
                let feats = monomial_count(latent_dim, degree);
                if spec.d_z < feats {
                    return Err(Error::Config(format!(
                        "polynomial mixing of degree {degree} on {latent_dim} latents needs d_z >= {feats}, got {}",
                        spec.d_z
                    )));
                }
                for attempt in 0..POLY_RANK_ATTEMPTS {
                    let mut rng = rng_from_seed(split_seed(spec.seed, attempt));
                    let coef = standard_normal(spec.d_z, feats, &mut rng);
                    if min_singular_value(&coef) > 1e-6 {
                        return Ok(Mixing::Polynomial { degree, coef });
                    }
                }
                Err(Error::Seed(format!(
                    "no full-column-rank coefficient matrix after {POLY_RANK_ATTEMPTS} draws from seed {}",
                    spec.seed
                )))
            }
            MixingKind::InvertibleMlp => {
                if spec.d_z != latent_dim {
                    return Err(Error::Config(format!(
                        "invertible MLP mixing needs d_z == p + q = {latent_dim}, got {}",
                        spec.d_z
                    )));
                }
                let mut rng = rng_from_seed(spec.seed);
                let mut weights = Vec::new();
                let mut inverses = Vec::new();
                for _ in 0..2 {
                    let raw = standard_normal(latent_dim, latent_dim, &mut rng);
                    let (u, s, v) = svd(&raw)?;
                    let s: Vec<f64> = s.iter().map(|x| x.clamp(MLP_SV_RANGE.0, MLP_SV_RANGE.1)).collect();
                    let inv_s: Vec<f64> = s.iter().map(|x| 1.0 / x).collect();
                    let w = matmul(&matmul(&u, &Matrix::diag(&s))?, &v.transpose())?;
                    let wi = matmul(&matmul(&v, &Matrix::diag(&inv_s))?, &u.transpose())?;
                    weights.push(w);
                    inverses.push(wi);
                }
                Ok(Mixing::Mlp {
                    weights,
                    inverses,
                    slope: MLP_SLOPE,
                })
            }
        }
    }

    /// Identity-weight MLP with the given slope (slope 1 makes it the identity map).
    pub fn mlp_identity(dim: usize, slope: f64) -> Self {
        Mixing::Mlp {
            weights: vec![Matrix::identity(dim); 2],
            inverses: vec![Matrix::identity(dim); 2],
            slope,
        }
    }

    pub fn apply(&self, u: &Matrix) -> Result<Matrix> {
        match self {
            Mixing::Polynomial { degree, coef } => {
                if monomial_count(u.cols(), *degree) != coef.cols() {
                    return Err(Error::shape("mix_polynomial", "latent width does not match coefficients"));
                }
                matmul(&monomial_features(u, *degree), &coef.transpose())
            }
            Mixing::Mlp { weights, slope, .. } => {
                let mut x = u.clone();
                for w in weights {
                    x = matmul(&x, w)?.map(|v| leaky(v, *slope));
                }
                Ok(x)
            }
        }
    }

    /// Layer-wise inverse of the MLP mixing.
    pub fn invert(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            Mixing::Mlp { inverses, slope, .. } => {
                let mut x = z.clone();
                for wi in inverses.iter().rev() {
                    x = matmul(&x.map(|v| leaky_inv(v, *slope)), wi)?;
                }
                Ok(x)
            }
            Mixing::Polynomial { .. } => Err(Error::Contract("explicit inverse only for MLP mixing".into())),
        }
    }
}

/// `Z = f(U)` under an injective polynomial mixing.
pub fn mix_polynomial(u: &Matrix, spec: &MixingSpec) -> Result<Matrix> {
    if !matches!(spec.kind, MixingKind::InjectivePolynomial { .. }) {
        return Err(Error::Config("mix_polynomial needs a polynomial mixing spec".into()));
    }
    Mixing::build(spec, u.cols())?.apply(u)
}

/// `Z = f(U)` under the invertible leaky-ReLU MLP mixing.
pub fn mix_invertible_mlp(u: &Matrix, spec: &MixingSpec) -> Result<Matrix> {
    if !matches!(spec.kind, MixingKind::InvertibleMlp) {
        return Err(Error::Config("mix_invertible_mlp needs an MLP mixing spec".into()));
    }
    Mixing::build(spec, u.cols())?.apply(u)
}
