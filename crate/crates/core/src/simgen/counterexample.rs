//! Single-environment fixtures where a learned `(Ŵ, V̂)` split is wrong in a known way.
//!
//! Each fixture exposes the designated substitutions as `w_hat` / `v_hat` and the
//! population quantities a correct estimator layer must reproduce.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, min_singular_value, Matrix};
use crate::rng::{rng_from_seed, split_seed, standard_normal};

use super::dataset::{EnvDataset, Oracle, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CounterexampleKind {
    /// `V̂ = (V, W¹)`, `Ŵ = W² = W¹ + ε`: partialling out `V̂` removes instrument variation.
    #[serde(rename = "efficiency_loss_C4")]
    EfficiencyLoss,
    /// `Ŵ = W`, `V̂ = V + W`: `V̂` is a collider and partialling it out biases the estimate by one.
    #[serde(rename = "collider_C5")]
    Collider,
    /// `Ŵ = W¹` only: invariant but only a partial recovery of `W`.
    #[serde(rename = "insufficient_C2")]
    Insufficient,
    /// `Ŵ = (W¹, W²)` exact, `V̂ = V + W¹` not a recovery of `V`.
    #[serde(rename = "nonident_V_C3")]
    NonidentV,
}

impl CounterexampleKind {
    pub const ALL: [CounterexampleKind; 4] = [
        CounterexampleKind::EfficiencyLoss,
        CounterexampleKind::Collider,
        CounterexampleKind::Insufficient,
        CounterexampleKind::NonidentV,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CounterexampleKind::EfficiencyLoss => "efficiency_loss_C4",
            CounterexampleKind::Collider => "collider_C5",
            CounterexampleKind::Insufficient => "insufficient_C2",
            CounterexampleKind::NonidentV => "nonident_V_C3",
        }
    }
}

impl fmt::Display for CounterexampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounterexampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown counterexample `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Effect size and noise variances. `var_w` is used for `W` (collider) or `W¹`,
/// `var_w2` for the second instrument coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleParams {
    pub theta: f64,
    pub var_h: f64,
    pub var_v: f64,
    pub var_w: f64,
    pub var_w2: f64,
    pub var_d: f64,
    pub var_y: f64,
}

impl Default for CounterexampleParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            var_h: 1.0,
            var_v: 1.0,
            var_w: 1.0,
            var_w2: 1.0,
            var_d: 1.0,
            var_y: 1.0,
        }
    }
}

/// Population targets of a fixture. `None` where the quantity is not part of the construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleOracle {
    pub theta: f64,
    /// Probability limit of 2SLS with `Ŵ` as instrument.
    pub plim_tsls: Option<f64>,
    /// Probability limit of 2SLS on `Ŵ` after partialling out `V̂`.
    pub plim_po_tsls: Option<f64>,
    /// Asymptotic `n·Var` of 2SLS with `Ŵ`.
    pub n_var_tsls: Option<f64>,
    /// Asymptotic `n·Var` of PO-2SLS, with the structural error also residualised on `V̂`.
    pub n_var_po_tsls: Option<f64>,
    /// `V(H + ε_Y) / V(ε_{W²})`: the PO-2SLS variance if the error variance were left unadjusted.
    pub n_var_po_tsls_unadjusted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub kind: CounterexampleKind,
    pub params: CounterexampleParams,
    pub data: EnvDataset,
    pub w_hat: Matrix,
    pub v_hat: Matrix,
    pub oracle: CounterexampleOracle,
}

pub fn make_counterexample(kind: CounterexampleKind, n: usize, seed: u64) -> Result<Counterexample> {
    make_counterexample_with(kind, &CounterexampleParams::default(), n, seed)
}

fn column_of(m: &Matrix, scale: f64, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| scale * m.get(i, j)).collect()
}

pub fn make_counterexample_with(
    kind: CounterexampleKind,
    p: &CounterexampleParams,
    n: usize,
    seed: u64,
) -> Result<Counterexample> {
    for (name, v) in [
        ("var_h", p.var_h),
        ("var_v", p.var_v),
        ("var_w", p.var_w),
        ("var_w2", p.var_w2),
        ("var_d", p.var_d),
        ("var_y", p.var_y),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    if n < 2 {
        return Err(Error::Config(format!("counterexample needs n >= 2, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    // columns: H, ε_V, ε_W¹, ε_W², ε_D, ε_Y
    let raw = standard_normal(n, 6, &mut rng);
    let h = column_of(&raw, p.var_h.sqrt(), 0);
    let e_v = column_of(&raw, p.var_v.sqrt(), 1);
    let e_w1 = column_of(&raw, p.var_w.sqrt(), 2);
    let e_w2 = column_of(&raw, p.var_w2.sqrt(), 3);
    let e_d = column_of(&raw, p.var_d.sqrt(), 4);
    let e_y = column_of(&raw, p.var_y.sqrt(), 5);

    let v: Vec<f64> = (0..n).map(|i| h[i] + e_v[i]).collect();
    let mut oracle = CounterexampleOracle {
        theta: p.theta,
        ..Default::default()
    };
    let (w_cols, d): (Vec<Vec<f64>>, Vec<f64>) = match kind {
        CounterexampleKind::EfficiencyLoss => {
            let w2: Vec<f64> = (0..n).map(|i| e_w1[i] + e_w2[i]).collect();
            let d = (0..n).map(|i| v[i] + e_w1[i] + w2[i] + h[i] + e_d[i]).collect();
            (vec![e_w1.clone(), w2], d)
        }
        CounterexampleKind::Collider => {
            let d = (0..n).map(|i| v[i] + e_w1[i] + h[i] + e_d[i]).collect();
            (vec![e_w1.clone()], d)
        }
        CounterexampleKind::Insufficient | CounterexampleKind::NonidentV => {
            let d = (0..n).map(|i| v[i] + e_w1[i] + e_w2[i] + h[i] + e_d[i]).collect();
            (vec![e_w1.clone(), e_w2.clone()], d)
        }
    };
    let y: Vec<f64> = (0..n).map(|i| p.theta * d[i] + h[i] + e_y[i]).collect();
    let w = Matrix::from_fn(n, w_cols.len(), |i, j| w_cols[j][i]);
    let v_m = Matrix::column(&v);
    let h_m = Matrix::column(&h);

    let var_u = p.var_h + p.var_y;
    let (w_hat, v_hat) = match kind {
        CounterexampleKind::EfficiencyLoss => {
            let (a, b) = (p.var_w, p.var_w2);
            oracle.plim_tsls = Some(p.theta);
            oracle.plim_po_tsls = Some(p.theta);
            oracle.n_var_tsls = Some(var_u * (a + b) / (2.0 * a + b).powi(2));
            // H given V loses var_h² / (var_h + var_v)
            oracle.n_var_po_tsls = Some((var_u - p.var_h * p.var_h / (p.var_h + p.var_v)) / b);
            oracle.n_var_po_tsls_unadjusted = Some(var_u / b);
            (Matrix::column(&w_cols[1]), Matrix::hstack(&[&v_m, &Matrix::column(&e_w1)])?)
        }
        CounterexampleKind::Collider => {
            oracle.plim_tsls = Some(p.theta);
            oracle.plim_po_tsls = Some(p.theta + 1.0);
            let vh: Vec<f64> = (0..n).map(|i| v[i] + e_w1[i]).collect();
            (Matrix::column(&e_w1), Matrix::column(&vh))
        }
        CounterexampleKind::Insufficient => {
            oracle.plim_tsls = Some(p.theta);
            (Matrix::column(&e_w1), Matrix::hstack(&[&Matrix::column(&e_w2), &v_m])?)
        }
        CounterexampleKind::NonidentV => {
            oracle.plim_tsls = Some(p.theta);
            let vh: Vec<f64> = (0..n).map(|i| v[i] + e_w1[i]).collect();
            (w.clone(), Matrix::column(&vh))
        }
    };

    // Z: latents for the estimator fixtures, a fixed full-rank linear mix for the identification ones
    let u = Matrix::hstack(&[&v_m, &w])?;
    let z = match kind {
        CounterexampleKind::Insufficient | CounterexampleKind::NonidentV => {
            let mut mix_rng = rng_from_seed(split_seed(seed, 1));
            let mut a = standard_normal(3, 3, &mut mix_rng);
            while min_singular_value(&a) < 1e-3 {
                a = standard_normal(3, 3, &mut mix_rng);
            }
            matmul(&u, &a.transpose())?
        }
        _ => u,
    };

    Ok(Counterexample {
        kind,
        params: p.clone(),
        data: EnvDataset {
            env: 0,
            split: Split::Train,
            seed,
            z,
            d: Matrix::column(&d),
            y: Matrix::column(&y),
            oracle: Some(Oracle { w, v: v_m, h: h_m }),
        },
        w_hat,
        v_hat,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in CounterexampleKind::ALL {
            assert_eq!(k.as_str().parse::<CounterexampleKind>().unwrap(), k);
            let js = serde_json::to_string(&k).unwrap();
            assert_eq!(js, format!("\"{}\"", k.as_str()));
        }
        assert!("c9".parse::<CounterexampleKind>().is_err());
    }

    #[test]
    fn unit_variance_closed_forms() {
        let c = make_counterexample(CounterexampleKind::EfficiencyLoss, 10, 0).unwrap();
        assert!((c.oracle.n_var_tsls.unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(c.oracle.n_var_po_tsls_unadjusted, Some(2.0));
        assert_eq!(c.oracle.n_var_po_tsls, Some(1.5));
        let c = make_counterexample(CounterexampleKind::Collider, 10, 0).unwrap();
        assert_eq!(c.oracle.plim_po_tsls, Some(2.0));
    }

    #[test]
    fn structural_equations_hold() {
        let c = make_counterexample(CounterexampleKind::EfficiencyLoss, 20, 3).unwrap();
        let o = c.data.oracle.as_ref().unwrap();
        for i in 0..20 {
            let (w1, w2) = (o.w.get(i, 0), o.w.get(i, 1));
            assert_eq!(c.w_hat.get(i, 0), w2);
            assert_eq!(c.v_hat.get(i, 1), w1);
            let resid_y = c.data.y.get(i, 0) - c.data.d.get(i, 0) - o.h.get(i, 0);
            assert!(resid_y.abs() < 10.0);
        }
        let c = make_counterexample(CounterexampleKind::NonidentV, 5, 1).unwrap();
        assert_eq!(c.data.z.shape(), (5, 3));
        assert_eq!(c.w_hat.shape(), (5, 2));
    }

    #[test]
    fn rejects_bad_params() {
        let p = CounterexampleParams {
            var_v: 0.0,
            ..Default::default()
        };
        assert!(make_counterexample_with(CounterexampleKind::Collider, &p, 10, 0).is_err());
    }
}
