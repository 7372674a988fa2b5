use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{mr_egger, po_env_indicator, po_tsls, tsls, EstimateReport};
use crate::numerics::Matrix;
use crate::simgen::Pooled;

/// Effect estimators compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// 2SLS with the learned invariant block `Ŵ` as instrument.
    TslsWhat,
    /// 2SLS on `Ŵ` after partialling out the learned variant block `V̂`.
    PoVhatTslsWhat,
    /// 2SLS with the observed instruments `Z`.
    TslsZ,
    /// MR-Egger on `Z`.
    EggerZ,
    /// 2SLS on `Z` after removing environment means from `Z`, `D` and `Y`.
    PoKTslsZ,
    /// MR-Egger after removing environment means.
    PoKEggerZ,
    /// 2SLS with the true `W` (requires oracle columns).
    TslsWOracle,
    /// 2SLS on the true `W` after partialling out the true `V`.
    PoVOracleTslsWOracle,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::TslsWhat,
        Method::PoVhatTslsWhat,
        Method::TslsZ,
        Method::EggerZ,
        Method::PoKTslsZ,
        Method::PoKEggerZ,
        Method::TslsWOracle,
        Method::PoVOracleTslsWOracle,
    ];

    /// The methods every experiment reports.
    pub const EXPERIMENT: [Method; 7] = [
        Method::TslsWhat,
        Method::PoVhatTslsWhat,
        Method::TslsZ,
        Method::EggerZ,
        Method::PoKTslsZ,
        Method::PoKEggerZ,
        Method::TslsWOracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TslsWhat => "2sls_what",
            Method::PoVhatTslsWhat => "po_vhat_2sls_what",
            Method::TslsZ => "2sls_z",
            Method::EggerZ => "egger_z",
            Method::PoKTslsZ => "po_k_2sls_z",
            Method::PoKEggerZ => "po_k_egger_z",
            Method::TslsWOracle => "2sls_w_oracle",
            Method::PoVOracleTslsWOracle => "po_v_oracle_2sls_w_oracle",
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, Method::TslsWhat | Method::PoVhatTslsWhat)
    }

    pub fn needs_oracle(&self) -> bool {
        matches!(self, Method::TslsWOracle | Method::PoVOracleTslsWOracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL.into_iter().find(|m| m.as_str() == key).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown method '{s}'; valid methods: {}", names.join(", ")))
        })
    }
}

/// Learned latent blocks aligned row by row with a [`Pooled`] sample.
#[derive(Clone, Copy, Debug)]
pub struct Latents<'a> {
    pub w_hat: &'a Matrix,
    pub v_hat: &'a Matrix,
}

/// Switches for the baseline constructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// PO(K) baselines residualise the instruments `Z` on the environment
    /// indicators as well as `D` and `Y`; when false `Z` enters unchanged.
    pub po_k_partials_z: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { po_k_partials_z: true }
    }
}

/// Runs `method` on the pooled sample and fills the bias against `theta` when given.
///
/// `PO(V̂)` with an empty `V̂` block degenerates to plain 2SLS on `Ŵ`.
pub fn estimate(
    method: Method,
    data: &Pooled,
    latents: Option<Latents<'_>>,
    theta: Option<&[f64]>,
) -> Result<EstimateReport> {
    estimate_with(method, data, latents, theta, EstimateOptions::default())
}

pub fn estimate_with(
    method: Method,
    data: &Pooled,
    latents: Option<Latents<'_>>,
    theta: Option<&[f64]>,
    options: EstimateOptions,
) -> Result<EstimateReport> {
    let need_latents = || {
        latents.ok_or_else(|| Error::Config(format!("method {method} needs a trained model")))
    };
    let oracle = || -> Result<(&Matrix, &Matrix)> {
        match (&data.w, &data.v) {
            (Some(w), Some(v)) => Ok((w, v)),
            _ => Err(Error::Config(format!("method {method} needs oracle W and V columns"))),
        }
    };
    let report = match method {
        Method::TslsWhat => tsls(need_latents()?.w_hat, &data.d, &data.y)?,
        Method::PoVhatTslsWhat => {
            let l = need_latents()?;
            if l.v_hat.cols() == 0 {
                tsls(l.w_hat, &data.d, &data.y)?
            } else {
                po_tsls(l.w_hat, l.v_hat, &data.d, &data.y)?
            }
        }
        Method::TslsZ => tsls(&data.z, &data.d, &data.y)?,
        Method::EggerZ => mr_egger(&data.z, &data.d, &data.y)?,
        Method::PoKTslsZ | Method::PoKEggerZ => {
            let mut adj = po_env_indicator(&data.labels, &[&data.z, &data.d, &data.y])?;
            if !options.po_k_partials_z {
                adj[0] = data.z.clone();
            }
            if method == Method::PoKTslsZ {
                tsls(&adj[0], &adj[1], &adj[2])?
            } else {
                mr_egger(&adj[0], &adj[1], &adj[2])?
            }
        }
        Method::TslsWOracle => tsls(oracle()?.0, &data.d, &data.y)?,
        Method::PoVOracleTslsWOracle => {
            let (w, v) = oracle()?;
            po_tsls(w, v, &data.d, &data.y)?
        }
    };
    let report = report.with_method(method.as_str());
    match theta {
        Some(t) => report.with_truth(t),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        let err = "nope".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("2sls_what"));
    }

    #[test]
    fn po_k_switch_changes_only_the_instrument_block() {
        use crate::simgen::{d2_spec, simulate, MixingSpec};
        let data = simulate(&d2_spec(), &MixingSpec::polynomial(2, 4, 0), 400, 0, 3).unwrap();
        let pooled = data.pooled_train().unwrap();
        let keep = EstimateOptions { po_k_partials_z: false };
        for m in [Method::PoKTslsZ, Method::PoKEggerZ] {
            let a = estimate(m, &pooled, None, None).unwrap().theta_hat[0];
            let b = estimate_with(m, &pooled, None, None, keep).unwrap().theta_hat[0];
            assert!(a.is_finite() && b.is_finite() && a != b, "{m}: {a} vs {b}");
        }
        let plain = estimate(Method::TslsZ, &pooled, None, None).unwrap();
        assert_eq!(plain, estimate_with(Method::TslsZ, &pooled, None, None, keep).unwrap());
    }
}
