//! Linear IV estimators and instrument diagnostics.
//!
//! Every estimator centres its inputs, which is the same as carrying an intercept
//! in both stages. Shifting the instrument block by a constant is therefore exact
//! a no-op, as is any invertible linear map of it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, independent_columns, matmul, min_singular_value, residualize, solve_ols, t_matmul, Matrix};

/// Smallest admissible singular value of the centred first-stage cross moment.
pub const RANK_GUARD: f64 = 1e-6;
/// Default pass threshold of [`rank_condition_check`].
pub const RANK_CHECK_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bias: Option<Vec<f64>>,
    /// Egger pleiotropy term; absent for the 2SLS family.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intercept: Option<f64>,
    pub instrument_dim: usize,
    pub min_sv_first_stage: f64,
    pub n: usize,
}

impl EstimateReport {
    /// Fills `bias = theta_hat − theta`.
    pub fn with_truth(mut self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.theta_hat.len() {
            return Err(Error::shape(
                "EstimateReport::with_truth",
                format!("{} true values for {} estimates", theta.len(), self.theta_hat.len()),
            ));
        }
        self.bias = Some(self.theta_hat.iter().zip(theta).map(|(a, b)| a - b).collect());
        Ok(self)
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_rows(op: &'static str, parts: &[&Matrix]) -> Result<usize> {
    let n = parts[0].rows();
    if parts.iter().any(|m| m.rows() != n) {
        let rows: Vec<usize> = parts.iter().map(|m| m.rows()).collect();
        return Err(Error::shape(op, format!("row counts differ: {rows:?}")));
    }
    Ok(n)
}

/// Relative tolerance below which a centred instrument column counts as collinear.
pub const COLLINEAR_TOL: f64 = 1e-9;

/// Two-stage least squares `(DᵀP_W D)⁻¹ DᵀP_W Y` with an intercept in both stages.
///
/// Collinear instrument columns are dropped first; the projection `P_W` depends only
/// on the column space, so the estimate is unchanged by the choice of basis.
pub fn tsls(w: &Matrix, d: &Matrix, y: &Matrix) -> Result<EstimateReport> {
    let n = check_rows("tsls", &[w, d, y])?;
    let (p, dd) = (w.cols(), d.cols());
    if y.cols() != 1 {
        return Err(Error::shape("tsls", format!("Y must have one column, got {}", y.cols())));
    }
    if dd == 0 || p < dd || n <= p + 1 {
        return Err(Error::Contract(format!("tsls needs n > p + 1 and p >= d >= 1, got n={n}, p={p}, d={dd}")));
    }
    let (mut wc, dc, yc) = (w.center_cols(), d.center_cols(), y.center_cols());
    let keep = independent_columns(&wc, COLLINEAR_TOL);
    if keep.len() < dd {
        return Err(Error::WeakInstrument {
            min_sv: 0.0,
            threshold: RANK_GUARD,
        });
    }
    if keep.len() < p {
        wc = Matrix::from_fn(n, keep.len(), |i, j| wc.get(i, keep[j]));
    }
    let cross = t_matmul(&wc, &dc)?.scale(1.0 / n as f64);
    let min_sv = min_singular_value(&cross);
    if !(min_sv > RANK_GUARD) {
        return Err(Error::WeakInstrument {
            min_sv,
            threshold: RANK_GUARD,
        });
    }
    let pi = solve_ols(&wc, &dc)?;
    let d_hat = matmul(&wc, &pi)?;
    let theta = solve_ols(&d_hat, &yc)?;
    let resid = yc.sub(&matmul(&dc, &theta)?)?;
    let dof = (n - dd - 1) as f64;
    let sigma2 = resid.data().iter().map(|r| r * r).sum::<f64>() / dof;
    let cov = cholesky(&t_matmul(&d_hat, &d_hat)?)?.inverse().scale(sigma2);
    Ok(EstimateReport {
        method: "2sls".into(),
        theta_hat: theta.col(0),
        se: (0..dd).map(|j| cov.get(j, j).max(0.0).sqrt()).collect(),
        bias: None,
        intercept: None,
        instrument_dim: keep.len(),
        min_sv_first_stage: min_sv,
        n,
    })
}

/// 2SLS after linearly partialling `[1, V]` out of `W`, `D` and `Y`.
pub fn po_tsls(w: &Matrix, v: &Matrix, d: &Matrix, y: &Matrix) -> Result<EstimateReport> {
    check_rows("po_tsls", &[w, v, d, y])?;
    let adj = v.with_intercept();
    let wt = residualize(&adj, w)?;
    let dt = residualize(&adj, d)?;
    let yt = residualize(&adj, y)?;
    Ok(tsls(&wt, &dt, &yt)?.with_method("po_2sls"))
}

/// Intercept plus one-hot environment indicators with the first level dropped.
pub fn env_design(labels: &[usize]) -> Result<Matrix> {
    let levels: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if levels.len() < 2 {
        return Err(Error::Config(format!(
            "partialling out the environment needs at least two labels, found {}",
            levels.len()
        )));
    }
    Ok(Matrix::from_fn(labels.len(), levels.len(), |i, j| {
        if j == 0 || labels[i] == levels[j] {
            1.0
        } else {
            0.0
        }
    }))
}

/// Environment-demeans each matrix (OLS on intercept + environment indicators).
pub fn po_env_indicator(labels: &[usize], mats: &[&Matrix]) -> Result<Vec<Matrix>> {
    let design = env_design(labels)?;
    mats.iter()
        .map(|m| {
            if m.rows() != labels.len() {
                return Err(Error::shape(
                    "po_env_indicator",
                    format!("{} labels for a matrix with {} rows", labels.len(), m.rows()),
                ));
            }
            residualize(&design, m)
        })
        .collect()
}

fn simple_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, se)
}

/// Two-step MR-Egger from individual-level data.
///
/// Per-instrument marginal associations `β̂_Dj` and `β̂_Yj` are computed by simple
/// regression, instruments are oriented so that `β̂_D1j ≥ 0`, and `β̂_Y` is regressed on
/// `[1, β̂_D]` with weights `1/SE(β̂_Yj)²`. The residual scale is floored at one.
pub fn mr_egger(z: &Matrix, d: &Matrix, y: &Matrix) -> Result<EstimateReport> {
    let n = check_rows("mr_egger", &[z, d, y])?;
    let (j_count, dd) = (z.cols(), d.cols());
    if y.cols() != 1 {
        return Err(Error::shape("mr_egger", "Y must have one column"));
    }
    if j_count <= dd + 1 {
        return Err(Error::Config(format!(
            "MR-Egger needs more than d + 1 = {} instruments, got {j_count}",
            dd + 1
        )));
    }
    if n < 3 {
        return Err(Error::Contract("MR-Egger needs n >= 3".into()));
    }
    let ycol = y.col(0);
    let dcols: Vec<Vec<f64>> = (0..dd).map(|k| d.col(k)).collect();
    let mut bx = Matrix::zeros(j_count, dd + 1);
    let mut by = Matrix::zeros(j_count, 1);
    let mut wts = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let zj = z.col(j);
        let (slope_y, se_y) = simple_slope(&zj, &ycol);
        let slopes_d: Vec<f64> = dcols.iter().map(|dc| simple_slope(&zj, dc).0).collect();
        if !(se_y > 0.0 && se_y.is_finite()) {
            return Err(Error::Singular { index: j, pivot: se_y });
        }
        let sign = if slopes_d[0] < 0.0 { -1.0 } else { 1.0 };
        bx.set(j, 0, 1.0);
        for (k, s) in slopes_d.iter().enumerate() {
            bx.set(j, k + 1, sign * s);
        }
        by.set(j, 0, sign * slope_y);
        wts.push(1.0 / (se_y * se_y));
    }
    let sw: Vec<f64> = wts.iter().map(|w| w.sqrt()).collect();
    let xw = Matrix::from_fn(j_count, dd + 1, |i, k| sw[i] * bx.get(i, k));
    let yw = Matrix::from_fn(j_count, 1, |i, _| sw[i] * by.get(i, 0));
    let coef = solve_ols(&xw, &yw)?;
    let resid = yw.sub(&matmul(&xw, &coef)?)?;
    let dof = (j_count - dd - 1) as f64;
    let scale = (resid.data().iter().map(|r| r * r).sum::<f64>() / dof).max(1.0);
    let cov = cholesky(&t_matmul(&xw, &xw)?)?.inverse().scale(scale);
    let cross = t_matmul(&z.center_cols(), &d.center_cols())?.scale(1.0 / n as f64);
    Ok(EstimateReport {
        method: "egger".into(),
        theta_hat: (1..=dd).map(|k| coef.get(k, 0)).collect(),
        se: (1..=dd).map(|k| cov.get(k, k).max(0.0).sqrt()).collect(),
        bias: None,
        intercept: Some(coef.get(0, 0)),
        instrument_dim: j_count,
        min_sv_first_stage: min_singular_value(&cross),
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub min_sv: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Smallest singular value of the uncentred cross moment `(1/n)·instᵀD`.
pub fn rank_condition_check(inst: &Matrix, d: &Matrix, threshold: f64) -> Result<RankDiagnostic> {
    let n = check_rows("rank_condition_check", &[inst, d])?;
    let cross = t_matmul(inst, d)?.scale(1.0 / n.max(1) as f64);
    let min_sv = if inst.cols() < d.cols() { 0.0 } else { min_singular_value(&cross) };
    Ok(RankDiagnostic {
        min_sv,
        threshold,
        passed: min_sv > threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_hand_case() {
        let w = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        let y = w.scale(2.0);
        let r = tsls(&w, &w, &y).unwrap();
        assert!((r.theta_hat[0] - 2.0).abs() < 1e-12);
        assert!(r.se[0].abs() < 1e-7);
        assert_eq!(r.instrument_dim, 1);
        // centred cross moment: var of 1..4 = 1.25
        assert!((r.min_sv_first_stage - 1.25).abs() < 1e-12);
    }

    #[test]
    fn collinear_instruments_are_reduced() {
        let w = Matrix::from_rows(&[[1.0, 3.0], [2.0, 5.0], [3.0, 7.0], [5.0, 11.0], [4.0, 9.0]]);
        let d = Matrix::column(&[1.0, 2.5, 2.0, 5.5, 4.0]);
        let y = d.scale(1.5).add(&Matrix::column(&[0.1, -0.1, 0.0, 0.2, -0.2])).unwrap();
        let full = tsls(&w, &d, &y).unwrap();
        let single = tsls(&w.slice_cols(0, 1), &d, &y).unwrap();
        assert_eq!(full.instrument_dim, 1);
        assert!((full.theta_hat[0] - single.theta_hat[0]).abs() < 1e-12);
    }

    #[test]
    fn weak_instrument_is_rejected() {
        let w = Matrix::column(&[1.0, -1.0, 1.0, -1.0, 0.0]);
        let d = Matrix::column(&[1.0, 1.0, -1.0, -1.0, 0.0]);
        let err = tsls(&w, &d, &d).unwrap_err();
        assert!(matches!(err, Error::WeakInstrument { .. }));
    }

    #[test]
    fn fewer_instruments_than_exposures_is_contract_error() {
        let w = Matrix::column(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d = Matrix::from_fn(5, 2, |i, j| (i * (j + 1)) as f64);
        assert!(matches!(tsls(&w, &d, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn env_demeaning() {
        let labels = [0, 0, 1, 1, 1];
        let x = Matrix::column(&[1.0, 3.0, 10.0, 11.0, 12.0]);
        let r = po_env_indicator(&labels, &[&x]).unwrap().remove(0);
        let expect = [-1.0, 1.0, -1.0, 0.0, 1.0];
        for (i, e) in expect.iter().enumerate() {
            assert!((r.get(i, 0) - e).abs() < 1e-12);
        }
        assert!(matches!(po_env_indicator(&[2, 2], &[&x]), Err(Error::Config(_))));
    }

    #[test]
    fn egger_needs_enough_instruments() {
        let z = Matrix::from_fn(10, 2, |i, j| (i + j) as f64);
        let d = Matrix::column(&[1.0; 10]);
        assert!(matches!(mr_egger(&z, &d, &d), Err(Error::Config(_))));
    }

    #[test]
    fn rank_check_on_self() {
        let d = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]);
        let r = rank_condition_check(&d, &d, RANK_CHECK_THRESHOLD).unwrap();
        // (1/3)·DᵀD = [[2, 1], [1, 5]] / 3
        let lam = (7.0 - 13f64.sqrt()) / 2.0 / 3.0;
        assert!((r.min_sv - lam).abs() < 1e-12);
        assert!(r.passed);
    }

    #[test]
    fn bias_and_json() {
        let w = Matrix::column(&[1.0, 2.0, 3.0, 5.0]);
        let r = tsls(&w, &w, &w.scale(3.0)).unwrap().with_truth(&[2.5]).unwrap();
        assert!((r.bias.as_ref().unwrap()[0] - 0.5).abs() < 1e-12);
        let js = r.to_json().unwrap();
        let back: EstimateReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
        assert!(r.clone().with_truth(&[1.0, 2.0]).is_err());
    }
}
