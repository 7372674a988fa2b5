use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{loss_hsic, loss_mmd, KernelSpec};
use crate::nn::AutoencoderModel;
use crate::numerics::{min_singular_value, solve_ols, Matrix};
use crate::simgen::MultiEnvData;

/// R² of a single-target affine fit, raw and clipped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    pub raw: f64,
    pub clipped: f64,
}

impl R2 {
    fn new(raw: f64) -> Self {
        let clipped = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) };
        Self { raw, clipped }
    }
}

/// Affine fit `target ≈ A·source + a` over pooled rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    /// One entry per target column.
    pub r2: Vec<R2>,
    /// `A` stored row-major as `target_dim × source_dim`.
    pub coef: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    pub min_sv: f64,
}

impl AffineFit {
    pub fn min_r2(&self) -> f64 {
        self.r2.iter().map(|r| r.clipped).fold(f64::INFINITY, f64::min)
    }
}

/// Regresses every column of `target` on `[1, source]`.
pub fn affine_fit(target: &Matrix, source: &Matrix) -> Result<AffineFit> {
    if target.rows() != source.rows() {
        return Err(Error::Contract(format!(
            "affine fit needs matching rows, got {} and {}",
            target.rows(),
            source.rows()
        )));
    }
    let x = source.with_intercept();
    let beta = solve_ols(&x, target)?;
    let fitted = x.matmul(&beta)?;
    let resid = target.sub(&fitted)?;
    let var_t = target.col_vars();
    let var_r = resid.col_vars();
    let r2 = (0..target.cols())
        .map(|j| {
            let vt = var_t.get(0, j);
            // a constant target has nothing to explain: treat as an exact fit only when residuals vanish too
            let raw = if vt > 0.0 { 1.0 - var_r.get(0, j) / vt } else if var_r.get(0, j) == 0.0 { 1.0 } else { 0.0 };
            R2::new(raw)
        })
        .collect();
    // beta rows: intercept, then one per source column
    let a = beta.slice_rows(1, beta.rows()).transpose();
    let coef = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
    let intercept = beta.row(0).to_vec();
    Ok(AffineFit { r2, coef, intercept, min_sv: min_singular_value(&a) })
}

/// How well a trained encoder recovers the oracle latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    /// `Ŵ ~ [1, W]` over all environments; `min_sv` is the smallest singular value of `A`.
    pub w_fit: AffineFit,
    /// `V̂ ~ [1, V]`, absent when the model has no `V̂` block.
    pub v_fit: Option<AffineFit>,
    /// Cross-environment poly-2 MMD of `Ŵ`, summed over environment pairs `j < k`.
    pub mmd_w: f64,
    /// Poly-2 HSIC of `(Ŵ, V̂)` averaged over environments.
    pub hsic_wv: Option<f64>,
    pub split: String,
}

/// Rows used per environment for the kernel statistics; grams are quadratic in this.
const KERNEL_ROWS: usize = 1000;

/// Evaluates `model` against the oracle `W`, `V` of the validation split (training split when empty).
pub fn identifiability_report(model: &AutoencoderModel, data: &MultiEnvData) -> Result<IdentifiabilityReport> {
    let use_val = data.val.iter().all(|e| e.n() > 0);
    let (envs, split) = if use_val { (&data.val, "val") } else { (&data.train, "train") };
    if envs.iter().any(|e| e.oracle.is_none()) {
        return Err(Error::Contract("identifiability report needs oracle W and V columns".into()));
    }
    let mut w_hats = Vec::new();
    let mut v_hats = Vec::new();
    for e in envs {
        let (w, v) = model.encode(&e.z)?;
        w_hats.push(w);
        v_hats.push(v);
    }
    let stack = |ms: Vec<&Matrix>| Matrix::vstack(&ms);
    let w_all = stack(envs.iter().map(|e| &e.oracle.as_ref().expect("checked").w).collect())?;
    let v_all = stack(envs.iter().map(|e| &e.oracle.as_ref().expect("checked").v).collect())?;
    let what_all = stack(w_hats.iter().collect())?;
    let vhat_all = stack(v_hats.iter().collect())?;

    let w_fit = affine_fit(&what_all, &w_all)?;
    let v_fit = if vhat_all.cols() > 0 { Some(affine_fit(&vhat_all, &v_all)?) } else { None };

    let head = |m: &Matrix| m.slice_rows(0, m.rows().min(KERNEL_ROWS));
    let kernel = KernelSpec::poly(2);
    let mut tape = Tape::new();
    let mut mmd_w = 0.0;
    for j in 0..w_hats.len() {
        for k in j + 1..w_hats.len() {
            let a = tape.constant(head(&w_hats[j]));
            let b = tape.constant(head(&w_hats[k]));
            let m = loss_mmd(&mut tape, a, b, kernel)?;
            mmd_w += tape.value(m).item();
        }
    }
    let hsic_wv = if vhat_all.cols() > 0 {
        let mut acc = 0.0;
        for (w, v) in w_hats.iter().zip(&v_hats) {
            let a = tape.constant(head(w));
            let b = tape.constant(head(v));
            let h = loss_hsic(&mut tape, a, b, kernel)?;
            acc += tape.value(h).item();
        }
        Some(acc / w_hats.len() as f64)
    } else {
        None
    };
    Ok(IdentifiabilityReport { w_fit, v_fit, mmd_w, hsic_wv, split: split.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    #[test]
    fn exact_affine_map_is_recovered() {
        let w = standard_normal(300, 2, &mut rng_from_seed(3));
        let a = Matrix::from_rows(&[[2.0, -1.0], [0.5, 3.0], [1.0, 1.0]]);
        let target = w.matmul(&a.transpose()).unwrap().map(|x| x + 4.0);
        let fit = affine_fit(&target, &w).unwrap();
        for r in &fit.r2 {
            assert!((r.raw - 1.0).abs() < 1e-12);
        }
        assert!((fit.coef[1][1] - 3.0).abs() < 1e-10);
        assert!((fit.intercept[2] - 4.0).abs() < 1e-10);
        let sv = crate::numerics::singular_values(&a);
        assert!((fit.min_sv - sv.iter().cloned().fold(f64::INFINITY, f64::min)).abs() < 1e-9);
    }

    #[test]
    fn unrelated_target_has_low_r2() {
        let w = standard_normal(2000, 2, &mut rng_from_seed(4));
        let t = standard_normal(2000, 1, &mut rng_from_seed(5));
        let fit = affine_fit(&t, &w).unwrap();
        assert!(fit.r2[0].raw < 0.01);
        assert!(fit.r2[0].raw >= 0.0);
    }
}
