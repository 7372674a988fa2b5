//! Differentiable training criteria: reconstruction, invariance (MMD or
//! mean/variance matching), independence (HSIC) and the log-det anti-collapse
//! penalty, plus their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Inhomogeneous polynomial kernel `k(x, y) = (xᵀy + offset)^degree`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub degree: u32,
    pub offset: f64,
}

impl KernelSpec {
    pub fn poly(degree: u32) -> Self {
        Self { degree, offset: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::Config("kernel degree must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::poly(2)
    }
}

/// Criterion used to make the `Ŵ` block distributionally invariant across environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceKind {
    MmdPoly2,
    MmdPoly3,
    MeanVar,
}

impl InvarianceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InvarianceKind::MmdPoly2 => "mmd_poly2",
            InvarianceKind::MmdPoly3 => "mmd_poly3",
            InvarianceKind::MeanVar => "mean_var",
        }
    }
}

impl std::str::FromStr for InvarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd_poly2" => Ok(Self::MmdPoly2),
            "mmd_poly3" => Ok(Self::MmdPoly3),
            "mean_var" => Ok(Self::MeanVar),
            other => Err(Error::Config(format!(
                "unknown invariance kind `{other}` (expected mmd_poly2, mmd_poly3, mean_var)"
            ))),
        }
    }
}

/// Mean over all entries of `(zhat − z)²`.
pub fn loss_recon(tape: &mut Tape, zhat: Var, z: Var) -> Result<Var> {
    let d = tape.sub(zhat, z)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Biased (V-statistic) squared MMD.
pub fn loss_mmd(tape: &mut Tape, x: Var, y: Var, kernel: KernelSpec) -> Result<Var> {
    kernel.validate()?;
    let (m, m2) = (tape.value(x).rows(), tape.value(y).rows());
    if m < 2 || m2 < 2 {
        return Err(Error::Contract(format!("MMD needs at least 2 samples per side, got {m} and {m2}")));
    }
    mmd_unchecked(tape, x, y, kernel)
}

pub(crate) fn mmd_unchecked(tape: &mut Tape, x: Var, y: Var, kernel: KernelSpec) -> Result<Var> {
    if tape.value(x).cols() != tape.value(y).cols() {
        return Err(Error::shape("loss_mmd", "feature widths differ"));
    }
    let kxx = tape.gram_poly_kernel(x, x, kernel.degree, kernel.offset)?;
    let kxy = tape.gram_poly_kernel(x, y, kernel.degree, kernel.offset)?;
    let kyy = tape.gram_poly_kernel(y, y, kernel.degree, kernel.offset)?;
    let mxx = tape.mean(kxx);
    let mxy = tape.mean(kxy);
    let myy = tape.mean(kyy);
    let mxy2 = tape.scalar_mul(mxy, 2.0);
    let a = tape.sub(mxx, mxy2)?;
    tape.add(a, myy)
}

/// Biased HSIC `trace(K H L H) / m²`.
pub fn loss_hsic(tape: &mut Tape, a: Var, b: Var, kernel: KernelSpec) -> Result<Var> {
    kernel.validate()?;
    let (m, m2) = (tape.value(a).rows(), tape.value(b).rows());
    if m != m2 {
        return Err(Error::shape("loss_hsic", format!("sample counts {m} vs {m2}")));
    }
    if m < 4 {
        return Err(Error::Contract(format!("HSIC needs at least 4 samples, got {m}")));
    }
    let k = tape.gram_poly_kernel(a, a, kernel.degree, kernel.offset)?;
    let l = tape.gram_poly_kernel(b, b, kernel.degree, kernel.offset)?;
    // trace(K H L H) = Σ (H K H) ∘ L since L is symmetric
    let kc = tape.double_center(k)?;
    let prod = tape.elementwise_mul(kc, l)?;
    let s = tape.sum(prod);
    Ok(tape.scalar_mul(s, 1.0 / (m * m) as f64))
}

/// `‖mean(X) − mean(Y)‖₂ + ‖var(X) − var(Y)‖₂` with population variances.
pub fn loss_meanvar(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    if tape.value(x).cols() != tape.value(y).cols() {
        return Err(Error::shape("loss_meanvar", "feature widths differ"));
    }
    let mx = tape.col_mean(x);
    let my = tape.col_mean(y);
    let vx = col_var(tape, x);
    let vy = col_var(tape, y);
    let dm = tape.sub(mx, my)?;
    let dv = tape.sub(vx, vy)?;
    let nm = l2_norm(tape, dm);
    let nv = l2_norm(tape, dv);
    tape.add(nm, nv)
}

fn col_var(tape: &mut Tape, x: Var) -> Var {
    let c = tape.center_cols(x);
    let sq = tape.square(c);
    tape.col_mean(sq)
}

fn l2_norm(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.square(v);
    let s = tape.sum(sq);
    tape.sqrt(s)
}

/// `−log det(Cov(latent) + eps·I)` with the population covariance.
pub fn loss_logdet_penalty(tape: &mut Tape, latent: Var, eps: f64) -> Result<Var> {
    let (n, w) = tape.value(latent).shape();
    if n < w + 1 {
        return Err(Error::Contract(format!("log-det penalty needs n >= {} rows, got {n}", w + 1)));
    }
    let c = tape.center_cols(latent);
    let ct = tape.transpose(c);
    let g = tape.matmul(ct, c)?;
    let cov = tape.scalar_mul(g, 1.0 / n as f64);
    if !tape.value(cov).is_finite() {
        return Err(Error::NonFinite("representation covariance"));
    }
    let ridge = tape.constant(Matrix::identity(w).scale(eps));
    let reg = tape.add(cov, ridge)?;
    let ld = tape.log_det(reg)?;
    Ok(tape.scalar_mul(ld, -1.0))
}

/// Weights and criteria of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub invariance: InvarianceKind,
    pub independence_kernel: KernelSpec,
    pub logdet_eps: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            delta: 0.01,
            invariance: InvarianceKind::MmdPoly2,
            independence_kernel: KernelSpec::poly(2),
            logdet_eps: 1e-4,
        }
    }
}

/// Objective value split into its parts (unweighted) plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub inv: f64,
    pub ind: f64,
    pub logdet: f64,
}

/// Tape handles of the objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub recon: Var,
    pub inv: Option<Var>,
    pub ind: Option<Var>,
    pub logdet: Option<Var>,
}

impl ObjectiveVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            total: tape.value(self.total).item(),
            recon: tape.value(self.recon).item(),
            inv: get(self.inv),
            ind: get(self.ind),
            logdet: get(self.logdet),
        }
    }
}

pub fn invariance_loss(tape: &mut Tape, x: Var, y: Var, kind: InvarianceKind) -> Result<Var> {
    match kind {
        InvarianceKind::MmdPoly2 => loss_mmd(tape, x, y, KernelSpec::poly(2)),
        InvarianceKind::MmdPoly3 => loss_mmd(tape, x, y, KernelSpec::poly(3)),
        InvarianceKind::MeanVar => loss_meanvar(tape, x, y),
    }
}

/// Per-environment tape handles the objective is assembled from.
#[derive(Clone, Copy, Debug)]
pub struct EnvTerms {
    /// Observed instruments of the minibatch.
    pub z: Var,
    /// Decoder output for the minibatch.
    pub zhat: Var,
    /// Encoder output restricted to the first `p̂` coordinates.
    pub w_hat: Var,
    /// Remaining encoder coordinates.
    pub v_hat: Var,
}

/// `Σ_k L_rec + λ1 Σ_{j<k} Inv(Ŵ⁽ʲ⁾, Ŵ⁽ᵏ⁾) + λ2 Σ_k Ind(Ŵ⁽ᵏ⁾, V̂⁽ᵏ⁾) + δ·penalty(latent)`.
///
/// `latent` is the full encoder output over all environments' rows.
pub fn total_objective(
    tape: &mut Tape,
    envs: &[EnvTerms],
    latent: Var,
    weights: &ObjectiveWeights,
) -> Result<ObjectiveVars> {
    if envs.is_empty() {
        return Err(Error::Config("objective needs at least one environment".into()));
    }
    if envs.len() < 2 && weights.lambda1 > 0.0 {
        return Err(Error::Config(
            "invariance weight lambda1 > 0 requires at least two environments".into(),
        ));
    }
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 || weights.delta < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }

    let mut recon = loss_recon(tape, envs[0].zhat, envs[0].z)?;
    for e in &envs[1..] {
        let r = loss_recon(tape, e.zhat, e.z)?;
        recon = tape.add(recon, r)?;
    }
    let mut total = recon;

    let mut inv = None;
    if weights.lambda1 > 0.0 {
        let mut acc: Option<Var> = None;
        for j in 0..envs.len() {
            for k in j + 1..envs.len() {
                let t = invariance_loss(tape, envs[j].w_hat, envs[k].w_hat, weights.invariance)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, t)?,
                    None => t,
                });
            }
        }
        let acc = acc.expect("two or more environments");
        let scaled = tape.scalar_mul(acc, weights.lambda1);
        total = tape.add(total, scaled)?;
        inv = Some(acc);
    }

    let mut ind = None;
    if weights.lambda2 > 0.0 {
        let mut acc: Option<Var> = None;
        for e in envs {
            if tape.value(e.v_hat).cols() == 0 {
                continue;
            }
            let t = loss_hsic(tape, e.w_hat, e.v_hat, weights.independence_kernel)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
        if let Some(acc) = acc {
            let scaled = tape.scalar_mul(acc, weights.lambda2);
            total = tape.add(total, scaled)?;
            ind = Some(acc);
        }
    }

    let mut logdet = None;
    if weights.delta > 0.0 {
        let p = loss_logdet_penalty(tape, latent, weights.logdet_eps)?;
        let scaled = tape.scalar_mul(p, weights.delta);
        total = tape.add(total, scaled)?;
        logdet = Some(p);
    }

    Ok(ObjectiveVars {
        total,
        recon,
        inv,
        ind,
        logdet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn recon_trivial_cases() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let l = loss_recon(&mut t, z, z).unwrap();
        assert_eq!(val(&t, l), 0.0);
        let zp = t.constant(Matrix::from_rows(&[[2.0, 3.0], [4.0, 5.0]]));
        let l = loss_recon(&mut t, zp, z).unwrap();
        assert_eq!(val(&t, l), 1.0);
        let bad = t.constant(Matrix::zeros(1, 2));
        assert!(loss_recon(&mut t, bad, z).is_err());
    }

    #[test]
    fn mmd_identical_and_hand_case() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5], [1.0, 1.0]]));
        let l = loss_mmd(&mut t, x, x, KernelSpec::poly(2)).unwrap();
        assert!(val(&t, l).abs() <= 1e-12);
        // single-sample relaxation of the 2-sample precondition
        let a = t.constant(Matrix::scalar(0.0));
        let b = t.constant(Matrix::scalar(1.0));
        let l = mmd_unchecked(&mut t, a, b, KernelSpec::poly(2)).unwrap();
        assert_eq!(val(&t, l), 3.0);
        assert!(loss_mmd(&mut t, a, b, KernelSpec::poly(2)).is_err());
    }

    #[test]
    fn hsic_constant_block_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64 * 0.4 - 1.0));
        let b = t.constant(Matrix::filled(6, 1, 3.0));
        let l = loss_hsic(&mut t, a, b, KernelSpec::poly(2)).unwrap();
        assert!(val(&t, l).abs() <= 1e-12);
        let l = loss_hsic(&mut t, a, a, KernelSpec::poly(2)).unwrap();
        assert!(val(&t, l) > 0.0);
        let short = t.constant(Matrix::zeros(5, 1));
        assert!(loss_hsic(&mut t, a, short, KernelSpec::poly(2)).is_err());
    }

    #[test]
    fn meanvar_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(&[0.0, 0.0]));
        let y = t.constant(Matrix::column(&[1.0, 1.0]));
        let l = loss_meanvar(&mut t, x, y).unwrap();
        assert_eq!(val(&t, l), 1.0);
        let x = t.constant(Matrix::column(&[0.0, 2.0]));
        let y = t.constant(Matrix::column(&[0.0, 4.0]));
        let l = loss_meanvar(&mut t, x, y).unwrap();
        assert_eq!(val(&t, l), 4.0);
        let l = loss_meanvar(&mut t, x, x).unwrap();
        assert_eq!(val(&t, l), 0.0);
    }

    #[test]
    fn logdet_penalty_cases() {
        // columns (±1, ±1) patterns give Cov = I exactly
        let white = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let mut t = Tape::new();
        let x = t.constant(white.clone());
        let l = loss_logdet_penalty(&mut t, x, 0.0).unwrap();
        assert!(val(&t, l).abs() < 1e-12);
        let x2 = t.constant(white.scale(2f64.sqrt()));
        let l = loss_logdet_penalty(&mut t, x2, 0.0).unwrap();
        assert!((val(&t, l) + 4f64.ln()).abs() < 1e-12);
        // duplicated column: one null direction
        let dup = Matrix::from_rows(&[[1.0, 1.0], [-1.0, -1.0], [1.0, 1.0], [-1.0, -1.0]]);
        let x3 = t.constant(dup);
        let l = loss_logdet_penalty(&mut t, x3, 1e-4).unwrap();
        // eigenvalues of Cov + eps I are 2 + eps and eps
        let want = -((2.0 + 1e-4f64).ln() + 1e-4f64.ln());
        assert!((val(&t, l) - want).abs() < 1e-10);
        assert!(val(&t, l) > 8.0);
    }

    #[test]
    fn objective_rejects_single_env_with_invariance() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(8, 2));
        let w = t.constant(Matrix::zeros(8, 1));
        let e = EnvTerms { z, zhat: z, w_hat: w, v_hat: w };
        let res = total_objective(&mut t, &[e], z, &ObjectiveWeights::default());
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn invariance_kind_parses() {
        assert_eq!("mean_var".parse::<InvarianceKind>().unwrap(), InvarianceKind::MeanVar);
        assert!("rbf".parse::<InvarianceKind>().is_err());
    }
}
