use rand::distributions::{Distribution, Uniform};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, matmul, sym_eigen, Matrix};
use crate::rng::{rng_from_seed, split_seed, Rng};

use super::dataset::{EnvDataset, MultiEnvData, Oracle, Split};
use super::mixing::{Mixing, MixingSpec};

/// Marginal law of the standardised noise before it is coloured by its covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Uniform on `[−√3, √3]` (unit variance).
    Uniform,
}

/// Linear multi-environment SCM:
///
/// ```text
/// H := ε_H                         ε_H ~ (0, Σ_H)
/// V := η⁽ᵏ⁾ H + ε_V                ε_V ~ (0, Σ_V)
/// W := ε_W                         ε_W ~ (0, Σ_W), same law in every environment
/// D := β1ᵀ V + β2ᵀ W + α1ᵀ H + ε_D  ε_D ~ (0, σ²_D I_d)
/// Y := θᵀ D + α2ᵀ H + ε_Y          ε_Y ~ (0, σ²_Y)
/// ```
///
/// Row-vector convention: `D = V β1 + W β2 + H α1 + ε_D` with `β1` q×d, `β2` p×d, `α1` h×d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub name: String,
    pub p: usize,
    pub q: usize,
    pub d: usize,
    pub h: usize,
    pub theta: Vec<f64>,
    pub alpha1: Matrix,
    pub alpha2: Vec<f64>,
    pub beta1: Matrix,
    pub beta2: Matrix,
    /// One q×h loading matrix per environment.
    pub eta: Vec<Matrix>,
    pub sigma_w: Matrix,
    pub sigma_v: Matrix,
    pub sigma_h: Matrix,
    pub var_d: f64,
    pub var_y: f64,
    #[serde(default)]
    pub noise: NoiseLaw,
}

fn sym2(a: f64, b: f64) -> Matrix {
    Matrix::from_rows(&[[a, b], [b, a]])
}

/// The two-environment linear SCM used for the synthetic ablations:
/// p = q = h = 2, d = 1, Σ_W = Σ_V = [[1, .5], [.5, 1]], η⁽¹⁾ = I, η⁽²⁾ = 2I,
/// all loadings one, θ = 1.
pub fn d2_spec() -> ScmSpec {
    ScmSpec {
        name: "d2".into(),
        p: 2,
        q: 2,
        d: 1,
        h: 2,
        theta: vec![1.0],
        alpha1: Matrix::filled(2, 1, 1.0),
        alpha2: vec![1.0, 1.0],
        beta1: Matrix::filled(2, 1, 1.0),
        beta2: Matrix::filled(2, 1, 1.0),
        eta: vec![Matrix::identity(2), Matrix::identity(2).scale(2.0)],
        sigma_w: sym2(1.0, 0.5),
        sigma_v: sym2(1.0, 0.5),
        sigma_h: Matrix::identity(2),
        var_d: 1.0,
        var_y: 1.0,
        noise: NoiseLaw::Gaussian,
    }
}

/// Three environments: V¹ shifts between environments 1 and 2, V² between 1 and 3.
pub fn three_env_spec() -> ScmSpec {
    ScmSpec {
        name: "d3_threeenv".into(),
        eta: vec![
            Matrix::identity(2),
            Matrix::diag(&[2.0, 1.0]),
            Matrix::diag(&[1.0, 2.0]),
        ],
        ..d2_spec()
    }
}

impl ScmSpec {
    pub fn num_envs(&self) -> usize {
        self.eta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let chk = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Config(what)) };
        chk(self.theta.len() == self.d, format!("theta has {} entries, d = {}", self.theta.len(), self.d))?;
        chk(self.alpha1.shape() == (self.h, self.d), format!("alpha1 must be {}x{}", self.h, self.d))?;
        chk(self.alpha2.len() == self.h, format!("alpha2 must have {} entries", self.h))?;
        chk(self.beta1.shape() == (self.q, self.d), format!("beta1 must be {}x{}", self.q, self.d))?;
        chk(self.beta2.shape() == (self.p, self.d), format!("beta2 must be {}x{}", self.p, self.d))?;
        chk(!self.eta.is_empty(), "at least one environment is required".into())?;
        for (k, e) in self.eta.iter().enumerate() {
            chk(e.shape() == (self.q, self.h), format!("eta[{k}] must be {}x{}", self.q, self.h))?;
        }
        chk(self.sigma_w.shape() == (self.p, self.p), "sigma_w shape".into())?;
        chk(self.sigma_v.shape() == (self.q, self.q), "sigma_v shape".into())?;
        chk(self.sigma_h.shape() == (self.h, self.h), "sigma_h shape".into())?;
        chk(self.var_d >= 0.0 && self.var_y >= 0.0, "noise variances must be >= 0".into())?;
        for (name, s) in [("sigma_w", &self.sigma_w), ("sigma_v", &self.sigma_v), ("sigma_h", &self.sigma_h)] {
            if s.rows() > 0 {
                cholesky(s).map_err(|e| Error::Config(format!("{name} is not positive definite: {e}")))?;
            }
        }
        if self.num_envs() >= 2 && self.eta.iter().all(|e| *e == self.eta[0]) {
            return Err(Error::Config(
                "eta is identical in every environment; the variant block never shifts".into(),
            ));
        }
        Ok(())
    }

    /// Population covariance of V in environment `k`: `η Σ_H ηᵀ + Σ_V`.
    pub fn v_covariance(&self, k: usize) -> Matrix {
        let e = &self.eta[k];
        let ehe = matmul(&matmul(e, &self.sigma_h).unwrap(), &e.transpose()).unwrap();
        ehe.add(&self.sigma_v).unwrap()
    }

    /// True when `Σ_V⁽ᵇ⁾ − Σ_V⁽ᵃ⁾` is definite, so every non-zero projection `uᵀV`
    /// has a different variance in the two environments.
    pub fn covariance_shift_sufficient(&self, a: usize, b: usize) -> bool {
        let diff = self.v_covariance(b).sub(&self.v_covariance(a)).unwrap();
        let (vals, _) = sym_eigen(&diff).unwrap();
        let tol = 1e-12 * diff.max_abs().max(1.0);
        vals.iter().all(|v| *v > tol) || vals.iter().all(|v| *v < -tol)
    }

    /// V coordinates whose marginal variance differs between environments `a` and `b`.
    pub fn shifted_coordinates(&self, a: usize, b: usize) -> Vec<usize> {
        let (ca, cb) = (self.v_covariance(a), self.v_covariance(b));
        (0..self.q).filter(|&j| (ca.get(j, j) - cb.get(j, j)).abs() > 1e-12).collect()
    }
}

fn draw_noise(rows: usize, cov: &Matrix, law: NoiseLaw, rng: &mut Rng) -> Result<Matrix> {
    let dim = cov.rows();
    if dim == 0 {
        return Ok(Matrix::zeros(rows, 0));
    }
    let l = cholesky(cov)?.lower;
    let unif = Uniform::new_inclusive(-(3f64.sqrt()), 3f64.sqrt());
    let raw = Matrix::from_fn(rows, dim, |_, _| match law {
        NoiseLaw::Gaussian => StandardNormal.sample(rng),
        NoiseLaw::Uniform => unif.sample(rng),
    });
    matmul(&raw, &l.transpose())
}

/// Latent and observed blocks of one environment, before mixing.
pub(crate) struct Structural {
    pub w: Matrix,
    pub v: Matrix,
    pub h: Matrix,
    pub d: Matrix,
    pub y: Matrix,
}

pub(crate) fn structural_sample(spec: &ScmSpec, env: usize, n: usize, rng: &mut Rng) -> Result<Structural> {
    let law = spec.noise;
    let h = draw_noise(n, &spec.sigma_h, law, rng)?;
    let eps_v = draw_noise(n, &spec.sigma_v, law, rng)?;
    let w = draw_noise(n, &spec.sigma_w, law, rng)?;
    let eps_d = draw_noise(n, &Matrix::identity(spec.d), law, rng)?.scale(spec.var_d.sqrt());
    let eps_y = draw_noise(n, &Matrix::identity(1), law, rng)?.scale(spec.var_y.sqrt());
    structural_from_noise(spec, env, h, eps_v, w, eps_d, eps_y)
}

/// Applies the structural equations to given exogenous draws.
pub(crate) fn structural_from_noise(
    spec: &ScmSpec,
    env: usize,
    h: Matrix,
    eps_v: Matrix,
    w: Matrix,
    eps_d: Matrix,
    eps_y: Matrix,
) -> Result<Structural> {
    let v = matmul(&h, &spec.eta[env].transpose())?.add(&eps_v)?;
    let d = matmul(&v, &spec.beta1)?
        .add(&matmul(&w, &spec.beta2)?)?
        .add(&matmul(&h, &spec.alpha1)?)?
        .add(&eps_d)?;
    let theta = Matrix::column(&spec.theta);
    let alpha2 = Matrix::column(&spec.alpha2);
    let y = matmul(&d, &theta)?.add(&matmul(&h, &alpha2)?)?.add(&eps_y)?;
    Ok(Structural { w, v, h, d, y })
}

/// Draws train and validation sets for every environment and mixes `(W, V)` into `Z`.
///
/// A pure function of its arguments: environment `k`, split `s` uses the stream
/// `split_seed(seed, 2k + s)`.
pub fn simulate(
    spec: &ScmSpec,
    mixing: &MixingSpec,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<MultiEnvData> {
    spec.validate()?;
    let mix = Mixing::build(mixing, spec.p + spec.q)?;
    let mut train = Vec::with_capacity(spec.num_envs());
    let mut val = Vec::with_capacity(spec.num_envs());
    for k in 0..spec.num_envs() {
        for (split, n, out) in [(Split::Train, n_train, &mut train), (Split::Val, n_val, &mut val)] {
            let stream = split_seed(seed, (2 * k + split.index()) as u64);
            let mut rng = rng_from_seed(stream);
            let s = structural_sample(spec, k, n, &mut rng)?;
            let u = Matrix::hstack(&[&s.w, &s.v])?;
            let z = mix.apply(&u)?;
            out.push(EnvDataset {
                env: k,
                split,
                seed: stream,
                z,
                d: s.d,
                y: s.y,
                oracle: Some(Oracle { w: s.w, v: s.v, h: s.h }),
            });
        }
    }
    Ok(MultiEnvData {
        spec: Some(spec.clone()),
        mixing: Some(mixing.clone()),
        seed,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::mixing::MixingKind;

    #[test]
    fn builtin_specs_validate() {
        d2_spec().validate().unwrap();
        three_env_spec().validate().unwrap();
        assert_eq!(three_env_spec().num_envs(), 3);
    }

    #[test]
    fn identical_eta_rejected() {
        let mut s = d2_spec();
        s.eta[1] = s.eta[0].clone();
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let mut s = d2_spec();
        s.sigma_w = sym2(1.0, 2.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn noise_free_propagation() {
        let spec = d2_spec();
        let n = 3;
        let w = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [0.0, 0.0]]);
        let eps_v = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4], [-1.0, 1.0]]);
        let s = structural_from_noise(
            &spec,
            1,
            Matrix::zeros(n, 2),
            eps_v.clone(),
            w.clone(),
            Matrix::zeros(n, 1),
            Matrix::zeros(n, 1),
        )
        .unwrap();
        for i in 0..n {
            let d = eps_v.row(i).iter().sum::<f64>() + w.row(i).iter().sum::<f64>();
            assert_eq!(s.d.get(i, 0), d);
            assert_eq!(s.y.get(i, 0), d * 1.0);
        }
    }

    #[test]
    fn covariance_shift_validator() {
        let s = d2_spec();
        // Σ⁽²⁾ − Σ⁽¹⁾ = 3I is positive definite
        assert!(s.covariance_shift_sufficient(0, 1));
        let t = three_env_spec();
        // diag(3, 0) is only semi-definite
        assert!(!t.covariance_shift_sufficient(0, 1));
        assert_eq!(t.shifted_coordinates(0, 1), vec![0]);
        assert_eq!(t.shifted_coordinates(0, 2), vec![1]);
        assert_eq!(s.v_covariance(1), Matrix::from_rows(&[[5.0, 0.5], [0.5, 5.0]]));
    }

    #[test]
    fn simulate_is_pure() {
        let mix = MixingSpec {
            kind: MixingKind::InjectivePolynomial { degree: 2 },
            d_z: 15,
            seed: 3,
        };
        let a = simulate(&d2_spec(), &mix, 50, 10, 9).unwrap();
        let b = simulate(&d2_spec(), &mix, 50, 10, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate(&d2_spec(), &mix, 50, 10, 10).unwrap();
        assert_ne!(a.train[0].z, c.train[0].z);
        assert_eq!(a.train.len(), 2);
        assert_eq!(a.val[1].z.shape(), (10, 15));
    }
}
