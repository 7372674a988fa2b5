use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{total_objective, EnvTerms, InvarianceKind, KernelSpec, LossBreakdown, ObjectiveWeights};
use crate::nn::{AdamConfig, AdamState, Architecture, AutoencoderModel, DecoderKind, DEFAULT_HIDDEN};
use crate::numerics::Matrix;
use crate::rng::{permutation, rng_from_seed, split_seed};
use crate::simgen::{MixingKind, MultiEnvData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub p_hat: usize,
    pub q_hat: usize,
    /// Rows per step in total, split evenly across environments.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub invariance: InvarianceKind,
    pub independence_degree: u32,
    pub logdet_eps: f64,
    pub hidden: usize,
    /// Decoder family; inferred from the dataset's mixing when absent.
    pub decoder: Option<DecoderKind>,
    /// Train on Z standardised with pooled training moments (folded back into the model).
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            delta: 0.01,
            p_hat: 2,
            q_hat: 2,
            batch_size: 500,
            epochs: 400,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            invariance: InvarianceKind::MmdPoly2,
            independence_degree: 2,
            logdet_eps: 1e-4,
            hidden: DEFAULT_HIDDEN,
            decoder: None,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !(finite_nonneg(self.lambda1) && finite_nonneg(self.lambda2) && finite_nonneg(self.delta)) {
            return Err(Error::Config("lambda1, lambda2 and delta must be finite and >= 0".into()));
        }
        if self.batch_size < 4 {
            return Err(Error::Config(format!("batch_size must be >= 4, got {}", self.batch_size)));
        }
        if self.p_hat == 0 {
            return Err(Error::Config("p_hat must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and grad_clip must be > 0, weight_decay >= 0".into()));
        }
        if !(self.logdet_eps > 0.0) {
            return Err(Error::Config("logdet_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            delta: self.delta,
            invariance: self.invariance,
            independence_kernel: KernelSpec::poly(self.independence_degree),
            logdet_eps: self.logdet_eps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.grad_clip),
            ..AdamConfig::default()
        }
    }

    /// Configured decoder, else the mixing family of `data` (MLP when unknown).
    pub fn resolve_decoder(&self, data: &MultiEnvData) -> DecoderKind {
        if let Some(d) = self.decoder {
            return d;
        }
        match data.mixing.as_ref().map(|m| m.kind) {
            Some(MixingKind::InjectivePolynomial { degree }) => DecoderKind::Polynomial { degree },
            _ => DecoderKind::Mlp,
        }
    }
}

/// Recomputes the weighted total of `b` under other weights.
pub fn rescore(b: &LossBreakdown, w: &ObjectiveWeights) -> f64 {
    b.recon + w.lambda1 * b.inv + w.lambda2 * b.ind + w.delta * b.logdet
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

/// Column-wise affine map `z ↦ (z − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(z: &Matrix) -> Self {
        let mean = z.col_means().into_data();
        let scale = z
            .col_vars()
            .into_data()
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        Matrix::from_fn(z.rows(), z.cols(), |i, j| (z.get(i, j) - self.mean[j]) / self.scale[j])
    }

    /// Rewrites `model` (trained on standardised inputs and targets) to act on raw `Z`.
    pub fn fold_into(&self, model: &mut AutoencoderModel) -> Result<()> {
        let (m, s) = (&self.mean, &self.scale);
        let w0 = model.params.get("enc.l0.weight").expect("layout").clone();
        let b0 = model.params.get("enc.l0.bias").expect("layout").clone();
        let w0f = Matrix::from_fn(w0.rows(), w0.cols(), |i, j| w0.get(i, j) / s[i]);
        let b0f = Matrix::from_fn(1, w0.cols(), |_, j| {
            b0.get(0, j) - (0..w0.rows()).map(|i| m[i] / s[i] * w0.get(i, j)).sum::<f64>()
        });
        *model.params.get_mut("enc.l0.weight").unwrap() = w0f;
        *model.params.get_mut("enc.l0.bias").unwrap() = b0f;

        let (wn, bn) = match model.arch.decoder {
            DecoderKind::Polynomial { .. } => ("dec.weight", "dec.bias"),
            DecoderKind::Mlp => ("dec.l2.weight", "dec.l2.bias"),
        };
        let wl = model.params.get(wn).expect("layout").clone();
        let bl = model.params.get(bn).expect("layout").clone();
        *model.params.get_mut(wn).unwrap() = Matrix::from_fn(wl.rows(), wl.cols(), |i, j| wl.get(i, j) * s[j]);
        *model.params.get_mut(bn).unwrap() = Matrix::from_fn(1, bl.cols(), |_, j| bl.get(0, j) * s[j] + m[j]);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Model acting on raw `Z`.
    pub model: AutoencoderModel,
    pub standardizer: Standardizer,
    pub curves: Vec<EpochLosses>,
    pub config: TrainConfig,
    pub steps: u64,
}

impl TrainOutput {
    /// Validation breakdown of the last epoch, if validation data was present.
    pub fn final_val(&self) -> Option<LossBreakdown> {
        self.curves.last().and_then(|e| e.val)
    }

    pub fn final_train(&self) -> Option<LossBreakdown> {
        self.curves.last().map(|e| e.train)
    }
}

/// Forward pass of the objective over one block of rows per environment.
fn objective_on(
    tape: &mut Tape,
    model: &AutoencoderModel,
    trainable: bool,
    batches: &[Matrix],
    weights: &ObjectiveWeights,
) -> Result<(Vec<Var>, crate::losses::ObjectiveVars)> {
    let bound = model.bind(tape, trainable);
    let parts: Vec<&Matrix> = batches.iter().collect();
    let z_all = tape.constant(Matrix::vstack(&parts)?);
    let latent = model.encode_on(tape, &bound, z_all)?;
    let zhat = model.decode_on(tape, &bound, latent)?;
    let (p, l) = (model.arch.p_hat, model.arch.latent_dim());
    let mut envs = Vec::with_capacity(batches.len());
    let mut start = 0;
    for b in batches {
        let end = start + b.rows();
        let z = tape.slice_rows(z_all, start, end)?;
        let zh = tape.slice_rows(zhat, start, end)?;
        let lat = tape.slice_rows(latent, start, end)?;
        let w_hat = tape.slice_cols(lat, 0, p)?;
        let v_hat = tape.slice_cols(lat, p, l)?;
        envs.push(EnvTerms { z, zhat: zh, w_hat, v_hat });
        start = end;
    }
    let obj = total_objective(tape, &envs, latent, weights)?;
    Ok((bound.vars, obj))
}

/// Objective parts of `model` on the given per-environment inputs, without gradients.
pub fn evaluate_objective(model: &AutoencoderModel, zs: &[Matrix], weights: &ObjectiveWeights) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, obj) = objective_on(&mut tape, model, false, zs, weights)?;
    Ok(obj.breakdown(&tape))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.recon += b.recon;
    acc.inv += b.inv;
    acc.ind += b.ind;
    acc.logdet += b.logdet;
}

fn divide(b: &mut LossBreakdown, k: f64) {
    b.total /= k;
    b.recon /= k;
    b.inv /= k;
    b.ind /= k;
    b.logdet /= k;
}

/// Minimises the combined objective; each step draws `batch_size / K` rows from every environment.
///
/// Each epoch reshuffles every environment and runs `min_k n_k / batch_size` steps.
/// Parameter init uses `split_seed(seed, 0)`, shuffling uses `split_seed(seed, 1)`.
pub fn train(data: &MultiEnvData, config: &TrainConfig) -> Result<TrainOutput> {
    train_observed(data, config, &mut |_, _| {})
}

/// [`train`] with a callback after every epoch; the model passed acts on standardised `Z`.
pub fn train_observed(
    data: &MultiEnvData,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLosses, &AutoencoderModel),
) -> Result<TrainOutput> {
    config.validate()?;
    data.validate()?;
    let k = data.num_envs();
    let weights = config.weights();
    if k < 2 && weights.lambda1 > 0.0 {
        return Err(Error::Config(
            "invariance weight lambda1 > 0 requires at least two environments".into(),
        ));
    }
    let pooled = data.pooled_train()?;
    let standardizer = if config.standardize {
        Standardizer::fit(&pooled.z)
    } else {
        Standardizer::identity(data.d_z())
    };
    let train_z: Vec<Matrix> = data.train.iter().map(|e| standardizer.apply(&e.z)).collect();
    let val_z: Vec<Matrix> = data.val.iter().filter(|e| e.n() > 0).map(|e| standardizer.apply(&e.z)).collect();
    let has_val = val_z.len() == k && val_z.iter().all(|z| z.rows() >= 4);

    let n_min = train_z.iter().map(|z| z.rows()).min().unwrap_or(0);
    let batch = (config.batch_size / k).min(n_min);
    if batch < 4 {
        return Err(Error::Config(format!(
            "need >= 4 rows per environment per step; batch_size {} over {k} environments, smallest has {n_min} rows",
            config.batch_size
        )));
    }
    let steps_per_epoch = n_min / batch;

    let mut arch = Architecture::new(data.d_z(), config.p_hat, config.q_hat, config.resolve_decoder(data));
    arch.hidden = config.hidden;
    let mut model = AutoencoderModel::new(arch, split_seed(config.seed, 0))?;
    let mut adam = AdamState::new(config.adam(), &model.params.tensors);
    let mut rng = rng_from_seed(split_seed(config.seed, 1));
    let mut curves = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let perms: Vec<Vec<usize>> = train_z.iter().map(|z| permutation(z.rows(), &mut rng)).collect();
        let mut acc = LossBreakdown::default();
        for s in 0..steps_per_epoch {
            let batches: Vec<Matrix> = train_z
                .iter()
                .zip(&perms)
                .map(|(z, p)| z.select_rows(&p[s * batch..(s + 1) * batch]))
                .collect();
            let step = adam.step_count() as usize + 1;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) | Error::NotPositiveDefinite { .. } | Error::Singular { .. } => Error::Divergence {
                    step,
                    detail: format!("{e} at epoch {epoch}"),
                },
                other => other,
            };
            let mut tape = Tape::new();
            let (vars, obj) = objective_on(&mut tape, &model, true, &batches, &weights).map_err(diverged)?;
            let b = obj.breakdown(&tape);
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("objective is {} at epoch {epoch}", b.total),
                });
            }
            let grads = tape.backward(obj.total).map_err(diverged)?;
            let mut g: Vec<Matrix> = vars
                .iter()
                .zip(&model.params.tensors)
                .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
                .collect();
            adam.apply(&mut model.params.tensors, &mut g).map_err(diverged)?;
            accumulate(&mut acc, &b);
        }
        divide(&mut acc, steps_per_epoch as f64);
        let val = if has_val {
            Some(evaluate_objective(&model, &val_z, &weights)?)
        } else {
            None
        };
        let record = EpochLosses {
            epoch,
            train: acc,
            val,
        };
        observer(&record, &model);
        curves.push(record);
    }

    standardizer.fold_into(&mut model)?;
    Ok(TrainOutput {
        model,
        standardizer,
        curves,
        config: config.clone(),
        steps: adam.step_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    #[test]
    fn folding_preserves_the_standardised_map() {
        let arch = Architecture::new(3, 1, 1, DecoderKind::Polynomial { degree: 2 });
        let model = AutoencoderModel::new(arch, 4).unwrap();
        let z = standard_normal(7, 3, &mut rng_from_seed(2)).map(|v| 3.0 * v + 1.5);
        let st = Standardizer::fit(&z);
        let zs = st.apply(&z);
        let mut folded = model.clone();
        st.fold_into(&mut folded).unwrap();
        assert!(folded.latent(&z).unwrap().max_abs_diff(&model.latent(&zs).unwrap()) < 1e-12);
        let back = st.apply(&folded.reconstruct(&z).unwrap());
        assert!(back.max_abs_diff(&model.reconstruct(&zs).unwrap()) < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lambda2: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rescore_matches_weighted_sum() {
        let b = LossBreakdown {
            total: 0.0,
            recon: 1.0,
            inv: 2.0,
            ind: 3.0,
            logdet: -4.0,
        };
        let w = ObjectiveWeights {
            lambda1: 5.0,
            lambda2: 1.0,
            delta: 0.5,
            ..ObjectiveWeights::default()
        };
        assert_eq!(rescore(&b, &w), 1.0 + 10.0 + 3.0 - 2.0);
    }
}
