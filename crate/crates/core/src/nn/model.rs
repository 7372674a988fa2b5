use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{monomial_count, Matrix};
use crate::rng::rng_from_seed;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderKind {
    /// Monomial feature map of the latent followed by one linear layer.
    Polynomial { degree: usize },
    /// Linear → ReLU → Linear → ReLU → Linear.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_z: usize,
    pub p_hat: usize,
    pub q_hat: usize,
    pub hidden: usize,
    pub decoder: DecoderKind,
}

impl Architecture {
    pub fn new(d_z: usize, p_hat: usize, q_hat: usize, decoder: DecoderKind) -> Self {
        Self {
            d_z,
            p_hat,
            q_hat,
            hidden: DEFAULT_HIDDEN,
            decoder,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.p_hat + self.q_hat
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden;
        let l = self.latent_dim();
        let mut out = vec![
            ("enc.l0.weight".to_string(), (self.d_z, h)),
            ("enc.l0.bias".to_string(), (1, h)),
            ("enc.ln0.gain".to_string(), (1, h)),
            ("enc.ln0.bias".to_string(), (1, h)),
            ("enc.l1.weight".to_string(), (h, h)),
            ("enc.l1.bias".to_string(), (1, h)),
            ("enc.ln1.gain".to_string(), (1, h)),
            ("enc.ln1.bias".to_string(), (1, h)),
            ("enc.l2.weight".to_string(), (h, l)),
            ("enc.l2.bias".to_string(), (1, l)),
        ];
        match self.decoder {
            DecoderKind::Polynomial { degree } => {
                out.push(("dec.weight".into(), (monomial_count(l, degree), self.d_z)));
                out.push(("dec.bias".into(), (1, self.d_z)));
            }
            DecoderKind::Mlp => {
                out.push(("dec.l0.weight".into(), (l, h)));
                out.push(("dec.l0.bias".into(), (1, h)));
                out.push(("dec.l1.weight".into(), (h, h)));
                out.push(("dec.l1.bias".into(), (1, h)));
                out.push(("dec.l2.weight".into(), (h, self.d_z)));
                out.push(("dec.l2.bias".into(), (1, self.d_z)));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.p_hat == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if let DecoderKind::Polynomial { degree } = self.decoder {
            if degree == 0 {
                return Err(Error::Config("polynomial decoder degree must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

/// Fresh parameters: linear weights `U(−√(1/fan_in), √(1/fan_in))`, zero biases,
/// LayerNorm gain 1 and bias 0. Fully determined by `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> ParamSet {
    let mut rng = rng_from_seed(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, (r, c)) in arch.layout() {
        let t = if name.ends_with(".weight") {
            let bound = (1.0 / r as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            Matrix::from_fn(r, c, |_, _| dist.sample(&mut rng))
        } else if name.ends_with(".gain") {
            Matrix::filled(r, c, 1.0)
        } else {
            Matrix::zeros(r, c)
        };
        names.push(name);
        tensors.push(t);
    }
    ParamSet { names, tensors }
}

/// Encoder/decoder pair with its architecture metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub arch: Architecture,
    pub params: ParamSet,
}

/// Parameters of a model registered on a tape, in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl AutoencoderModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: init_params(&arch, seed),
        })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in layout.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn || *shape != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {pn} {:?} does not match layout {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, params })
    }

    /// Registers the parameters on `tape`, trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Encoder forward pass on the tape; returns the full `p̂ + q̂` latent.
    pub fn encode_on(&self, tape: &mut Tape, bound: &BoundParams, z: Var) -> Result<Var> {
        if tape.value(z).cols() != self.arch.d_z {
            return Err(Error::shape(
                "encode",
                format!("input width {} but d_z = {}", tape.value(z).cols(), self.arch.d_z),
            ));
        }
        let p = &bound.vars;
        let h = Self::linear(tape, z, p[0], p[1])?;
        let h = tape.layer_norm(h, p[2], p[3], LAYER_NORM_EPS)?;
        let h = tape.relu(h);
        let h = Self::linear(tape, h, p[4], p[5])?;
        let h = tape.layer_norm(h, p[6], p[7], LAYER_NORM_EPS)?;
        let h = tape.relu(h);
        Self::linear(tape, h, p[8], p[9])
    }

    /// Decoder forward pass on the tape.
    pub fn decode_on(&self, tape: &mut Tape, bound: &BoundParams, latent: Var) -> Result<Var> {
        if tape.value(latent).cols() != self.arch.latent_dim() {
            return Err(Error::shape(
                "decode",
                format!(
                    "latent width {} but p̂ + q̂ = {}",
                    tape.value(latent).cols(),
                    self.arch.latent_dim()
                ),
            ));
        }
        let p = &bound.vars[10..];
        match self.arch.decoder {
            DecoderKind::Polynomial { degree } => {
                let feats = tape.monomial_map(latent, degree);
                Self::linear(tape, feats, p[0], p[1])
            }
            DecoderKind::Mlp => {
                let h = Self::linear(tape, latent, p[0], p[1])?;
                let h = tape.relu(h);
                let h = Self::linear(tape, h, p[2], p[3])?;
                let h = tape.relu(h);
                Self::linear(tape, h, p[4], p[5])
            }
        }
    }

    /// Full encoder output for `z`.
    pub fn latent(&self, z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.encode_on(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    /// `(Ŵ, V̂)`: the encoder output split after the first `p̂` columns.
    pub fn encode(&self, z: &Matrix) -> Result<(Matrix, Matrix)> {
        let lat = self.latent(z)?;
        let p = self.arch.p_hat;
        Ok((lat.slice_cols(0, p), lat.slice_cols(p, lat.cols())))
    }

    pub fn decode(&self, latent: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let lv = tape.constant(latent.clone());
        let out = self.decode_on(&mut tape, &bound, lv)?;
        Ok(tape.value(out).clone())
    }

    pub fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        self.decode(&self.latent(z)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(decoder: DecoderKind) -> Architecture {
        Architecture::new(5, 2, 2, decoder)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = arch(DecoderKind::Polynomial { degree: 2 });
        let p1 = init_params(&a, 7);
        let p2 = init_params(&a, 7);
        assert_eq!(p1, p2);
        let p3 = init_params(&a, 8);
        let diff = p1
            .tensors
            .iter()
            .zip(&p3.tensors)
            .map(|(x, y)| x.max_abs_diff(y))
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
        let w = p1.get("enc.l1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() < 0.1));
        assert_eq!(p1.get("enc.ln0.gain").unwrap().data().iter().sum::<f64>(), 100.0);
        assert_eq!(p1.get("enc.l0.bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn zero_final_layer_gives_bias_rows() {
        let mut m = AutoencoderModel::new(arch(DecoderKind::Mlp), 1).unwrap();
        *m.params.get_mut("enc.l2.weight").unwrap() = Matrix::zeros(100, 4);
        *m.params.get_mut("enc.l2.bias").unwrap() = Matrix::row_vector(&[1.0, 2.0, 3.0, 4.0]);
        let z = Matrix::from_fn(6, 5, |i, j| (i as f64 - j as f64) * 0.3);
        let (w, v) = m.encode(&z).unwrap();
        for i in 0..6 {
            assert_eq!(w.row(i), &[1.0, 2.0]);
            assert_eq!(v.row(i), &[3.0, 4.0]);
        }
    }

    #[test]
    fn mlp_decoder_zero_weights_outputs_bias() {
        let mut m = AutoencoderModel::new(arch(DecoderKind::Mlp), 1).unwrap();
        for name in ["dec.l0.weight", "dec.l1.weight", "dec.l2.weight"] {
            let t = m.params.get_mut(name).unwrap();
            *t = Matrix::zeros(t.rows(), t.cols());
        }
        *m.params.get_mut("dec.l2.bias").unwrap() = Matrix::row_vector(&[1.0, -1.0, 0.5, 0.0, 2.0]);
        let out = m.decode(&Matrix::from_fn(3, 4, |i, j| (i + j) as f64)).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[1.0, -1.0, 0.5, 0.0, 2.0]);
        }
    }

    #[test]
    fn polynomial_decoder_uses_monomials() {
        let a = Architecture::new(6, 1, 1, DecoderKind::Polynomial { degree: 2 });
        let mut m = AutoencoderModel::new(a, 3).unwrap();
        *m.params.get_mut("dec.weight").unwrap() = Matrix::identity(6);
        let out = m.decode(&Matrix::from_rows(&[[2.0, 3.0]])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = AutoencoderModel::new(arch(DecoderKind::Mlp), 1).unwrap();
        assert!(matches!(m.encode(&Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
        assert!(matches!(m.decode(&Matrix::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn hand_set_toy_encoder() {
        // 2-2-2 network: hidden width 2, identity weights, layer norm on 2 features
        let a = Architecture {
            d_z: 2,
            p_hat: 1,
            q_hat: 1,
            hidden: 2,
            decoder: DecoderKind::Mlp,
        };
        let mut m = AutoencoderModel::new(a, 0).unwrap();
        for name in ["enc.l0.weight", "enc.l1.weight", "enc.l2.weight"] {
            *m.params.get_mut(name).unwrap() = Matrix::identity(2);
        }
        *m.params.get_mut("enc.l2.bias").unwrap() = Matrix::row_vector(&[0.5, -0.5]);
        let (w, v) = m.encode(&Matrix::from_rows(&[[3.0, 1.0]])).unwrap();
        // layer norm of (3,1): mean 2, var 1 → (1, −1)/√(1+eps); relu → (s, 0)
        let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        // second layer norm of (s, 0): mean s/2, var s²/4 → (1, −1)·(s/2)/√(s²/4+eps)
        let s2 = (s / 2.0) / (s * s / 4.0 + LAYER_NORM_EPS).sqrt();
        assert!((w.item() - (s2 + 0.5)).abs() < 1e-12);
        assert!((v.item() - (-0.5)).abs() < 1e-12);
    }
}
