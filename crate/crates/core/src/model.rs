//! Layer-normalized MLP classifier with a frozen/adaptable parameter split.
//!
//! `flatten -> [linear -> layernorm -> relu] x L -> linear`. The only
//! adaptable parameters are the per-feature scale and shift of each layer
//! norm; everything else is frozen during test-time adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Frozen,
    Adaptable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub classes: usize,
    pub norm_eps: f64,
    /// Subtracted from every pixel before the first layer.
    pub input_center: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: 3,
            height: 32,
            width: 32,
            hidden: 128,
            blocks: 3,
            classes: 10,
            norm_eps: 1e-5,
            input_center: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Which parameters become differentiable leaves when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Adaptable,
    All,
}

impl Trainable {
    fn admits(self, role: ParamRole) -> bool {
        match self {
            Trainable::None => false,
            Trainable::Adaptable => role == ParamRole::Adaptable,
            Trainable::All => true,
        }
    }
}

/// Tape handles for every parameter, in registry order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// `(registry index, var)` of every parameter bound as a leaf.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .zip(&self.trainable)
            .enumerate()
            .filter(|(_, (_, t))| **t)
            .map(|(i, (v, _))| (i, *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: Vec<Param>,
}

impl Classifier {
    /// He-uniform linear weights, zero biases, unit scale and zero shift.
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut fan_in = config.input_dim();
        for b in 0..config.blocks {
            params.push(Param {
                name: format!("block{b}.linear.weight"),
                role: ParamRole::Frozen,
                value: uniform(&mut rng, &[fan_in, config.hidden], (6.0 / fan_in as f64).sqrt()),
            });
            params.push(frozen_zeros(format!("block{b}.linear.bias"), &[config.hidden]));
            params.push(Param {
                name: format!("block{b}.norm.scale"),
                role: ParamRole::Adaptable,
                value: Tensor::new(vec![config.hidden], vec![1.0; config.hidden]).unwrap(),
            });
            params.push(Param {
                name: format!("block{b}.norm.shift"),
                role: ParamRole::Adaptable,
                value: Tensor::zeros(&[config.hidden]),
            });
            fan_in = config.hidden;
        }
        params.push(Param {
            name: "head.weight".into(),
            role: ParamRole::Frozen,
            value: uniform(&mut rng, &[fan_in, config.classes], (3.0 / fan_in as f64).sqrt()),
        });
        params.push(frozen_zeros("head.bias".into(), &[config.classes]));
        Classifier { config, params }
    }

    /// Rebuilds a classifier from an archived parameter list, checking that
    /// names, shapes and roles match the architecture.
    pub fn from_params(config: ClassifierConfig, params: Vec<Param>) -> Result<Self> {
        let reference = Classifier::new(config, 0);
        if reference.params.len() != params.len() {
            return Err(Error::Archive(format!(
                "expected {} parameter blocks, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(&params) {
            if want.name != got.name || want.role != got.role || want.value.shape() != got.value.shape() {
                return Err(Error::Archive(format!(
                    "parameter `{}` does not match architecture (`{}` {:?})",
                    got.name,
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Classifier { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn adaptable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Adaptable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundParams {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = trainable.admits(p.role);
            vars.push(if t {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            });
            flags.push(t);
        }
        BoundParams {
            vars,
            trainable: flags,
        }
    }

    /// Logits for a `[batch, C·H·W]` input already recorded on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.len() != 2 || shape[1] != self.config.input_dim() {
            return Err(Error::shape("forward", shape, &[0, self.config.input_dim()]));
        }
        let mut h = input;
        for b in 0..self.config.blocks {
            let base = 4 * b;
            let z = tape.matmul(h, bound.var(base))?;
            let z = tape.add(z, bound.var(base + 1))?;
            let n = tape.layer_norm(z, self.config.norm_eps);
            let n = tape.mul(n, bound.var(base + 2))?;
            let n = tape.add(n, bound.var(base + 3))?;
            h = tape.relu(n);
        }
        let head = 4 * self.config.blocks;
        let z = tape.matmul(h, bound.var(head))?;
        tape.add(z, bound.var(head + 1))
    }

    fn check_images(&self, x: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if (x.channels(), x.height(), x.width()) != (c.channels, c.height, c.width) {
            return Err(Error::shape(
                "forward",
                &[x.channels(), x.height(), x.width()],
                &[c.channels, c.height, c.width],
            ));
        }
        Ok(())
    }

    /// Flattened images shifted by the configured input center.
    pub fn prepare_input(&self, x: &ImageTensor) -> Tensor {
        let mut m = x.to_matrix();
        let c = self.config.input_center;
        m.data_mut().iter_mut().for_each(|v| *v -= c);
        m
    }

    /// Binds parameters and runs the forward pass on `x`.
    pub fn forward(&self, tape: &mut Tape, x: &ImageTensor, trainable: Trainable) -> Result<(BoundParams, Var)> {
        self.check_images(x)?;
        let bound = self.bind(tape, trainable);
        let input = tape.constant(self.prepare_input(x));
        let logits = self.forward_on(tape, &bound, input)?;
        Ok((bound, logits))
    }

    /// Logits without recording anything for later use.
    pub fn logits(&self, x: &ImageTensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, z) = self.forward(&mut tape, x, Trainable::None)?;
        Ok(tape.value(z).clone())
    }

    /// Arg-max class per image.
    pub fn predict(&self, x: &ImageTensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// SHA-256 over every parameter's name, role and raw bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([p.role as u8]);
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.data()
        .chunks(t.last_dim().max(1))
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn frozen_zeros(name: String, shape: &[usize]) -> Param {
    Param {
        name,
        role: ParamRole::Frozen,
        value: Tensor::zeros(shape),
    }
}
