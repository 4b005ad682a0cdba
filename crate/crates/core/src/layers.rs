//! Small trainable building blocks shared by the autoencoder and the CA
//! transition functions.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{he_init, Element, PaddingMode, Param, Tape, Tensor, TensorError, Var};

pub type TResult<T> = std::result::Result<T, TensorError>;

/// Forward mode: training updates batch-norm statistics and applies dropout;
/// eval uses stored statistics and skips dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter/buffer visitation used by the optimizer, checkpointing, and
/// the frozen-phase checksums.
pub trait Module<E: Element> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));
    /// Non-trainable state (running statistics), name -> values.
    fn visit_buffers(&self, _f: &mut dyn FnMut(String, Vec<f64>)) {}
    fn load_buffer(&mut self, _name: &str, _values: &[f64]) -> bool {
        false
    }
}

pub fn params_of<E: Element, M: Module<E> + ?Sized>(m: &M) -> Vec<Param<E>> {
    let mut v = Vec::new();
    m.visit_params(&mut |p| v.push(p.clone()));
    v
}

pub fn param_count<E: Element, M: Module<E> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.numel());
    n
}

pub fn set_trainable<E: Element, M: Module<E> + ?Sized>(m: &mut M, trainable: bool) {
    m.visit_params_mut(&mut |p| p.set_trainable(trainable));
}

pub fn module_checksum<E: Element, M: Module<E> + ?Sized>(m: &M) -> u64 {
    let params = params_of(m);
    let refs: Vec<&Param<E>> = params.iter().collect();
    crate::tensor::checksum(&refs)
}

// ── Convolution layers ──────────────────────────────────────────────

pub struct Conv2dLayer<E: Element> {
    pub weight: Param<E>,
    pub bias: Option<Param<E>>,
    stride: usize,
    padding: PaddingMode,
}

impl<E: Element> Conv2dLayer<E> {
    pub fn new(
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        padding: PaddingMode,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> TResult<Self> {
        let weight = Param::new(
            format!("{name}.weight"),
            he_init(&[k, k, ci, co], k * k * ci, rng)?,
        );
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[co])?))
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    /// All-zero weights; used for CA heads so a fresh model is the identity.
    pub fn new_zeroed(
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        padding: PaddingMode,
        bias: bool,
    ) -> TResult<Self> {
        let weight = Param::new(format!("{name}.weight"), Tensor::zeros(&[k, k, ci, co])?);
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[co])?))
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Var<E>) -> TResult<Var<E>> {
        let w = tape.watch(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.watch(b));
        tape.conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }
}

impl<E: Element> Module<E> for Conv2dLayer<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub struct ConvT2dLayer<E: Element> {
    pub weight: Param<E>,
    pub bias: Option<Param<E>>,
    stride: usize,
}

impl<E: Element> ConvT2dLayer<E> {
    /// Kernel layout matches the forward convolution it mirrors:
    /// [k, k, c_out, c_in] where c_in is this layer's input channels.
    pub fn new(
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> TResult<Self> {
        let weight = Param::new(
            format!("{name}.weight"),
            he_init(&[k, k, co, ci], k * k * ci, rng)?,
        );
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[co])?))
        } else {
            None
        };
        Ok(ConvT2dLayer { weight, bias, stride })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Var<E>) -> TResult<Var<E>> {
        let w = tape.watch(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.watch(b));
        tape.conv_transpose2d(x, &w, b.as_ref(), self.stride)
    }
}

impl<E: Element> Module<E> for ConvT2dLayer<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

// ── Dense ───────────────────────────────────────────────────────────

pub struct LinearLayer<E: Element> {
    pub weight: Param<E>,
    pub bias: Option<Param<E>>,
}

impl<E: Element> LinearLayer<E> {
    pub fn new(name: &str, ci: usize, co: usize, bias: bool, rng: &mut ChaCha8Rng) -> TResult<Self> {
        let weight = Param::new(format!("{name}.weight"), he_init(&[ci, co], ci, rng)?);
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[co])?))
        } else {
            None
        };
        Ok(LinearLayer { weight, bias })
    }

    pub fn new_zeroed(name: &str, ci: usize, co: usize, bias: bool) -> TResult<Self> {
        let weight = Param::new(format!("{name}.weight"), Tensor::zeros(&[ci, co])?);
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[co])?))
        } else {
            None
        };
        Ok(LinearLayer { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Var<E>) -> TResult<Var<E>> {
        let w = tape.watch(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.watch(b));
        tape.linear(x, &w, b.as_ref())
    }
}

impl<E: Element> Module<E> for LinearLayer<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

// ── Normalization ───────────────────────────────────────────────────

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

pub struct BatchNorm<E: Element> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    name: String,
    running_mean: Vec<E>,
    running_var: Vec<E>,
    steps: u64,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(name: &str, c: usize) -> TResult<Self> {
        Ok(BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[c], E::ONE)?),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[c])?),
            name: name.to_string(),
            running_mean: vec![E::ZERO; c],
            running_var: vec![E::ONE; c],
            steps: 0,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: &Var<E>, mode: Mode) -> TResult<Var<E>> {
        let g = tape.watch(&self.gamma);
        let b = tape.watch(&self.beta);
        let eps = E::from_f64(NORM_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, &g, &b, eps)?;
                let m = E::from_f64(BN_MOMENTUM);
                let one_m = E::ONE - m;
                for (r, &v) in self.running_mean.iter_mut().zip(&mean) {
                    *r = *r * m + v * one_m;
                }
                for (r, &v) in self.running_var.iter_mut().zip(&var) {
                    *r = *r * m + v * one_m;
                }
                self.steps += 1;
                Ok(y)
            }
            Mode::Eval => {
                if self.steps == 0 {
                    return Err(TensorError::MissingStats);
                }
                tape.batch_norm_eval(x, &g, &b, &self.running_mean, &self.running_var, eps)
            }
        }
    }
}

impl<E: Element> Module<E> for BatchNorm<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(String, Vec<f64>)) {
        f(
            format!("{}.running_mean", self.name),
            self.running_mean.iter().map(|v| v.to_f64()).collect(),
        );
        f(
            format!("{}.running_var", self.name),
            self.running_var.iter().map(|v| v.to_f64()).collect(),
        );
        f(format!("{}.steps", self.name), vec![self.steps as f64]);
    }
    fn load_buffer(&mut self, name: &str, values: &[f64]) -> bool {
        if let Some(field) = name.strip_prefix(&format!("{}.", self.name)) {
            match field {
                "running_mean" => {
                    self.running_mean = values.iter().map(|&v| E::from_f64(v)).collect();
                    true
                }
                "running_var" => {
                    self.running_var = values.iter().map(|&v| E::from_f64(v)).collect();
                    true
                }
                "steps" => {
                    self.steps = values.first().copied().unwrap_or(0.0) as u64;
                    true
                }
                _ => false,
            }
        } else {
            false
        }
    }
}

pub struct LayerNorm<E: Element> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(name: &str, c: usize) -> TResult<Self> {
        Ok(LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[c], E::ONE)?),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[c])?),
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Var<E>) -> TResult<Var<E>> {
        let g = tape.watch(&self.gamma);
        let b = tape.watch(&self.beta);
        tape.layer_norm(x, &g, &b, E::from_f64(NORM_EPS))
    }
}

impl<E: Element> Module<E> for LayerNorm<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
