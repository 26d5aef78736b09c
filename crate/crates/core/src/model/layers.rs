use std::cell::{Cell, RefCell};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{batchnorm2d, conv2d, relu, BnMode, Conv2dParams, Parameter, Real, RunningStats, Tensor};

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Seeded parameter factory that also tracks the dotted name prefix.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    path: Vec<String>,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init { rng, path: Vec::new() }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.into());
        let r = f(self);
        self.path.pop();
        r
    }

    pub fn name(&self, leaf: &str) -> String {
        let mut s = self.path.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// Fan-in scaled uniform: U(−√(6/fan_in), √(6/fan_in)).
    pub fn conv_weight<T: Real>(&mut self, shape: [usize; 4]) -> Parameter<T> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect();
        Parameter::new(self.name("weight"), Tensor::param(&shape, data).expect("shape matches"))
    }

    pub fn constant<T: Real>(&mut self, leaf: &str, len: usize, value: f64) -> Parameter<T> {
        Parameter::new(self.name(leaf), Tensor::param(&[len], vec![T::of(value); len]).expect("shape matches"))
    }
}

pub(crate) struct Conv<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub params: Conv2dParams,
}

impl<T: Real> Conv<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, params: Conv2dParams, bias: bool) -> Self {
        Conv {
            weight: init.conv_weight([cout, cin, kernel, kernel]),
            bias: bias.then(|| init.constant("bias", cout, 0.0)),
            params,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.tensor, self.bias.as_ref().map(|b| &b.tensor), self.params)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.weight.clone());
        out.extend(self.bias.clone());
    }
}

pub(crate) struct BatchNorm<T: Real> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running: RefCell<RunningStats<T>>,
    pub name: String,
    warned: Cell<bool>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        BatchNorm {
            gamma: init.constant("gamma", channels, 1.0),
            beta: init.constant("beta", channels, 0.0),
            running: RefCell::new(RunningStats::new(channels)),
            name: init.name("running"),
            warned: Cell::new(false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let out = batchnorm2d(
            x,
            &self.gamma.tensor,
            &self.beta.tensor,
            &mut self.running.borrow_mut(),
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        if out.uninitialized_stats && !self.warned.replace(true) {
            log::warn!("{}: eval mode before any running-statistic update; using mean 0, var 1", self.name);
        }
        Ok(out.output)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

/// Bias-free convolution, batch normalization and an optional ReLU.
pub(crate) struct ConvBn<T: Real> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
}

impl<T: Real> ConvBn<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, params: Conv2dParams, relu: bool) -> Self {
        let conv = init.scoped("conv", |i| Conv::new(i, cin, cout, kernel, params, false));
        let bn = init.scoped("bn", |i| BatchNorm::new(i, cout));
        ConvBn { conv, bn, relu }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.conv.collect(out);
        self.bn.collect(out);
    }
}
