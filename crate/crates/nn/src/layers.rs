//! Layer descriptors. A layer only remembers its hyper-parameters and the
//! names of its arrays; the arrays themselves live in a [`ParamStore`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_uniform, uniform, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Same-padded (for odd kernels), stride-1 convolution with bias.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R) -> Self {
        self.init_scaled(store, rng, 1.0)
    }

    /// He-uniform weights multiplied by `gain`; `gain = 0` gives zero weights.
    pub fn init_scaled<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R, gain: f64) -> Self {
        assert!(
            self.in_ch % self.groups == 0 && self.out_ch % self.groups == 0,
            "{}: channels not divisible by groups",
            self.name
        );
        let cg = self.in_ch / self.groups;
        let fan_in = cg * self.kernel * self.kernel;
        let shape = [self.out_ch, cg, self.kernel, self.kernel];
        store.insert(self.weight_name(), he_uniform(rng, &shape, fan_in, gain));
        if self.bias {
            store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_ch])));
        }
        self
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(&self.weight_name());
        let b = self.bias.then(|| g.param(&self.bias_name()));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, padding 1: exactly doubles the spatial size.
    pub fn doubling(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        ConvTranspose2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            pad: 1,
            out_pad: 0,
        }
    }

    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvTranspose2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            out_pad: 0,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R) -> Self {
        self.init_scaled(store, rng, 1.0)
    }

    pub fn init_scaled<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R, gain: f64) -> Self {
        // each output pixel sees about in_ch * (k / stride)^2 inputs
        let taps = (self.kernel / self.stride.max(1)).max(1);
        let fan_in = self.in_ch * taps * taps;
        let shape = [self.in_ch, self.out_ch, self.kernel, self.kernel];
        store.insert(self.weight_name(), he_uniform(rng, &shape, fan_in, gain));
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_ch])));
        self
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(&self.weight_name());
        let b = g.param(&self.bias_name());
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    /// PyTorch-style default: weights and bias uniform in ±1/sqrt(in_dim).
    pub fn init<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R) -> Self {
        self.init_scaled(store, rng, 1.0)
    }

    pub fn init_scaled<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R, gain: f64) -> Self {
        let bound = gain / (self.in_dim.max(1) as f64).sqrt();
        store.insert(self.weight_name(), uniform(rng, &[self.out_dim, self.in_dim], bound));
        store.insert(self.bias_name(), uniform(rng, &[self.out_dim], bound));
        self
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(&self.weight_name());
        let b = g.param(&self.bias_name());
        g.linear(x, w, Some(b))
    }
}
