//! Parameterized layers shared by the embedding, backbone, neck and head.

use crate::autodiff::{Graph, Padding, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_fan_in_uniform(format!("{name}.w"), &[kernel, kernel, cin, cout], kernel * kernel * cin, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[cout])?;
        Ok(Conv {
            w,
            b,
            kernel,
            cin,
            cout,
            stride,
            pad,
            padding: Padding::Zero,
        })
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// `kernel×kernel`, stride 1, "same" padding.
    pub fn same<T: Scalar>(store: &mut ParamStore<T>, name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(store, name, kernel, cin, cout, 1, kernel / 2, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d_padded(x, w, b, self.stride, self.pad, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }

    /// Multiply-accumulates for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        oh * ow * self.kernel * self.kernel * self.cin * self.cout
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add_fan_in_uniform(format!("{name}.w"), &[cin, cout], cin, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[cout])?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add_ones(format!("{name}.gamma"), &[channels])?;
        let beta = store.add_zeros(format!("{name}.beta"), &[channels])?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}
