//! Parameterised building blocks shared by the model modules.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvLayer {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_out: usize, c_in: usize, k: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.add_normal(format!("{name}.weight"), &[c_out, c_in, k, k], std, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        ConvLayer { w, b }
    }

    pub(crate) fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, padding: usize) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), 1, padding)
    }
}

/// Affine map over the last axis: `x · W + b`, with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize, std: f64, bias: bool) -> Self {
        let w = store.add_normal(format!("{name}.weight"), &[d_in, d_out], std, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false));
        Linear { w, b, d_in, d_out }
    }

    pub(crate) fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::dim(format!(
                "linear layer expects last axis {}, got {shape:?}",
                self.d_in
            )));
        }
        let rows = g.value(x).numel() / self.d_in;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.d_in])? };
        let w = g.param(store, self.w);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        g.reshape(y, &out_shape)
    }
}
