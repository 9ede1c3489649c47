//! The data adaptor: a small conv network placed in front of the frozen
//! model. In residual mode it adds its output to the input; in direct mode
//! its output replaces the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, Layer, Network};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Flat adaptor parameters, the variable the optimizer works on.
pub type AdaptorParams = Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptorMode {
    Residual,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorConfig {
    pub hidden_channels: usize,
    pub kernel: usize,
    /// Insert a relu after the instance norm.
    pub relu: bool,
    pub mode: AdaptorMode,
    /// Clip adapted values to `[clamp_lo, clamp_hi]`.
    pub clamp: bool,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    /// Multiplier on the output layer's initial weights (1 keeps the plain
    /// `N(0, 1/fan_in)` rule).
    pub output_init_gain: f64,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 8,
            kernel: 3,
            relu: false,
            mode: AdaptorMode::Residual,
            clamp: true,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            output_init_gain: 1.0,
        }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 {
            return Err(Error::Config(
                "adaptor.hidden_channels must be positive".into(),
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("adaptor.kernel must be odd".into()));
        }
        if self.clamp && !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Config("adaptor clamp range is empty".into()));
        }
        if !(self.output_init_gain >= 0.0 && self.output_init_gain.is_finite()) {
            return Err(Error::Config(
                "adaptor.output_init_gain must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataAdaptor {
    net: Network,
    mode: AdaptorMode,
    clamp: Option<(f64, f64)>,
    output_init_gain: f64,
}

impl DataAdaptor {
    /// Builds `conv(c -> hidden) -> instance_norm [-> relu] -> conv(hidden -> c)`
    /// for per-sample inputs of shape `[c, h, w]`.
    pub fn new(input_shape: &[usize], cfg: &AdaptorConfig) -> Result<Self> {
        cfg.validate()?;
        let &[c, _, _] = input_shape else {
            return Err(Error::InvalidArgument(format!(
                "adaptor expects [channels, height, width] inputs, got {input_shape:?}"
            )));
        };
        let mut layers = vec![
            Layer::conv2d(Conv2dSpec::same(c, cfg.hidden_channels, cfg.kernel)),
            Layer::instance_norm(cfg.hidden_channels),
        ];
        if cfg.relu {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::conv2d(Conv2dSpec::same(
            cfg.hidden_channels,
            c,
            cfg.kernel,
        )));
        let net = Network::new(input_shape.to_vec(), layers)?;
        Ok(Self {
            net,
            mode: cfg.mode,
            clamp: cfg.clamp.then_some((cfg.clamp_lo, cfg.clamp_hi)),
            output_init_gain: cfg.output_init_gain,
        })
    }

    pub fn mode(&self) -> AdaptorMode {
        self.mode
    }

    pub fn clamp_range(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// The underlying network with its current (template) parameters.
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn zero_params(&self) -> AdaptorParams {
        Tensor::vector(vec![0.0; self.param_count()])
    }

    /// Weights from `N(0, 1/fan_in)`, zero biases; deterministic per seed.
    pub fn init_params(&self, seed: u64) -> AdaptorParams {
        let mut net = self.net.clone();
        net.init_params(&mut stream(seed, Purpose::AdaptorInit, &[]));
        let mut flat = net.params_vec();
        if self.output_init_gain != 1.0 {
            if let Some(Layer::Conv2d { weights, .. }) = net.layers().last() {
                let start = self.param_count() - weights.len() - self.input_shape()[0];
                for w in &mut flat[start..start + weights.len()] {
                    *w *= self.output_init_gain;
                }
            }
        }
        Tensor::vector(flat)
    }

    /// Binds a parameter vector for repeated application.
    pub fn bind(&self, theta: &[f64]) -> Result<BoundAdaptor<'_>> {
        if theta.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                actual: theta.len(),
            });
        }
        let mut net = self.net.clone();
        net.set_params(theta)?;
        Ok(BoundAdaptor { adaptor: self, net })
    }

    pub fn adapt(&self, theta: &AdaptorParams, x: &Tensor) -> Result<Tensor> {
        self.bind(theta.data())?.adapt(x)
    }

    /// Gradient of `sum_i <upstream_i, adapt(theta, x)_i>` with respect to
    /// theta. Clipped outputs pass no gradient.
    pub fn param_grad(
        &self,
        theta: &AdaptorParams,
        x: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<f64>> {
        if upstream.shape() != x.shape() {
            return Err(Error::shape(x.shape(), upstream.shape()));
        }
        let bound = self.bind(theta.data())?;
        let z = bound.net.forward(x)?;
        let mut dz = upstream.clone();
        if let Some((lo, hi)) = self.clamp {
            let pre = x.data().iter().zip(z.data());
            for (g, (xv, zv)) in dz.data_mut().iter_mut().zip(pre) {
                let v = match self.mode {
                    AdaptorMode::Residual => xv + zv,
                    AdaptorMode::Direct => *zv,
                };
                if v <= lo || v >= hi {
                    *g = 0.0;
                }
            }
        }
        Ok(bound.net.backward(x, &dz)?.params.into_data())
    }
}

/// An adaptor with a fixed parameter vector.
#[derive(Debug, Clone)]
pub struct BoundAdaptor<'a> {
    adaptor: &'a DataAdaptor,
    net: Network,
}

impl BoundAdaptor<'_> {
    fn finish(&self, x: &[f64], z: &mut [f64]) {
        if self.adaptor.mode == AdaptorMode::Residual {
            for (o, v) in z.iter_mut().zip(x) {
                *o += v;
            }
        }
        if let Some((lo, hi)) = self.adaptor.clamp {
            for o in z.iter_mut() {
                *o = o.clamp(lo, hi);
            }
        }
    }

    pub fn adapt(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.net.forward(x)?;
        self.finish(x.data(), z.data_mut());
        Ok(z)
    }

    pub fn adapt_sample(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.net.forward_sample(x)?;
        self.finish(x, &mut z);
        Ok(z)
    }
}
