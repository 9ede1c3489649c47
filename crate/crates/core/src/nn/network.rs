use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layer::Layer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered stack of layers with a fixed per-sample input shape.
///
/// Evaluation takes `&self`, so one network can be shared across worker
/// threads. Parameters only change through [`Network::set_params`] or
/// [`Network::unflatten_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input sample shape of layer `i`; the final entry is
    /// the network output shape.
    shapes: Vec<Vec<usize>>,
}

/// Gradients returned by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Summed over the batch, laid out like [`Network::flatten_params`].
    pub params: Tensor,
    pub input: Tensor,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid network input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Layer order, weights before biases, row-major within each buffer.
    pub fn flatten_params(&self) -> Tensor {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.write_params(&mut flat);
        }
        Tensor::vector(flat)
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.write_params(&mut flat);
        }
        flat
    }

    pub fn unflatten_params(&self, flat: &Tensor) -> Result<Network> {
        let mut net = self.clone();
        net.set_params(flat.data())?;
        Ok(net)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.param_count();
            layer.read_params(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Fills weights from `N(0, 1/fan_in)` and zeroes biases. Affine
    /// instance-norm parameters are reset to scale 1, shift 0.
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let n = layer.param_count();
            match layer.fan_in() {
                Some(fan_in) => {
                    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                    let nw = layer.weight_count();
                    flat.extend((0..nw).map(|_| normal.sample(rng)));
                    flat.extend(std::iter::repeat_n(0.0, n - nw));
                }
                None => {
                    let half = n / 2;
                    flat.extend(std::iter::repeat_n(1.0, half));
                    flat.extend(std::iter::repeat_n(0.0, n - half));
                }
            }
        }
        self.set_params(&flat)
            .expect("length matches by construction");
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1
            || x.sample_shape() != self.input_shape.as_slice()
        {
            let mut expected = vec![x.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(&expected, x.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let out_len: usize = self.output_shape().iter().product();
        let mut data = Vec::with_capacity(x.batch_size() * out_len);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..x.batch_size() {
            self.forward_sample_into(x.sample(i), &mut a, &mut b);
            data.extend_from_slice(&a);
        }
        let mut shape = vec![x.batch_size()];
        shape.extend_from_slice(self.output_shape());
        Tensor::new(shape, data)
    }

    /// Evaluates one sample given as a flat slice of the input shape.
    pub fn forward_sample(&self, x: &[f64]) -> Result<Vec<f64>> {
        let expected: usize = self.input_shape.iter().product();
        if x.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: x.len(),
            });
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.forward_sample_into(x, &mut a, &mut b);
        Ok(a)
    }

    /// Result ends up in `out`; `scratch` is reused between layers.
    fn forward_sample_into(&self, x: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            layer.forward(shape, out, scratch);
            std::mem::swap(out, scratch);
        }
    }

    /// Back-propagates `upstream` (shaped like the forward output) to the
    /// parameters and the input. The forward pass is recomputed per sample.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<Gradients> {
        self.check_input(x)?;
        let mut expected = vec![x.batch_size()];
        expected.extend_from_slice(self.output_shape());
        if upstream.shape() != expected.as_slice() {
            return Err(Error::shape(&expected, upstream.shape()));
        }
        if !upstream.all_finite() {
            return Err(Error::non_finite("upstream gradient"));
        }
        let mut dparams = vec![0.0; self.param_count()];
        let mut dinput = Vec::with_capacity(x.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        for i in 0..x.batch_size() {
            acts.clear();
            acts.push(x.sample(i).to_vec());
            for (layer, shape) in self.layers.iter().zip(&self.shapes) {
                let mut out = Vec::new();
                layer.forward(shape, acts.last().unwrap(), &mut out);
                acts.push(out);
            }
            let mut grad = upstream.sample(i).to_vec();
            let mut next = Vec::new();
            let mut offset = dparams.len();
            for (li, layer) in self.layers.iter().enumerate().rev() {
                let n = layer.param_count();
                offset -= n;
                layer.backward(
                    &self.shapes[li],
                    &acts[li],
                    &acts[li + 1],
                    &grad,
                    &mut next,
                    &mut dparams[offset..offset + n],
                );
                std::mem::swap(&mut grad, &mut next);
            }
            dinput.extend_from_slice(&grad);
        }
        Ok(Gradients {
            params: Tensor::vector(dparams),
            input: Tensor::new(x.shape().to_vec(), dinput)?,
        })
    }
}
