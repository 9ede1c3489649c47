//! The five layer kinds and their per-sample forward/backward kernels.
//!
//! Every kernel works on one sample at a time. Batched evaluation in
//! [`Network`](super::Network) is a loop over samples, which keeps results
//! independent of batch composition.

use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    InstanceNorm,
    Relu,
    Softmax,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::InstanceNorm => "instance_norm",
            LayerKind::Relu => "relu",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with `kernel / 2` padding, so odd kernels keep the spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fully connected; weights are `outputs x inputs` row-major. Any input
    /// sample shape whose element count equals `inputs` is accepted.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    /// 2-D convolution over `[channels, height, width]` samples; weights are
    /// `[out, in, k, k]` row-major.
    Conv2d {
        spec: Conv2dSpec,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    /// Per-sample, per-channel normalization over the spatial axes. The affine
    /// scale/shift is optional and stored as `gamma` then `beta`.
    InstanceNorm {
        channels: usize,
        eps: f64,
        affine: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu,
    /// Softmax over the last axis of each sample.
    Softmax,
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn conv2d(spec: Conv2dSpec) -> Self {
        Layer::Conv2d {
            spec,
            weights: vec![0.0; spec.weight_count()],
            biases: vec![0.0; spec.out_channels],
        }
    }

    pub fn instance_norm(channels: usize) -> Self {
        Layer::InstanceNorm {
            channels,
            eps: DEFAULT_NORM_EPS,
            affine: None,
        }
    }

    /// Instance norm with learnable scale (initialised to 1) and shift (0).
    pub fn instance_norm_affine(channels: usize) -> Self {
        Layer::InstanceNorm {
            channels,
            eps: DEFAULT_NORM_EPS,
            affine: Some((vec![1.0; channels], vec![0.0; channels])),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::InstanceNorm { .. } => LayerKind::InstanceNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    /// dense: `in*out + out`; conv2d: `out*in*k*k + out`; instance norm:
    /// `2*channels` with affine, else 0; relu and softmax: 0.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            Layer::Conv2d { spec, .. } => spec.weight_count() + spec.out_channels,
            Layer::InstanceNorm {
                channels, affine, ..
            } => {
                if affine.is_some() {
                    2 * channels
                } else {
                    0
                }
            }
            Layer::Relu | Layer::Softmax => 0,
        }
    }

    /// Fan-in used for weight initialisation, `None` for parameter-free layers.
    pub fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::Dense { inputs, .. } => Some(*inputs),
            Layer::Conv2d { spec, .. } => Some(spec.in_channels * spec.kernel * spec.kernel),
            _ => None,
        }
    }

    /// Number of leading parameters that are weights (the rest are biases).
    pub(crate) fn weight_count(&self) -> usize {
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs,
            Layer::Conv2d { spec, .. } => spec.weight_count(),
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                let n: usize = input.iter().product();
                if n != *inputs || input.is_empty() {
                    return Err(Error::shape(&[*inputs], input));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d { spec, .. } => {
                let hw = match input {
                    [c, h, w] if *c == spec.in_channels => spec.output_hw(*h, *w),
                    _ => None,
                };
                match hw {
                    Some((oh, ow)) => Ok(vec![spec.out_channels, oh, ow]),
                    None => Err(Error::shape(&[spec.in_channels, 0, 0], input)),
                }
            }
            Layer::InstanceNorm { channels, .. } => {
                if input.len() < 2 || input[0] != *channels {
                    return Err(Error::shape(&[*channels, 0], input));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Softmax => {
                if input.is_empty() {
                    return Err(Error::shape(&[1], input));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Dense {
                weights, biases, ..
            }
            | Layer::Conv2d {
                weights, biases, ..
            } => {
                out.extend_from_slice(weights);
                out.extend_from_slice(biases);
            }
            Layer::InstanceNorm {
                affine: Some((gamma, beta)),
                ..
            } => {
                out.extend_from_slice(gamma);
                out.extend_from_slice(beta);
            }
            _ => {}
        }
    }

    /// Overwrites this layer's parameters from the front of `src`.
    pub(crate) fn read_params(&mut self, src: &[f64]) {
        match self {
            Layer::Dense {
                weights, biases, ..
            }
            | Layer::Conv2d {
                weights, biases, ..
            } => {
                let (nw, nb) = (weights.len(), biases.len());
                weights.copy_from_slice(&src[..nw]);
                biases.copy_from_slice(&src[nw..nw + nb]);
            }
            Layer::InstanceNorm {
                affine: Some((gamma, beta)),
                ..
            } => {
                let c = gamma.len();
                gamma.copy_from_slice(&src[..c]);
                beta.copy_from_slice(&src[c..2 * c]);
            }
            _ => {}
        }
    }

    /// Evaluates one sample. `shape` is the validated input sample shape.
    pub(crate) fn forward(&self, shape: &[usize], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Layer::Dense {
                inputs,
                outputs,
                weights,
                biases,
            } => {
                out.extend_from_slice(biases);
                for (o, y) in out.iter_mut().enumerate().take(*outputs) {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    *y += dot(row, x);
                }
            }
            Layer::Conv2d {
                spec,
                weights,
                biases,
            } => conv_forward(spec, shape[1], shape[2], x, weights, biases, out),
            Layer::InstanceNorm {
                channels,
                eps,
                affine,
            } => {
                let plane = x.len() / channels;
                out.resize(x.len(), 0.0);
                for c in 0..*channels {
                    let xs = &x[c * plane..(c + 1) * plane];
                    let (mean, inv_std) = moments(xs, *eps);
                    let (g, b) = match affine {
                        Some((gamma, beta)) => (gamma[c], beta[c]),
                        None => (1.0, 0.0),
                    };
                    for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(xs) {
                        *o = (v - mean) * inv_std * g + b;
                    }
                }
            }
            Layer::Relu => out.extend(x.iter().map(|&v| v.max(0.0))),
            Layer::Softmax => {
                let last = *shape.last().unwrap();
                out.resize(x.len(), 0.0);
                for (xs, ys) in x.chunks(last).zip(out.chunks_mut(last)) {
                    softmax_into(xs, ys);
                }
            }
        }
    }

    /// Back-propagates `dy` through one sample. `x`/`y` are the cached input
    /// and output of [`Layer::forward`]. Parameter gradients are accumulated
    /// into `dparams` (length [`Layer::param_count`]); `dx` is overwritten.
    pub(crate) fn backward(
        &self,
        shape: &[usize],
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        dx: &mut Vec<f64>,
        dparams: &mut [f64],
    ) {
        dx.clear();
        dx.resize(x.len(), 0.0);
        match self {
            Layer::Dense {
                inputs,
                outputs,
                weights,
                ..
            } => {
                let (dw, db) = dparams.split_at_mut(inputs * outputs);
                for o in 0..*outputs {
                    let g = dy[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    let drow = &mut dw[o * inputs..(o + 1) * inputs];
                    for i in 0..*inputs {
                        drow[i] += g * x[i];
                        dx[i] += g * row[i];
                    }
                }
            }
            Layer::Conv2d { spec, weights, .. } => {
                conv_backward(spec, shape[1], shape[2], x, weights, dy, dx, dparams)
            }
            Layer::InstanceNorm {
                channels,
                eps,
                affine,
            } => {
                let plane = x.len() / channels;
                let n = plane as f64;
                for c in 0..*channels {
                    let xs = &x[c * plane..(c + 1) * plane];
                    let dys = &dy[c * plane..(c + 1) * plane];
                    let (mean, inv_std) = moments(xs, *eps);
                    let g = match affine {
                        Some((gamma, _)) => gamma[c],
                        None => 1.0,
                    };
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    let mut sum_dy = 0.0;
                    for (&v, &d) in xs.iter().zip(dys) {
                        let xhat = (v - mean) * inv_std;
                        let dxhat = d * g;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        sum_dy_xhat += d * xhat;
                        sum_dy += d;
                    }
                    if affine.is_some() {
                        dparams[c] += sum_dy_xhat;
                        dparams[channels + c] += sum_dy;
                    }
                    for ((o, &v), &d) in dx[c * plane..(c + 1) * plane].iter_mut().zip(xs).zip(dys)
                    {
                        let xhat = (v - mean) * inv_std;
                        *o = inv_std / n * (n * d * g - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
            Layer::Relu => {
                for ((o, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
                    *o = if v > 0.0 { d } else { 0.0 };
                }
            }
            Layer::Softmax => {
                let last = *shape.last().unwrap();
                for ((ys, ds), os) in y.chunks(last).zip(dy.chunks(last)).zip(dx.chunks_mut(last)) {
                    let s: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &d) in os.iter_mut().zip(ys).zip(ds) {
                        *o = yy * (d - s);
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_into(xs: &[f64], ys: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (y, &x) in ys.iter_mut().zip(xs) {
        *y = (x - max).exp();
        sum += *y;
    }
    for y in ys.iter_mut() {
        *y /= sum;
    }
}

/// Output positions `o` along one axis for which `o*stride + k - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // need o*stride + k >= pad  and  o*stride + k - pad < len
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_excl = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

fn conv_forward(
    spec: &Conv2dSpec,
    h: usize,
    w: usize,
    x: &[f64],
    weights: &[f64],
    biases: &[f64],
    out: &mut Vec<f64>,
) {
    let (oh, ow) = spec.output_hw(h, w).expect("validated shape");
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    out.resize(spec.out_channels * oh * ow, 0.0);
    for oc in 0..spec.out_channels {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(biases[oc]);
        for ic in 0..spec.in_channels {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, p, s, h, oh);
                for kx in 0..k {
                    let wv = weights[((oc * spec.in_channels + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, p, s, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            for (o, &v) in orow[x0..x1].iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    spec: &Conv2dSpec,
    h: usize,
    w: usize,
    x: &[f64],
    weights: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dparams: &mut [f64],
) {
    let (oh, ow) = spec.output_hw(h, w).expect("validated shape");
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    let nw = spec.weight_count();
    let (dw, db) = dparams.split_at_mut(nw);
    for oc in 0..spec.out_channels {
        let gplane = &dy[oc * oh * ow..(oc + 1) * oh * ow];
        db[oc] += gplane.iter().sum::<f64>();
        for ic in 0..spec.in_channels {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            let dxin = &mut dx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, p, s, h, oh);
                for kx in 0..k {
                    let widx = ((oc * spec.in_channels + ic) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let (x0, x1) = valid_range(kx, p, s, w, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        for ox in x0..x1 {
                            let ix = ox * s + kx - p;
                            let g = gplane[oy * ow + ox];
                            acc += g * xin[iy * w + ix];
                            dxin[iy * w + ix] += g * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}
