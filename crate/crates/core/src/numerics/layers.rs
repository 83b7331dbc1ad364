//! Layer kinds with explicit forward and backward passes.
//!
//! All layers operate on batched tensors whose leading axis is the batch.
//! Dense layers take `[B, in]`; spatial layers take `[B, C, H, W]`.
//! `forward` caches what `backward` needs, `infer` leaves the layer untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor together with its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Serializable description of a layer's architecture (no parameter values).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Upsample {
        factor: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    /// Builds a layer with uniform He-style fan-in initialization; biases start at zero.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Layer> {
        let he = |fan_in: usize, len: usize, rng: &mut R| -> Vec<f64> {
            let limit = (6.0 / fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
        };
        Ok(match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
            } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::InvalidArgument("dense dims must be positive".into()));
                }
                let w = Tensor::new(vec![outputs, inputs], he(inputs, inputs * outputs, rng))?;
                Layer::Dense(Dense::from_params(w, bias.then(|| Tensor::zeros(&[outputs])))?)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidArgument(
                        "conv2d dims and stride must be positive".into(),
                    ));
                }
                let fan_in = in_channels * kernel * kernel;
                let w = Tensor::new(
                    vec![out_channels, in_channels, kernel, kernel],
                    he(fan_in, fan_in * out_channels, rng),
                )?;
                Layer::Conv2d(Conv2d::from_params(
                    w,
                    bias.then(|| Tensor::zeros(&[out_channels])),
                    stride,
                    padding,
                )?)
            }
            LayerSpec::Upsample { factor } => {
                if factor == 0 {
                    return Err(Error::InvalidArgument("upsample factor must be positive".into()));
                }
                Layer::Upsample(Upsample::new(factor))
            }
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Sigmoid => Layer::Sigmoid(Sigmoid::default()),
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
            LayerSpec::Reshape { ref shape } => Layer::Reshape(Reshape::new(shape.clone())),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Upsample(Upsample),
    Relu(Relu),
    Sigmoid(Sigmoid),
    Flatten(Flatten),
    Reshape(Reshape),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Dense($l) => $body,
            Layer::Conv2d($l) => $body,
            Layer::Upsample($l) => $body,
            Layer::Relu($l) => $body,
            Layer::Sigmoid($l) => $body,
            Layer::Flatten($l) => $body,
            Layer::Reshape($l) => $body,
        }
    };
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Upsample(_) => "upsample",
            Layer::Relu(_) => "relu",
            Layer::Sigmoid(_) => "sigmoid",
            Layer::Flatten(_) => "flatten",
            Layer::Reshape(_) => "reshape",
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs(),
                outputs: d.outputs(),
                bias: d.bias.is_some(),
            },
            Layer::Conv2d(c) => {
                let s = c.weight.value.shape();
                LayerSpec::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: s[2],
                    stride: c.stride,
                    padding: c.padding,
                    bias: c.bias.is_some(),
                }
            }
            Layer::Upsample(u) => LayerSpec::Upsample { factor: u.factor },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Sigmoid(_) => LayerSpec::Sigmoid,
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Reshape(r) => LayerSpec::Reshape {
                shape: r.shape.clone(),
            },
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.forward(x))
    }

    /// Stateless evaluation; no cache is written.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.compute(x))
    }

    /// Propagates `grad` (dL/d output) back, storing parameter gradients and
    /// returning dL/d input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.backward(grad))
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => std::iter::once(&d.weight).chain(d.bias.as_ref()).collect(),
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => std::iter::once(&mut d.weight).chain(d.bias.as_mut()).collect(),
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            _ => Vec::new(),
        }
    }

    /// The weight parameter (biases excluded) of a parameterized layer.
    pub fn weight(&self) -> Option<&Param> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn clear_cache(&mut self) {
        dispatch!(self, l => l.cache = None)
    }
}

fn expect_rank(x: &Tensor, rank: usize, ctx: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::shape(
            ctx,
            format!("rank-{rank} input"),
            x.shape(),
        ));
    }
    Ok(())
}

fn take_cache<'a, T>(cache: &'a Option<T>, name: &str) -> Result<&'a T> {
    cache
        .as_ref()
        .ok_or_else(|| Error::NoForwardCache(name.to_string()))
}

fn check_grad_shape(grad: &Tensor, expected: &[usize], ctx: &str) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::shape(ctx, expected, grad.shape()));
    }
    Ok(())
}

/// Fully connected layer, `y = W x + b` with `W` of shape `[outputs, inputs]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn from_params(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape("dense weight", "[outputs, inputs]", weight.shape()));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape("dense bias", [weight.shape()[0]], b.shape()));
            }
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "dense")?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if x.shape()[1] != n_in {
            return Err(Error::shape("dense", [x.shape()[0], n_in], x.shape()));
        }
        let batch = x.shape()[0];
        let w = self.weight.value.data();
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xr = x.row(b);
            let yr = &mut out[b * n_out..(b + 1) * n_out];
            for (o, y) in yr.iter_mut().enumerate() {
                let wr = &w[o * n_in..(o + 1) * n_in];
                *y = wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
            if let Some(bias) = &self.bias {
                for (y, bv) in yr.iter_mut().zip(bias.value.data()) {
                    *y += bv;
                }
            }
        }
        Tensor::new(vec![batch, n_out], out)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_cache(&self.cache, "dense")?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let batch = x.shape()[0];
        check_grad_shape(grad, &[batch, n_out], "dense backward")?;
        let g = grad.data();
        let w = self.weight.value.data();

        let gw = self.weight.grad.data_mut();
        gw.fill(0.0);
        for b in 0..batch {
            let xr = x.row(b);
            for o in 0..n_out {
                let go = g[b * n_out + o];
                if go != 0.0 {
                    for (acc, xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                        *acc += go * xv;
                    }
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            let gb = bias.grad.data_mut();
            gb.fill(0.0);
            for b in 0..batch {
                for (acc, gv) in gb.iter_mut().zip(&g[b * n_out..(b + 1) * n_out]) {
                    *acc += gv;
                }
            }
        }
        let mut gx = vec![0.0; batch * n_in];
        for b in 0..batch {
            let gxr = &mut gx[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let go = g[b * n_out + o];
                if go != 0.0 {
                    for (acc, wv) in gxr.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *acc += go * wv;
                    }
                }
            }
        }
        Tensor::new(vec![batch, n_in], gx)
    }
}

/// 2-D convolution (cross-correlation) with square kernels, zero padding and
/// an integer stride. Weight shape `[out_channels, in_channels, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

/// Valid output-index range `[lo, hi)` for kernel offset `k` so that
/// `o * stride + k - pad` stays inside `[0, size)`.
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn from_params(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape("conv2d weight", "[out, in, k, k]", s));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape("conv2d bias", [s[0]], b.shape()));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            stride,
            padding,
            cache: None,
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    pub fn output_side(&self, side: usize) -> Option<usize> {
        let (_, _, k) = self.dims();
        (side + 2 * self.padding)
            .checked_sub(k)
            .map(|v| v / self.stride + 1)
    }

    fn geometry(&self, x: &Tensor) -> Result<[usize; 6]> {
        expect_rank(x, 4, "conv2d")?;
        let (_, c_in, _) = self.dims();
        let s = x.shape();
        if s[1] != c_in {
            return Err(Error::shape("conv2d", format!("[B, {c_in}, H, W]"), s));
        }
        let ho = self.output_side(s[2]);
        let wo = self.output_side(s[3]);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok([s[0], s[1], s[2], s[3], ho, wo]),
            _ => Err(Error::shape("conv2d", "spatial size >= kernel", s)),
        }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let [batch, c_in, h, w, ho, wo] = self.geometry(x)?;
        let (c_out, _, k) = self.dims();
        let (s, p) = (self.stride, self.padding);
        let wt = self.weight.value.data();
        let xd = x.data();
        let mut out = vec![0.0; batch * c_out * ho * wo];
        for b in 0..batch {
            for o in 0..c_out {
                let plane = &mut out[((b * c_out) + o) * ho * wo..((b * c_out) + o + 1) * ho * wo];
                if let Some(bias) = &self.bias {
                    plane.fill(bias.value.data()[o]);
                }
                for c in 0..c_in {
                    let xin = &xd[((b * c_in) + c) * h * w..((b * c_in) + c + 1) * h * w];
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, p, s, h, ho);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(kx, p, s, w, wo);
                            let wv = wt[((o * c_in + c) * k + ky) * k + kx];
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let row = &xin[iy * w..(iy + 1) * w];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for ox in x0..x1 {
                                    orow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch, c_out, ho, wo], out)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_cache(&self.cache, "conv2d")?;
        let [batch, c_in, h, w, ho, wo] = self.geometry(x)?;
        let (c_out, _, k) = self.dims();
        check_grad_shape(grad, &[batch, c_out, ho, wo], "conv2d backward")?;
        let (s, p) = (self.stride, self.padding);
        let xd = x.data();
        let gd = grad.data();
        let wt = self.weight.value.data();

        let mut gw = vec![0.0; wt.len()];
        let mut gx = vec![0.0; xd.len()];
        for b in 0..batch {
            for o in 0..c_out {
                let gplane = &gd[((b * c_out) + o) * ho * wo..((b * c_out) + o + 1) * ho * wo];
                for c in 0..c_in {
                    let base = ((b * c_in) + c) * h * w;
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, p, s, h, ho);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(kx, p, s, w, wo);
                            let widx = ((o * c_in + c) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                let rbase = base + iy * w;
                                for ox in x0..x1 {
                                    let ix = ox * s + kx - p;
                                    acc += grow[ox] * xd[rbase + ix];
                                    gx[rbase + ix] += grow[ox] * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        self.weight.grad = Tensor::new(self.weight.value.shape().to_vec(), gw)?;
        if let Some(bias) = &mut self.bias {
            let gb = bias.grad.data_mut();
            gb.fill(0.0);
            for b in 0..batch {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let start = ((b * c_out) + o) * ho * wo;
                    *acc += gd[start..start + ho * wo].iter().sum::<f64>();
                }
            }
        }
        Tensor::new(x.shape().to_vec(), gx)
    }
}

/// Nearest-neighbour spatial upsampling by an integer factor.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub factor: usize,
    cache: Option<Vec<usize>>,
}

impl Upsample {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "upsample")?;
        let s = x.shape();
        let f = self.factor;
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * f, w * f);
        let planes = s[0] * s[1];
        let xd = x.data();
        let mut out = vec![0.0; planes * ho * wo];
        for pl in 0..planes {
            let src = &xd[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for oy in 0..ho {
                let srow = &src[(oy / f) * w..(oy / f + 1) * w];
                for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    *v = srow[ox / f];
                }
            }
        }
        Tensor::new(vec![s[0], s[1], ho, wo], out)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let s = take_cache(&self.cache, "upsample")?.clone();
        let f = self.factor;
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * f, w * f);
        check_grad_shape(grad, &[s[0], s[1], ho, wo], "upsample backward")?;
        let planes = s[0] * s[1];
        let gd = grad.data();
        let mut gx = vec![0.0; planes * h * w];
        for pl in 0..planes {
            let src = &gd[pl * ho * wo..(pl + 1) * ho * wo];
            let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(oy / f) * w + ox / f] += src[oy * wo + ox];
                }
            }
        }
        Tensor::new(s, gx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_cache(&self.cache, "relu")?;
        check_grad_shape(grad, x.shape(), "relu backward")?;
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Sigmoid {
    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = take_cache(&self.cache, "sigmoid")?;
        check_grad_shape(grad, y.shape(), "sigmoid backward")?;
        let data = y
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// `[B, ...]` to `[B, prod(...)]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() < 2 {
            return Err(Error::shape("flatten", "rank >= 2", x.shape()));
        }
        x.clone().reshape(&[x.batch(), x.row_len()])
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let s = take_cache(&self.cache, "flatten")?;
        grad.clone().reshape(s)
    }
}

/// `[B, n]` to `[B, shape...]` where `prod(shape) == n`.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub shape: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(shape: Vec<usize>) -> Self {
        Self { shape, cache: None }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let n: usize = self.shape.iter().product();
        if x.shape().len() < 2 || x.row_len() != n {
            return Err(Error::shape("reshape", format!("[B, {n}]"), x.shape()));
        }
        let mut target = vec![x.batch()];
        target.extend_from_slice(&self.shape);
        x.clone().reshape(&target)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let s = take_cache(&self.cache, "reshape")?;
        grad.clone().reshape(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for k in 0..5 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for size in 1..9 {
                        let out = 12;
                        let (lo, hi) = valid_range(k, pad, stride, size, out);
                        for o in 0..out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let ok = i >= 0 && (i as usize) < size;
                            assert_eq!(ok, o >= lo && o < hi, "k{k} p{pad} s{stride} n{size} o{o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let conv = Conv2d::from_params(w, None, 1, 1).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(conv.compute(&x).unwrap(), x);
    }

    #[test]
    fn strided_conv_output_side() {
        let conv = Conv2d::from_params(Tensor::zeros(&[2, 1, 3, 3]), None, 2, 1).unwrap();
        let y = conv.compute(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let up = Upsample::new(2);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = up.compute(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut relu = Layer::Relu(Relu::default());
        let err = relu.backward(&Tensor::zeros(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::NoForwardCache(_)));
    }
}
