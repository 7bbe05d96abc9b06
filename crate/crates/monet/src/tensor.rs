//! Minimal deterministic differentiable substrate.
//!
//! Dense layers, 2D convolution, activations, nearest-neighbor upsampling,
//! an Adam optimizer and a finite-difference gradient checker. Everything
//! runs on 64-bit reals and is bit-deterministic given the same seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MonetError, Result};

/// Dense n-dimensional value with shape, row-major data and an accumulated
/// gradient of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MonetError::ShapeMismatch {
                layer: "tensor".to_string(),
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        let n = data.len();
        Ok(Self {
            shape,
            data,
            grad: vec![0.0; n],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform init in `[-limit, limit]` from a seeded generator.
    pub fn uniform(shape: Vec<usize>, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self {
            shape,
            data,
            grad: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `delta` elementwise into the accumulated gradient.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(self.grad.len(), delta.len());
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

fn shape_err(layer: &str, expected: String, got: String) -> MonetError {
    MonetError::ShapeMismatch {
        layer: layer.to_string(),
        expected,
        got,
    }
}

/// Numerically stable logistic function, clamped so the result stays
/// strictly inside (0, 1) even when the exact value would round to 0 or 1.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

// ---------------------------------------------------------------------------
// Parametric layers
// ---------------------------------------------------------------------------

/// 2D convolution with zero ("same") padding; spatial size is controlled
/// solely by the stride. Kernel shape `[out_c, in_c, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            kernel: Tensor::uniform(vec![out_c, in_c, k, k], limit, rng),
            bias: Tensor::zeros(vec![out_c]),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape[2]
    }
}

/// Fully connected layer `y = Wx + b` with weight shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Tensor::uniform(vec![output, input], limit, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }
}

pub fn conv2d_forward(conv: &Conv2d, input: &Tensor) -> Result<Tensor> {
    if input.shape.len() != 3 || input.shape[0] != conv.in_channels() {
        return Err(shape_err(
            "conv2d",
            format!("[{}, h, w] input", conv.in_channels()),
            format!("{:?}", input.shape),
        ));
    }
    let (in_c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (out_c, k, t) = (conv.out_channels(), conv.kernel_size(), conv.stride);
    let p = (k - 1) / 2;
    let oh = (h + t - 1) / t;
    let ow = (w + t - 1) / t;
    let mut out = vec![0.0; out_c * oh * ow];
    let kd = &conv.kernel.data;
    let id = &input.data;
    for oc in 0..out_c {
        let b = conv.bias.data[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..in_c {
                    let kbase = ((oc * in_c) + ic) * k * k;
                    let ibase = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy * t + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = ibase + iy as usize * w;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            let ix = (ox * t + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kd[krow + kx] * id[row + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out)
}

/// Returns `(input_grad, kernel_grad, bias_grad)`.
pub fn conv2d_backward(
    conv: &Conv2d,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (in_c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (out_c, k, t) = (conv.out_channels(), conv.kernel_size(), conv.stride);
    let p = (k - 1) / 2;
    let oh = (h + t - 1) / t;
    let ow = (w + t - 1) / t;
    if upstream.shape != vec![out_c, oh, ow] {
        return Err(shape_err(
            "conv2d backward",
            format!("[{out_c}, {oh}, {ow}] upstream"),
            format!("{:?}", upstream.shape),
        ));
    }
    let mut d_in = vec![0.0; in_c * h * w];
    let mut d_k = vec![0.0; conv.kernel.numel()];
    let mut d_b = vec![0.0; out_c];
    let kd = &conv.kernel.data;
    let id = &input.data;
    let ud = &upstream.data;
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = ud[(oc * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                d_b[oc] += g;
                for ic in 0..in_c {
                    let kbase = ((oc * in_c) + ic) * k * k;
                    let ibase = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy * t + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = ibase + iy as usize * w;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            let ix = (ox * t + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            d_k[krow + kx] += g * id[row + ix as usize];
                            d_in[row + ix as usize] += g * kd[krow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![in_c, h, w], d_in)?,
        Tensor::new(conv.kernel.shape.clone(), d_k)?,
        Tensor::new(vec![out_c], d_b)?,
    ))
}

pub fn dense_forward(dense: &Dense, input: &Tensor) -> Result<Tensor> {
    if input.numel() != dense.in_dim() {
        return Err(shape_err(
            "dense",
            format!("{} inputs", dense.in_dim()),
            format!("{:?}", input.shape),
        ));
    }
    let (out, inp) = (dense.out_dim(), dense.in_dim());
    let mut y = vec![0.0; out];
    for o in 0..out {
        let row = &dense.weight.data[o * inp..(o + 1) * inp];
        let mut acc = dense.bias.data[o];
        for (wv, xv) in row.iter().zip(&input.data) {
            acc += wv * xv;
        }
        y[o] = acc;
    }
    Tensor::new(vec![out], y)
}

/// Returns `(input_grad, weight_grad, bias_grad)`:
/// `dW = g xᵀ`, `db = g`, `dx = Wᵀ g`.
pub fn dense_backward(
    dense: &Dense,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (out, inp) = (dense.out_dim(), dense.in_dim());
    if upstream.numel() != out {
        return Err(shape_err(
            "dense backward",
            format!("{out} upstream values"),
            format!("{:?}", upstream.shape),
        ));
    }
    let mut d_in = vec![0.0; inp];
    let mut d_w = vec![0.0; out * inp];
    for o in 0..out {
        let g = upstream.data[o];
        let row = &dense.weight.data[o * inp..(o + 1) * inp];
        let drow = &mut d_w[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] = g * input.data[i];
            d_in[i] += g * row[i];
        }
    }
    Ok((
        Tensor::new(vec![inp], d_in)?,
        Tensor::new(dense.weight.shape.clone(), d_w)?,
        Tensor::new(vec![out], upstream.data.clone())?,
    ))
}

// ---------------------------------------------------------------------------
// Parameter-free layers
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape.clone(),
        grad: vec![0.0; input.numel()],
        data,
    }
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape != upstream.shape {
        return Err(shape_err(
            "relu backward",
            format!("{:?}", input.shape),
            format!("{:?}", upstream.shape),
        ));
    }
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor {
        shape: input.shape.clone(),
        grad: vec![0.0; input.numel()],
        data,
    }
}

/// Backward through the logistic function given its *output* values.
pub fn sigmoid_backward_from_output(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if output.shape != upstream.shape {
        return Err(shape_err(
            "sigmoid backward",
            format!("{:?}", output.shape),
            format!("{:?}", upstream.shape),
        ));
    }
    let data = output
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape.clone(), data)
}

/// Nearest-neighbor 2x upsampling of a `[c, h, w]` map.
pub fn upsample2x_forward(input: &Tensor) -> Result<Tensor> {
    if input.shape.len() != 3 {
        return Err(shape_err(
            "upsample2x",
            "[c, h, w] input".to_string(),
            format!("{:?}", input.shape),
        ));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = input.data[(ch * h + y) * w + x];
                let base = (ch * oh + 2 * y) * ow + 2 * x;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample2x_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if upstream.shape != vec![c, 2 * h, 2 * w] {
        return Err(shape_err(
            "upsample2x backward",
            format!("[{}, {}, {}] upstream", c, 2 * h, 2 * w),
            format!("{:?}", upstream.shape),
        ));
    }
    let ow = 2 * w;
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = (ch * 2 * h + 2 * y) * ow + 2 * x;
                d_in[(ch * h + y) * w + x] = upstream.data[base]
                    + upstream.data[base + 1]
                    + upstream.data[base + ow]
                    + upstream.data[base + ow + 1];
            }
        }
    }
    Tensor::new(vec![c, h, w], d_in)
}

/// Stacks two `[c, h, w]` maps along the channel axis.
pub fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[1..] != b.shape[1..] {
        return Err(shape_err(
            "concat_channels",
            format!("matching spatial dims, lhs {:?}", a.shape),
            format!("{:?}", b.shape),
        ));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(vec![a.shape[0] + b.shape[0], a.shape[1], a.shape[2]], data)
}

pub fn concat_channels_backward(
    a_channels: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (upstream.shape[0], upstream.shape[1], upstream.shape[2]);
    if a_channels > c {
        return Err(shape_err(
            "concat_channels backward",
            format!("at least {a_channels} channels"),
            format!("{c}"),
        ));
    }
    let split = a_channels * h * w;
    Ok((
        Tensor::new(vec![a_channels, h, w], upstream.data[..split].to_vec())?,
        Tensor::new(vec![c - a_channels, h, w], upstream.data[split..].to_vec())?,
    ))
}

// ---------------------------------------------------------------------------
// Layer enum: the uniform surface used by the gradient checker
// ---------------------------------------------------------------------------

/// One layer of the fixed network topology.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    Upsample2x,
    /// Stacks its two inputs along the channel axis.
    ConcatChannels,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Upsample2x => "upsample2x",
            Layer::ConcatChannels => "concat_channels",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Layer::ConcatChannels => 2,
            _ => 1,
        }
    }

    /// Forward pass. Deterministic given `(layer, inputs)`.
    pub fn apply(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.arity() {
            return Err(shape_err(
                self.kind(),
                format!("{} input(s)", self.arity()),
                format!("{}", inputs.len()),
            ));
        }
        let out = match self {
            Layer::Conv2d(c) => conv2d_forward(c, inputs[0])?,
            Layer::Dense(d) => dense_forward(d, inputs[0])?,
            Layer::Relu => relu_forward(inputs[0]),
            Layer::Sigmoid => sigmoid_forward(inputs[0]),
            Layer::Upsample2x => upsample2x_forward(inputs[0])?,
            Layer::ConcatChannels => concat_channels_forward(inputs[0], inputs[1])?,
        };
        debug_assert!(out.is_finite(), "{} produced non-finite values", self.kind());
        Ok(out)
    }

    /// Exact analytic gradients of the forward map.
    /// Returns one gradient per input plus one per parameter tensor.
    pub fn backprop(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if inputs.len() != self.arity() {
            return Err(shape_err(
                self.kind(),
                format!("{} input(s)", self.arity()),
                format!("{}", inputs.len()),
            ));
        }
        match self {
            Layer::Conv2d(c) => {
                let (di, dk, db) = conv2d_backward(c, inputs[0], upstream)?;
                Ok((vec![di], vec![dk, db]))
            }
            Layer::Dense(d) => {
                let (di, dw, db) = dense_backward(d, inputs[0], upstream)?;
                Ok((vec![di], vec![dw, db]))
            }
            Layer::Relu => Ok((vec![relu_backward(inputs[0], upstream)?], vec![])),
            Layer::Sigmoid => {
                let out = sigmoid_forward(inputs[0]);
                Ok((vec![sigmoid_backward_from_output(&out, upstream)?], vec![]))
            }
            Layer::Upsample2x => Ok((vec![upsample2x_backward(&inputs[0].shape, upstream)?], vec![])),
            Layer::ConcatChannels => {
                let (da, db) = concat_channels_backward(inputs[0].shape[0], upstream)?;
                Ok((vec![da, db], vec![]))
            }
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("kernel", &c.kernel), ("bias", &c.bias)],
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("kernel", &mut c.kernel), ("bias", &mut c.bias)],
            Layer::Dense(d) => vec![("weight", &mut d.weight), ("bias", &mut d.bias)],
            _ => vec![],
        }
    }
}

/// Single-input convenience wrapper around [`Layer::apply`].
pub fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    layer.apply(&[input])
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Per-parameter-block Adam state with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update. Fails fast on non-finite gradients: those are training
/// bugs, not conditions to optimize through.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    block: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam",
            format!("{} values", state.m.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(MonetError::NonFiniteGradient {
            block: block.to_string(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor applied to the denominator of the relative error so that
/// finite-difference noise on near-zero gradients does not dominate.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| !b.flagged)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares an analytic gradient block against a numeric one.
pub fn compare_gradient_block(
    name: &str,
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
) -> BlockReport {
    let max_rel_err = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    BlockReport {
        name: name.to_string(),
        max_rel_err,
        flagged: max_rel_err > tolerance,
    }
}

/// Deterministic, irregular head weights: the scalar loss attached to a
/// fragment is `sum_i w_i * out_i` so no gradient cancels by symmetry.
fn head_weight(i: usize) -> f64 {
    1.0 + 0.5 * (0.7391 * (i as f64 + 1.0)).sin()
}

fn chain_forward(fragment: &[Layer], input: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = vec![input.clone()];
    for layer in fragment {
        let prev = acts.last().unwrap();
        let out = match layer {
            Layer::ConcatChannels => layer.apply(&[prev, prev])?,
            _ => layer.apply(&[prev])?,
        };
        acts.push(out);
    }
    Ok(acts)
}

fn chain_loss(fragment: &[Layer], input: &Tensor) -> Result<f64> {
    let acts = chain_forward(fragment, input)?;
    let out = acts.last().unwrap();
    Ok(out
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| head_weight(i) * v)
        .sum())
}

/// Compares analytic gradients of a layer chain (with a scalar head attached)
/// against central finite differences, per parameter block and for the input.
///
/// Report-only: blocks exceeding `tolerance` are flagged, never an error.
pub fn gradient_check(fragment: &[Layer], input: &Tensor, tolerance: f64) -> Result<GradCheckReport> {
    let acts = chain_forward(fragment, input)?;
    let out = acts.last().unwrap();
    let dout = Tensor::new(
        out.shape.clone(),
        (0..out.numel()).map(head_weight).collect(),
    )?;

    // Analytic pass, top down.
    let mut upstream = dout;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, layer) in fragment.iter().enumerate().rev() {
        let prev = &acts[i];
        let inputs: Vec<&Tensor> = match layer {
            Layer::ConcatChannels => vec![prev, prev],
            _ => vec![prev],
        };
        let (in_grads, param_grads) = layer.backprop(&inputs, &upstream)?;
        for ((pname, _), grad) in layer.params().iter().zip(&param_grads) {
            analytic.push((format!("layer{i}.{}.{}", layer.kind(), pname), grad.data.clone()));
        }
        upstream = match layer {
            Layer::ConcatChannels => {
                let mut sum = in_grads[0].clone();
                for (s, g) in sum.data.iter_mut().zip(&in_grads[1].data) {
                    *s += g;
                }
                sum
            }
            _ => in_grads.into_iter().next().unwrap(),
        };
    }
    analytic.push(("input".to_string(), upstream.data.clone()));

    // Numeric pass over a mutable copy.
    let mut frag = fragment.to_vec();
    let mut inp = input.clone();
    let mut blocks = Vec::new();
    for (name, a_grad) in &analytic {
        let mut numeric = vec![0.0; a_grad.len()];
        for idx in 0..a_grad.len() {
            let read = |frag: &mut [Layer], inp: &mut Tensor, v: f64| -> Result<f64> {
                set_chain_value(frag, inp, name, idx, v);
                chain_loss(frag, inp)
            };
            let orig = get_chain_value(&mut frag, &mut inp, name, idx);
            let hi = read(&mut frag, &mut inp, orig + FD_STEP)?;
            let lo = read(&mut frag, &mut inp, orig - FD_STEP)?;
            set_chain_value(&mut frag, &mut inp, name, idx, orig);
            numeric[idx] = (hi - lo) / (2.0 * FD_STEP);
        }
        blocks.push(compare_gradient_block(name, a_grad, &numeric, tolerance));
    }
    blocks.reverse();
    Ok(GradCheckReport { tolerance, blocks })
}

fn locate_chain_value<'a>(
    fragment: &'a mut [Layer],
    input: &'a mut Tensor,
    name: &str,
) -> &'a mut Vec<f64> {
    if name == "input" {
        return &mut input.data;
    }
    let rest = name.strip_prefix("layer").unwrap();
    let (layer_idx, rest) = rest.split_once('.').unwrap();
    let layer = &mut fragment[layer_idx.parse::<usize>().unwrap()];
    let (_, pname) = rest.split_once('.').unwrap();
    for (n, t) in layer.params_mut() {
        if n == pname {
            return &mut t.data;
        }
    }
    unreachable!("unknown parameter block {name}");
}

fn get_chain_value(fragment: &mut [Layer], input: &mut Tensor, name: &str, idx: usize) -> f64 {
    locate_chain_value(fragment, input, name)[idx]
}

fn set_chain_value(fragment: &mut [Layer], input: &mut Tensor, name: &str, idx: usize, v: f64) {
    locate_chain_value(fragment, input, name)[idx] = v;
}
