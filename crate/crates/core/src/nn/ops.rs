//! Forward and backward kernels for the layers used by the networks.
//!
//! All sequence tensors are `[channels, time]`. Causal convolutions read
//! tap `j` at lag `j * dilation` (tap 0 is the current step) and treat
//! negative time indices as zero.

use super::linalg::{gemm_acc, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{QoeError, Result};

/// Weights `[out, in, k]`, bias `[out]` and a dilation for one causal conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    weights: Tensor,
    bias: Tensor,
    dilation: usize,
}

impl ConvLayerParams {
    pub fn new(weights: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let &[out, _, k] = weights.shape() else {
            return Err(QoeError::shape(format!(
                "conv weights must be [out, in, k], got {:?}",
                weights.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(QoeError::shape(format!(
                "conv bias {:?} does not match {out} output channels",
                bias.shape()
            )));
        }
        if dilation == 0 || k == 0 {
            return Err(QoeError::invalid("dilation and filter size must be >= 1"));
        }
        Ok(Self {
            weights,
            bias,
            dilation,
        })
    }

    pub fn zeros(out: usize, inp: usize, k: usize, dilation: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out, inp, k]), Tensor::zeros(&[out]), dilation)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn filter_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    /// Weights and bias borrowed mutably at once.
    pub fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn weight(&self, out: usize, inp: usize, tap: usize) -> f64 {
        let (i, k) = (self.in_channels(), self.filter_size());
        self.weights.data()[(out * i + inp) * k + tap]
    }
}

/// A 1x1 convolution: weights `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseParams {
    weights: Tensor,
    bias: Tensor,
}

impl PointwiseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let &[out, _] = weights.shape() else {
            return Err(QoeError::shape(format!(
                "pointwise weights must be [out, in], got {:?}",
                weights.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(QoeError::shape(format!(
                "pointwise bias {:?} does not match {out} output channels",
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights, &mut self.bias)
    }
}

/// Gradients of a parameterized layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn check_input(input: &Tensor, in_channels: usize, what: &str, params_shape: &[usize]) -> Result<(usize, usize)> {
    let (c, t) = input.dims2()?;
    if c != in_channels {
        return Err(QoeError::shape(format!(
            "{what}: input {:?} has {c} channels but weights {params_shape:?} expect {in_channels}",
            input.shape()
        )));
    }
    Ok((c, t))
}

fn bias_rows(bias: &[f64], steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bias.len() * steps);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(steps));
    }
    out
}

fn row_sums(grad: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| grad[r * cols..(r + 1) * cols].iter().sum())
        .collect()
}

/// `out[c, t] = bias[c] + sum_{i,j} w[c, i, j] * input[i, t - j*d]`.
pub fn causal_conv1d(input: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    let (cin, steps) = check_input(input, params.in_channels(), "causal_conv1d", params.weights.shape())?;
    let (cout, k, d) = (params.out_channels(), params.filter_size(), params.dilation);
    let mut out = bias_rows(params.bias.data(), steps);
    let w = params.weights.data();
    for tap in 0..k {
        let lag = tap * d;
        if lag >= steps {
            break;
        }
        gemm_acc(
            cout,
            cin,
            steps - lag,
            MatRef::new(w, tap, cin * k, k),
            MatRef::row_major(input.data(), 0, steps),
            MatMut::row_major(&mut out, lag, steps),
        );
    }
    Tensor::from_vec(&[cout, steps], out)
}

pub fn causal_conv1d_backward(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    let (cin, steps) = check_input(input, params.in_channels(), "causal_conv1d_backward", params.weights.shape())?;
    let (cout, k, d) = (params.out_channels(), params.filter_size(), params.dilation);
    if grad_out.shape() != [cout, steps] {
        return Err(QoeError::shape(format!(
            "upstream gradient {:?} does not match conv output [{cout}, {steps}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let x = input.data();
    let w = params.weights.data();
    let mut dw = vec![0.0; cout * cin * k];
    let mut dx = if need_input_grad { vec![0.0; cin * steps] } else { Vec::new() };
    for tap in 0..k {
        let lag = tap * d;
        if lag >= steps {
            break;
        }
        let span = steps - lag;
        // dW_j[o, i] += sum_t g[o, t + lag] * x[i, t]
        gemm_acc(
            cout,
            span,
            cin,
            MatRef::row_major(g, lag, steps),
            MatRef::new(x, 0, 1, steps),
            MatMut::new(&mut dw, tap, cin * k, k),
        );
        if need_input_grad {
            // dx[i, t] += sum_o w[o, i, j] * g[o, t + lag]
            gemm_acc(
                cin,
                cout,
                span,
                MatRef::new(w, tap, k, cin * k),
                MatRef::row_major(g, lag, steps),
                MatMut::row_major(&mut dx, 0, steps),
            );
        }
    }
    Ok(LayerGrads {
        input: if need_input_grad {
            Some(Tensor::from_vec(&[cin, steps], dx)?)
        } else {
            None
        },
        weights: Tensor::from_vec(&[cout, cin, k], dw)?,
        bias: Tensor::vector(row_sums(g, cout, steps)),
    })
}

/// Per-timestep affine map across channels.
pub fn pointwise_conv(input: &Tensor, params: &PointwiseParams) -> Result<Tensor> {
    let (cin, steps) = check_input(input, params.in_channels(), "pointwise_conv", params.weights.shape())?;
    let cout = params.out_channels();
    let mut out = bias_rows(params.bias.data(), steps);
    gemm_acc(
        cout,
        cin,
        steps,
        MatRef::row_major(params.weights.data(), 0, cin),
        MatRef::row_major(input.data(), 0, steps),
        MatMut::row_major(&mut out, 0, steps),
    );
    Tensor::from_vec(&[cout, steps], out)
}

pub fn pointwise_conv_backward(
    input: &Tensor,
    params: &PointwiseParams,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    let mut weights = Tensor::zeros_like(&params.weights);
    let mut bias = Tensor::zeros_like(&params.bias);
    let input = pointwise_conv_backward_into(
        input,
        params,
        grad_out,
        need_input_grad,
        GradSink {
            weights: &mut weights,
            bias: &mut bias,
        },
    )?;
    Ok(LayerGrads { input, weights, bias })
}

/// Buffers a backward pass adds its parameter gradients into.
pub(crate) struct GradSink<'a> {
    pub weights: &'a mut Tensor,
    pub bias: &'a mut Tensor,
}

impl GradSink<'_> {
    fn check(&self, weights: &Tensor, bias: &Tensor) -> Result<()> {
        if self.weights.shape() != weights.shape() || self.bias.shape() != bias.shape() {
            return Err(QoeError::shape(format!(
                "gradient buffers {:?}/{:?} do not match parameters {:?}/{:?}",
                self.weights.shape(),
                self.bias.shape(),
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(())
    }
}

fn add_row_sums(dst: &mut [f64], grad: &[f64], cols: usize) {
    for (d, row) in dst.iter_mut().zip(grad.chunks_exact(cols)) {
        *d += row.iter().sum::<f64>();
    }
}

pub(crate) fn pointwise_conv_backward_into(
    input: &Tensor,
    params: &PointwiseParams,
    grad_out: &Tensor,
    need_input_grad: bool,
    sink: GradSink<'_>,
) -> Result<Option<Tensor>> {
    let (cin, steps) = check_input(input, params.in_channels(), "pointwise_conv_backward", params.weights.shape())?;
    let cout = params.out_channels();
    if grad_out.shape() != [cout, steps] {
        return Err(QoeError::shape(format!(
            "upstream gradient {:?} does not match pointwise output [{cout}, {steps}]",
            grad_out.shape()
        )));
    }
    sink.check(&params.weights, &params.bias)?;
    let g = grad_out.data();
    gemm_acc(
        cout,
        steps,
        cin,
        MatRef::row_major(g, 0, steps),
        MatRef::new(input.data(), 0, 1, steps),
        MatMut::row_major(sink.weights.data_mut(), 0, cin),
    );
    if steps > 0 {
        add_row_sums(sink.bias.data_mut(), g, steps);
    }
    if !need_input_grad {
        return Ok(None);
    }
    let mut dx = vec![0.0; cin * steps];
    gemm_acc(
        cin,
        cout,
        steps,
        MatRef::new(params.weights.data(), 0, 1, cin),
        MatRef::row_major(g, 0, steps),
        MatMut::row_major(&mut dx, 0, steps),
    );
    Ok(Some(Tensor::from_vec(&[cin, steps], dx)?))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QoeError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `tanh(filter)` and `sigmoid(gate)`, kept so the backward pass does not
/// re-evaluate them.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub tanh_filter: Tensor,
    pub sigmoid_gate: Tensor,
}

/// Elementwise `tanh(filter) * sigmoid(gate)`.
pub fn gated_activation(filter_path: &Tensor, gate_path: &Tensor) -> Result<Tensor> {
    Ok(gated_activation_cached(filter_path, gate_path)?.0)
}

pub fn gated_activation_cached(filter_path: &Tensor, gate_path: &Tensor) -> Result<(Tensor, GateCache)> {
    same_shape(filter_path, gate_path, "gated_activation")?;
    let th: Vec<f64> = filter_path.data().iter().map(|f| f.tanh()).collect();
    let sg: Vec<f64> = gate_path.data().iter().map(|&g| sigmoid(g)).collect();
    let out = th.iter().zip(&sg).map(|(a, b)| a * b).collect();
    let shape = filter_path.shape();
    Ok((
        Tensor::from_vec(shape, out)?,
        GateCache {
            tanh_filter: Tensor::from_vec(shape, th)?,
            sigmoid_gate: Tensor::from_vec(shape, sg)?,
        },
    ))
}

/// Returns `(d filter, d gate)`.
pub fn gated_activation_backward(
    filter_path: &Tensor,
    gate_path: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, cache) = gated_activation_cached(filter_path, gate_path)?;
    gated_backward_from_cache(&cache, grad_out)
}

pub fn gated_backward_from_cache(cache: &GateCache, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(&cache.tanh_filter, grad_out, "gated_activation_backward upstream")?;
    let n = grad_out.len();
    let mut df = Vec::with_capacity(n);
    let mut dg = Vec::with_capacity(n);
    for ((&th, &sg), &up) in cache.tanh_filter.data().iter().zip(cache.sigmoid_gate.data()).zip(grad_out.data()) {
        df.push(up * sg * (1.0 - th * th));
        dg.push(up * th * sg * (1.0 - sg));
    }
    Ok((
        Tensor::from_vec(grad_out.shape(), df)?,
        Tensor::from_vec(grad_out.shape(), dg)?,
    ))
}

/// Activations a fused gated convolution keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct GatedConvCache {
    /// First input column the outputs correspond to.
    start: usize,
    /// Unfolded input `[in * k, T - start]`; row `i * k + j` holds
    /// `x[i, start + t - j*d]`.
    cols: Vec<f64>,
    gate: GateCache,
}

fn check_gate_pair(filter: &ConvLayerParams, gate: &ConvLayerParams) -> Result<()> {
    if filter.weights.shape() != gate.weights.shape() || filter.dilation != gate.dilation {
        return Err(QoeError::shape(format!(
            "filter {:?} (d={}) and gate {:?} (d={}) must match",
            filter.weights.shape(),
            filter.dilation,
            gate.weights.shape(),
            gate.dilation
        )));
    }
    Ok(())
}

/// `tanh(conv_filter(x)) * sigmoid(conv_gate(x))` at output columns
/// `start..T`, with both convolutions evaluated from one unfolding of the
/// input. With `start = 0` this equals composing [`causal_conv1d`]
/// and [`gated_activation`]; otherwise it is that result's trailing columns.
pub fn gated_conv_forward(
    input: &Tensor,
    filter: &ConvLayerParams,
    gate: &ConvLayerParams,
    start: usize,
) -> Result<(Tensor, GatedConvCache)> {
    check_gate_pair(filter, gate)?;
    let (cin, steps) = check_input(input, filter.in_channels(), "gated_conv", filter.weights.shape())?;
    if start >= steps {
        return Err(QoeError::shape(format!("gated_conv output start {start} beyond {steps} steps")));
    }
    let (cout, k, d) = (filter.out_channels(), filter.filter_size(), filter.dilation);
    let out_steps = steps - start;
    let x = input.data();
    let mut cols = vec![0.0; cin * k * out_steps];
    for i in 0..cin {
        for j in 0..k {
            // output column t reads input start + t - lag
            let lag = j * d;
            let first = lag.saturating_sub(start);
            if first < out_steps {
                let row = (i * k + j) * out_steps;
                let src = i * steps + start + first - lag;
                cols[row + first..row + out_steps].copy_from_slice(&x[src..src + out_steps - first]);
            }
        }
    }
    let mut pre = bias_rows(filter.bias.data(), out_steps);
    pre.extend(bias_rows(gate.bias.data(), out_steps));
    let half = cout * out_steps;
    for (layer, offset) in [(filter, 0), (gate, half)] {
        gemm_acc(
            cout,
            cin * k,
            out_steps,
            MatRef::row_major(layer.weights.data(), 0, cin * k),
            MatRef::row_major(&cols, 0, out_steps),
            MatMut::row_major(&mut pre, offset, out_steps),
        );
    }
    let mut th = Vec::with_capacity(half);
    let mut sg = Vec::with_capacity(half);
    let mut out = Vec::with_capacity(half);
    for (&f, &g) in pre[..half].iter().zip(&pre[half..]) {
        let (a, b) = (f.tanh(), sigmoid(g));
        th.push(a);
        sg.push(b);
        out.push(a * b);
    }
    let shape = [cout, out_steps];
    Ok((
        Tensor::from_vec(&shape, out)?,
        GatedConvCache {
            start,
            cols,
            gate: GateCache {
                tanh_filter: Tensor::from_vec(&shape, th)?,
                sigmoid_gate: Tensor::from_vec(&shape, sg)?,
            },
        },
    ))
}

/// Gradients for the filter and gate layers and, if `input_steps` is given,
/// for the `[in, input_steps]` input.
pub fn gated_conv_backward(
    filter: &ConvLayerParams,
    gate: &ConvLayerParams,
    cache: &GatedConvCache,
    grad_out: &Tensor,
    input_steps: Option<usize>,
) -> Result<(LayerGrads, LayerGrads, Option<Tensor>)> {
    let mut bufs = [&filter.weights, &filter.bias, &gate.weights, &gate.bias].map(Tensor::zeros_like);
    let [fw, fb, gw, gb] = &mut bufs;
    let dx = gated_conv_backward_into(
        filter,
        gate,
        cache,
        grad_out,
        input_steps,
        [GradSink { weights: fw, bias: fb }, GradSink { weights: gw, bias: gb }],
    )?;
    let [fw, fb, gw, gb] = bufs;
    let grads = |weights, bias| LayerGrads {
        input: None,
        weights,
        bias,
    };
    Ok((grads(fw, fb), grads(gw, gb), dx))
}

pub(crate) fn gated_conv_backward_into(
    filter: &ConvLayerParams,
    gate: &ConvLayerParams,
    cache: &GatedConvCache,
    grad_out: &Tensor,
    input_steps: Option<usize>,
    sinks: [GradSink<'_>; 2],
) -> Result<Option<Tensor>> {
    check_gate_pair(filter, gate)?;
    let (cout, cin, k, d) = (filter.out_channels(), filter.in_channels(), filter.filter_size(), filter.dilation);
    let th = cache.gate.tanh_filter.data();
    let sg = cache.gate.sigmoid_gate.data();
    if grad_out.shape() != cache.gate.tanh_filter.shape() {
        return Err(QoeError::shape(format!(
            "gated_conv upstream {:?} vs output {:?}",
            grad_out.shape(),
            cache.gate.tanh_filter.shape()
        )));
    }
    for (sink, layer) in sinks.iter().zip([filter, gate]) {
        sink.check(&layer.weights, &layer.bias)?;
    }
    let out_steps = grad_out.shape()[1];
    let half = cout * out_steps;
    let width = cin * k;
    let up = grad_out.data();
    let mut dpre = Vec::with_capacity(2 * half);
    dpre.extend((0..half).map(|e| up[e] * sg[e] * (1.0 - th[e] * th[e])));
    dpre.extend((0..half).map(|e| up[e] * th[e] * sg[e] * (1.0 - sg[e])));

    for (sink, offset) in sinks.into_iter().zip([0, half]) {
        gemm_acc(
            cout,
            out_steps,
            width,
            MatRef::row_major(&dpre, offset, out_steps),
            MatRef::new(&cache.cols, 0, 1, out_steps),
            MatMut::row_major(sink.weights.data_mut(), 0, width),
        );
        if out_steps > 0 {
            add_row_sums(sink.bias.data_mut(), &dpre[offset..offset + half], out_steps);
        }
    }
    let Some(steps) = input_steps else {
        return Ok(None);
    };
    let mut dcols = vec![0.0; width * out_steps];
    for (layer, offset) in [(filter, 0), (gate, half)] {
        gemm_acc(
            width,
            cout,
            out_steps,
            MatRef::new(layer.weights.data(), 0, 1, width),
            MatRef::row_major(&dpre, offset, out_steps),
            MatMut::row_major(&mut dcols, 0, out_steps),
        );
    }
    let mut dx = vec![0.0; cin * steps];
    for i in 0..cin {
        for j in 0..k {
            let lag = j * d;
            let first = lag.saturating_sub(cache.start);
            if first < out_steps {
                let row = (i * k + j) * out_steps;
                let dst = i * steps + cache.start + first - lag;
                for (a, b) in dx[dst..dst + out_steps - first].iter_mut().zip(&dcols[row + first..row + out_steps]) {
                    *a += b;
                }
            }
        }
    }
    Ok(Some(Tensor::from_vec(&[cin, steps], dx)?))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "relu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(QoeError::shape(format!(
            "mse_loss: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(QoeError::invalid("mse_loss of empty vectors"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let diff = p - t;
        loss += diff * diff;
        grad.push(2.0 * diff / n);
    }
    Ok((loss / n, grad))
}
