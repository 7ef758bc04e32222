//! Dilated causal convolution stack with gated residual blocks, skip
//! connections and a two-layer regression head.
//!
//! Layer `l` uses dilation `d^l`. The last block's residual output would
//! feed nothing, so that block has no residual projection.

use super::{effective_receptive_field, receptive_field};
use crate::data::FEATURE_COUNT;
use crate::error::{QoeError, Result};
use crate::nn::linalg::{gemm_acc, MatMut, MatRef};
use crate::nn::{sigmoid, ConvLayerParams, NodeId, ParamSlot, Parameterized, PointwiseParams, Tape, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaveNetConfig {
    pub filter_size: usize,
    pub num_filters: usize,
    pub dilation_base: usize,
    pub num_layers: usize,
    pub input_features: usize,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self {
            filter_size: 2,
            num_filters: 32,
            dilation_base: 2,
            num_layers: 3,
            input_features: FEATURE_COUNT,
        }
    }
}

impl WaveNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_filters == 0 || self.input_features == 0 {
            return Err(QoeError::invalid("num_filters and input_features must be >= 1"));
        }
        self.effective_receptive_field().map(|_| ())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }

    /// Closed-form `d^(L-1) * k`.
    pub fn receptive_field(&self) -> Result<usize> {
        receptive_field(self.filter_size, self.dilation_base, self.num_layers)
    }

    pub fn effective_receptive_field(&self) -> Result<usize> {
        effective_receptive_field(self.filter_size, self.dilation_base, self.num_layers)
    }

    pub fn param_count(&self) -> usize {
        let (n, k, l, f) = (self.num_filters, self.filter_size, self.num_layers, self.input_features);
        let pointwise = n * n + n;
        let conv = n * n * k + n;
        (f * n + n) + l * (2 * conv + pointwise) + (l - 1) * pointwise + pointwise + (n + 1)
    }

    /// Multiply-adds per timestep of a full-sequence forward pass.
    pub fn macs_per_step(&self) -> u64 {
        let (n, k, l, f) = (self.num_filters, self.filter_size, self.num_layers, self.input_features);
        (f * n + l * 2 * n * n * k + l * n * n + (l - 1) * n * n + n * n + n) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub filter: ConvLayerParams,
    pub gate: ConvLayerParams,
    pub residual: Option<PointwiseParams>,
    pub skip: PointwiseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveNet {
    config: WaveNetConfig,
    pub input_proj: PointwiseParams,
    pub blocks: Vec<ResidualBlock>,
    pub head_hidden: PointwiseParams,
    pub head_out: PointwiseParams,
}

fn init_uniform(t: &mut Tensor, fan_in: usize, rng: &mut SplitMix64) {
    let a = (1.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.uniform(-a, a);
    }
}

impl WaveNet {
    /// All-zero parameters.
    pub fn zeros(config: WaveNetConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_filters;
        let blocks = (0..config.num_layers)
            .map(|l| {
                let d = config.dilation(l);
                Ok(ResidualBlock {
                    filter: ConvLayerParams::zeros(n, n, config.filter_size, d)?,
                    gate: ConvLayerParams::zeros(n, n, config.filter_size, d)?,
                    residual: (l + 1 < config.num_layers).then(|| PointwiseParams::zeros(n, n)),
                    skip: PointwiseParams::zeros(n, n),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            input_proj: PointwiseParams::zeros(n, config.input_features),
            blocks,
            head_hidden: PointwiseParams::zeros(n, n),
            head_out: PointwiseParams::zeros(1, n),
        })
    }

    /// Weights uniform in `±sqrt(1/fan_in)` drawn in declaration order, biases zero.
    pub fn new(config: WaveNetConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for w in model.params_mut() {
            if let &[_, fan, ..] = w.shape() {
                let fan_in = fan * w.shape().get(2).copied().unwrap_or(1);
                init_uniform(w, fan_in, rng);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.config
    }

    fn check_features(&self, x: &Tensor) -> Result<usize> {
        let (c, t) = x.dims2()?;
        if c != self.config.input_features || t == 0 {
            return Err(QoeError::shape(format!(
                "WaveNet expects [{}, T>=1] features, got {:?}",
                self.config.input_features,
                x.shape()
            )));
        }
        Ok(t)
    }

    /// Records the forward pass of `input` (`[features, T]`) on `tape` and
    /// returns the `[1, T]` output node. Gradient slots follow `params()` order.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, input: NodeId) -> Result<NodeId> {
        self.record_from(tape, input, 0)
    }

    /// Like [`record`](Self::record) but only for outputs `first_output..T`
    /// (a `[1, T - first_output]` node). Each block evaluates just the columns
    /// those outputs depend on; the values equal the matching columns of the
    /// full pass.
    pub fn record_from<'a>(&'a self, tape: &mut Tape<'a>, input: NodeId, first_output: usize) -> Result<NodeId> {
        let steps = self.check_features(tape.value(input))?;
        if first_output >= steps {
            return Err(QoeError::shape(format!("first output {first_output} beyond {steps} steps")));
        }
        let reach = self.config.filter_size - 1;
        // starts[l]: first column block l's gated unit is evaluated at.
        let mut starts = vec![first_output; self.config.num_layers];
        for l in (0..self.config.num_layers.saturating_sub(1)).rev() {
            starts[l] = starts[l + 1].saturating_sub(reach * self.config.dilation(l + 1));
        }

        let mut next = 0;
        let mut slot = || {
            let s = ParamSlot {
                weights: next,
                bias: next + 1,
            };
            next += 2;
            s
        };
        let mut x = tape.pointwise(input, &self.input_proj, slot())?;
        // absolute column of x's first column
        let mut x_start = 0;
        let mut skips: Option<NodeId> = None;
        for (block, &start) in self.blocks.iter().zip(&starts) {
            let u = tape.gated_conv(x, &block.filter, &block.gate, [slot(), slot()], start - x_start)?;
            if let Some(res) = &block.residual {
                let r = tape.pointwise(u, res, slot())?;
                let kept = if start > x_start { tape.slice_cols(x, start - x_start)? } else { x };
                x = tape.add(kept, r)?;
                x_start = start;
            }
            let u_out = if first_output > start { tape.slice_cols(u, first_output - start)? } else { u };
            let s = tape.pointwise(u_out, &block.skip, slot())?;
            skips = Some(match skips {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let h = tape.relu(skips.expect("at least one layer"));
        let h = tape.pointwise(h, &self.head_hidden, slot())?;
        let h = tape.relu(h);
        tape.pointwise(h, &self.head_out, slot())
    }

    /// One normalized prediction per timestep of `[features, T]` input.
    pub fn forward(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input(features.clone());
        let y = self.record(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Prediction at the last column of `window`, computing only the
    /// activations that output depends on.
    pub fn predict_last(&self, window: &Tensor) -> Result<f64> {
        let steps = self.check_features(window)?;
        let n = self.config.num_filters;
        let k = self.config.filter_size;
        let layers = self.config.num_layers;
        let last = steps - 1;

        // needed[l]: positions of block l's input; gated[l]: where block l's
        // gated unit is evaluated (its own taps' centres).
        let mut gated: Vec<Vec<usize>> = vec![Vec::new(); layers];
        let mut needed: Vec<Vec<usize>> = vec![Vec::new(); layers];
        let mut wanted = vec![last];
        for l in (0..layers).rev() {
            let d = self.config.dilation(l);
            let mut mark = vec![false; steps];
            for &p in &wanted {
                for j in 0..k {
                    if let Some(q) = p.checked_sub(j * d) {
                        mark[q] = true;
                    }
                }
            }
            gated[l] = wanted;
            needed[l] = (0..steps).filter(|&q| mark[q]).collect();
            wanted = needed[l].clone();
        }

        // x holds block-l input columns at `needed[l]`, row-major [n, P].
        let cols0 = &needed[0];
        let cin = self.config.input_features;
        let mut gathered = vec![0.0; cin * cols0.len()];
        for f in 0..cin {
            for (q, &p) in cols0.iter().enumerate() {
                gathered[f * cols0.len() + q] = window.at2(f, p);
            }
        }
        let mut x = affine(&self.input_proj, &gathered, cols0.len());
        let mut positions = cols0.clone();
        let mut skip_sum = vec![0.0; n];

        for (l, block) in self.blocks.iter().enumerate() {
            let d = block.filter.dilation();
            let centres = &gated[l];
            let p_out = centres.len();
            let mut index = vec![usize::MAX; steps];
            for (c, &p) in positions.iter().enumerate() {
                index[p] = c;
            }
            let p_in = positions.len();
            // im2col: row i*k + j holds x[i, centre - j*d].
            let mut cols = vec![0.0; n * k * p_out];
            for i in 0..n {
                for j in 0..k {
                    let row = (i * k + j) * p_out;
                    for (q, &c) in centres.iter().enumerate() {
                        if let Some(src) = c.checked_sub(j * d) {
                            cols[row + q] = x[i * p_in + index[src]];
                        }
                    }
                }
            }
            let f = conv_cols(&block.filter, &cols, p_out);
            let g = conv_cols(&block.gate, &cols, p_out);
            let u: Vec<f64> = f.iter().zip(&g).map(|(&a, &b)| a.tanh() * sigmoid(b)).collect();

            let last_col = p_out - 1;
            let u_last: Vec<f64> = (0..n).map(|i| u[i * p_out + last_col]).collect();
            let s = affine(&block.skip, &u_last, 1);
            for (acc, v) in skip_sum.iter_mut().zip(s) {
                *acc += v;
            }

            if let Some(res) = &block.residual {
                let r = affine(res, &u, p_out);
                let mut next = vec![0.0; n * p_out];
                for i in 0..n {
                    for (q, &c) in centres.iter().enumerate() {
                        next[i * p_out + q] = x[i * p_in + index[c]] + r[i * p_out + q];
                    }
                }
                x = next;
                positions = centres.clone();
            }
        }

        for v in &mut skip_sum {
            *v = v.max(0.0);
        }
        let mut h = affine(&self.head_hidden, &skip_sum, 1);
        for v in &mut h {
            *v = v.max(0.0);
        }
        Ok(affine(&self.head_out, &h, 1)[0])
    }
}

/// `W x + b` for a row-major `[in, cols]` input.
fn affine(layer: &PointwiseParams, x: &[f64], cols: usize) -> Vec<f64> {
    let (out, cin) = (layer.out_channels(), layer.in_channels());
    let mut y = Vec::with_capacity(out * cols);
    for &b in layer.bias().data() {
        y.extend(std::iter::repeat(b).take(cols));
    }
    gemm_acc(
        out,
        cin,
        cols,
        MatRef::row_major(layer.weights().data(), 0, cin),
        MatRef::row_major(x, 0, cols),
        MatMut::row_major(&mut y, 0, cols),
    );
    y
}

fn conv_cols(layer: &ConvLayerParams, cols: &[f64], p: usize) -> Vec<f64> {
    let (out, width) = (layer.out_channels(), layer.in_channels() * layer.filter_size());
    let mut y = Vec::with_capacity(out * p);
    for &b in layer.bias().data() {
        y.extend(std::iter::repeat(b).take(p));
    }
    gemm_acc(
        out,
        width,
        p,
        MatRef::row_major(layer.weights().data(), 0, width),
        MatRef::row_major(cols, 0, p),
        MatMut::row_major(&mut y, 0, p),
    );
    y
}

impl Parameterized for WaveNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["input_proj.weights".to_string(), "input_proj.bias".to_string()];
        for (l, block) in self.blocks.iter().enumerate() {
            let mut layers = vec!["filter", "gate"];
            if block.residual.is_some() {
                layers.push("residual");
            }
            layers.push("skip");
            for layer in layers {
                names.push(format!("block{l}.{layer}.weights"));
                names.push(format!("block{l}.{layer}.bias"));
            }
        }
        for layer in ["head_hidden", "head_out"] {
            names.push(format!("{layer}.weights"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![self.input_proj.weights(), self.input_proj.bias()];
        for block in &self.blocks {
            out.extend([block.filter.weights(), block.filter.bias()]);
            out.extend([block.gate.weights(), block.gate.bias()]);
            if let Some(r) = &block.residual {
                out.extend([r.weights(), r.bias()]);
            }
            out.extend([block.skip.weights(), block.skip.bias()]);
        }
        out.extend([self.head_hidden.weights(), self.head_hidden.bias()]);
        out.extend([self.head_out.weights(), self.head_out.bias()]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        push_pointwise(&mut out, &mut self.input_proj);
        for block in &mut self.blocks {
            push_conv(&mut out, &mut block.filter);
            push_conv(&mut out, &mut block.gate);
            if let Some(r) = &mut block.residual {
                push_pointwise(&mut out, r);
            }
            push_pointwise(&mut out, &mut block.skip);
        }
        push_pointwise(&mut out, &mut self.head_hidden);
        push_pointwise(&mut out, &mut self.head_out);
        out
    }
}

fn push_pointwise<'a>(out: &mut Vec<&'a mut Tensor>, layer: &'a mut PointwiseParams) {
    let (w, b) = layer.parts_mut();
    out.push(w);
    out.push(b);
}

fn push_conv<'a>(out: &mut Vec<&'a mut Tensor>, layer: &'a mut ConvLayerParams) {
    let (w, b) = layer.parts_mut();
    out.push(w);
    out.push(b);
}
