//! Single-layer LSTM baseline with a dense head on the hidden state.
//!
//! Gate rows are stacked `i, f, g, o` in one `[4h, in + h]` matrix acting on
//! the concatenation `[x_t; h_{t-1}]`. Windows are processed as a batch, one
//! column per window, with state reset to zero at each window start.

use crate::data::FEATURE_COUNT;
use crate::error::{QoeError, Result};
use crate::nn::linalg::{gemm_acc, MatMut, MatRef};
use crate::nn::{sigmoid, Parameterized, PointwiseParams, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmConfig {
    pub hidden_size: usize,
    pub input_features: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            input_features: FEATURE_COUNT,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.input_features == 0 {
            return Err(QoeError::invalid("hidden_size and input_features must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (h, i) = (self.hidden_size, self.input_features);
        4 * h * (i + h) + 4 * h + h + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    config: LstmConfig,
    pub gate_weights: Tensor,
    pub gate_bias: Tensor,
    pub head: PointwiseParams,
}

/// Gradients in `params()` order: gate weights, gate bias, head weights, head bias.
pub type LstmGrads = Vec<Tensor>;

/// Activations of one batched window pass, kept for backpropagation.
pub struct LstmTrace {
    batch: usize,
    /// Per step: `[in + h, B]` concatenated input.
    z: Vec<Vec<f64>>,
    /// Per step: `[4h, B]` post-activation gates.
    gates: Vec<Vec<f64>>,
    /// Cell states `c_0 .. c_w`, `c_0 = 0`, each `[h, B]`.
    cells: Vec<Vec<f64>>,
    /// `tanh(c_s)` for `s = 1 ..= w`.
    cell_tanh: Vec<Vec<f64>>,
    /// Final hidden state `[h, B]`.
    h_last: Vec<f64>,
}

impl Lstm {
    pub fn zeros(config: LstmConfig) -> Result<Self> {
        config.validate()?;
        let (h, i) = (config.hidden_size, config.input_features);
        Ok(Self {
            config,
            gate_weights: Tensor::zeros(&[4 * h, i + h]),
            gate_bias: Tensor::zeros(&[4 * h]),
            head: PointwiseParams::zeros(1, h),
        })
    }

    /// Uniform `±sqrt(1/fan_in)` weights, zero biases except the forget gate at 1.
    pub fn new(config: LstmConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let (h, i) = (config.hidden_size, config.input_features);
        let a = (1.0 / (i + h) as f64).sqrt();
        for v in model.gate_weights.data_mut() {
            *v = rng.uniform(-a, a);
        }
        model.gate_bias.data_mut()[h..2 * h].fill(1.0);
        let a = (1.0 / h as f64).sqrt();
        for v in model.head.weights_mut().data_mut() {
            *v = rng.uniform(-a, a);
        }
        Ok(model)
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    fn check_features(&self, x: &Tensor) -> Result<usize> {
        let (c, t) = x.dims2()?;
        if c != self.config.input_features || t == 0 {
            return Err(QoeError::shape(format!(
                "LSTM expects [{}, T>=1] features, got {:?}",
                self.config.input_features,
                x.shape()
            )));
        }
        Ok(t)
    }

    /// One recurrence step on `[in + h, B]` input; writes `[4h, B]` gates and
    /// returns `(c, tanh(c), h)`.
    fn step(&self, z: &[f64], c_prev: &[f64], batch: usize, gates: &mut Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.config.hidden_size;
        let width = self.config.input_features + h;
        gates.clear();
        for &b in self.gate_bias.data() {
            gates.extend(std::iter::repeat(b).take(batch));
        }
        gemm_acc(
            4 * h,
            width,
            batch,
            MatRef::row_major(self.gate_weights.data(), 0, width),
            MatRef::row_major(z, 0, batch),
            MatMut::row_major(gates, 0, batch),
        );
        let hb = h * batch;
        for v in &mut gates[..2 * hb] {
            *v = sigmoid(*v);
        }
        for v in &mut gates[2 * hb..3 * hb] {
            *v = v.tanh();
        }
        for v in &mut gates[3 * hb..] {
            *v = sigmoid(*v);
        }
        let mut c = vec![0.0; hb];
        let mut tc = vec![0.0; hb];
        let mut hidden = vec![0.0; hb];
        for e in 0..hb {
            let (i, f, g, o) = (gates[e], gates[hb + e], gates[2 * hb + e], gates[3 * hb + e]);
            c[e] = f * c_prev[e] + i * g;
            tc[e] = c[e].tanh();
            hidden[e] = o * tc[e];
        }
        (c, tc, hidden)
    }

    fn head_out(&self, hidden: &[f64], batch: usize) -> Vec<f64> {
        let h = self.config.hidden_size;
        let mut y = vec![self.head.bias().data()[0]; batch];
        gemm_acc(
            1,
            h,
            batch,
            MatRef::row_major(self.head.weights().data(), 0, h),
            MatRef::row_major(hidden, 0, batch),
            MatMut::row_major(&mut y, 0, batch),
        );
        y
    }

    /// Stateful pass over a whole `[features, T]` sequence, one output per step.
    pub fn forward_sequence(&self, features: &Tensor) -> Result<Vec<f64>> {
        let steps = self.check_features(features)?;
        let (h, cin) = (self.config.hidden_size, self.config.input_features);
        let mut c = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        let mut gates = Vec::with_capacity(4 * h);
        let mut z = vec![0.0; cin + h];
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            for f in 0..cin {
                z[f] = features.at2(f, t);
            }
            z[cin..].copy_from_slice(&hidden);
            (c, _, hidden) = self.step(&z, &c, 1, &mut gates);
            out.push(self.head_out(&hidden, 1)[0]);
        }
        Ok(out)
    }

    /// Batched window pass. `steps[s]` is the `[in, B]` input at window
    /// offset `s`; returns one prediction per window (from its last step).
    pub fn forward_windows(&self, steps: &[Tensor]) -> Result<(Vec<f64>, LstmTrace)> {
        let (h, cin) = (self.config.hidden_size, self.config.input_features);
        let Some(first) = steps.first() else {
            return Err(QoeError::shape("LSTM window of zero steps"));
        };
        let (_, batch) = first.dims2()?;
        let mut trace = LstmTrace {
            batch,
            z: Vec::with_capacity(steps.len()),
            gates: Vec::with_capacity(steps.len()),
            cells: vec![vec![0.0; h * batch]],
            cell_tanh: Vec::with_capacity(steps.len()),
            h_last: vec![0.0; h * batch],
        };
        for x in steps {
            if x.shape() != [cin, batch] {
                return Err(QoeError::shape(format!(
                    "LSTM step input {:?}, expected [{cin}, {batch}]",
                    x.shape()
                )));
            }
            let mut z = Vec::with_capacity((cin + h) * batch);
            z.extend_from_slice(x.data());
            z.extend_from_slice(&trace.h_last);
            let mut gates = Vec::with_capacity(4 * h * batch);
            let (c, tc, hidden) = self.step(&z, trace.cells.last().unwrap(), batch, &mut gates);
            trace.z.push(z);
            trace.gates.push(gates);
            trace.cells.push(c);
            trace.cell_tanh.push(tc);
            trace.h_last = hidden;
        }
        Ok((self.head_out(&trace.h_last, batch), trace))
    }

    /// Backpropagation through time for `forward_windows`, accumulating into
    /// `grads` (in `params()` order).
    pub fn backward_windows(&self, trace: &LstmTrace, grad_out: &[f64], grads: &mut [Tensor]) -> Result<()> {
        let (h, cin) = (self.config.hidden_size, self.config.input_features);
        let width = cin + h;
        let batch = trace.batch;
        if grad_out.len() != batch || grads.len() != 4 {
            return Err(QoeError::shape(format!(
                "LSTM backward: {} output grads for batch {batch}, {} grad buffers",
                grad_out.len(),
                grads.len()
            )));
        }
        let hb = h * batch;
        let [dw, db, dhw, dhb] = grads else { unreachable!() };

        // Head.
        gemm_acc(
            1,
            batch,
            h,
            MatRef::row_major(grad_out, 0, batch),
            MatRef::new(&trace.h_last, 0, 1, batch),
            MatMut::row_major(dhw.data_mut(), 0, h),
        );
        dhb.data_mut()[0] += grad_out.iter().sum::<f64>();
        let head_w = self.head.weights().data();
        let mut dh = vec![0.0; hb];
        for r in 0..h {
            for b in 0..batch {
                dh[r * batch + b] = head_w[r] * grad_out[b];
            }
        }

        let mut dc = vec![0.0; hb];
        let mut da = vec![0.0; 4 * hb];
        for s in (0..trace.z.len()).rev() {
            let gates = &trace.gates[s];
            let cell_tanh = &trace.cell_tanh[s];
            let c_prev = &trace.cells[s];
            for e in 0..hb {
                let (i, f, g, o) = (gates[e], gates[hb + e], gates[2 * hb + e], gates[3 * hb + e]);
                let tc = cell_tanh[e];
                let d_o = dh[e] * tc;
                dc[e] += dh[e] * o * (1.0 - tc * tc);
                let d_i = dc[e] * g;
                let d_g = dc[e] * i;
                let d_f = dc[e] * c_prev[e];
                da[e] = d_i * i * (1.0 - i);
                da[hb + e] = d_f * f * (1.0 - f);
                da[2 * hb + e] = d_g * (1.0 - g * g);
                da[3 * hb + e] = d_o * o * (1.0 - o);
                dc[e] *= f;
            }
            gemm_acc(
                4 * h,
                batch,
                width,
                MatRef::row_major(&da, 0, batch),
                MatRef::new(&trace.z[s], 0, 1, batch),
                MatMut::row_major(dw.data_mut(), 0, width),
            );
            for (r, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += da[r * batch..(r + 1) * batch].iter().sum::<f64>();
            }
            if s > 0 {
                // dh_prev = W[:, in..]^T da
                dh.fill(0.0);
                gemm_acc(
                    h,
                    4 * h,
                    batch,
                    MatRef::new(self.gate_weights.data(), cin, 1, width),
                    MatRef::row_major(&da, 0, batch),
                    MatMut::row_major(&mut dh, 0, batch),
                );
            }
        }
        Ok(())
    }

    /// Prediction for a single `[features, w]` window with zero initial state.
    pub fn predict_window(&self, window: &Tensor) -> Result<f64> {
        let steps = self.check_features(window)?;
        let cin = self.config.input_features;
        let columns: Vec<Tensor> = (0..steps)
            .map(|t| Tensor::from_vec(&[cin, 1], (0..cin).map(|f| window.at2(f, t)).collect()))
            .collect::<Result<_>>()?;
        Ok(self.forward_windows(&columns)?.0[0])
    }

    /// One prediction per timestep, each from a zero-padded window of `w`
    /// steps ending there. All windows run as one batch.
    pub fn predict_windows(&self, features: &Tensor, w: usize) -> Result<Vec<f64>> {
        let total = self.check_features(features)?;
        if w == 0 {
            return Err(QoeError::invalid("window length must be >= 1"));
        }
        let cin = self.config.input_features;
        let columns: Vec<Tensor> = (0..w)
            .map(|s| {
                let mut data = vec![0.0; cin * total];
                for f in 0..cin {
                    let row = features.row(f);
                    for t in 0..total {
                        // window ending at t reads time t - (w - 1 - s)
                        if let Some(src) = (t + s + 1).checked_sub(w) {
                            data[f * total + t] = row[src];
                        }
                    }
                }
                Tensor::from_vec(&[cin, total], data)
            })
            .collect::<Result<_>>()?;
        Ok(self.forward_windows(&columns)?.0)
    }
}

impl Parameterized for Lstm {
    fn param_names(&self) -> Vec<String> {
        ["gates.weights", "gates.bias", "head.weights", "head.bias"].map(String::from).to_vec()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gate_weights, &self.gate_bias, self.head.weights(), self.head.bias()]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (hw, hb) = self.head.parts_mut();
        vec![&mut self.gate_weights, &mut self.gate_bias, hw, hb]
    }
}
