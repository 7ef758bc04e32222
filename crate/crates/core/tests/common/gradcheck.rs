//! One finite-difference check per layer or model and seed. Each returns the
//! worst relative error it saw and where. Losses are random projections
//! `sum(g * output)`, so the upstream gradient is `g`.

use super::*;
use wavenet_qoe::models::{Lstm, LstmConfig, WaveNet, WaveNetConfig};
use wavenet_qoe::nn::*;

pub type Worst = (f64, String);

pub const SEEDS: u64 = 20;

/// Parameter entries checked per seed on the full-size models.
pub const FULL_SIZE_SAMPLES: usize = 400;

/// Small models get every parameter from [-1, 1]. Full-size layers would
/// saturate that way, leaving gradients under the finite-difference noise
/// floor, so they keep their initialized weights and only move the biases
/// off zero (zero biases can park a ReLU on its kink).
fn redraw<M: Parameterized>(model: &mut M, rng: &mut SplitMix64, full_size: bool) {
    if full_size {
        randomize_biases(model, rng);
    } else {
        randomize(model, rng);
    }
}

fn worst_of(checks: impl IntoIterator<Item = Worst>) -> Worst {
    checks
        .into_iter()
        .fold((0.0, String::new()), |a, b| if b.0 >= a.0 { b } else { a })
}

fn rel(label: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Worst {
    (max_rel_err(analytic, numeric), label.into())
}

pub fn rand_conv(rng: &mut SplitMix64, cout: usize, cin: usize, k: usize, d: usize) -> ConvLayerParams {
    let w = rand_tensor(rng, &[cout, cin, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -1.0, 1.0);
    ConvLayerParams::new(w, b, d).unwrap()
}

pub fn rand_pointwise(rng: &mut SplitMix64, cout: usize, cin: usize) -> PointwiseParams {
    let w = rand_tensor(rng, &[cout, cin], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -1.0, 1.0);
    PointwiseParams::new(w, b).unwrap()
}

pub fn causal_conv(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let (cin, cout) = (range(&mut rng, 1, 4), range(&mut rng, 1, 4));
    let (k, d, t) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3), range(&mut rng, 2, 12));
    let mut layer = rand_conv(&mut rng, cout, cin, k, d);
    let mut x = rand_tensor(&mut rng, &[cin, t], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[cout, t], -1.0, 1.0);

    let grads = causal_conv1d_backward(&x, &layer, &g, true).unwrap();
    let loss = |x: &Tensor, p: &ConvLayerParams| dot(g.data(), causal_conv1d(x, p).unwrap().data());
    let nw = tensor_grad(&mut layer, |p| p.weights_mut(), |p| loss(&x, p));
    let nb = tensor_grad(&mut layer, |p| p.bias_mut(), |p| loss(&x, p));
    let nx = tensor_grad(&mut x, |x| x, |x| loss(x, &layer));
    worst_of([
        rel("causal_conv1d weights", grads.weights.data(), &nw),
        rel("causal_conv1d bias", grads.bias.data(), &nb),
        rel("causal_conv1d input", grads.input.unwrap().data(), &nx),
    ])
}

pub fn pointwise(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let (cin, cout, t) = (range(&mut rng, 1, 5), range(&mut rng, 1, 5), range(&mut rng, 1, 10));
    let mut layer = rand_pointwise(&mut rng, cout, cin);
    let mut x = rand_tensor(&mut rng, &[cin, t], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[cout, t], -1.0, 1.0);

    let grads = pointwise_conv_backward(&x, &layer, &g, true).unwrap();
    let loss = |x: &Tensor, p: &PointwiseParams| dot(g.data(), pointwise_conv(x, p).unwrap().data());
    let nw = tensor_grad(&mut layer, |p| p.weights_mut(), |p| loss(&x, p));
    let nb = tensor_grad(&mut layer, |p| p.bias_mut(), |p| loss(&x, p));
    let nx = tensor_grad(&mut x, |x| x, |x| loss(x, &layer));
    worst_of([
        rel("pointwise weights", grads.weights.data(), &nw),
        rel("pointwise bias", grads.bias.data(), &nb),
        rel("pointwise input", grads.input.unwrap().data(), &nx),
    ])
}

pub fn gated(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let shape = [range(&mut rng, 1, 4), range(&mut rng, 1, 8)];
    let mut paths = (
        rand_tensor(&mut rng, &shape, -1.0, 1.0),
        rand_tensor(&mut rng, &shape, -1.0, 1.0),
    );
    let g = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let (df, dg) = gated_activation_backward(&paths.0, &paths.1, &g).unwrap();
    let loss = |p: &(Tensor, Tensor)| dot(g.data(), gated_activation(&p.0, &p.1).unwrap().data());
    let nf = tensor_grad(&mut paths, |p| &mut p.0, loss);
    let ng = tensor_grad(&mut paths, |p| &mut p.1, loss);
    worst_of([
        rel("gated filter path", df.data(), &nf),
        rel("gated gate path", dg.data(), &ng),
    ])
}

/// The fused conv + gate used inside residual blocks, with an output offset.
pub fn gated_conv(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let (cin, cout) = (range(&mut rng, 1, 4), range(&mut rng, 1, 4));
    let (k, d, t) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3), range(&mut rng, 2, 12));
    let start = range(&mut rng, 0, t - 1);
    let mut pair = (rand_conv(&mut rng, cout, cin, k, d), rand_conv(&mut rng, cout, cin, k, d));
    let mut x = rand_tensor(&mut rng, &[cin, t], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[cout, t - start], -1.0, 1.0);

    let (_, cache) = gated_conv_forward(&x, &pair.0, &pair.1, start).unwrap();
    let (gf, gg, dx) = gated_conv_backward(&pair.0, &pair.1, &cache, &g, Some(t)).unwrap();
    let loss = |x: &Tensor, p: &(ConvLayerParams, ConvLayerParams)| {
        dot(g.data(), gated_conv_forward(x, &p.0, &p.1, start).unwrap().0.data())
    };
    let nfw = tensor_grad(&mut pair, |p| p.0.weights_mut(), |p| loss(&x, p));
    let nfb = tensor_grad(&mut pair, |p| p.0.bias_mut(), |p| loss(&x, p));
    let ngw = tensor_grad(&mut pair, |p| p.1.weights_mut(), |p| loss(&x, p));
    let ngb = tensor_grad(&mut pair, |p| p.1.bias_mut(), |p| loss(&x, p));
    let nx = tensor_grad(&mut x, |x| x, |x| loss(x, &pair));
    worst_of([
        rel("gated conv filter weights", gf.weights.data(), &nfw),
        rel("gated conv filter bias", gf.bias.data(), &nfb),
        rel("gated conv gate weights", gg.weights.data(), &ngw),
        rel("gated conv gate bias", gg.bias.data(), &ngb),
        rel("gated conv input", dx.unwrap().data(), &nx),
    ])
}

pub fn mse(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let n = range(&mut rng, 1, 16);
    let mut pred = rand_tensor(&mut rng, &[n], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[n], -1.0, 1.0);
    let (_, grad) = mse_loss(pred.data(), target.data()).unwrap();
    let numeric = tensor_grad(&mut pred, |p| p, |p| mse_loss(p.data(), target.data()).unwrap().0);
    rel("mse_loss", &grad, &numeric)
}

/// conv -> relu -> pointwise, plus a residual add, then a fused gated conv
/// and a column slice, all through the tape.
pub struct Stack {
    pub conv: ConvLayerParams,
    pub mix: PointwiseParams,
    pub filter: ConvLayerParams,
    pub gate: ConvLayerParams,
    pub start: usize,
}

impl Parameterized for Stack {
    fn param_names(&self) -> Vec<String> {
        ["conv.w", "conv.b", "mix.w", "mix.b", "filter.w", "filter.b", "gate.w", "gate.b"]
            .map(String::from)
            .to_vec()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            self.conv.weights(),
            self.conv.bias(),
            self.mix.weights(),
            self.mix.bias(),
            self.filter.weights(),
            self.filter.bias(),
            self.gate.weights(),
            self.gate.bias(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (cw, cb) = self.conv.parts_mut();
        let (mw, mb) = self.mix.parts_mut();
        let (fw, fb) = self.filter.parts_mut();
        let (gw, gb) = self.gate.parts_mut();
        vec![cw, cb, mw, mb, fw, fb, gw, gb]
    }
}

impl Stack {
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: NodeId) -> NodeId {
        let slot = |i: usize| ParamSlot { weights: 2 * i, bias: 2 * i + 1 };
        let a = tape.conv(x, &self.conv, slot(0)).unwrap();
        let r = tape.relu(a);
        let m = tape.pointwise(r, &self.mix, slot(1)).unwrap();
        let s = tape.add(m, a).unwrap();
        let u = tape.gated_conv(s, &self.filter, &self.gate, [slot(2), slot(3)], self.start).unwrap();
        tape.slice_cols(u, 1).unwrap()
    }

    fn loss(&self, x: &Tensor, g: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let y = self.record(&mut tape, xi);
        dot(g.data(), tape.value(y).data())
    }
}

pub fn stacked(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let (cin, c) = (range(&mut rng, 1, 3), range(&mut rng, 1, 4));
    let t = range(&mut rng, 3, 12);
    let (k1, d1) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3));
    let (k2, d2) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3));
    let mut stack = Stack {
        conv: rand_conv(&mut rng, c, cin, k1, d1),
        mix: rand_pointwise(&mut rng, c, c),
        filter: rand_conv(&mut rng, c, c, k2, d2),
        gate: rand_conv(&mut rng, c, c, k2, d2),
        start: range(&mut rng, 0, t - 2),
    };
    let mut x = rand_tensor(&mut rng, &[cin, t], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[c, t - stack.start - 1], -1.0, 1.0);

    let mut grads = stack.zero_grads();
    let mut tape = Tape::new();
    let xi = tape.variable(x.clone());
    let y = stack.record(&mut tape, xi);
    let dx = tape.backward(y, g.clone(), &mut grads).unwrap().get(xi).unwrap().clone();
    drop(tape);

    let numeric = param_grads(&mut stack, |s| s.loss(&x, &g));
    let params = worst_param(&stack.param_names(), &grads, &numeric);
    let nx = tensor_grad(&mut x, |x| x, |x| stack.loss(x, &g));
    worst_of([
        (params.0, format!("stack {}", params.1)),
        rel("stack input", dx.data(), &nx),
    ])
}

fn wavenet_loss(m: &WaveNet, x: &Tensor, first: usize, g: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let y = m.record_from(&mut tape, xi, first).unwrap();
    dot(g.data(), tape.value(y).data())
}

/// Compares every parameter, or `sample` random entries when given.
fn compare_params<M: Parameterized>(
    model: &mut M,
    grads: &[Tensor],
    loss: impl Fn(&M) -> f64,
    sample: Option<(usize, &mut SplitMix64)>,
) -> Worst {
    let names = model.param_names();
    match sample {
        None => {
            let numeric = param_grads(model, loss);
            worst_param(&names, grads, &numeric)
        }
        Some((count, rng)) => worst_of(
            sampled_param_grads(model, loss, count, rng)
                .into_iter()
                .map(|(p, j, n)| rel(format!("{}[{j}]", names[p]), &[grads[p].data()[j]], &[n])),
        ),
    }
}

fn check_wavenet(seed: u64, config: WaveNetConfig, t: usize, first: usize, sample: Option<usize>) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let mut model = WaveNet::new(config, &mut rng).unwrap();
    redraw(&mut model, &mut rng, sample.is_some());
    let mut x = rand_tensor(&mut rng, &[config.input_features, t], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[1, t - first], -1.0, 1.0);

    let mut grads = model.zero_grads();
    let mut tape = Tape::new();
    let xi = tape.variable(x.clone());
    let y = model.record_from(&mut tape, xi, first).unwrap();
    let dx = tape.backward(y, g.clone(), &mut grads).unwrap().get(xi).unwrap().clone();
    drop(tape);

    let mut pick = rng.fork();
    let loss = |m: &WaveNet| wavenet_loss(m, &x, first, &g);
    let params = compare_params(&mut model, &grads, loss, sample.map(|n| (n, &mut pick)));
    let nx = tensor_grad(&mut x, |x| x, |x| wavenet_loss(&model, x, first, &g));
    worst_of([
        (params.0, format!("WaveNet {config:?} {}", params.1)),
        rel(format!("WaveNet {config:?} input"), dx.data(), &nx),
    ])
}

/// Random small architecture, every parameter drawn from [-1, 1].
pub fn wavenet(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let config = WaveNetConfig {
        filter_size: range(&mut rng, 1, 3),
        num_filters: range(&mut rng, 1, 5),
        dilation_base: range(&mut rng, 1, 3),
        num_layers: range(&mut rng, 1, 3),
        input_features: range(&mut rng, 1, 4),
    };
    let t = range(&mut rng, 2, 12);
    let first = range(&mut rng, 0, t - 1);
    check_wavenet(seed, config, t, first, None)
}

/// Default architecture on one training window (only its last output).
pub fn wavenet_default(seed: u64) -> Worst {
    check_wavenet(seed, WaveNetConfig::default(), 8, 7, Some(FULL_SIZE_SAMPLES))
}

fn lstm_loss(m: &Lstm, steps: &[Tensor], g: &[f64]) -> f64 {
    dot(g, &m.forward_windows(steps).unwrap().0)
}

fn check_lstm(seed: u64, config: LstmConfig, w: usize, batch: usize, sample: Option<usize>) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let mut model = Lstm::new(config, &mut rng).unwrap();
    redraw(&mut model, &mut rng, sample.is_some());
    let steps: Vec<Tensor> = (0..w)
        .map(|_| rand_tensor(&mut rng, &[config.input_features, batch], -1.0, 1.0))
        .collect();
    let g: Vec<f64> = (0..batch).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let mut grads = model.zero_grads();
    let (_, trace) = model.forward_windows(&steps).unwrap();
    model.backward_windows(&trace, &g, &mut grads).unwrap();
    let mut pick = rng.fork();
    let loss = |m: &Lstm| lstm_loss(m, &steps, &g);
    let (err, name) = compare_params(&mut model, &grads, loss, sample.map(|n| (n, &mut pick)));
    (err, format!("LSTM {config:?} {name}"))
}

pub fn lstm(seed: u64) -> Worst {
    let mut rng = SplitMix64::new(seed);
    let config = LstmConfig {
        hidden_size: range(&mut rng, 1, 6),
        input_features: range(&mut rng, 1, 4),
    };
    let (w, batch) = (range(&mut rng, 1, 8), range(&mut rng, 1, 3));
    check_lstm(seed, config, w, batch, None)
}

pub fn lstm_default(seed: u64) -> Worst {
    check_lstm(seed, LstmConfig::default(), 8, 2, Some(FULL_SIZE_SAMPLES))
}

/// Every check with the seed offset it runs from.
pub const CHECKS: [(&str, fn(u64) -> Worst, u64); 10] = [
    ("causal_conv1d", causal_conv, 0),
    ("pointwise_conv", pointwise, 100),
    ("gated_activation", gated, 200),
    ("gated conv", gated_conv, 300),
    ("mse_loss", mse, 400),
    ("stacked layers", stacked, 500),
    ("WaveNet", wavenet, 600),
    ("WaveNet default", wavenet_default, 800),
    ("LSTM", lstm, 700),
    ("LSTM default", lstm_default, 900),
];

/// Worst error of one check over all seeds.
pub fn run(check: fn(u64) -> Worst, offset: u64) -> Worst {
    worst_of((0..SEEDS).map(|s| {
        let (e, label) = check(offset + s);
        (e, format!("{label} (seed {})", offset + s))
    }))
}
