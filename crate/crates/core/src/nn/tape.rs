//! Explicit record of executed layer ops, replayed in reverse for gradients.
//!
//! A [`Tape`] borrows the parameters it was built with, so a model cannot be
//! mutated while a tape over it is alive. Each parameterized op carries a
//! [`ParamSlot`] telling `backward` where its gradients accumulate.

use super::ops::{
    self, causal_conv1d, gated_activation_cached, gated_conv_forward, pointwise_conv, relu, ConvLayerParams,
    GateCache, GatedConvCache, GradSink, PointwiseParams,
};
use super::tensor::Tensor;
use crate::error::{QoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradient-buffer indices for a layer's weights and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub weights: usize,
    pub bias: usize,
}

enum Op<'p> {
    Leaf { track: bool },
    Conv { x: NodeId, layer: &'p ConvLayerParams, slot: ParamSlot },
    Pointwise { x: NodeId, layer: &'p PointwiseParams, slot: ParamSlot },
    Gated { filter: NodeId, gate: NodeId, cache: GateCache },
    GatedConv {
        x: NodeId,
        filter: &'p ConvLayerParams,
        gate: &'p ConvLayerParams,
        slots: [ParamSlot; 2],
        cache: GatedConvCache,
    },
    Add { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    Relu { x: NodeId },
}

struct Node<'p> {
    value: Tensor,
    op: Op<'p>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    macs: u64,
}

/// Gradients of tracked leaves after a backward pass.
pub struct LeafGrads {
    grads: Vec<Option<Tensor>>,
}

impl LeafGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op<'p>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { track: false }, false)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { track: true }, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Dense multiply-adds executed so far (padding taps included).
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn conv(&mut self, x: NodeId, layer: &'p ConvLayerParams, slot: ParamSlot) -> Result<NodeId> {
        let value = causal_conv1d(self.value(x), layer)?;
        let steps = value.shape()[1] as u64;
        self.macs += (layer.out_channels() * layer.in_channels() * layer.filter_size()) as u64 * steps;
        Ok(self.push(value, Op::Conv { x, layer, slot }, true))
    }

    pub fn pointwise(&mut self, x: NodeId, layer: &'p PointwiseParams, slot: ParamSlot) -> Result<NodeId> {
        let value = pointwise_conv(self.value(x), layer)?;
        let steps = value.shape()[1] as u64;
        self.macs += (layer.out_channels() * layer.in_channels()) as u64 * steps;
        Ok(self.push(value, Op::Pointwise { x, layer, slot }, true))
    }

    pub fn gated(&mut self, filter: NodeId, gate: NodeId) -> Result<NodeId> {
        let (value, cache) = gated_activation_cached(self.value(filter), self.value(gate))?;
        let needs = self.needs(filter) || self.needs(gate);
        Ok(self.push(value, Op::Gated { filter, gate, cache }, needs))
    }

    /// `tanh(filter * x) * sigmoid(gate * x)` as one op, evaluated only at
    /// columns `start..T`; slots are `[filter, gate]`.
    pub fn gated_conv(
        &mut self,
        x: NodeId,
        filter: &'p ConvLayerParams,
        gate: &'p ConvLayerParams,
        slots: [ParamSlot; 2],
        start: usize,
    ) -> Result<NodeId> {
        let (value, cache) = gated_conv_forward(self.value(x), filter, gate, start)?;
        let steps = value.shape()[1] as u64;
        self.macs += 2 * (filter.out_channels() * filter.in_channels() * filter.filter_size()) as u64 * steps;
        Ok(self.push(
            value,
            Op::GatedConv {
                x,
                filter,
                gate,
                slots,
                cache,
            },
            true,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Columns `start..` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize) -> Result<NodeId> {
        let value = self.value(x);
        let end = value.dims2()?.1;
        let value = value.slice_cols(start, end)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Reverse pass from `output` seeded with `grad_output`. Parameter
    /// gradients are added into `param_grads` at each op's slot.
    pub fn backward(&self, output: NodeId, grad_output: Tensor, param_grads: &mut [Tensor]) -> Result<LeafGrads> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(QoeError::NoForward);
        }
        if grad_output.shape() != self.value(output).shape() {
            return Err(QoeError::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                grad_output.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad_output);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                &Op::Conv { x, layer, slot } => {
                    let lg = ops::causal_conv1d_backward(self.value(x), layer, &g, self.needs(x))?;
                    accumulate_param(param_grads, slot, &lg.weights, &lg.bias)?;
                    if let Some(dx) = lg.input {
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                &Op::Pointwise { x, layer, slot } => {
                    let sink = grad_sink(param_grads, slot)?;
                    if let Some(dx) = ops::pointwise_conv_backward_into(self.value(x), layer, &g, self.needs(x), sink)? {
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                &Op::Gated { filter, gate, ref cache } => {
                    let (df, dg) = ops::gated_backward_from_cache(cache, &g)?;
                    if self.needs(filter) {
                        accumulate(&mut grads, filter, df)?;
                    }
                    if self.needs(gate) {
                        accumulate(&mut grads, gate, dg)?;
                    }
                }
                &Op::GatedConv {
                    x,
                    filter,
                    gate,
                    slots,
                    ref cache,
                } => {
                    let input_steps = self.needs(x).then(|| self.value(x).shape()[1]);
                    let n = param_grads.len();
                    let idx = [slots[0].weights, slots[0].bias, slots[1].weights, slots[1].bias];
                    let [fw, fb, gw, gb] = param_grads
                        .get_disjoint_mut(idx)
                        .map_err(|_| QoeError::invalid(format!("invalid parameter slots {idx:?} ({n} buffers)")))?;
                    let sinks = [GradSink { weights: fw, bias: fb }, GradSink { weights: gw, bias: gb }];
                    if let Some(dx) = ops::gated_conv_backward_into(filter, gate, cache, &g, input_steps, sinks)? {
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                &Op::Add { a, b } => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone())?;
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g)?;
                    }
                }
                &Op::SliceCols { x, start } => {
                    if self.needs(x) {
                        let (rows, cols) = self.value(x).dims2()?;
                        let width = cols - start;
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            dx[r * cols + start..(r + 1) * cols].copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                        }
                        accumulate(&mut grads, x, Tensor::from_vec(&[rows, cols], dx)?)?;
                    }
                }
                &Op::Relu { x } => {
                    if self.needs(x) {
                        let dx = ops::relu_backward(self.value(x), &g)?;
                        accumulate(&mut grads, x, dx)?;
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf { track: true }) {
                *g = None;
            }
        }
        Ok(LeafGrads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn grad_sink(param_grads: &mut [Tensor], slot: ParamSlot) -> Result<GradSink<'_>> {
    let n = param_grads.len();
    let [weights, bias] = param_grads.get_disjoint_mut([slot.weights, slot.bias]).map_err(|_| {
        QoeError::invalid(format!("invalid parameter slot {slot:?} ({n} buffers)"))
    })?;
    Ok(GradSink { weights, bias })
}

fn accumulate_param(param_grads: &mut [Tensor], slot: ParamSlot, w: &Tensor, b: &Tensor) -> Result<()> {
    let n = param_grads.len();
    let bad = |i: usize| QoeError::invalid(format!("parameter slot {i} out of range ({n} buffers)"));
    param_grads.get_mut(slot.weights).ok_or_else(|| bad(slot.weights))?.add_assign(w)?;
    param_grads.get_mut(slot.bias).ok_or_else(|| bad(slot.bias))?.add_assign(b)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn random_conv(rng: &mut SplitMix64, out: usize, inp: usize, k: usize, d: usize) -> ConvLayerParams {
        ConvLayerParams::new(random_tensor(rng, &[out, inp, k]), random_tensor(rng, &[out]), d).unwrap()
    }

    const SLOT0: ParamSlot = ParamSlot { weights: 0, bias: 1 };
    const SLOT1: ParamSlot = ParamSlot { weights: 2, bias: 3 };

    #[test]
    fn backward_on_empty_tape_is_rejected() {
        let tape = Tape::new();
        let err = tape.backward(NodeId(0), Tensor::zeros(&[1]), &mut []).err().unwrap();
        assert!(matches!(err, QoeError::NoForward));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SplitMix64::new(1);
        let layer = random_conv(&mut rng, 3, 2, 2, 1);
        let x = random_tensor(&mut rng, &[2, 6]);
        let mut tape = Tape::new();
        let xi = tape.variable(x);
        let y = tape.conv(xi, &layer, SLOT0).unwrap();
        let mut grads = vec![Tensor::zeros(&[3, 2, 2]), Tensor::zeros(&[3])];
        let leaf = tape.backward(y, Tensor::zeros(&[3, 6]), &mut grads).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(leaf.get(xi).unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// Quadratic loss 0.5 * sum(y^2) through two stacked convs, checked by
    /// central differences on every weight.
    #[test]
    fn two_stacked_convs_match_finite_differences() {
        let mut rng = SplitMix64::new(99);
        let mut flat = vec![
            random_tensor(&mut rng, &[3, 2, 2]),
            random_tensor(&mut rng, &[3]),
            random_tensor(&mut rng, &[2, 3, 2]),
            random_tensor(&mut rng, &[2]),
        ];
        let x = random_tensor(&mut rng, &[2, 7]);
        let build = |flat: &[Tensor]| {
            [
                ConvLayerParams::new(flat[0].clone(), flat[1].clone(), 1).unwrap(),
                ConvLayerParams::new(flat[2].clone(), flat[3].clone(), 2).unwrap(),
            ]
        };
        let loss = |flat: &[Tensor]| {
            let layers = build(flat);
            let h = causal_conv1d(&x, &layers[0]).unwrap();
            let y = causal_conv1d(&h, &layers[1]).unwrap();
            0.5 * y.data().iter().map(|v| v * v).sum::<f64>()
        };

        let mut grads: Vec<Tensor> = flat.iter().map(Tensor::zeros_like).collect();
        {
            let layers = build(&flat);
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let h = tape.conv(xi, &layers[0], SLOT0).unwrap();
            let y = tape.conv(h, &layers[1], SLOT1).unwrap();
            let seed = tape.value(y).clone();
            tape.backward(y, seed, &mut grads).unwrap();
        }

        for slot in 0..flat.len() {
            for i in 0..flat[slot].len() {
                let orig = flat[slot].data()[i];
                let h = 1e-5 * orig.abs().max(1.0);
                flat[slot].data_mut()[i] = orig + h;
                let up = loss(&flat);
                flat[slot].data_mut()[i] = orig - h;
                let down = loss(&flat);
                flat[slot].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[slot].data()[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel <= 1e-4, "slot {slot} idx {i}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn fused_gated_conv_matches_composition() {
        let mut rng = SplitMix64::new(7);
        let filter = random_conv(&mut rng, 3, 2, 3, 2);
        let gate = random_conv(&mut rng, 3, 2, 3, 2);
        let x = random_tensor(&mut rng, &[2, 9]);
        let up = random_tensor(&mut rng, &[3, 9]);
        let n_params = 4;

        let mut fused_grads: Vec<Tensor> =
            [filter.weights(), filter.bias(), gate.weights(), gate.bias()].map(Tensor::zeros_like).to_vec();
        let mut tape = Tape::new();
        let xi = tape.variable(x.clone());
        let u = tape.gated_conv(xi, &filter, &gate, [SLOT0, SLOT1], 0).unwrap();
        let fused_value = tape.value(u).clone();
        let fused_dx = tape.backward(u, up.clone(), &mut fused_grads).unwrap().get(xi).unwrap().clone();

        let mut plain_grads = fused_grads.iter().map(Tensor::zeros_like).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let xi = tape.variable(x);
        let f = tape.conv(xi, &filter, SLOT0).unwrap();
        let g = tape.conv(xi, &gate, SLOT1).unwrap();
        let u = tape.gated(f, g).unwrap();
        let plain_value = tape.value(u).clone();
        let plain_dx = tape.backward(u, up, &mut plain_grads).unwrap().get(xi).unwrap().clone();

        let close = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-13);
        assert!(close(&fused_value, &plain_value));
        assert!(close(&fused_dx, &plain_dx));
        for i in 0..n_params {
            assert!(close(&fused_grads[i], &plain_grads[i]), "param {i}");
        }
    }

    #[test]
    fn offset_gated_conv_matches_sliced_full_conv() {
        let mut rng = SplitMix64::new(8);
        let filter = random_conv(&mut rng, 2, 3, 2, 3);
        let gate = random_conv(&mut rng, 2, 3, 2, 3);
        let x = random_tensor(&mut rng, &[3, 10]);
        let up = random_tensor(&mut rng, &[2, 6]);
        let run = |direct: bool| {
            let mut grads: Vec<Tensor> =
                [filter.weights(), filter.bias(), gate.weights(), gate.bias()].map(Tensor::zeros_like).to_vec();
            let mut tape = Tape::new();
            let xi = tape.variable(x.clone());
            let u = if direct {
                tape.gated_conv(xi, &filter, &gate, [SLOT0, SLOT1], 4).unwrap()
            } else {
                let full = tape.gated_conv(xi, &filter, &gate, [SLOT0, SLOT1], 0).unwrap();
                tape.slice_cols(full, 4).unwrap()
            };
            let value = tape.value(u).clone();
            let dx = tape.backward(u, up.clone(), &mut grads).unwrap().get(xi).unwrap().clone();
            (value, dx, grads)
        };
        let (v1, dx1, g1) = run(true);
        let (v2, dx2, g2) = run(false);
        let close = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-13);
        assert_eq!(v1.shape(), [2, 6]);
        assert!(close(&v1, &v2) && close(&dx1, &dx2));
        assert!(g1.iter().zip(&g2).all(|(a, b)| close(a, b)));
    }

    #[test]
    fn mac_count_is_shape_determined() {
        let layer = ConvLayerParams::zeros(4, 3, 2, 1).unwrap();
        let pw = PointwiseParams::zeros(1, 4);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 10]));
        let h = tape.conv(x, &layer, SLOT0).unwrap();
        tape.pointwise(h, &pw, SLOT1).unwrap();
        assert_eq!(tape.mac_count(), 4 * 3 * 2 * 10 + 4 * 10);
    }
}
