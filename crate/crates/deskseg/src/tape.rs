//! Reverse-mode differentiation via an explicit tape.
//!
//! Forward calls record one entry per primitive application: the input and
//! output node ids plus whatever the primitive's vector-Jacobian product
//! needs. `backward` replays the records in reverse, accumulating gradients
//! into every node reachable from the loss. One training step builds and
//! consumes one tape on one thread.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::BnTrainSaved;
use crate::tensor::{Element, IntTensor, TensorBase};

pub type NodeId = usize;

struct Node<T> {
    value: TensorBase<T>,
    grad: Option<TensorBase<T>>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize, padding: usize },
    BilinearResize { input: NodeId },
    SoftmaxAxis { input: NodeId, axis: usize },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Log { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulScalar { input: NodeId, c: T },
    AddScalar { input: NodeId },
    RsubScalar { input: NodeId },
    BroadcastChannel { input: NodeId },
    Concat { inputs: Vec<NodeId>, splits: Vec<usize> },
    AvgPool2 { input: NodeId },
    ChannelAffine { input: NodeId, scale: NodeId, shift: NodeId },
    BnTrain { input: NodeId, gamma: NodeId, beta: NodeId, saved: BnTrainSaved<T> },
    BnEval { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, var: Vec<T>, epsilon: f64 },
    Reshape { input: NodeId },
    Bmm { a: NodeId, b: NodeId },
    Transpose12 { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    CrossEntropy { logits: NodeId, mask: IntTensor, ignore_id: Option<u8> },
}

struct Record<T> {
    op: Op<T>,
    out: NodeId,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    records: Vec<Record<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new() }
    }

    fn push_node(&mut self, value: TensorBase<T>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad: None });
        id
    }

    fn push(&mut self, op: Op<T>, value: TensorBase<T>) -> NodeId {
        let out = self.push_node(value);
        self.records.push(Record { op, out });
        out
    }

    /// Register an input or parameter node.
    pub fn leaf(&mut self, value: TensorBase<T>) -> NodeId {
        let out = self.push_node(value);
        self.records.push(Record { op: Op::Leaf, out });
        out
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&TensorBase<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ---- forward-recording primitives -------------------------------------

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let out = ops::conv2d(
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            bias.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        Ok(self.push(Op::Conv2d { input, kernel, bias, stride, padding }, out))
    }

    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = ops::bilinear_resize(&self.nodes[input].value, out_h, out_w)?;
        Ok(self.push(Op::BilinearResize { input }, out))
    }

    pub fn softmax_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let out = ops::softmax_axis(&self.nodes[input].value, axis)?;
        Ok(self.push(Op::SoftmaxAxis { input, axis }, out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(&self.nodes[input].value);
        self.push(Op::Relu { input }, out)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = ops::sigmoid(&self.nodes[input].value);
        self.push(Op::Sigmoid { input }, out)
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let out = ops::log(&self.nodes[input].value);
        self.push(Op::Log { input }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn mul_scalar(&mut self, input: NodeId, c: T) -> NodeId {
        let out = ops::mul_scalar(&self.nodes[input].value, c);
        self.push(Op::MulScalar { input, c }, out)
    }

    pub fn add_scalar(&mut self, input: NodeId, c: T) -> NodeId {
        let out = ops::add_scalar(&self.nodes[input].value, c);
        self.push(Op::AddScalar { input }, out)
    }

    /// c - x.
    pub fn rsub_scalar(&mut self, input: NodeId, c: T) -> NodeId {
        let out = ops::rsub_scalar(&self.nodes[input].value, c);
        self.push(Op::RsubScalar { input }, out)
    }

    pub fn broadcast_channel(&mut self, input: NodeId, channels: usize) -> Result<NodeId> {
        let out = ops::broadcast_channel(&self.nodes[input].value, channels)?;
        Ok(self.push(Op::BroadcastChannel { input }, out))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&TensorBase<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_channels(&tensors)?;
        let splits = inputs.iter().map(|&i| self.nodes[i].value.shape()[1]).collect();
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), splits }, out))
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::avg_pool2(&self.nodes[input].value)?;
        Ok(self.push(Op::AvgPool2 { input }, out))
    }

    pub fn channel_affine(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let out = ops::channel_affine(&self.nodes[input].value, &self.nodes[scale].value, &self.nodes[shift].value)?;
        Ok(self.push(Op::ChannelAffine { input, scale, shift }, out))
    }

    /// Batch-statistics normalization. Returns the output node plus the batch
    /// mean/variance so the caller can fold them into running statistics.
    pub fn bn_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, epsilon: f64) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let (out, saved) = ops::batchnorm_train(
            &self.nodes[input].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            epsilon,
        )?;
        let mean = saved.mean.clone();
        let var = saved.var.clone();
        let id = self.push(Op::BnTrain { input, gamma, beta, saved }, out);
        Ok((id, mean, var))
    }

    pub fn bn_eval(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, var: Vec<T>, epsilon: f64) -> Result<NodeId> {
        let out = ops::batchnorm_eval(
            &self.nodes[input].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            &mean,
            &var,
            epsilon,
        )?;
        Ok(self.push(Op::BnEval { input, gamma, beta, mean, var, epsilon }, out))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[input].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { input }, out))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::bmm(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Bmm { a, b }, out))
    }

    pub fn transpose12(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::transpose12(&self.nodes[input].value)?;
        Ok(self.push(Op::Transpose12 { input }, out))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = ops::linear(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            bias.map(|b| &self.nodes[b].value),
        )?;
        Ok(self.push(Op::Linear { input, weight, bias }, out))
    }

    /// Scalar node ([1]) holding the mean pixel cross-entropy.
    pub fn cross_entropy(&mut self, logits: NodeId, mask: &IntTensor, ignore_id: Option<u8>) -> Result<NodeId> {
        let loss = ops::cross_entropy(&self.nodes[logits].value, mask, ignore_id)?;
        Ok(self.push(
            Op::CrossEntropy { logits, mask: mask.clone(), ignore_id },
            TensorBase::scalar(loss),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Backward from a scalar node with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss node must be scalar, has shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let ones = TensorBase::ones(self.nodes[loss].value.shape());
        self.backward_seeded(loss, ones)
    }

    /// Backward with an explicit cotangent at `output`.
    pub fn backward_seeded(&mut self, output: NodeId, seed: TensorBase<T>) -> Result<()> {
        if seed.shape() != self.nodes[output].value.shape() {
            return Err(Error::shape(
                "backward_seeded",
                format!("{:?}", self.nodes[output].value.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        self.accumulate(output, seed);
        for ri in (0..self.records.len()).rev() {
            let out = self.records[ri].out;
            // A node's gradient is complete once every later record has been
            // replayed; take it so the VJP below owns it.
            let Some(g) = self.nodes[out].grad.take() else { continue };
            let contributions = self.vjp(ri, &g)?;
            // Keep leaf gradients visible to the caller.
            if matches!(self.records[ri].op, Op::Leaf) {
                self.nodes[out].grad = Some(g);
            }
            for (id, grad) in contributions {
                self.accumulate(id, grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: TensorBase<T>) {
        match &mut self.nodes[id].grad {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e = *e + *g;
                }
            }
            None => self.nodes[id].grad = Some(grad),
        }
    }

    fn vjp(&self, ri: usize, g: &TensorBase<T>) -> Result<Vec<(NodeId, TensorBase<T>)>> {
        let record = &self.records[ri];
        let out = record.out;
        Ok(match &record.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (di, dk, db) = ops::conv2d_vjp(
                    g,
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    bias.is_some(),
                    *stride,
                    *padding,
                );
                let mut v = vec![(*input, di), (*kernel, dk)];
                if let (Some(b), Some(db)) = (bias, db) {
                    v.push((*b, db));
                }
                v
            }
            Op::BilinearResize { input } => {
                let (_, _, h, w) = self.nodes[*input].value.dims4()?;
                vec![(*input, ops::bilinear_resize_vjp(g, h, w))]
            }
            Op::SoftmaxAxis { input, axis } => {
                vec![(*input, ops::softmax_axis_vjp(g, &self.nodes[out].value, *axis))]
            }
            Op::Relu { input } => vec![(*input, ops::relu_vjp(g, &self.nodes[*input].value))],
            Op::Sigmoid { input } => vec![(*input, ops::sigmoid_vjp(g, &self.nodes[out].value))],
            Op::Log { input } => vec![(*input, ops::log_vjp(g, &self.nodes[*input].value))],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let da = ops::mul(g, &self.nodes[*b].value)?;
                let db = ops::mul(g, &self.nodes[*a].value)?;
                vec![(*a, da), (*b, db)]
            }
            Op::MulScalar { input, c } => vec![(*input, ops::mul_scalar(g, *c))],
            Op::AddScalar { input } => vec![(*input, g.clone())],
            Op::RsubScalar { input } => vec![(*input, ops::mul_scalar(g, -T::one()))],
            Op::BroadcastChannel { input } => {
                let (n, _, h, w) = self.nodes[*input].value.dims4()?;
                vec![(*input, ops::broadcast_channel_vjp(g, n, h, w))]
            }
            Op::Concat { inputs, splits } => {
                let grads = ops::concat_channels_vjp(g, splits);
                inputs.iter().copied().zip(grads).collect()
            }
            Op::AvgPool2 { input } => {
                let (_, _, h, w) = self.nodes[*input].value.dims4()?;
                vec![(*input, ops::avg_pool2_vjp(g, h, w))]
            }
            Op::ChannelAffine { input, scale, shift } => {
                let (dx, ds, db) = ops::channel_affine_vjp(g, &self.nodes[*input].value, &self.nodes[*scale].value);
                vec![(*input, dx), (*scale, ds), (*shift, db)]
            }
            Op::BnTrain { input, gamma, beta, saved } => {
                let (dx, dg, db) = ops::batchnorm_train_vjp(g, saved, &self.nodes[*gamma].value);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BnEval { input, gamma, beta, mean, var, epsilon } => {
                let (dx, dg, db) = ops::batchnorm_eval_vjp(
                    g,
                    &self.nodes[*input].value,
                    &self.nodes[*gamma].value,
                    mean,
                    var,
                    *epsilon,
                );
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Reshape { input } => {
                vec![(*input, g.reshaped(self.nodes[*input].value.shape())?)]
            }
            Op::Bmm { a, b } => {
                let (da, db) = ops::bmm_vjp(g, &self.nodes[*a].value, &self.nodes[*b].value);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose12 { input } => vec![(*input, ops::transpose12_vjp(g))],
            Op::Linear { input, weight, bias } => {
                let (di, dw, db) = ops::linear_vjp(g, &self.nodes[*input].value, &self.nodes[*weight].value, bias.is_some());
                let mut v = vec![(*input, di), (*weight, dw)];
                if let (Some(b), Some(db)) = (bias, db) {
                    v.push((*b, db));
                }
                v
            }
            Op::CrossEntropy { logits, mask, ignore_id } => {
                let upstream = g.data()[0];
                vec![(*logits, ops::cross_entropy_vjp(upstream, &self.nodes[*logits].value, mask, *ignore_id))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_chain_gradient() {
        // y = relu(3 * x), dy/dx = 3 where x > 0
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let scaled = tape.mul_scalar(x, 3.0);
        let y = tape.relu(scaled);
        let seed = Tensor::ones(&[3]);
        tape.backward_seeded(y, seed).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 0.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // z = x*x (as mul of the same node): dz/dx = 2x
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -4.0]));
        let z = tape.mul(x, x).unwrap();
        tape.backward_seeded(z, Tensor::ones(&[2])).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_pixel() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3, 1, 2], vec![0.3, -0.1, 0.9, 0.2, -0.5, 0.8]));
        let mask = IntTensor::new(vec![1, 1, 2], vec![2, 0]).unwrap();
        let loss = tape.cross_entropy(logits, &mask, None).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        // softmax minus onehot sums to zero over classes at each pixel
        for p in 0..2 {
            let s: f32 = (0..3).map(|c| g.data()[c * 2 + p]).sum();
            assert!(s.abs() < 1e-6, "pixel {p}: {s}");
        }
    }
}
