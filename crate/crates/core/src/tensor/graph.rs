//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so a
//! reverse sweep over the node list is a valid topological order.

use std::collections::HashMap;

use super::{
    add, concat_channels, conv2d, conv2d_backward, crop, mae, mae_backward, max_pool2d,
    max_pool2d_backward, max_unpool2d, max_unpool2d_backward, mul, nonlocal_apply,
    nonlocal_backward, relu, relu_backward, scale, tanh, tanh_backward, tile_grid, AffinityMode,
    Element, PoolIndices, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    MaxPool {
        input: Var,
        indices: PoolIndices,
    },
    MaxUnpool {
        input: Var,
        indices: PoolIndices,
    },
    NonLocal {
        input: Var,
        theta: Var,
        phi: Var,
        g: Var,
        mode: AffinityMode,
    },
    Concat(Vec<Var>),
    Crop {
        input: Var,
        y0: usize,
        x0: usize,
    },
    Tile {
        tiles: Vec<Var>,
        k: usize,
    },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mae {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every `requires_grad` leaf after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Registers a leaf; its `requires_grad` flag decides whether it gets a gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.value(*v).is_finite()) || value.is_finite(),
            "non-finite output from {op:?}"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<(Var, PoolIndices)> {
        let (out, indices) = max_pool2d(self.value(input))?;
        let var = self.push(
            out,
            Op::MaxPool {
                input,
                indices: indices.clone(),
            },
            &[input],
        );
        Ok((var, indices))
    }

    pub fn max_unpool2d(&mut self, input: Var, indices: &PoolIndices) -> Result<Var> {
        let out = max_unpool2d(self.value(input), indices)?;
        Ok(self.push(
            out,
            Op::MaxUnpool {
                input,
                indices: indices.clone(),
            },
            &[input],
        ))
    }

    pub fn nonlocal(
        &mut self,
        input: Var,
        theta: Var,
        phi: Var,
        g: Var,
        mode: AffinityMode,
    ) -> Result<Var> {
        let out = nonlocal_apply(
            self.value(input),
            self.value(theta),
            self.value(phi),
            self.value(g),
            mode,
        )?;
        Ok(self.push(
            out,
            Op::NonLocal {
                input,
                theta,
                phi,
                g,
                mode,
            },
            &[input, theta, phi, g],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if let [single] = inputs {
            return Ok(*single);
        }
        let values: Vec<_> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = crop(self.value(input), y0, x0, h, w)?;
        Ok(self.push(out, Op::Crop { input, y0, x0 }, &[input]))
    }

    pub fn tile(&mut self, tiles: &[Var], k: usize) -> Result<Var> {
        let values: Vec<_> = tiles.iter().map(|v| self.value(*v)).collect();
        let out = tile_grid(&values, k)?;
        Ok(self.push(
            out,
            Op::Tile {
                tiles: tiles.to_vec(),
                k,
            },
            tiles,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = relu(self.value(input));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = tanh(self.value(input));
        self.push(out, Op::Tanh(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = scale(self.value(input), factor);
        self.push(out, Op::Scale(input, factor), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input), &[input])
    }

    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let out = mae(self.value(pred), self.value(target))?;
        Ok(self.push(out, Op::Mae { pred, target }, &[pred, target]))
    }

    /// Branch taken at every non-smooth point of the tape: ReLU on/off masks,
    /// pooling argmaxes and MAE residual signs. Two tapes with equal patterns
    /// lie on the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    out.extend(node.value.data().iter().map(|&v| (v > T::zero()) as u32))
                }
                Op::MaxPool { indices, .. } => out.extend_from_slice(indices.as_slice()),
                Op::Mae { pred, target } => out.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(p, t)| (p.partial_cmp(t).map_or(3, |o| o as i8 + 1)) as u32),
                ),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            for (var, g) in self.input_grads(node, &grad)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(Var(id), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn input_grads(&self, node: &Node<T>, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let v = |var: Var| self.value(var);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let g = conv2d_backward(v(*input), v(*kernel), *padding, grad)?;
                vec![(*input, g.input), (*kernel, g.kernel), (*bias, g.bias)]
            }
            Op::MaxPool { input, indices } => vec![(*input, max_pool2d_backward(indices, grad)?)],
            Op::MaxUnpool { input, indices } => {
                vec![(*input, max_unpool2d_backward(indices, grad)?)]
            }
            Op::NonLocal {
                input,
                theta,
                phi,
                g,
                mode,
            } => {
                let gr = nonlocal_backward(v(*input), v(*theta), v(*phi), v(*g), *mode, grad)?;
                vec![
                    (*input, gr.input),
                    (*theta, gr.w_theta),
                    (*phi, gr.w_phi),
                    (*g, gr.w_g),
                ]
            }
            Op::Concat(inputs) => {
                let (_, h, w) = grad.chw()?;
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&var| {
                        let len = v(var).numel();
                        let part = grad.data()[offset..offset + len].to_vec();
                        offset += len;
                        let c = len / (h * w);
                        Ok((var, Tensor::new(vec![c, h, w], part)?))
                    })
                    .collect::<Result<_>>()?
            }
            Op::Crop { input, y0, x0 } => {
                let src = v(*input);
                let (c, sh, sw) = src.chw()?;
                let (_, h, w) = grad.chw()?;
                let mut full = Tensor::zeros(src.shape());
                let data = full.data_mut();
                for ci in 0..c {
                    for y in 0..h {
                        let dst = (ci * sh + y0 + y) * sw + x0;
                        let s = (ci * h + y) * w;
                        data[dst..dst + w].copy_from_slice(&grad.data()[s..s + w]);
                    }
                }
                vec![(*input, full)]
            }
            Op::Tile { tiles, k } => {
                let (_, th, tw) = v(tiles[0]).chw()?;
                tiles
                    .iter()
                    .enumerate()
                    .map(|(r, &var)| Ok((var, crop(grad, (r / k) * th, (r % k) * tw, th, tw)?)))
                    .collect::<Result<_>>()?
            }
            Op::Relu(input) => vec![(*input, relu_backward(&node.value, grad))],
            Op::Tanh(input) => vec![(*input, tanh_backward(&node.value, grad))],
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Mul(a, b) => vec![(*a, mul(grad, v(*b))?), (*b, mul(grad, v(*a))?)],
            Op::Scale(input, factor) => vec![(*input, scale(grad, *factor))],
            Op::Sum(input) => vec![(*input, Tensor::full(v(*input).shape(), grad.item()))],
            Op::Mae { pred, target } => {
                let gp = mae_backward(v(*pred), v(*target), grad.item());
                let gt = scale(&gp, -T::one());
                vec![(*pred, gp), (*target, gt)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f32).with_grad(true));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[4], |i| i as f32).with_grad(true));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::scalar(1.0).with_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_fails() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_leaf_gets_zeros_and_constants_get_nothing() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2], 3.0).with_grad(true));
        let unused = g.leaf(Tensor::full(&[3], 1.0).with_grad(true));
        let constant = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.add(x, constant).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
        assert!(grads.get(constant).is_none());
        assert_eq!(grads.len(), 2);
    }
}
