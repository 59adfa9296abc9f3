//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] is appended to in forward order, so operands always precede
//! their uses. [`Tape::backward`] walks it in reverse, accumulating
//! vector-Jacobian products into a [`GradientSet`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormSaved, Dilation, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics and live dropout; infer mode is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        dilation: Dilation,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats,
    },
    AvgPool {
        input: Var,
        window: (usize, usize),
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    /// `mask` holds 0 for dropped cells and `1/(1-rate)` for survivors.
    Dropout {
        input: Var,
        mask: Tensor,
    },
    ScaleLastAxis {
        input: Var,
        weights: Var,
    },
    Reshape(Var),
    /// Scalar `sum(input * coeffs)`.
    Dot {
        input: Var,
        coeffs: Tensor,
    },
    WeightedBce {
        probs: Var,
        labels: Tensor,
        mask: Tensor,
        beta: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by the variable they belong to.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    grads: HashMap<Var, Tensor>,
}

impl GradientSet {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Gradient of a requested variable.
    ///
    /// # Panics
    /// If `var` was not in the `wrt` list passed to [`Tape::backward`].
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.grads
            .get(&var)
            .unwrap_or_else(|| panic!("no gradient requested for {var:?}"))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, dilation: Dilation) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernels), self.value(bias), dilation)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                dilation,
            },
        ))
    }

    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, saved) =
            ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            },
        ))
    }

    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
    ) -> Result<Var> {
        let out =
            ops::batch_norm_infer(self.value(input), self.value(gamma), self.value(beta), stats)?;
        Ok(self.push(
            out,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                stats: stats.clone(),
            },
        ))
    }

    /// Batch statistics recorded by a train-mode batch norm node.
    pub fn batch_norm_saved(&self, var: Var) -> Option<&BatchNormSaved> {
        match &self.nodes[var.0].op {
            Op::BatchNormTrain { saved, .. } => Some(saved),
            _ => None,
        }
    }

    pub fn avg_pool(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let out = ops::avg_pool(self.value(input), window)?;
        Ok(self.push(out, Op::AvgPool { input, window }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid(input))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Inverted dropout. Identity in infer mode (no node is recorded).
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Infer {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let shape = self.value(input).shape().to_vec();
        let numel = self.value(input).numel();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::new(&shape, mask)?;
        let out = self.value(input).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(out, Op::Dropout { input, mask }))
    }

    /// Multiplies the last axis by per-feature `weights`.
    pub fn scale_last_axis(&mut self, input: Var, weights: Var) -> Result<Var> {
        let out = ops::scale_last_axis(self.value(input), self.value(weights))?;
        Ok(self.push(out, Op::ScaleLastAxis { input, weights }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    /// Scalar `sum(input * coeffs)`; with all-ones coefficients this is a sum.
    pub fn dot(&mut self, input: Var, coeffs: Tensor) -> Result<Var> {
        let s = self
            .value(input)
            .zip_map(&coeffs, |a, b| a * b)?
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, coeffs }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let ones = Tensor::ones(self.value(input).shape());
        self.dot(input, ones).expect("coefficients share the input shape")
    }

    pub fn weighted_bce(
        &mut self,
        probs: Var,
        labels: Tensor,
        mask: Tensor,
        beta: Vec<f64>,
    ) -> Result<Var> {
        let loss = ops::weighted_bce(self.value(probs), &labels, &mask, &beta)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                probs,
                labels,
                mask,
                beta,
            },
        ))
    }

    /// Values of every ReLU input, used to detect finite-difference stencils
    /// that straddle a kink.
    pub fn relu_inputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x)),
                _ => None,
            })
            .collect()
    }

    /// Recomputes every non-leaf node from its recorded operands.
    ///
    /// Dropout reuses its recorded mask and train-mode batch norm recomputes
    /// its batch statistics, so the result equals the recorded values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    dilation,
                } => ops::conv2d(&vals[input.0], &vals[kernels.0], &vals[bias.0], *dilation)?,
                Op::BatchNormTrain {
                    input, gamma, beta, ..
                } => ops::batch_norm_train(&vals[input.0], &vals[gamma.0], &vals[beta.0])?.0,
                Op::BatchNormInfer {
                    input,
                    gamma,
                    beta,
                    stats,
                } => ops::batch_norm_infer(&vals[input.0], &vals[gamma.0], &vals[beta.0], stats)?,
                Op::AvgPool { input, window } => ops::avg_pool(&vals[input.0], *window)?,
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => ops::dense(&vals[input.0], &vals[weight.0], &vals[bias.0])?,
                Op::Relu(x) => ops::relu(&vals[x.0]),
                Op::Sigmoid(x) => ops::sigmoid(&vals[x.0]),
                Op::Concat { inputs, axis } => {
                    let parts: Vec<&Tensor> = inputs.iter().map(|v| &vals[v.0]).collect();
                    ops::concat(&parts, *axis)?
                }
                Op::Dropout { input, mask } => vals[input.0].zip_map(mask, |x, m| x * m)?,
                Op::ScaleLastAxis { input, weights } => {
                    ops::scale_last_axis(&vals[input.0], &vals[weights.0])?
                }
                Op::Reshape(x) => vals[x.0].reshape(node.value.shape())?,
                Op::Dot { input, coeffs } => {
                    Tensor::scalar(vals[input.0].zip_map(coeffs, |a, b| a * b)?.sum())
                }
                Op::WeightedBce {
                    probs,
                    labels,
                    mask,
                    beta,
                } => Tensor::scalar(ops::weighted_bce(&vals[probs.0], labels, mask, beta)?),
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Gradients of the scalar `output` with respect to each variable in
    /// `wrt`. Variables that do not influence `output` get zero gradients.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<GradientSet> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, found shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out_val.shape()));
        let mut kept: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let mut wanted = vec![false; output.0 + 1];
        for v in wrt.iter().filter(|v| v.0 <= output.0) {
            wanted[v.0] = true;
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if wanted[idx] {
                kept[idx] = Some(g.clone());
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    dilation,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernels),
                        *dilation,
                        &g,
                    );
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *kernels, gk);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, gg, gb) =
                        ops::batch_norm_train_backward(self.value(*gamma), saved, &g);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::BatchNormInfer {
                    input,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (gx, gg, gb) = ops::batch_norm_infer_backward(
                        self.value(*input),
                        self.value(*gamma),
                        stats,
                        &g,
                    );
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::AvgPool { input, window } => {
                    let gx = ops::avg_pool_backward(self.value(*input).shape(), *window, &g);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) =
                        ops::dense_backward(self.value(*input), self.value(*weight), &g);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(x) => {
                    let gx = self
                        .value(*x)
                        .zip_map(&g, |v, gi| if v > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = node.value.zip_map(&g, |s, gi| gi * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { inputs, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        inputs.iter().map(|v| self.value(*v).shape().to_vec()).collect();
                    for (v, gx) in inputs.iter().zip(ops::concat_backward(&shapes, *axis, &g)) {
                        accumulate(&mut grads, *v, gx);
                    }
                }
                Op::Dropout { input, mask } => {
                    accumulate(&mut grads, *input, g.zip_map(mask, |a, b| a * b)?);
                }
                Op::ScaleLastAxis { input, weights } => {
                    let (gx, gw) = ops::scale_last_axis_backward(
                        self.value(*input),
                        self.value(*weights),
                        &g,
                    );
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot { input, coeffs } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *input, coeffs.map(|c| c * s));
                }
                Op::WeightedBce {
                    probs,
                    labels,
                    mask,
                    beta,
                } => {
                    let s = g.data()[0];
                    let gp = ops::weighted_bce_backward(self.value(*probs), labels, mask, beta);
                    accumulate(&mut grads, *probs, gp.map(|v| v * s));
                }
            }
        }

        let mut set = GradientSet::default();
        for &v in wrt {
            let g = kept
                .get(v.0)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for node {}",
                    v.0
                )));
            }
            set.grads.insert(v, g);
        }
        Ok(set)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
