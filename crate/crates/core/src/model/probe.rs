use super::Classifier;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A single dense layer over the flattened `[T, F]` input, behind the same
/// sensor weight layer as the CNN. Its logit is `ωᵀ(w¹ ⊙ I) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub time_steps: usize,
    /// Shape `[T*F, tasks]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub sensor_weights: Tensor,
}

impl LinearProbe {
    pub fn new(time_steps: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.expect_rank(2, "probe weight")?;
        let (d, m) = (weight.shape()[0], weight.shape()[1]);
        if time_steps == 0 || d % time_steps != 0 || bias.shape() != [m] {
            return Err(Error::Dimension(format!(
                "probe weight {:?} and bias {:?} do not fit {time_steps} time steps",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(LinearProbe {
            time_steps,
            sensor_weights: Tensor::ones(&[d / time_steps]),
            weight,
            bias,
        })
    }
}

impl Classifier for LinearProbe {
    fn num_features(&self) -> usize {
        self.sensor_weights.numel()
    }

    fn num_tasks(&self) -> usize {
        self.bias.numel()
    }

    fn time_steps(&self) -> usize {
        self.time_steps
    }

    fn sensor_weights(&self) -> &Tensor {
        &self.sensor_weights
    }

    fn sensor_weights_mut(&mut self) -> &mut Tensor {
        &mut self.sensor_weights
    }

    fn record_trunk(&self, tape: &mut Tape, weighted: Var) -> Result<Var> {
        let n = tape.value(weighted).shape()[0];
        let flat = tape.reshape(weighted, &[n, self.weight.shape()[0]])?;
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        tape.dense(flat, w, b)
    }
}
