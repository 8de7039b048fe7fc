//! Dropout-equipped multilayer classifiers with named parameter groups.
//!
//! Groups are `layer{i}.weight` (`[fan_in, fan_out]`), `layer{i}.bias`
//! (`[fan_out]`) for every hidden layer, then `out.weight` and `out.bias`.
//! Dropout is applied after every hidden activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Result, RoseError};
use crate::params::ParamSet;
use crate::rng::{seeded, Purpose, RngStream};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSites {
    #[default]
    AfterEachHidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    #[serde(default)]
    pub dropout_sites: DropoutSites,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(RoseError::config("input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() {
            return Err(RoseError::config("at least one hidden layer is required"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(RoseError::config("hidden layer widths must be positive"));
        }
        if self.classes < 2 {
            return Err(RoseError::config("classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(RoseError::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_dims);
        w.push(self.classes);
        w
    }

    fn layer_names(&self) -> Vec<String> {
        (0..self.hidden_dims.len())
            .map(|i| format!("layer{i}"))
            .chain(std::iter::once("out".to_string()))
            .collect()
    }

    /// Checks that `params` has exactly the groups this spec declares.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let widths = self.widths();
        let mut expected = Vec::new();
        for (name, w) in self.layer_names().iter().zip(widths.windows(2)) {
            expected.push((format!("{name}.weight"), vec![w[0], w[1]]));
            expected.push((format!("{name}.bias"), vec![w[1]]));
        }
        let ok = params.group_count() == expected.len()
            && params
                .iter()
                .zip(&expected)
                .all(|((n, t), (en, es))| n == en && t.shape() == es.as_slice());
        if ok {
            Ok(())
        } else {
            Err(RoseError::shape(
                "model",
                "parameter groups do not match the model description",
            ))
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let (n, d) = input.dims2("forward")?;
        if d != self.input_dim {
            return Err(RoseError::shape(
                "forward",
                format!("input has {d} features, model expects {}", self.input_dim),
            ));
        }
        Ok(n)
    }

    /// Records the forward pass on `tape`. `nodes` are the parameter leaves
    /// in group order (as returned by [`Tape::params`]). With `dropout` set,
    /// hidden activations are masked from that stream at the spec's rate.
    pub fn build(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        input: NodeId,
        dropout: Option<&RngStream>,
    ) -> Result<NodeId> {
        self.check_input(tape.value(input))?;
        if nodes.len() != 2 * (self.hidden_dims.len() + 1) {
            return Err(RoseError::shape("model", "wrong number of parameter nodes"));
        }
        let mut h = input;
        let layers = nodes.chunks(2).collect::<Vec<_>>();
        let (out, hidden) = layers.split_last().expect("at least one layer");
        for (site, layer) in hidden.iter().enumerate() {
            let z = tape.matmul(h, layer[0])?;
            let z = tape.add(z, layer[1])?;
            h = match self.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            };
            if let Some(rng) = dropout {
                h = tape.dropout(h, rng, site, self.dropout_rate)?;
            }
        }
        let z = tape.matmul(h, out[0])?;
        tape.add(z, out[1])
    }

    /// One recorded forward pass over fresh parameter leaves.
    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        dropout: Option<&RngStream>,
    ) -> Result<(NodeId, Tape)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let nodes = tape.params(params);
        let x = tape.input(input.clone());
        let logits = self.build(&mut tape, &nodes, x, dropout)?;
        Ok((logits, tape))
    }

    /// Evaluation-mode logits without recording a tape.
    pub fn logits(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_input(input)?;
        let tensors: Vec<&Tensor> = params.tensors().collect();
        let mut h = input.clone();
        let last = tensors.len() / 2 - 1;
        for (i, layer) in tensors.chunks(2).enumerate() {
            h = tensor::add_row(&tensor::matmul(&h, layer[0])?, layer[1])?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => h.map(f64::tanh),
                    Activation::Relu => h.map(|x| x.max(0.0)),
                };
            }
        }
        Ok(h)
    }

    /// Argmax class per row with dropout disabled; ties go to the lower index.
    pub fn predict(&self, params: &ParamSet, input: &Tensor) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.logits(params, input)?))
    }
}

pub fn predict_from_logits(logits: &Tensor) -> Vec<usize> {
    let rows = logits.shape()[0];
    (0..rows).map(|r| tensor::argmax(logits.row(r))).collect()
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = seeded(seed, Purpose::Init, 0);
    let mut params = ParamSet::new();
    for (name, w) in spec.layer_names().iter().zip(spec.widths().windows(2)) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(
            format!("{name}.weight"),
            Tensor::new(vec![fan_in, fan_out], data)?,
        )?;
        params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(params)
}
