use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{fmt_shape, Error, Result};
use crate::models::ArchitectureId;
use crate::nn::{update_running, BatchStatistics, Conv2dGeometry, Mode, NormStats, PoolSpec};
use crate::tensor::Tensor;

/// Input signature every architecture is built for: `(channels, height, width)`.
pub const INPUT_SHAPE: [usize; 3] = [3, 224, 224];

pub type NodeId = usize;

/// Index into [`ModelGraph::parameters`].
pub type ParamId = usize;

/// One layer of a model graph. Parameter-bearing layers refer to entries of
/// the graph's parameter table.
#[derive(Clone, Debug)]
pub enum Layer {
    Input,
    Conv2d { weight: ParamId, bias: Option<ParamId>, geometry: Conv2dGeometry },
    BatchNorm2d { gamma: ParamId, beta: ParamId, running_mean: ParamId, running_var: ParamId, momentum: f64, eps: f64 },
    Relu,
    Pool(PoolSpec),
    Flatten,
    Dropout { rate: f64 },
    Linear { weight: ParamId, bias: ParamId },
    /// Residual join: elementwise sum of two inputs.
    Add,
    /// Dense join: channel concatenation of all inputs.
    Concat,
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    /// Output shape of one sample (batch axis excluded), fixed at construction.
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Trainable,
    /// Model state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub role: ParamRole,
    pub frozen: bool,
}

impl Parameter {
    pub fn is_trainable(&self) -> bool {
        self.role == ParamRole::Trainable && !self.frozen
    }
}

/// Parameter totals of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Weights, biases, and batch-norm affine parameters.
    pub trainable: usize,
    /// `trainable` plus running statistics.
    pub total: usize,
}

/// A network as an ordered list of named layers with explicit input edges.
///
/// Every node's inputs precede it, so list order is a valid evaluation order
/// and the graph is acyclic by construction.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub(crate) arch: ArchitectureId,
    pub(crate) width_divisor: usize,
    pub(crate) num_classes: usize,
    pub(crate) nodes: Vec<GraphNode>,
    pub(crate) params: Vec<Parameter>,
    pub(crate) output: NodeId,
    pub(crate) head: NodeId,
}

impl ModelGraph {
    pub fn architecture(&self) -> ArchitectureId {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn width_divisor(&self) -> usize {
        self.width_divisor
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// The classifier head node.
    pub fn head(&self) -> &GraphNode {
        &self.nodes[self.head]
    }

    /// `(in_features, out_features)` of the classifier head.
    pub fn head_dims(&self) -> (usize, usize) {
        match self.nodes[self.head].layer {
            Layer::Linear { weight, .. } => {
                let s = self.params[weight].tensor.shape();
                (s[1], s[0])
            }
            _ => unreachable!("head is always a linear layer"),
        }
    }

    pub fn count_params(&self) -> ParamCounts {
        let trainable = self.params.iter().filter(|p| p.role == ParamRole::Trainable).map(|p| p.tensor.len()).sum();
        let total = self.params.iter().map(|p| p.tensor.len()).sum();
        ParamCounts { trainable, total }
    }

    /// Named model state (parameters and buffers) in construction order.
    pub fn named_state(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }

    /// Freezes every parameter outside the classifier head (or unfreezes all).
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        let head_params = self.head_param_ids();
        for (id, p) in self.params.iter_mut().enumerate() {
            p.frozen = frozen && !head_params.contains(&id);
        }
    }

    fn head_param_ids(&self) -> Vec<ParamId> {
        match self.nodes[self.head].layer {
            Layer::Linear { weight, bias } => vec![weight, bias],
            _ => unreachable!("head is always a linear layer"),
        }
    }

    /// Swaps the classifier head for a freshly initialized linear layer of
    /// width `num_classes`. Parameter names are kept.
    pub fn replace_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Contract(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let (d_in, _) = self.head_dims();
        let [w, b] = self.head_param_ids()[..] else { unreachable!() };
        let frozen = self.params[w].frozen;
        self.params[w].tensor = super::init::kaiming_uniform(&[num_classes, d_in], d_in, rng);
        self.params[b].tensor = Tensor::zeros(&[num_classes]);
        self.params[w].frozen = frozen;
        self.params[b].frozen = frozen;
        self.nodes[self.head].out_shape = vec![num_classes];
        // the head feeds the output directly in every architecture
        self.nodes[self.output].out_shape = vec![num_classes];
        self.num_classes = num_classes;
        Ok(())
    }

    /// Replaces named tensors in place.
    ///
    /// Every provided name must exist with an identical shape. In strict mode
    /// every model tensor must also be provided. Nothing is modified when an
    /// error is returned.
    pub fn apply_weights(&mut self, weights: &BTreeMap<String, Tensor<f32>>, strict: bool) -> Result<()> {
        let index: HashMap<&str, ParamId> = self.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
        let mut plan = Vec::with_capacity(weights.len());
        for (name, tensor) in weights {
            let Some(&id) = index.get(name.as_str()) else {
                return Err(Error::UnknownParameter(name.clone()));
            };
            let expected = self.params[id].tensor.shape();
            if expected != tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {}, provided tensor has shape {}",
                    fmt_shape(expected),
                    fmt_shape(tensor.shape())
                )));
            }
            if !tensor.all_finite() {
                return Err(Error::NonFinite(format!("provided tensor `{name}`")));
            }
            plan.push((id, tensor));
        }
        if strict {
            let missing: Vec<String> = self.params.iter().filter(|p| !weights.contains_key(&p.name)).map(|p| p.name.clone()).collect();
            if !missing.is_empty() {
                return Err(Error::MissingParameters(missing));
            }
        }
        for (id, tensor) in plan {
            self.params[id].tensor = tensor.detach();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Routes gradients from a backward sweep into the parameters' grad buffers.
    pub fn accumulate_gradients(&mut self, grads: Gradients<f32>) -> Result<()> {
        for (id, g) in grads.into_tagged() {
            let Some(p) = self.params.get_mut(id) else {
                return Err(Error::Contract(format!("gradient tag {id} does not name a parameter")));
            };
            p.tensor.accumulate_grad_owned(g)?;
        }
        Ok(())
    }

    /// Runs the network on `input` `(N,3,224,224)` recorded on `tape`.
    ///
    /// In [`Mode::Train`] trainable parameters are recorded with gradients,
    /// batch norm uses batch statistics (and updates running estimates) and
    /// dropout draws masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape<f32>, input: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let mut updates = Vec::new();
        let out = self.run(tape, input, mode, rng, &mut updates)?;
        for (mean_id, var_id, momentum, stats) in updates {
            update_running(&mut self.params[mean_id].tensor, &stats.mean, momentum);
            update_running(&mut self.params[var_id].tensor, &stats.unbiased_var, momentum);
        }
        Ok(out)
    }

    /// Eval-mode logits for a batch; a pure function of weights and input.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.detach());
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.run(&mut tape, x, Mode::Eval, &mut rng, &mut Vec::new())?;
        Ok(tape.value(out).detach())
    }

    #[allow(clippy::type_complexity)]
    fn run<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<f32>,
        input: Var,
        mode: Mode,
        rng: &mut R,
        updates: &mut Vec<(ParamId, ParamId, f64, BatchStatistics<f32>)>,
    ) -> Result<Var> {
        tape.check(input)?;
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1..] != INPUT_SHAPE || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "expected input of shape (N, {}, {}, {}), got {}",
                INPUT_SHAPE[0],
                INPUT_SHAPE[1],
                INPUT_SHAPE[2],
                fmt_shape(shape)
            )));
        }
        let batch = shape[0];
        let train = mode == Mode::Train;

        let mut bound: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut param = |tape: &mut Tape<f32>, id: ParamId| -> Var {
            *bound[id].get_or_insert_with(|| {
                let p = &self.params[id];
                tape.tagged_leaf(&p.tensor, train && p.is_trainable(), id)
            })
        };

        let mut values: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| values[node.inputs[k]].expect("inputs precede their consumers");
            let out = match &node.layer {
                Layer::Input => input,
                Layer::Conv2d { weight, bias, geometry } => {
                    let w = param(tape, *weight);
                    let b = bias.map(|b| param(tape, b));
                    tape.conv2d(arg(0), w, b, *geometry)?
                }
                Layer::BatchNorm2d { gamma, beta, running_mean, running_var, momentum, eps } => {
                    let g = param(tape, *gamma);
                    let b = param(tape, *beta);
                    if train {
                        let (y, stats) = tape.batch_norm2d(arg(0), g, b, NormStats::Batch, *eps)?;
                        updates.push((*running_mean, *running_var, *momentum, stats.expect("batch statistics")));
                        y
                    } else {
                        let stats = NormStats::Running {
                            mean: self.params[*running_mean].tensor.data(),
                            var: self.params[*running_var].tensor.data(),
                        };
                        tape.batch_norm2d(arg(0), g, b, stats, *eps)?.0
                    }
                }
                Layer::Relu => tape.relu(arg(0))?,
                Layer::Pool(spec) => tape.pool2d(arg(0), spec)?,
                Layer::Flatten => tape.flatten(arg(0))?,
                Layer::Dropout { rate } => tape.dropout(arg(0), *rate, train, rng)?,
                Layer::Linear { weight, bias } => {
                    let w = param(tape, *weight);
                    let b = param(tape, *bias);
                    tape.linear(arg(0), w, Some(b))?
                }
                Layer::Add => tape.add(arg(0), arg(1))?,
                Layer::Concat => {
                    let parts: Vec<Var> = node.inputs.iter().map(|&i| values[i].expect("inputs precede their consumers")).collect();
                    tape.concat(&parts, 1)?
                }
            };
            let produced = tape.shape(out);
            if produced[0] != batch || produced[1..] != node.out_shape[..] {
                return Err(Error::Shape(format!(
                    "layer `{}` produced {} but was built for (N, {})",
                    node.name,
                    fmt_shape(produced),
                    node.out_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
            values[id] = Some(out);
        }
        Ok(values[self.output].expect("output node evaluated"))
    }
}
