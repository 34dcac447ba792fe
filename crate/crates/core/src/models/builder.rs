use rand::Rng;

use crate::error::{fmt_shape, Error, Result};
use crate::models::graph::{GraphNode, Layer, ModelGraph, NodeId, ParamId, ParamRole, Parameter, INPUT_SHAPE};
use crate::models::init::kaiming_uniform;
use crate::models::ArchitectureId;
use crate::nn::{output_extent, Conv2dGeometry, PoolSpec};
use crate::tensor::Tensor;

/// Incremental graph construction with shape inference.
pub(crate) struct GraphBuilder<'r, R: Rng + ?Sized> {
    nodes: Vec<GraphNode>,
    params: Vec<Parameter>,
    rng: &'r mut R,
}

impl<'r, R: Rng + ?Sized> GraphBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        let input = GraphNode { name: "input".into(), layer: Layer::Input, inputs: Vec::new(), out_shape: INPUT_SHAPE.to_vec() };
        GraphBuilder { nodes: vec![input], params: Vec::new(), rng }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].out_shape
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.nodes[node].out_shape[0]
    }

    fn push(&mut self, name: impl Into<String>, layer: Layer, inputs: Vec<NodeId>, out_shape: Vec<usize>) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(GraphNode { name: name.into(), layer, inputs, out_shape });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, tensor: Tensor<f32>, role: ParamRole) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Parameter { name, tensor, role, frozen: false });
        self.params.len() - 1
    }

    fn spatial(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape(format!("{what} needs a (C,H,W) input, got {}", fmt_shape(other)))),
        }
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, name)?;
        let oh = output_extent(h, kernel, stride, padding)?;
        let ow = output_extent(w, kernel, stride, padding)?;
        let fan_in = c * kernel * kernel;
        let weight = kaiming_uniform(&[out, c, kernel, kernel], fan_in, self.rng);
        let weight = self.param(format!("{name}.weight"), weight, ParamRole::Trainable);
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[out]), ParamRole::Trainable));
        let layer = Layer::Conv2d { weight, bias, geometry: Conv2dGeometry::new(stride, padding) };
        Ok(self.push(name, layer, vec![x], vec![out, oh, ow]))
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.spatial(x, name)?;
        let gamma = self.param(format!("{name}.weight"), Tensor::full(&[c], 1.0), ParamRole::Trainable);
        let beta = self.param(format!("{name}.bias"), Tensor::zeros(&[c]), ParamRole::Trainable);
        let running_mean = self.param(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamRole::Buffer);
        let running_var = self.param(format!("{name}.running_var"), Tensor::full(&[c], 1.0), ParamRole::Buffer);
        let layer = Layer::BatchNorm2d { gamma, beta, running_mean, running_var, momentum: 0.1, eps: 1e-5 };
        let shape = self.shape(x).to_vec();
        Ok(self.push(name, layer, vec![x], shape))
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(name, Layer::Relu, vec![x], shape)
    }

    pub fn pool(&mut self, name: &str, x: NodeId, spec: PoolSpec) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, name)?;
        let (oh, ow) = spec.output_hw(h, w)?;
        Ok(self.push(name, Layer::Pool(spec), vec![x], vec![c, oh, ow]))
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> NodeId {
        let width = self.shape(x).iter().product();
        self.push(name, Layer::Flatten, vec![x], vec![width])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(name, Layer::Dropout { rate }, vec![x], shape)
    }

    pub fn linear(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let &[d_in] = self.shape(x) else {
            return Err(Error::Shape(format!("{name} needs a flat input, got {}", fmt_shape(self.shape(x)))));
        };
        let weight = kaiming_uniform(&[out, d_in], d_in, self.rng);
        let weight = self.param(format!("{name}.weight"), weight, ParamRole::Trainable);
        let bias = self.param(format!("{name}.bias"), Tensor::zeros(&[out]), ParamRole::Trainable);
        Ok(self.push(name, Layer::Linear { weight, bias }, vec![x], vec![out]))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name} cannot add {} and {}",
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b))
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(name, Layer::Add, vec![a, b], shape))
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.spatial(parts[0], name)?;
        let mut channels = 0;
        for &p in parts {
            let (c, h, w) = self.spatial(p, name)?;
            if (h, w) != (first.1, first.2) {
                return Err(Error::Shape(format!("{name} joins mismatched spatial extents")));
            }
            channels += c;
        }
        Ok(self.push(name, Layer::Concat, parts.to_vec(), vec![channels, first.1, first.2]))
    }

    pub fn finish(self, arch: ArchitectureId, width_divisor: usize, output: NodeId, head: NodeId) -> ModelGraph {
        let num_classes = self.nodes[head].out_shape[0];
        ModelGraph { arch, width_divisor, num_classes, nodes: self.nodes, params: self.params, output, head }
    }
}
