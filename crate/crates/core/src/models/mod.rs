//! Architecture zoo: AlexNet, VGG16, DenseNet121, ResNet50 with a
//! replaceable classifier head.

mod archs;
mod builder;
mod graph;
mod init;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use graph::{GraphNode, Layer, ModelGraph, NodeId, ParamCounts, ParamId, ParamRole, Parameter, INPUT_SHAPE};
pub use init::kaiming_uniform;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureId {
    AlexNet,
    Vgg16,
    DenseNet121,
    ResNet50,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] =
        [ArchitectureId::AlexNet, ArchitectureId::Vgg16, ArchitectureId::DenseNet121, ArchitectureId::ResNet50];

    /// Lower-case identifier used in configs and checkpoints.
    pub fn id(self) -> &'static str {
        match self {
            ArchitectureId::AlexNet => "alexnet",
            ArchitectureId::Vgg16 => "vgg16",
            ArchitectureId::DenseNet121 => "densenet121",
            ArchitectureId::ResNet50 => "resnet50",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ArchitectureId::AlexNet => "AlexNet",
            ArchitectureId::Vgg16 => "VGG16",
            ArchitectureId::DenseNet121 => "DenseNet121",
            ArchitectureId::ResNet50 => "ResNet50",
        }
    }

    /// Width of the features entering the classifier head at full width.
    pub fn head_input_width(self) -> usize {
        match self {
            ArchitectureId::AlexNet | ArchitectureId::Vgg16 => 4096,
            ArchitectureId::DenseNet121 => 1024,
            ArchitectureId::ResNet50 => 2048,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.id().eq_ignore_ascii_case(s) || a.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected alexnet, vgg16, densenet121 or resnet50)")))
    }
}

/// What to build: head width and an optional channel-width reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_classes: usize,
    /// Every channel and hidden width is divided by this (minimum 1).
    /// `1` builds the reference architecture.
    pub width_divisor: usize,
}

impl ModelSpec {
    pub fn new(num_classes: usize) -> Self {
        ModelSpec { num_classes, width_divisor: 1 }
    }

    pub fn reduced(num_classes: usize, width_divisor: usize) -> Self {
        ModelSpec { num_classes, width_divisor }
    }
}

/// Builds `arch` at full width with a fresh `num_classes`-way head.
pub fn build_model<R: Rng + ?Sized>(arch: ArchitectureId, num_classes: usize, rng: &mut R) -> Result<ModelGraph> {
    build_model_with(arch, ModelSpec::new(num_classes), rng)
}

/// Builds `arch` per `spec`. Convolution and linear weights are
/// Kaiming-uniform, biases zero, batch norm γ = 1 and β = 0.
pub fn build_model_with<R: Rng + ?Sized>(arch: ArchitectureId, spec: ModelSpec, rng: &mut R) -> Result<ModelGraph> {
    if spec.num_classes < 2 {
        return Err(Error::Contract(format!("num_classes must be at least 2, got {}", spec.num_classes)));
    }
    if spec.width_divisor == 0 {
        return Err(Error::Contract("width_divisor must be at least 1".into()));
    }
    let (classes, div) = (spec.num_classes, spec.width_divisor);
    match arch {
        ArchitectureId::AlexNet => archs::alexnet(classes, div, rng),
        ArchitectureId::Vgg16 => archs::vgg16(classes, div, rng),
        ArchitectureId::DenseNet121 => archs::densenet121(classes, div, rng),
        ArchitectureId::ResNet50 => archs::resnet50(classes, div, rng),
    }
}
