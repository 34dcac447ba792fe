//! The four backbone definitions.
//!
//! Layer and parameter names follow the dotted-path scheme of the common
//! pretrained-model zoos (`features.0.weight`, `layer1.0.conv1.weight`, …),
//! so converted pretrained weights load by name. The adaptive average pool
//! those zoos place before the classifier is omitted: at the fixed 224×224
//! input it is an identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::builder::GraphBuilder;
use crate::models::graph::{ModelGraph, NodeId};
use crate::models::ArchitectureId;
use crate::nn::PoolSpec;

fn scaled(width: usize, divisor: usize) -> usize {
    (width / divisor).max(1)
}

/// Single-tower AlexNet without local response normalization.
pub(crate) fn alexnet<R: Rng + ?Sized>(classes: usize, div: usize, rng: &mut R) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(rng);
    let mut x = b.input();
    x = b.conv("features.0", x, scaled(64, div), 11, 4, 2, true)?;
    x = b.relu("features.1", x);
    x = b.pool("features.2", x, PoolSpec::max(3, 2, 0))?;
    x = b.conv("features.3", x, scaled(192, div), 5, 1, 2, true)?;
    x = b.relu("features.4", x);
    x = b.pool("features.5", x, PoolSpec::max(3, 2, 0))?;
    x = b.conv("features.6", x, scaled(384, div), 3, 1, 1, true)?;
    x = b.relu("features.7", x);
    x = b.conv("features.8", x, scaled(256, div), 3, 1, 1, true)?;
    x = b.relu("features.9", x);
    x = b.conv("features.10", x, scaled(256, div), 3, 1, 1, true)?;
    x = b.relu("features.11", x);
    x = b.pool("features.12", x, PoolSpec::max(3, 2, 0))?;
    x = b.flatten("flatten", x);
    x = b.dropout("classifier.0", x, 0.5);
    x = b.linear("classifier.1", x, scaled(4096, div))?;
    x = b.relu("classifier.2", x);
    x = b.dropout("classifier.3", x, 0.5);
    x = b.linear("classifier.4", x, scaled(4096, div))?;
    x = b.relu("classifier.5", x);
    let head = b.linear("classifier.6", x, classes)?;
    Ok(b.finish(ArchitectureId::AlexNet, div, head, head))
}

/// VGG16 (configuration "D"): thirteen 3×3 convolutions, three linear layers.
pub(crate) fn vgg16<R: Rng + ?Sized>(classes: usize, div: usize, rng: &mut R) -> Result<ModelGraph> {
    const CONFIG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut b = GraphBuilder::new(rng);
    let mut x = b.input();
    let mut index = 0;
    for &width in &CONFIG {
        if width == 0 {
            x = b.pool(&format!("features.{index}"), x, PoolSpec::max(2, 2, 0))?;
            index += 1;
        } else {
            x = b.conv(&format!("features.{index}"), x, scaled(width, div), 3, 1, 1, true)?;
            x = b.relu(&format!("features.{}", index + 1), x);
            index += 2;
        }
    }
    x = b.flatten("flatten", x);
    x = b.linear("classifier.0", x, scaled(4096, div))?;
    x = b.relu("classifier.1", x);
    x = b.dropout("classifier.2", x, 0.5);
    x = b.linear("classifier.3", x, scaled(4096, div))?;
    x = b.relu("classifier.4", x);
    x = b.dropout("classifier.5", x, 0.5);
    let head = b.linear("classifier.6", x, classes)?;
    Ok(b.finish(ArchitectureId::Vgg16, div, head, head))
}

fn bottleneck<R: Rng + ?Sized>(b: &mut GraphBuilder<'_, R>, prefix: &str, x: NodeId, width: usize, stride: usize) -> Result<NodeId> {
    let out_channels = width * 4;
    let mut y = b.conv(&format!("{prefix}.conv1"), x, width, 1, 1, 0, false)?;
    y = b.batch_norm(&format!("{prefix}.bn1"), y)?;
    y = b.relu(&format!("{prefix}.relu1"), y);
    y = b.conv(&format!("{prefix}.conv2"), y, width, 3, stride, 1, false)?;
    y = b.batch_norm(&format!("{prefix}.bn2"), y)?;
    y = b.relu(&format!("{prefix}.relu2"), y);
    y = b.conv(&format!("{prefix}.conv3"), y, out_channels, 1, 1, 0, false)?;
    y = b.batch_norm(&format!("{prefix}.bn3"), y)?;
    let shortcut = if stride != 1 || b.channels(x) != out_channels {
        let s = b.conv(&format!("{prefix}.downsample.0"), x, out_channels, 1, stride, 0, false)?;
        b.batch_norm(&format!("{prefix}.downsample.1"), s)?
    } else {
        x
    };
    let sum = b.add(&format!("{prefix}.add"), y, shortcut)?;
    Ok(b.relu(&format!("{prefix}.relu3"), sum))
}

/// ResNet-50 with bottleneck blocks `[3, 4, 6, 3]`; the stride sits on the
/// 3×3 convolution of each stage's first block.
pub(crate) fn resnet50<R: Rng + ?Sized>(classes: usize, div: usize, rng: &mut R) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(rng);
    let mut x = b.input();
    x = b.conv("conv1", x, scaled(64, div), 7, 2, 3, false)?;
    x = b.batch_norm("bn1", x)?;
    x = b.relu("relu", x);
    x = b.pool("maxpool", x, PoolSpec::max(3, 2, 1))?;
    for (stage, (blocks, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = bottleneck(&mut b, &format!("layer{}.{block}", stage + 1), x, scaled(width, div), stride)?;
        }
    }
    x = b.pool("avgpool", x, PoolSpec::global_average())?;
    x = b.flatten("flatten", x);
    let head = b.linear("fc", x, classes)?;
    Ok(b.finish(ArchitectureId::ResNet50, div, head, head))
}

/// DenseNet-121: growth rate 32, bottleneck width 4·growth, blocks
/// `[6, 12, 24, 16]`, transitions halving the channel count.
pub(crate) fn densenet121<R: Rng + ?Sized>(classes: usize, div: usize, rng: &mut R) -> Result<ModelGraph> {
    const BLOCKS: [usize; 4] = [6, 12, 24, 16];
    let growth = scaled(32, div);
    let init = scaled(64, div);
    let bottleneck_width = 4 * growth;

    let mut b = GraphBuilder::new(rng);
    let mut x = b.input();
    x = b.conv("features.conv0", x, init, 7, 2, 3, false)?;
    x = b.batch_norm("features.norm0", x)?;
    x = b.relu("features.relu0", x);
    x = b.pool("features.pool0", x, PoolSpec::max(3, 2, 1))?;

    let mut block_input_channels = init;
    for (i, &layers) in BLOCKS.iter().enumerate() {
        let block = format!("features.denseblock{}", i + 1);
        let mut features = vec![x];
        for l in 0..layers {
            let prefix = format!("{block}.denselayer{}", l + 1);
            let joined = if features.len() == 1 { features[0] } else { b.concat(&format!("{prefix}.concat"), &features)? };
            let mut y = b.batch_norm(&format!("{prefix}.norm1"), joined)?;
            y = b.relu(&format!("{prefix}.relu1"), y);
            y = b.conv(&format!("{prefix}.conv1"), y, bottleneck_width, 1, 1, 0, false)?;
            y = b.batch_norm(&format!("{prefix}.norm2"), y)?;
            y = b.relu(&format!("{prefix}.relu2"), y);
            y = b.conv(&format!("{prefix}.conv2"), y, growth, 3, 1, 1, false)?;
            features.push(y);
        }
        x = b.concat(&format!("{block}.concat"), &features)?;

        let expected = block_input_channels + growth * layers;
        if b.channels(x) != expected {
            return Err(Error::Shape(format!(
                "{block} produced {} channels, expected {block_input_channels} + {growth}·{layers} = {expected}",
                b.channels(x)
            )));
        }

        if i + 1 < BLOCKS.len() {
            let prefix = format!("features.transition{}", i + 1);
            let half = b.channels(x) / 2;
            x = b.batch_norm(&format!("{prefix}.norm"), x)?;
            x = b.relu(&format!("{prefix}.relu"), x);
            x = b.conv(&format!("{prefix}.conv"), x, half, 1, 1, 0, false)?;
            x = b.pool(&format!("{prefix}.pool"), x, PoolSpec::average(2, 2, 0))?;
            block_input_channels = half;
        }
    }
    x = b.batch_norm("features.norm5", x)?;
    x = b.relu("features.relu5", x);
    x = b.pool("avgpool", x, PoolSpec::global_average())?;
    x = b.flatten("flatten", x);
    let head = b.linear("classifier", x, classes)?;
    Ok(b.finish(ArchitectureId::DenseNet121, div, head, head))
}
