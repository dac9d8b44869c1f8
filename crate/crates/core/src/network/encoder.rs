//! Residual encoder: a stride-2 stem followed by stages of basic blocks,
//! each stage after the first halving the resolution and doubling the width.

use super::builder::Builder;
use super::NetworkConfig;
use crate::autodiff::NodeId;
use crate::error::{Error, Result};

/// Encoder features per stage, shallowest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub stages: Vec<NodeId>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> NodeId {
        *self.stages.last().expect("pyramid has at least one stage")
    }
}

fn basic_block(
    b: &mut Builder<'_>,
    name: &str,
    x: NodeId,
    cout: usize,
    stride: usize,
) -> Result<NodeId> {
    let cin = b.graph.shape(x).c();
    let y = b.conv_bn_relu(&format!("{name}.a"), x, cout, 3, stride, 1)?;
    let y = b.conv(&format!("{name}.b.conv"), y, cout, 3, 1, 1, false)?;
    let y = b.bn(&format!("{name}.b.bn"), y)?;
    let skip = if stride != 1 || cin != cout {
        let s = b.conv(&format!("{name}.down.conv"), x, cout, 1, stride, 0, false)?;
        b.bn(&format!("{name}.down.bn"), s)?
    } else {
        x
    };
    let y = b.graph.add(y, skip)?;
    Ok(b.graph.relu(y))
}

/// Encodes a 1-channel tile. Parameters are named independently of the
/// tile, so calling this for several slices shares one parameter set.
pub fn encode(b: &mut Builder<'_>, tile: NodeId, cfg: &NetworkConfig) -> Result<FeaturePyramid> {
    let s = b.graph.shape(tile);
    if s.c() != 1 {
        return Err(Error::usage(format!(
            "encoder expects a 1-channel tile, got {s}"
        )));
    }
    let factor = 1usize << cfg.encoder_depth;
    if s.h() % factor != 0 || s.w() % factor != 0 {
        return Err(Error::usage(format!(
            "tile {}x{} is not divisible by 2^{} for a depth-{} encoder",
            s.h(),
            s.w(),
            cfg.encoder_depth,
            cfg.encoder_depth
        )));
    }
    let mut x = b.conv_bn_relu("enc.stem", tile, cfg.base_channels, 3, 2, 1)?;
    let mut stages = Vec::with_capacity(cfg.encoder_depth);
    for stage in 0..cfg.encoder_depth {
        let cout = cfg.stage_channels(stage);
        for block in 0..cfg.stage_blocks[stage] {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = basic_block(b, &format!("enc.s{stage}.b{block}"), x, cout, stride)?;
        }
        stages.push(x);
    }
    Ok(FeaturePyramid { stages })
}
