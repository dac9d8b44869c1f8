//! Multi-scale fusion of decoder features.

use super::builder::Builder;
use crate::autodiff::NodeId;
use crate::error::{Error, Result};

const SE_REDUCTION: usize = 4;

/// Internal switches used to verify the wiring of the fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsfGates {
    pub squeeze_excitation: bool,
    pub residual: bool,
}

impl Default for MsfGates {
    fn default() -> Self {
        MsfGates {
            squeeze_excitation: true,
            residual: true,
        }
    }
}

/// Resizes every feature to the finest scale, projects it to the finest
/// feature's channel count, concatenates, reweights channels with
/// squeeze-and-excitation, and restores the channel count with a
/// conv-BN-ReLU stack plus a residual from the projected finest feature.
pub fn msf_fuse(b: &mut Builder<'_>, name: &str, features: &[NodeId]) -> Result<NodeId> {
    msf_fuse_with(b, name, features, MsfGates::default())
}

pub fn msf_fuse_with(
    b: &mut Builder<'_>,
    name: &str,
    features: &[NodeId],
    gates: MsfGates,
) -> Result<NodeId> {
    if features.is_empty() {
        return Err(Error::usage(
            "multi-scale fusion needs at least one feature map",
        ));
    }
    let finest = features
        .iter()
        .copied()
        .max_by_key(|&f| (b.graph.shape(f).h(), std::cmp::Reverse(f)))
        .expect("non-empty");
    let target = b.graph.shape(finest);
    let common = target.c();

    let mut projected = Vec::with_capacity(features.len());
    let mut finest_proj = None;
    for (k, &f) in features.iter().enumerate() {
        let s = b.graph.shape(f);
        let resized = if (s.h(), s.w()) == (target.h(), target.w()) {
            f
        } else {
            b.graph.resize_bilinear(f, target.h(), target.w())?
        };
        let p = b.conv(&format!("{name}.proj{k}"), resized, common, 1, 1, 0, true)?;
        if f == finest {
            finest_proj = Some(p);
        }
        projected.push(p);
    }
    let cat = b.graph.concat(&projected)?;
    let cat_c = b.graph.shape(cat).c();

    let fused = if gates.squeeze_excitation {
        let squeeze = b.graph.global_mean_pool(cat);
        let e = b.fc(
            &format!("{name}.se1"),
            squeeze,
            (cat_c / SE_REDUCTION).max(2),
        )?;
        let e = b.graph.relu(e);
        let e = b.fc(&format!("{name}.se2"), e, cat_c)?;
        let e = b.graph.sigmoid(e);
        b.graph.mul(cat, e)?
    } else {
        cat
    };

    let y = b.conv_bn_relu(&format!("{name}.body1"), fused, common, 3, 1, 1)?;
    let y = b.conv(&format!("{name}.body2.conv"), y, common, 3, 1, 1, false)?;
    let y = b.bn(&format!("{name}.body2.bn"), y)?;
    let y = if gates.residual {
        b.graph.add(y, finest_proj.expect("finest projected"))?
    } else {
        y
    };
    Ok(b.graph.relu(y))
}
