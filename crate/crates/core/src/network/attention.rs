//! Attention-derived weight maps and adjacent-slice feature fusion.
//!
//! The fused feature of the target slice is
//! `z = A(x_prev, x_i) * x_i * A(x_i, x_next)` with elementwise products,
//! where `A` concatenates its two arguments on the channel axis, refines them
//! with channel-then-spatial attention (CBAM), and squeezes the result back to
//! the target's channel count as a sigmoid weight map.

use serde::{Deserialize, Serialize};

use super::builder::Builder;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Channel reduction ratio of the CBAM bottleneck.
const CBAM_REDUCTION: usize = 16;
const SPATIAL_KERNEL: usize = 7;

/// Slice fusion variants compared in the fusion ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AsfVariant {
    /// Target slice only; neighbours are never encoded.
    F0,
    /// Weight maps from a 1x1 convolution of the concatenated pair, no attention.
    F1,
    /// Weight maps from CBAM on each neighbour alone, no concatenation.
    F2,
    /// CBAM on the concatenated (neighbour, target) pair.
    F3,
}

impl AsfVariant {
    pub const ALL: [AsfVariant; 4] = [
        AsfVariant::F0,
        AsfVariant::F1,
        AsfVariant::F2,
        AsfVariant::F3,
    ];

    pub fn uses_neighbors(self) -> bool {
        self != AsfVariant::F0
    }
}

impl std::str::FromStr for AsfVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F0" | "f0" => Ok(AsfVariant::F0),
            "F1" | "f1" => Ok(AsfVariant::F1),
            "F2" | "f2" => Ok(AsfVariant::F2),
            "F3" | "f3" => Ok(AsfVariant::F3),
            other => Err(Error::usage(format!("unknown fusion variant `{other}`"))),
        }
    }
}

/// CBAM refinement of `x` followed by a 1x1 convolution to `cout` channels
/// and a sigmoid.
pub fn cbam_weight_map(b: &mut Builder<'_>, name: &str, x: NodeId, cout: usize) -> Result<NodeId> {
    let c = b.graph.shape(x).c();
    let hidden = (c / CBAM_REDUCTION).max(2);

    // Channel attention: shared bottleneck over mean- and max-pooled descriptors.
    let avg = b.graph.global_mean_pool(x);
    let max = b.graph.global_max_pool(x);
    let branch = |b: &mut Builder<'_>, d: NodeId| -> Result<NodeId> {
        let h = b.fc(&format!("{name}.mlp1"), d, hidden)?;
        let h = b.graph.relu(h);
        b.fc(&format!("{name}.mlp2"), h, c)
    };
    let ca_avg = branch(b, avg)?;
    let ca_max = branch(b, max)?;
    let ca = b.graph.add(ca_avg, ca_max)?;
    let ca = b.graph.sigmoid(ca);
    let refined = b.graph.mul(x, ca)?;

    // Spatial attention over channel-pooled maps.
    let sm = b.graph.channel_mean_pool(refined);
    let sx = b.graph.channel_max_pool(refined);
    let s = b.graph.concat(&[sm, sx])?;
    let sa = b.conv(
        &format!("{name}.spatial"),
        s,
        1,
        SPATIAL_KERNEL,
        1,
        SPATIAL_KERNEL / 2,
        true,
    )?;
    let sa = b.graph.sigmoid(sa);
    let refined = b.graph.mul(refined, sa)?;

    b.head(&format!("{name}.out"), refined, cout)
}

/// Weight map `w` in (0,1) with the shape of `x_a`, from the concatenation
/// of `x_a` and `x_b`.
pub fn attention_gate(b: &mut Builder<'_>, name: &str, x_a: NodeId, x_b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (b.graph.shape(x_a), b.graph.shape(x_b));
    if sa != sb {
        return Err(Error::usage(format!(
            "attention gate inputs differ: {sa} vs {sb}"
        )));
    }
    let cat = b.graph.concat(&[x_a, x_b])?;
    cbam_weight_map(b, name, cat, sa.c())
}

/// `(w_prev * x) * w_next`.
pub fn apply_weight_maps(
    g: &mut Graph,
    w_prev: NodeId,
    x: NodeId,
    w_next: NodeId,
) -> Result<NodeId> {
    let y = g.mul(w_prev, x)?;
    g.mul(y, w_next)
}

/// Weight maps a fusion variant derives for the target slice.
pub fn fusion_weights(
    b: &mut Builder<'_>,
    name: &str,
    x_prev: NodeId,
    x_i: NodeId,
    x_next: NodeId,
    variant: AsfVariant,
) -> Result<(NodeId, NodeId)> {
    let c = b.graph.shape(x_i).c();
    for other in [x_prev, x_next] {
        if b.graph.shape(other) != b.graph.shape(x_i) {
            return Err(Error::usage(format!(
                "fusion inputs differ: {} vs {}",
                b.graph.shape(other),
                b.graph.shape(x_i)
            )));
        }
    }
    match variant {
        AsfVariant::F0 => Err(Error::usage("F0 fusion derives no weight maps")),
        AsfVariant::F1 => {
            let proj = |b: &mut Builder<'_>, l: NodeId, r: NodeId| -> Result<NodeId> {
                let cat = b.graph.concat(&[l, r])?;
                b.head(&format!("{name}.proj"), cat, c)
            };
            Ok((proj(b, x_prev, x_i)?, proj(b, x_i, x_next)?))
        }
        AsfVariant::F2 => Ok((
            cbam_weight_map(b, &format!("{name}.gate"), x_prev, c)?,
            cbam_weight_map(b, &format!("{name}.gate"), x_next, c)?,
        )),
        AsfVariant::F3 => Ok((
            attention_gate(b, &format!("{name}.gate"), x_prev, x_i)?,
            attention_gate(b, &format!("{name}.gate"), x_i, x_next)?,
        )),
    }
}

/// Fused target-slice feature. Neighbours are ignored (and may be absent) under F0.
pub fn asf_fuse(
    b: &mut Builder<'_>,
    name: &str,
    x_prev: Option<NodeId>,
    x_i: NodeId,
    x_next: Option<NodeId>,
    variant: AsfVariant,
) -> Result<NodeId> {
    if variant == AsfVariant::F0 {
        return Ok(x_i);
    }
    let (Some(x_prev), Some(x_next)) = (x_prev, x_next) else {
        return Err(Error::usage(format!(
            "{variant:?} fusion needs both neighbour features"
        )));
    };
    let (w_prev, w_next) = fusion_weights(b, name, x_prev, x_i, x_next, variant)?;
    apply_weight_maps(b.graph, w_prev, x_i, w_next)
}
