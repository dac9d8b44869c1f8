//! Segmentation losses: BCE, Dice, and the edge / multi-scale / final-output
//! groups summed into the total training objective.
//!
//! Every loss averages over pixels, so the weights mean the same thing at any
//! tile resolution. Value functions accumulate in 64-bit; the graph builders at
//! the bottom emit the same quantities as differentiable nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkOutputs};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Edge-branch BCE weight.
    pub edge_bce: f64,
    /// Edge-branch Dice weight.
    pub edge_dice: f64,
    /// Per-scale BCE weights, finest first.
    pub scales: [f64; 3],
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            edge_bce: 1.0,
            edge_dice: 1.0,
            scales: [1.0; 3],
            dice_smooth: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("edge_bce", self.edge_bce),
            ("edge_dice", self.edge_dice),
            ("scales[0]", self.scales[0]),
            ("scales[1]", self.scales[1]),
            ("scales[2]", self.scales[2]),
            ("dice_smooth", self.dice_smooth),
        ];
        for (field, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("loss.{field}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-term breakdown; `total` is exactly `bin + edge + ms`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bin: f64,
    pub edge: f64,
    pub ms: f64,
    pub total: f64,
}

/// Ground truth as float tensors shaped like the matching network outputs.
#[derive(Clone, Debug)]
pub struct TargetTensors {
    pub mask: Tensor,
    pub edge: Tensor,
    /// Full, half and quarter resolution masks.
    pub scales: [Tensor; 3],
}

fn check_pair(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::usage(format!(
            "{what}: prediction {} does not match target {}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub(crate) fn bce_slice(pred: &[f32], target: &[f32]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

pub(crate) fn bce_grad(pred: &[f32], target: &[f32]) -> Vec<f32> {
    let m = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p as f64;
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                let t = t as f64;
                ((-t / p + (1.0 - t) / (1.0 - p)) / m) as f32
            }
        })
        .collect()
}

fn dice_sums(pred: &[f32], target: &[f32]) -> (f64, f64, f64) {
    let mut inter = 0.0f64;
    let mut ps = 0.0f64;
    let mut ts = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p as f64 * t as f64;
        ps += p as f64;
        ts += t as f64;
    }
    (inter, ps, ts)
}

pub(crate) fn dice_slice(pred: &[f32], target: &[f32], smooth: f64) -> f64 {
    let (inter, ps, ts) = dice_sums(pred, target);
    1.0 - (2.0 * inter + smooth) / (ps + ts + smooth)
}

pub(crate) fn dice_grad(pred: &[f32], target: &[f32], smooth: f64) -> Vec<f32> {
    let (inter, ps, ts) = dice_sums(pred, target);
    let den = ps + ts + smooth;
    let num = 2.0 * inter + smooth;
    target
        .iter()
        .map(|&t| (-(2.0 * t as f64 * den - num) / (den * den)) as f32)
        .collect()
}

/// Mean binary cross-entropy over pixels.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target, "bce")?;
    Ok(bce_slice(pred.data(), target.data()))
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<f64> {
    check_pair(pred, target, "dice_loss")?;
    Ok(dice_slice(pred.data(), target.data(), smooth))
}

pub fn loss_edge(edge_pred: Option<&Tensor>, edge_gt: &Tensor, w: &LossWeights) -> Result<f64> {
    let edge_pred = edge_pred
        .ok_or_else(|| Error::usage("edge loss requested but the edge branch is disabled"))?;
    Ok(w.edge_bce * bce(edge_pred, edge_gt)?
        + w.edge_dice * dice_loss(edge_pred, edge_gt, w.dice_smooth)?)
}

pub fn loss_ms(preds: &[Tensor], gts: &[Tensor], w: &LossWeights) -> Result<f64> {
    if preds.len() != 3 || gts.len() != 3 {
        return Err(Error::usage(format!(
            "multi-scale loss needs 3 predictions and 3 targets, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for ((p, g), lambda) in preds.iter().zip(gts).zip(w.scales) {
        total += lambda * bce(p, g)?;
    }
    Ok(total)
}

pub fn loss_bin(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(bce(pred, gt)? + dice_loss(pred, gt, w.dice_smooth)?)
}

pub fn loss_total(
    outputs: &NetworkOutputs,
    gts: &TargetTensors,
    w: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<LossReport> {
    let bin = loss_bin(&outputs.mask, &gts.mask, w)?;
    let edge = if cfg.edge_branch_enabled {
        loss_edge(outputs.edge.as_ref(), &gts.edge, w)?
    } else {
        0.0
    };
    let ms = if cfg.ms_outputs_enabled {
        let scales = outputs
            .scales
            .as_ref()
            .ok_or_else(|| Error::usage("multi-scale outputs missing from network outputs"))?;
        loss_ms(scales, &gts.scales, w)?
    } else {
        0.0
    };
    Ok(LossReport {
        bin,
        edge,
        ms,
        total: bin + edge + ms,
    })
}

/// Output nodes of a forward graph that the loss reads.
#[derive(Clone, Debug)]
pub struct OutputNodes {
    pub mask: NodeId,
    pub edge: Option<NodeId>,
    pub scales: Option<[NodeId; 3]>,
}

/// Target leaves matching [`OutputNodes`].
#[derive(Clone, Debug)]
pub struct TargetNodes {
    pub mask: NodeId,
    pub edge: NodeId,
    pub scales: [NodeId; 3],
}

/// Scalar node computing the total loss of the enabled terms.
pub fn build_loss_graph(
    g: &mut Graph,
    out: &OutputNodes,
    tgt: &TargetNodes,
    w: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<NodeId> {
    let bce = g.bce(out.mask, tgt.mask)?;
    let dice = g.dice(out.mask, tgt.mask, w.dice_smooth)?;
    let mut total = g.add(bce, dice)?;
    if cfg.edge_branch_enabled {
        let edge = out
            .edge
            .ok_or_else(|| Error::usage("edge loss requested but the edge branch is disabled"))?;
        let eb = g.bce(edge, tgt.edge)?;
        let eb = g.scale(eb, w.edge_bce as f32)?;
        let ed = g.dice(edge, tgt.edge, w.dice_smooth)?;
        let ed = g.scale(ed, w.edge_dice as f32)?;
        let le = g.add(eb, ed)?;
        total = g.add(total, le)?;
    }
    if cfg.ms_outputs_enabled {
        let scales = out
            .scales
            .ok_or_else(|| Error::usage("multi-scale outputs missing from the forward graph"))?;
        for i in 0..3 {
            let term = g.bce(scales[i], tgt.scales[i])?;
            let term = g.scale(term, w.scales[i] as f32)?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}
