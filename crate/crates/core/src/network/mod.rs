//! Encoder / adjacent-slice fusion / decoder network with multi-scale and
//! edge heads, built from the autodiff primitives.

pub mod attention;
pub mod builder;
pub mod encoder;
pub mod msf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attention::{asf_fuse, attention_gate, AsfVariant};
pub use builder::{Builder, Init, ParamSpec, BN_EPS, BN_MOMENTUM};
pub use encoder::{encode, FeaturePyramid};
pub use msf::{msf_fuse, MsfGates};

use crate::autodiff::{Bindings, BnMode, Graph, NodeId, ParamMap};
use crate::error::{Error, Result};
use crate::losses::{build_loss_graph, LossWeights, OutputNodes, TargetNodes, TargetTensors};
use crate::tensor::{Shape, Tensor};

pub const INPUT_PREV: &str = "input.prev";
pub const INPUT_TARGET: &str = "input.target";
pub const INPUT_NEXT: &str = "input.next";
pub const TARGET_MASK: &str = "target.mask";
pub const TARGET_EDGE: &str = "target.edge";
pub const TARGET_HALF: &str = "target.half";
pub const TARGET_QUARTER: &str = "target.quarter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Width of the first encoder stage; stage `s` has `base_channels << s`.
    pub base_channels: usize,
    pub encoder_depth: usize,
    /// Residual blocks per encoder stage.
    pub stage_blocks: Vec<usize>,
    pub asf_variant: AsfVariant,
    /// Fuse neighbour features at every encoder stage instead of the deepest only.
    pub fuse_all_stages: bool,
    pub msf_enabled: bool,
    pub edge_branch_enabled: bool,
    pub ms_outputs_enabled: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            encoder_depth: 4,
            stage_blocks: vec![3, 4, 6, 3],
            asf_variant: AsfVariant::F3,
            fuse_all_stages: false,
            msf_enabled: true,
            edge_branch_enabled: true,
            ms_outputs_enabled: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("network.base_channels", "must be positive"));
        }
        if self.encoder_depth < 2 {
            return Err(Error::config("network.encoder_depth", "must be at least 2"));
        }
        if self.stage_blocks.len() < self.encoder_depth {
            return Err(Error::config(
                "network.stage_blocks",
                format!("needs {} entries for the encoder depth", self.encoder_depth),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::config(
                "network.stage_blocks",
                "every stage needs at least one block",
            ));
        }
        Ok(())
    }

    /// Smallest tile edge the encoder accepts.
    pub fn tile_multiple(&self) -> usize {
        1 << self.encoder_depth
    }
}

/// The three aligned slice tiles of a batch, each `(N, 1, T, T)`.
#[derive(Clone, Debug)]
pub struct SliceInputs {
    pub prev: Tensor,
    pub target: Tensor,
    pub next: Tensor,
}

/// Probability maps produced by the network; disabled branches are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub mask: Tensor,
    /// Full, half and quarter resolution maps.
    pub scales: Option<[Tensor; 3]>,
    pub edge: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct InputNodes {
    pub prev: Option<NodeId>,
    pub target: NodeId,
    pub next: Option<NodeId>,
}

/// A built network graph for a fixed batch size, tile size and BN mode.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub graph: Graph,
    pub batch: usize,
    pub tile: usize,
    pub mode: BnMode,
    pub inputs: InputNodes,
    pub outputs: OutputNodes,
    /// Target-slice feature after fusion at the deepest stage.
    pub fused: NodeId,
    pub target_pyramid: FeaturePyramid,
    /// Scalar depending on every output, for evaluating them in one pass.
    pub outputs_root: NodeId,
    pub bn_nodes: Vec<(String, NodeId)>,
    pub targets: Option<TargetNodes>,
    pub loss: Option<NodeId>,
}

fn build_body(
    b: &mut Builder<'_>,
    cfg: &NetworkConfig,
    inputs: &InputNodes,
) -> Result<(OutputNodes, NodeId, FeaturePyramid)> {
    let depth = cfg.encoder_depth;
    let target = encode(b, inputs.target, cfg)?;
    let (prev, next) = if cfg.asf_variant.uses_neighbors() {
        let p = inputs
            .prev
            .ok_or_else(|| Error::usage("missing previous-slice input"))?;
        let n = inputs
            .next
            .ok_or_else(|| Error::usage("missing next-slice input"))?;
        (Some(encode(b, p, cfg)?), Some(encode(b, n, cfg)?))
    } else {
        (None, None)
    };

    let mut skips = target.stages.clone();
    for (s, skip) in skips.iter_mut().enumerate() {
        if cfg.fuse_all_stages || s == depth - 1 {
            *skip = asf_fuse(
                b,
                &format!("asf.s{s}"),
                prev.as_ref().map(|p| p.stages[s]),
                target.stages[s],
                next.as_ref().map(|p| p.stages[s]),
                cfg.asf_variant,
            )?;
        }
    }
    let fused = skips[depth - 1];

    // U-Net decoder over the target slice's pyramid.
    let mut cur = fused;
    let mut decoded = Vec::with_capacity(depth);
    for s in (0..depth - 1).rev() {
        let up = b.graph.upsample2(cur);
        let cat = b.graph.concat(&[up, skips[s]])?;
        let c = cfg.stage_channels(s);
        cur = b.conv_bn_relu(&format!("dec.s{s}.a"), cat, c, 3, 1, 1)?;
        cur = b.conv_bn_relu(&format!("dec.s{s}.b"), cur, c, 3, 1, 1)?;
        decoded.push(cur);
    }
    let up = b.graph.upsample2(cur);
    let full = b.conv_bn_relu("dec.full.a", up, cfg.base_channels, 3, 1, 1)?;
    let full = b.conv_bn_relu("dec.full.b", full, cfg.base_channels, 3, 1, 1)?;
    decoded.reverse();
    // Finest first: full, 1/2, 1/4 of the tile.
    let mut scale_feats = vec![full];
    scale_feats.extend(decoded);
    scale_feats.push(fused);
    let scale_feats = &scale_feats[..3];

    let scales = if cfg.ms_outputs_enabled {
        let mut heads = [fused; 3];
        for (k, &f) in scale_feats.iter().enumerate() {
            heads[k] = b.head(&format!("head.s{k}"), f, 1)?;
        }
        Some(heads)
    } else {
        None
    };

    let final_feat = if cfg.msf_enabled {
        msf_fuse(b, "msf", scale_feats)?
    } else {
        scale_feats[0]
    };
    let mask = b.head("head.final", final_feat, 1)?;

    let edge = if cfg.edge_branch_enabled {
        let mut cur = fused;
        let top = cfg.stage_channels(depth - 1);
        let floor = (cfg.base_channels / 2).max(1);
        for lvl in 0..depth {
            let up = b.graph.upsample2(cur);
            let c = (top >> (lvl + 1)).max(floor);
            cur = b.conv_bn_relu(&format!("edge.l{lvl}"), up, c, 3, 1, 1)?;
        }
        Some(b.head("edge.out", cur, 1)?)
    } else {
        None
    };

    Ok((OutputNodes { mask, edge, scales }, fused, target))
}

/// Per-parameter RNG seed, so a layer's initial weights do not depend on
/// which other layers a config enables.
fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape),
        Init::Ones => Tensor::ones(spec.shape),
        Init::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            let data = (0..spec.shape.numel())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::new(spec.shape, data).expect("spec shape")
        }
    }
}

/// Trainable parameters, batchnorm running statistics, and the config they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamMap,
    pub buffers: ParamMap,
}

impl Model {
    /// Seeded initialization: Kaiming-uniform weights, zero biases, unit BN scale.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut graph = Graph::new();
        let tile = config.tile_multiple() * 2;
        let specs = {
            let mut b = Builder::new(&mut graph, BnMode::Train);
            let inputs = declare_inputs(&mut b, &config, 1, tile)?;
            build_body(&mut b, &config, &inputs)?;
            b.specs
        };
        let mut params = ParamMap::new();
        let mut buffers = ParamMap::new();
        for spec in &specs {
            let t = init_tensor(spec, config.seed);
            if spec.buffer {
                buffers.insert(spec.name.clone(), t);
            } else {
                params.insert(spec.name.clone(), t);
            }
        }
        Ok(Model {
            config,
            params,
            buffers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Builds the forward graph; with `loss` the graph also carries target
    /// leaves and the total-loss node.
    pub fn build(
        &self,
        batch: usize,
        tile: usize,
        mode: BnMode,
        loss: Option<&LossWeights>,
    ) -> Result<ForwardGraph> {
        if batch == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        let mut graph = Graph::new();
        let (inputs, outputs, fused, target_pyramid, bn_nodes) = {
            let mut b = Builder::new(&mut graph, mode);
            let inputs = declare_inputs(&mut b, &self.config, batch, tile)?;
            let (outputs, fused, pyr) = build_body(&mut b, &self.config, &inputs)?;
            for spec in &b.specs {
                let known = if spec.buffer {
                    self.buffers.get(&spec.name)
                } else {
                    self.params.get(&spec.name)
                };
                match known {
                    Some(t) if t.shape() == spec.shape => {}
                    _ => {
                        return Err(Error::usage(format!(
                            "model has no parameter `{}` of shape {}",
                            spec.name, spec.shape
                        )))
                    }
                }
            }
            (inputs, outputs, fused, pyr, b.bn_nodes)
        };
        let mut roots = vec![outputs.mask];
        roots.extend(outputs.edge);
        if let Some(s) = outputs.scales {
            roots.extend(s);
        }
        let mut outputs_root = graph.mean(roots[0]);
        for &r in &roots[1..] {
            let m = graph.mean(r);
            outputs_root = graph.add(outputs_root, m)?;
        }
        let (targets, loss_node) = match loss {
            Some(w) => {
                let full = Shape::new(batch, 1, tile, tile);
                let t = TargetNodes {
                    mask: graph.input(TARGET_MASK, full)?,
                    edge: graph.input(TARGET_EDGE, full)?,
                    scales: [
                        graph.input(TARGET_MASK, full)?,
                        graph.input(TARGET_HALF, Shape::new(batch, 1, tile / 2, tile / 2))?,
                        graph.input(TARGET_QUARTER, Shape::new(batch, 1, tile / 4, tile / 4))?,
                    ],
                };
                let l = build_loss_graph(&mut graph, &outputs, &t, w, &self.config)?;
                (Some(t), Some(l))
            }
            None => (None, None),
        };
        Ok(ForwardGraph {
            graph,
            batch,
            tile,
            mode,
            inputs,
            outputs,
            fused,
            target_pyramid,
            outputs_root,
            bn_nodes,
            targets,
            loss: loss_node,
        })
    }

    /// Leaf bindings for `fg`: parameters, running statistics in eval mode,
    /// inputs, and targets when the graph has a loss.
    pub fn bindings(
        &self,
        fg: &ForwardGraph,
        inputs: &SliceInputs,
        targets: Option<&TargetTensors>,
    ) -> Result<Bindings> {
        let mut b = Bindings::with_capacity(self.params.len() + 8);
        for (k, v) in &self.params {
            if fg.graph.leaf_id(k).is_some() {
                b.insert(k.clone(), v.clone());
            }
        }
        if fg.mode == BnMode::Eval {
            for (k, v) in &self.buffers {
                if fg.graph.leaf_id(k).is_some() {
                    b.insert(k.clone(), v.clone());
                }
            }
        }
        b.insert(INPUT_TARGET.into(), inputs.target.clone());
        if fg.inputs.prev.is_some() {
            b.insert(INPUT_PREV.into(), inputs.prev.clone());
            b.insert(INPUT_NEXT.into(), inputs.next.clone());
        }
        if fg.targets.is_some() {
            let t = targets.ok_or_else(|| Error::usage("loss graph needs target tensors"))?;
            b.insert(TARGET_MASK.into(), t.mask.clone());
            b.insert(TARGET_EDGE.into(), t.edge.clone());
            b.insert(TARGET_HALF.into(), t.scales[1].clone());
            b.insert(TARGET_QUARTER.into(), t.scales[2].clone());
        }
        Ok(b)
    }

    /// Output tensors of the last evaluation of `fg`.
    pub fn read_outputs(fg: &ForwardGraph) -> Result<NetworkOutputs> {
        let get = |id: NodeId| {
            fg.graph
                .value(id)
                .cloned()
                .ok_or_else(|| Error::usage("forward graph has not been evaluated"))
        };
        Ok(NetworkOutputs {
            mask: get(fg.outputs.mask)?,
            scales: match fg.outputs.scales {
                Some([a, b, c]) => Some([get(a)?, get(b)?, get(c)?]),
                None => None,
            },
            edge: fg.outputs.edge.map(get).transpose()?,
        })
    }

    /// One-shot forward pass.
    pub fn forward(&self, inputs: &SliceInputs, mode: BnMode) -> Result<NetworkOutputs> {
        let s = inputs.target.shape();
        for t in [&inputs.prev, &inputs.next] {
            if t.shape() != s {
                return Err(Error::usage(format!(
                    "slice inputs differ: {} vs {}",
                    t.shape(),
                    s
                )));
            }
        }
        if s.c() != 1 || s.h() != s.w() {
            return Err(Error::usage(format!(
                "expected square 1-channel tiles, got {s}"
            )));
        }
        let mut fg = self.build(s.n(), s.h(), mode, None)?;
        let b = self.bindings(&fg, inputs, None)?;
        fg.graph.evaluate(fg.outputs_root, &b)?;
        Self::read_outputs(&fg)
    }

    /// Folds the batch statistics of the last train-mode evaluation into the
    /// running statistics, in graph order.
    pub fn update_running_stats(&mut self, fg: &ForwardGraph) {
        for (name, id) in &fg.bn_nodes {
            let Some((mean, var)) = fg.graph.batch_stats(*id) else {
                continue;
            };
            for (suffix, stat) in [("running_mean", &mean), ("running_var", &var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, &s) in buf.data_mut().iter_mut().zip(stat.iter()) {
                        *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * s) as f32;
                    }
                }
            }
        }
    }
}

fn declare_inputs(
    b: &mut Builder<'_>,
    cfg: &NetworkConfig,
    batch: usize,
    tile: usize,
) -> Result<InputNodes> {
    let m = cfg.tile_multiple();
    if tile == 0 || tile % m != 0 || tile / m < 1 {
        return Err(Error::usage(format!(
            "tile size {tile} must be a positive multiple of {m} for encoder depth {}",
            cfg.encoder_depth
        )));
    }
    let s = Shape::new(batch, 1, tile, tile);
    let target = b.graph.input(INPUT_TARGET, s)?;
    let (prev, next) = if cfg.asf_variant.uses_neighbors() {
        (
            Some(b.graph.input(INPUT_PREV, s)?),
            Some(b.graph.input(INPUT_NEXT, s)?),
        )
    } else {
        (None, None)
    };
    Ok(InputNodes { prev, target, next })
}
