//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bindings, Graph, NodeId, PrimitiveKind};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per leaf.
    pub max_elements_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            tolerance: 1e-3,
            max_elements_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose one-sided differences disagree, i.e. the probe straddles
    /// a kink (relu, max) and the central difference is meaningless there.
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Leaves whose error exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|l| l.max_rel_error > self.tolerance)
            .map(|l| l.name.as_str())
            .collect()
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Root value in 64-bit; reductions are re-summed from their input so the
/// finite differences are not limited by the f32 rounding of the scalar.
fn scalar_value(graph: &Graph, root: NodeId) -> f64 {
    let node = graph.node(root);
    match node.kind {
        PrimitiveKind::Mean => {
            let x = graph.value(node.inputs[0]).expect("evaluated");
            x.sum_f64() / x.numel() as f64
        }
        PrimitiveKind::Sum => graph.value(node.inputs[0]).expect("evaluated").sum_f64(),
        _ => graph.value(root).expect("evaluated").item() as f64,
    }
}

/// Compares backward-pass gradients of `root` against central differences
/// for every gradient-requiring leaf. A non-scalar root is reduced with a mean.
pub fn grad_check(
    graph: &mut Graph,
    root: NodeId,
    bindings: &Bindings,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let root = if graph.shape(root) == Shape::scalar() {
        root
    } else {
        graph.mean(root)
    };
    let leaves: Vec<(String, Shape)> = graph
        .leaves()
        .into_iter()
        .filter(|(_, _, rg)| *rg)
        .map(|(n, s, _)| (n, s))
        .collect();
    if leaves.is_empty() {
        return Err(Error::usage(
            "gradient check needs at least one differentiable leaf",
        ));
    }
    graph.evaluate(root, bindings)?;
    let base = scalar_value(graph, root);
    let analytic = graph.backward(root, &Tensor::scalar(1.0))?;
    let mut work = bindings.clone();
    let mut reports = Vec::with_capacity(leaves.len());
    let h = opts.step;
    let kink = opts.tolerance;

    for (li, (name, shape)) in leaves.iter().enumerate() {
        let original = work
            .get(name)
            .cloned()
            .ok_or_else(|| Error::usage(format!("leaf `{name}` is unbound")))?;
        let grad = &analytic[name];
        let indices: Vec<usize> = match opts.max_elements_per_leaf {
            Some(k) if k < shape.numel() => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(li as u64));
                let mut idx = sample(&mut rng, shape.numel(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..shape.numel()).collect(),
        };
        let mut report = LeafReport {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in indices {
            let x0 = original.data()[idx];
            let probe = |work: &mut Bindings, graph: &mut Graph, v: f32| -> Result<f64> {
                work.get_mut(name).expect("bound").data_mut()[idx] = v;
                graph.evaluate(root, work)?;
                Ok(scalar_value(graph, root))
            };
            let up = (x0 as f64 + h) as f32;
            let down = (x0 as f64 - h) as f32;
            let f_up = probe(&mut work, graph, up)?;
            let f_down = probe(&mut work, graph, down)?;
            work.get_mut(name).expect("bound").data_mut()[idx] = x0;
            // Use the actually representable step.
            let (h_up, h_down) = (up as f64 - x0 as f64, x0 as f64 - down as f64);
            let forward = (f_up - base) / h_up;
            let backward = (base - f_down) / h_down;
            if (forward - backward).abs() > kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_up - f_down) / (h_up + h_down);
            let err = relative_error(grad.data()[idx] as f64, numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    // Leave the graph holding the unperturbed forward pass.
    graph.evaluate(root, bindings)?;
    let passed = reports.iter().all(|r| r.max_rel_error <= opts.tolerance);
    Ok(GradCheckReport {
        leaves: reports,
        tolerance: opts.tolerance,
        passed,
    })
}

/// One primitive wired into a scalar-valued probe graph.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub graph: Graph,
    pub root: NodeId,
    pub bindings: Bindings,
}

/// Every primitive on random `1x2x6x6` inputs. Each output is weighted by a
/// fixed random tensor before the final mean so that gradients are not
/// trivially uniform.
pub fn primitive_cases(seed: u64) -> Result<Vec<PrimitiveCase>> {
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Shape::new(1, 2, 6, 6);
    let mut cases = Vec::new();

    type Build<'a> = dyn Fn(&mut Graph, &mut Bindings, &mut ChaCha8Rng) -> Result<NodeId> + 'a;
    let mut add_case =
        |name: &'static str, build: &Build<'_>, rng: &mut ChaCha8Rng| -> Result<()> {
            let mut graph = Graph::new();
            let mut bindings = Bindings::new();
            let out = build(&mut graph, &mut bindings, rng)?;
            let os = graph.shape(out);
            let root = if os == Shape::scalar() {
                out
            } else {
                let wgt = graph.input("probe.weight", os)?;
                bindings.insert("probe.weight".into(), Tensor::uniform(os, -1.0, 1.0, rng));
                let m = graph.mul(out, wgt)?;
                graph.sum(m)
            };
            cases.push(PrimitiveCase {
                name,
                graph,
                root,
                bindings,
            });
            Ok(())
        };
    let param = |g: &mut Graph,
                 b: &mut Bindings,
                 rng: &mut ChaCha8Rng,
                 name: &str,
                 s: Shape,
                 lo: f32,
                 hi: f32|
     -> Result<NodeId> {
        let id = g.param(name, s)?;
        b.insert(name.into(), Tensor::uniform(s, lo, hi, rng));
        Ok(id)
    };

    add_case(
        "conv2d",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let w = param(g, b, r, "conv.weight", Shape::new(3, 2, 3, 3), -0.5, 0.5)?;
            let bias = param(g, b, r, "conv.bias", Shape::new(1, 3, 1, 1), -0.5, 0.5)?;
            g.conv2d(x, w, Some(bias), 1, 1)
        },
        &mut rng,
    )?;
    add_case(
        "conv2d_stride2",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let w = param(g, b, r, "conv.weight", Shape::new(3, 2, 3, 3), -0.5, 0.5)?;
            g.conv2d(x, w, None, 2, 1)
        },
        &mut rng,
    )?;
    add_case(
        "batchnorm2d_train",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let gamma = param(g, b, r, "bn.gamma", Shape::new(1, 2, 1, 1), 0.5, 1.5)?;
            let beta = param(g, b, r, "bn.beta", Shape::new(1, 2, 1, 1), -0.5, 0.5)?;
            g.batchnorm2d(x, gamma, beta, None, 1e-5)
        },
        &mut rng,
    )?;
    add_case(
        "batchnorm2d_eval",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let gamma = param(g, b, r, "bn.gamma", Shape::new(1, 2, 1, 1), 0.5, 1.5)?;
            let beta = param(g, b, r, "bn.beta", Shape::new(1, 2, 1, 1), -0.5, 0.5)?;
            let ps = Shape::new(1, 2, 1, 1);
            let rm = g.input("bn.running_mean", ps)?;
            let rv = g.input("bn.running_var", ps)?;
            b.insert("bn.running_mean".into(), Tensor::uniform(ps, -0.2, 0.2, r));
            b.insert("bn.running_var".into(), Tensor::uniform(ps, 0.5, 1.5, r));
            g.batchnorm2d(x, gamma, beta, Some((rm, rv)), 1e-5)
        },
        &mut rng,
    )?;
    add_case(
        "relu",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.relu(x))
        },
        &mut rng,
    )?;
    add_case(
        "sigmoid",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -3.0, 3.0)?;
            Ok(g.sigmoid(x))
        },
        &mut rng,
    )?;
    add_case(
        "add",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let y = param(g, b, r, "y", Shape::new(1, 2, 1, 1), -1.0, 1.0)?;
            g.add(x, y)
        },
        &mut rng,
    )?;
    add_case(
        "mul",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let y = param(g, b, r, "y", Shape::new(1, 1, 6, 6), -1.0, 1.0)?;
            g.mul(x, y)
        },
        &mut rng,
    )?;
    add_case(
        "concat",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let y = param(g, b, r, "y", Shape::new(1, 3, 6, 6), -1.0, 1.0)?;
            g.concat(&[x, y])
        },
        &mut rng,
    )?;
    add_case(
        "maxpool2",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            g.maxpool2(x)
        },
        &mut rng,
    )?;
    add_case(
        "upsample_nearest2",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.upsample2(x))
        },
        &mut rng,
    )?;
    add_case(
        "resize_bilinear_up",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            g.resize_bilinear(x, 9, 11)
        },
        &mut rng,
    )?;
    add_case(
        "resize_bilinear_down",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            g.resize_bilinear(x, 4, 3)
        },
        &mut rng,
    )?;
    add_case(
        "global_mean_pool",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.global_mean_pool(x))
        },
        &mut rng,
    )?;
    add_case(
        "global_max_pool",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.global_max_pool(x))
        },
        &mut rng,
    )?;
    add_case(
        "channel_mean_pool",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.channel_mean_pool(x))
        },
        &mut rng,
    )?;
    add_case(
        "channel_max_pool",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.channel_max_pool(x))
        },
        &mut rng,
    )?;
    add_case(
        "fully_connected",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            let w = param(g, b, r, "fc.weight", Shape::new(5, 72, 1, 1), -0.3, 0.3)?;
            let bias = param(g, b, r, "fc.bias", Shape::new(1, 5, 1, 1), -0.3, 0.3)?;
            g.fully_connected(x, w, Some(bias))
        },
        &mut rng,
    )?;
    add_case(
        "mean",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.mean(x))
        },
        &mut rng,
    )?;
    add_case(
        "sum",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            Ok(g.sum(x))
        },
        &mut rng,
    )?;
    add_case(
        "scale",
        &|g, b, r| {
            let x = param(g, b, r, "x", xs, -1.0, 1.0)?;
            g.scale(x, -1.75)
        },
        &mut rng,
    )?;
    let target = |g: &mut Graph, b: &mut Bindings, r: &mut ChaCha8Rng| -> Result<NodeId> {
        let t = g.input("target", xs)?;
        let data = (0..xs.numel())
            .map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        b.insert("target".into(), Tensor::new(xs, data)?);
        Ok(t)
    };
    add_case(
        "bce",
        &|g, b, r| {
            let p = param(g, b, r, "pred", xs, 0.05, 0.95)?;
            let t = target(g, b, r)?;
            g.bce(p, t)
        },
        &mut rng,
    )?;
    add_case(
        "dice",
        &|g, b, r| {
            let p = param(g, b, r, "pred", xs, 0.05, 0.95)?;
            let t = target(g, b, r)?;
            g.dice(p, t, 1e-6)
        },
        &mut rng,
    )?;
    Ok(cases)
}
