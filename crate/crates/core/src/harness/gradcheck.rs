use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check, primitive_cases, GradCheckOptions, GradCheckReport};
use crate::autodiff::{BackwardFault, BnMode};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TargetTensors};
use crate::network::{AsfVariant, Model, NetworkConfig, SliceInputs};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Random seeds per primitive.
    pub seeds: u64,
    pub step: f64,
    pub primitive_tolerance: f64,
    pub full_tolerance: f64,
    /// Finite-difference step for the full graph. Smaller than `step`: the
    /// network has many ReLU and max-pool kinks, and below this the f32
    /// rounding of the loss dominates.
    pub full_step: f64,
    /// Seeds for the toy network's weights and data.
    pub full_seeds: u64,
    /// Sampled elements per parameter in the full-graph check.
    pub full_elements_per_leaf: usize,
    pub full_graph: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 10,
            step: 1e-3,
            primitive_tolerance: 1e-3,
            full_tolerance: 1e-2,
            full_step: 3e-4,
            full_seeds: 3,
            full_elements_per_leaf: 16,
            full_graph: true,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::config("gradcheck.seeds", "must be positive"));
        }
        for (field, v) in [
            ("gradcheck.step", self.step),
            ("gradcheck.primitive_tolerance", self.primitive_tolerance),
            ("gradcheck.full_tolerance", self.full_tolerance),
            ("gradcheck.full_step", self.full_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.full_graph && self.full_seeds == 0 {
            return Err(Error::config("gradcheck.full_seeds", "must be positive"));
        }
        if self.full_elements_per_leaf == 0 {
            return Err(Error::config(
                "gradcheck.full_elements_per_leaf",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub seeds: u64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failing_leaves: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<w$}  {:>5}  {:>7}  {:>7}  {:>12}  {:>9}  result\n",
            "case", "seeds", "checked", "skipped", "max rel err", "tolerance"
        );
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<w$}  {:>5}  {:>7}  {:>7}  {:>12.3e}  {:>9.0e}  {}",
                r.name,
                r.seeds,
                r.checked,
                r.skipped,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
            if !r.failing_leaves.is_empty() {
                let _ = write!(s, " ({})", r.failing_leaves.join(", "));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "overall: {}", if self.passed { "pass" } else { "FAIL" });
        s
    }
}

/// Small network used for the full-graph check: 16x16 tiles, three stages
/// of one block each, every branch enabled.
pub fn toy_network(seed: u64) -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        encoder_depth: 3,
        stage_blocks: vec![1, 1, 1],
        asf_variant: AsfVariant::F3,
        fuse_all_stages: false,
        msf_enabled: true,
        edge_branch_enabled: true,
        ms_outputs_enabled: true,
        seed,
    }
}

fn random_binary(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn full_graph_row(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<GradcheckRow> {
    const BATCH: usize = 2;
    const TILE: usize = 16;
    let mut row = GradcheckRow {
        name: "total loss (toy network)".into(),
        seeds: 0,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: cfg.full_tolerance,
        passed: true,
        failing_leaves: Vec::new(),
    };
    for seed in 0..cfg.full_seeds {
        let model = Model::new(toy_network(seed))?;
        let mut fg = model.build(BATCH, TILE, BnMode::Train, Some(&LossWeights::default()))?;
        fg.graph.set_backward_fault(fault);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(BATCH, 1, TILE, TILE);
        let inputs = SliceInputs {
            prev: Tensor::uniform(s, 0.0, 1.0, &mut rng),
            target: Tensor::uniform(s, 0.0, 1.0, &mut rng),
            next: Tensor::uniform(s, 0.0, 1.0, &mut rng),
        };
        let mask = random_binary(s, &mut rng);
        let targets = TargetTensors {
            edge: random_binary(s, &mut rng),
            scales: [
                mask.clone(),
                random_binary(Shape::new(BATCH, 1, TILE / 2, TILE / 2), &mut rng),
                random_binary(Shape::new(BATCH, 1, TILE / 4, TILE / 4), &mut rng),
            ],
            mask,
        };
        let b = model.bindings(&fg, &inputs, Some(&targets))?;
        let loss = fg.loss.expect("loss graph");
        let opts = GradCheckOptions {
            step: cfg.full_step,
            tolerance: cfg.full_tolerance,
            max_elements_per_leaf: Some(cfg.full_elements_per_leaf),
            seed,
        };
        let report = grad_check(&mut fg.graph, loss, &b, &opts)?;
        merge(&mut row, &report);
    }
    Ok(row)
}

fn merge(row: &mut GradcheckRow, report: &GradCheckReport) {
    row.seeds += 1;
    row.checked += report.leaves.iter().map(|l| l.checked).sum::<usize>();
    row.skipped += report.leaves.iter().map(|l| l.skipped).sum::<usize>();
    row.max_rel_error = row.max_rel_error.max(report.max_rel_error());
    row.passed &= report.passed;
    for leaf in report.failing() {
        if !row.failing_leaves.iter().any(|l| l == leaf) {
            row.failing_leaves.push(leaf.to_string());
        }
    }
}

/// Checks every primitive over `cfg.seeds` seeds and, unless disabled, the
/// full training loss of the toy network. `fault` injects a backward bug.
pub fn cmd_gradcheck(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let opts = GradCheckOptions {
        step: cfg.step,
        tolerance: cfg.primitive_tolerance,
        max_elements_per_leaf: None,
        seed: 0,
    };
    let mut rows: Vec<GradcheckRow> = Vec::new();
    let mut index: BTreeMap<&'static str, usize> = BTreeMap::new();
    for seed in 0..cfg.seeds {
        for mut case in primitive_cases(seed)? {
            case.graph.set_backward_fault(fault);
            let report = grad_check(&mut case.graph, case.root, &case.bindings, &opts)?;
            let i = *index.entry(case.name).or_insert_with(|| {
                rows.push(GradcheckRow {
                    name: case.name.into(),
                    seeds: 0,
                    checked: 0,
                    skipped: 0,
                    max_rel_error: 0.0,
                    tolerance: cfg.primitive_tolerance,
                    passed: true,
                    failing_leaves: Vec::new(),
                });
                rows.len() - 1
            });
            merge(&mut rows[i], &report);
        }
    }
    // A case with nothing checked proves nothing.
    for row in &mut rows {
        if row.checked == 0 {
            row.passed = false;
        }
    }
    if cfg.full_graph {
        rows.push(full_graph_row(cfg, fault)?);
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(GradcheckReport { rows, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_primitive() {
        let cfg = GradcheckConfig {
            seeds: 1,
            full_graph: false,
            ..Default::default()
        };
        let report = cmd_gradcheck(&cfg, None).unwrap();
        let names: Vec<&str> = primitive_cases(0)
            .unwrap()
            .iter()
            .map(|c| c.name)
            .collect();
        let rows: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(rows, names);
        assert!(report.passed, "{}", report.to_table());
    }

    #[test]
    fn injected_fault_names_conv_leaf() {
        let cfg = GradcheckConfig {
            seeds: 1,
            full_graph: false,
            ..Default::default()
        };
        let report = cmd_gradcheck(&cfg, Some(BackwardFault::NegateConvWeightGrad)).unwrap();
        assert!(!report.passed);
        let conv = report.rows.iter().find(|r| r.name == "conv2d").unwrap();
        assert_eq!(conv.failing_leaves, vec!["conv.weight".to_string()]);
        assert!(report.to_table().contains("FAIL"));
    }

    #[test]
    fn bad_config_field_is_named() {
        let cfg = GradcheckConfig {
            full_tolerance: 0.0,
            ..Default::default()
        };
        match cmd_gradcheck(&cfg, None) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "gradcheck.full_tolerance"),
            other => panic!("{other:?}"),
        }
    }
}
