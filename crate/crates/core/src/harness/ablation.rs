use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Split};
use super::predict::predict_volume;
use super::train::cmd_train;
use super::{Outputs, RunConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volume, report_from_rows, DEFAULT_THRESHOLD};
use crate::network::{AsfVariant, NetworkConfig};

/// Component variants M0..M4 and fusion variants F0..F3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    M4,
    F0,
    F1,
    F2,
    F3,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Network fields an ablation variant may change.
pub const TOGGLED_FIELDS: [&str; 4] = [
    "network.asf_variant",
    "network.msf_enabled",
    "network.edge_branch_enabled",
    "network.ms_outputs_enabled",
];

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::F0,
        Variant::F1,
        Variant::F2,
        Variant::F3,
    ];

    /// 2 for the component table, 3 for the fusion table.
    pub fn table(self) -> u8 {
        match self {
            Variant::M0 | Variant::M1 | Variant::M2 | Variant::M3 | Variant::M4 => 2,
            _ => 3,
        }
    }

    /// The base network with this variant's toggles applied. The M series
    /// adds ASF (as F3), MSF, the edge loss and the multi-scale loss in turn;
    /// the F series is the full model with each fusion variant.
    pub fn network(self, base: &NetworkConfig) -> NetworkConfig {
        let mut n = base.clone();
        let (asf, msf, edge, ms) = match self {
            Variant::M0 => (AsfVariant::F0, false, false, false),
            Variant::M1 => (AsfVariant::F3, false, false, false),
            Variant::M2 => (AsfVariant::F3, true, false, false),
            Variant::M3 => (AsfVariant::F3, true, true, false),
            Variant::M4 => (AsfVariant::F3, true, true, true),
            Variant::F0 => (AsfVariant::F0, true, true, true),
            Variant::F1 => (AsfVariant::F1, true, true, true),
            Variant::F2 => (AsfVariant::F2, true, true, true),
            Variant::F3 => (AsfVariant::F3, true, true, true),
        };
        n.asf_variant = asf;
        n.msf_enabled = msf;
        n.edge_branch_enabled = edge;
        n.ms_outputs_enabled = ms;
        n
    }
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    /// Run config every variant starts from; its dataset must be prepared.
    pub base_config: PathBuf,
    /// Each variant is trained once per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    pub out_dir: PathBuf,
}

impl AblationSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: AblationSpec =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "need at least one seed"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("ablation.variants", "need at least one variant"));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(Error::config("ablation.variants", "variants repeat"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("ablation.seeds", "seeds repeat"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub asf: bool,
    pub msf: bool,
    pub edge_loss: bool,
    pub ms_loss: bool,
}

impl Components {
    fn of(n: &NetworkConfig) -> Self {
        Components {
            asf: n.asf_variant != AsfVariant::F0,
            msf: n.msf_enabled,
            edge_loss: n.edge_branch_enabled,
            ms_loss: n.ms_outputs_enabled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub table: u8,
    pub fusion: AsfVariant,
    pub components: Components,
    /// Aggregate DSC per seed, in spec order; `None` when the evaluation
    /// volumes have no nodule slice.
    pub dsc_per_seed: Vec<Option<f64>>,
    /// Mean over the seeds with a defined DSC.
    pub dsc: Option<f64>,
    /// Dotted config keys that differ from the base config.
    pub config_diff: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub eval_split: Split,
    pub rows: Vec<AblationRow>,
}

fn fmt_dsc(d: Option<f64>) -> String {
    d.map_or_else(|| "n/a".into(), |d| format!("{d:.3}"))
}

fn tick(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

impl AblationReport {
    /// Component table, then fusion table. DSC ordering is reported only.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let comp: Vec<_> = self.rows.iter().filter(|r| r.table == 2).collect();
        if !comp.is_empty() {
            let _ = writeln!(s, "Components ({} split, {} seed(s))", self.eval_split, self.seeds.len());
            let _ = writeln!(s, "{:<7}  {:>3}  {:>3}  {:>9}  {:>7}  {:>6}", "variant", "ASF", "MSF", "edge loss", "MS loss", "DSC");
            for r in comp {
                let c = r.components;
                let _ = writeln!(
                    s,
                    "{:<7}  {:>3}  {:>3}  {:>9}  {:>7}  {:>6}",
                    r.variant.to_string(),
                    tick(c.asf),
                    tick(c.msf),
                    tick(c.edge_loss),
                    tick(c.ms_loss),
                    fmt_dsc(r.dsc)
                );
            }
        }
        let fusion: Vec<_> = self.rows.iter().filter(|r| r.table == 3).collect();
        if !fusion.is_empty() {
            if !s.is_empty() {
                s.push('\n');
            }
            let _ = writeln!(s, "Fusion variants ({} split, {} seed(s))", self.eval_split, self.seeds.len());
            let _ = writeln!(s, "{:<7}  {:>6}  {:>6}", "variant", "fusion", "DSC");
            for r in fusion {
                let _ = writeln!(
                    s,
                    "{:<7}  {:>6}  {:>6}",
                    r.variant.to_string(),
                    format!("{:?}", r.fusion),
                    fmt_dsc(r.dsc)
                );
            }
        }
        s
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted keys whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    flatten("", &toml::Value::try_from(a).expect("config"), &mut fa);
    flatten("", &toml::Value::try_from(b).expect("config"), &mut fb);
    let mut keys: Vec<String> = fa.keys().chain(fb.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| fa.get(k) != fb.get(k)).collect()
}

/// Trains and evaluates every variant for every seed on the dataset named by
/// the base config, and writes `ablation.json`, `ablation.txt` and the
/// per-variant configs under `spec.out_dir`.
pub fn cmd_ablation(spec: &AblationSpec, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    spec.validate()?;
    let base = RunConfig::load(&spec.base_config)?;
    let ds = Dataset::load(&base.paths.data_dir)?;
    let eval = ds.eval_volumes();
    let eval_split = eval[0].entry.split;

    let mut out = Outputs::new();
    out.create_dir(&spec.out_dir)?;
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    let result = (|| {
        // Variants with identical configs (M4 and F3) share their runs.
        let mut done: Vec<(NetworkConfig, Vec<Option<f64>>)> = Vec::new();
        let mut rows = Vec::new();
        for &variant in &spec.variants {
            let mut cfg = base.clone();
            cfg.network = variant.network(&base.network);
            let diff = config_diff(&base, &cfg);
            if let Some(bad) = diff.iter().find(|k| !TOGGLED_FIELDS.contains(&k.as_str())) {
                return Err(Error::usage(format!(
                    "variant {variant} changes `{bad}`, which is not an ablation toggle"
                )));
            }
            out.write(
                &spec.out_dir.join("configs").join(format!("{variant}.toml")),
                cfg.to_toml().as_bytes(),
            )?;

            let dsc_per_seed = match done.iter().find(|(n, _)| *n == cfg.network) {
                Some((_, d)) => d.clone(),
                None => {
                    let mut per_seed = Vec::with_capacity(spec.seeds.len());
                    for &seed in &spec.seeds {
                        progress(&format!("{variant} seed {seed}"));
                        let mut run = cfg.clone();
                        run.set_seed(seed);
                        run.paths.out_dir = spec.out_dir.join(variant.to_string()).join(format!("seed_{seed}"));
                        run_dirs.push(run.paths.out_dir.clone());
                        let summary = cmd_train(&run, None, &mut |_| {})?;
                        let model = Checkpoint::load(&summary.checkpoint)?.to_model()?;
                        let mut rows = Vec::new();
                        for v in &eval {
                            let pred = predict_volume(&model, &v.image, DEFAULT_THRESHOLD)?;
                            let r = evaluate_volume(&pred.prob, &v.mask, DEFAULT_THRESHOLD)?;
                            let offset = rows.len();
                            rows.extend(r.rows.into_iter().map(|mut row| {
                                row.slice += offset;
                                row
                            }));
                        }
                        let report = report_from_rows(DEFAULT_THRESHOLD, rows);
                        per_seed.push(report.aggregate.map(|m| m.dsc));
                    }
                    done.push((cfg.network.clone(), per_seed.clone()));
                    per_seed
                }
            };
            let defined: Vec<f64> = dsc_per_seed.iter().flatten().copied().collect();
            let dsc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            rows.push(AblationRow {
                variant,
                table: variant.table(),
                fusion: cfg.network.asf_variant,
                components: Components::of(&cfg.network),
                dsc_per_seed,
                dsc,
                config_diff: diff,
            });
        }
        Ok(AblationReport {
            seeds: spec.seeds.clone(),
            eval_split,
            rows,
        })
    })();
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            for d in run_dirs {
                let _ = std::fs::remove_dir_all(d);
            }
            for v in &spec.variants {
                let _ = std::fs::remove_dir(spec.out_dir.join(v.to_string()));
            }
            return Err(e);
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    out.write(&spec.out_dir.join("ablation.json"), json.as_bytes())?;
    out.write(&spec.out_dir.join("ablation.txt"), report.to_table().as_bytes())?;
    out.commit();
    Ok(report)
}
