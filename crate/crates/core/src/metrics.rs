//! Overlap metrics and the per-slice evaluation protocol: scores are averaged
//! only over slices whose ground truth contains a nodule.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::volume::{write_atomic, Volume};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::usage(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::usage(format!("non-binary mask values ({p}, {g})"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub dsc: f64,
    pub sen: f64,
    pub acc: f64,
}

/// Ratio with the empty-mask convention: an empty denominator scores 1.0
/// when neither mask has positives and 0.0 otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    Metrics {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        sen: ratio(c.tp, c.tp + c.fn_, both_empty),
        acc: ratio(c.tp + c.tn, c.total(), true),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice: usize,
    pub has_nodule: bool,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f32,
    pub rows: Vec<SliceRow>,
    pub nodule_slices: usize,
    /// Mean over nodule slices; `None` when the ground truth has none.
    pub aggregate: Option<Metrics>,
}

/// Binarizes `pred` at `threshold` (values `>= threshold` are positive) and
/// scores it slice by slice against the binary `gt`.
pub fn evaluate_volume(pred: &Volume, gt: &Volume, threshold: f32) -> Result<EvalReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::usage(format!(
            "prediction dims {:?} and ground-truth dims {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::usage("threshold must be finite"));
    }
    let mut rows = Vec::with_capacity(gt.depth());
    for z in 0..gt.depth() {
        let g = gt.mask_slice(z)?;
        let p = pred.slice(z).threshold_at_least(threshold);
        let counts = confusion(&p, &g)?;
        rows.push(SliceRow {
            slice: z,
            has_nodule: !g.is_empty(),
            counts,
            metrics: metrics(&counts),
        });
    }
    Ok(report_from_rows(threshold, rows))
}

pub fn report_from_rows(threshold: f32, rows: Vec<SliceRow>) -> EvalReport {
    let nodule: Vec<&Metrics> = rows
        .iter()
        .filter(|r| r.has_nodule)
        .map(|r| &r.metrics)
        .collect();
    let n = nodule.len();
    let aggregate = (n > 0).then(|| {
        let mean = |f: fn(&Metrics) -> f64| nodule.iter().map(|m| f(m)).sum::<f64>() / n as f64;
        Metrics {
            iou: mean(|m| m.iou),
            dsc: mean(|m| m.dsc),
            sen: mean(|m| m.sen),
            acc: mean(|m| m.acc),
        }
    });
    EvalReport {
        threshold,
        rows,
        nodule_slices: n,
        aggregate,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with the aggregate as the last line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}",
            "slice", "nodule", "IOU", "DSC", "Sen", "Acc"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:>6}  {:>6}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
                r.slice,
                if r.has_nodule { "yes" } else { "no" },
                m.iou,
                m.dsc,
                m.sen,
                m.acc
            );
        }
        match &self.aggregate {
            Some(m) => {
                let _ = writeln!(
                    s,
                    "{:>6}  {:>6}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
                    "mean", self.nodule_slices, m.iou, m.dsc, m.sen, m.acc
                );
            }
            None => {
                let _ = writeln!(s, "{:>6}  {:>6}  undefined (no nodule slices)", "mean", 0);
            }
        }
        s
    }

    /// Writes `eval.json` and `eval.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("eval.json"), self.to_json().as_bytes())?;
        write_atomic(&dir.join("eval.txt"), self.to_table().as_bytes())
    }
}
